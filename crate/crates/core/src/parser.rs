//! Trainable parser contract plus the built-in template parser and a client
//! for external backends speaking the train/predict wire protocol.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lexicon::Lexicon;
use crate::paraphrase::fold_synonyms;
use crate::protocol::{self, BackendRequest, BackendResponse, Channel, Endpoint, TrainingRow, TransportError};
use crate::sql::{self, SqlError, SqlToken, TokenKind};
use crate::text;

pub const DEFAULT_THETA_FRACTION: f64 = 0.25;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("training row {row}: unparseable SQL: {source}")]
    UnparseableSql {
        row: usize,
        #[source]
        source: SqlError,
    },
    #[error("backend transport: {0}")]
    Transport(#[from] TransportError),
    #[error("backend protocol violation: {0}")]
    Protocol(String),
}

/// Serializable backend choice, reported in manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    Template {
        #[serde(default = "default_theta")]
        theta_fraction: f64,
        #[serde(default)]
        fold_synonyms: bool,
    },
    Subprocess {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_ms: u64,
    },
    Http {
        url: String,
        #[serde(default = "default_timeout")]
        timeout_ms: u64,
    },
}

fn default_theta() -> f64 {
    DEFAULT_THETA_FRACTION
}

fn default_timeout() -> u64 {
    30_000
}

impl Default for BackendSpec {
    fn default() -> BackendSpec {
        BackendSpec::Template {
            theta_fraction: DEFAULT_THETA_FRACTION,
            fold_synonyms: false,
        }
    }
}

impl BackendSpec {
    pub fn build(&self, lexicon: &Lexicon) -> Box<dyn ParserBackend> {
        match self {
            BackendSpec::Template {
                theta_fraction,
                fold_synonyms,
            } => Box::new(TemplateParser::new(
                lexicon.clone(),
                TemplateConfig {
                    theta_fraction: *theta_fraction,
                    fold_synonyms: *fold_synonyms,
                },
            )),
            BackendSpec::Subprocess { command, timeout_ms } => Box::new(ExternalBackend::new(
                Endpoint::Subprocess {
                    command: command.clone(),
                },
                Duration::from_millis(*timeout_ms),
            )),
            BackendSpec::Http { url, timeout_ms } => Box::new(ExternalBackend::new(
                Endpoint::Http { url: url.clone() },
                Duration::from_millis(*timeout_ms),
            )),
        }
    }
}

pub trait ParserModel: Send + Sync {
    fn id(&self) -> &str;

    /// `Ok(None)` is an abstention.
    fn predict(&self, utterance: &str) -> Result<Option<String>, BackendError>;

    fn predict_batch(&self, utterances: &[String]) -> Result<Vec<Option<String>>, BackendError> {
        utterances.iter().map(|u| self.predict(u)).collect()
    }
}

pub trait ParserBackend: Send + Sync {
    fn spec(&self) -> BackendSpec;

    fn train(&self, rows: &[TrainingRow]) -> Result<Box<dyn ParserModel>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplateConfig {
    pub theta_fraction: f64,
    pub fold_synonyms: bool,
}

impl Default for TemplateConfig {
    fn default() -> TemplateConfig {
        TemplateConfig {
            theta_fraction: DEFAULT_THETA_FRACTION,
            fold_synonyms: false,
        }
    }
}

/// Replaces lexicon values in utterances with `{var}` labels.
#[derive(Debug, Clone)]
pub struct Anonymizer {
    /// Value tokens to owning variable (first by name).
    values: HashMap<Vec<String>, String>,
    longest: usize,
    fold: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Anonymized {
    pub key: Vec<String>,
    /// Label (`victim`, `victim#2`) to the value it replaced.
    pub slots: BTreeMap<String, String>,
}

impl Anonymizer {
    pub fn new(lexicon: &Lexicon, fold: bool) -> Anonymizer {
        let mut values = HashMap::new();
        let mut longest = 0;
        for var in lexicon.iter().filter(|v| !v.is_abstract()) {
            for value in &var.values {
                let toks = text::tokenize(value);
                longest = longest.max(toks.len());
                values.entry(toks).or_insert_with(|| var.name.clone());
            }
        }
        Anonymizer { values, longest, fold }
    }

    pub fn anonymize(&self, utterance: &str) -> Anonymized {
        let tokens = text::tokenize(utterance);
        let mut key = Vec::new();
        let mut is_slot = Vec::new();
        let mut slots = BTreeMap::new();
        let mut uses: HashMap<&str, usize> = HashMap::new();
        let mut i = 0;
        while i < tokens.len() {
            let hit = (1..=self.longest.min(tokens.len() - i))
                .rev()
                .find_map(|n| self.values.get(&tokens[i..i + n]).map(|var| (n, var)));
            match hit {
                Some((n, var)) => {
                    let k = uses.entry(var.as_str()).or_default();
                    *k += 1;
                    let label = if *k == 1 { var.clone() } else { format!("{var}#{k}") };
                    key.push(format!("{{{label}}}"));
                    is_slot.push(true);
                    slots.insert(label, tokens[i..i + n].join(" "));
                    i += n;
                }
                None => {
                    is_slot.push(tokens[i].starts_with('$'));
                    key.push(tokens[i].clone());
                    i += 1;
                }
            }
        }
        if self.fold {
            key = fold_synonyms(&key, &is_slot);
        }
        Anonymized { key, slots }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Token(SqlToken),
    Slot(String),
}

#[derive(Debug, Clone)]
struct Entry {
    key: Vec<String>,
    template: Vec<Piece>,
}

/// Memorizing parser keyed by anonymized utterance.
#[derive(Debug, Clone)]
pub struct TemplateParser {
    lexicon: Lexicon,
    config: TemplateConfig,
}

impl TemplateParser {
    pub fn new(lexicon: Lexicon, config: TemplateConfig) -> TemplateParser {
        TemplateParser { lexicon, config }
    }

    pub fn fit(&self, rows: &[TrainingRow]) -> Result<TemplateParserModel, BackendError> {
        train_template_parser(rows, &self.lexicon, self.config)
    }
}

impl ParserBackend for TemplateParser {
    fn spec(&self) -> BackendSpec {
        BackendSpec::Template {
            theta_fraction: self.config.theta_fraction,
            fold_synonyms: self.config.fold_synonyms,
        }
    }

    fn train(&self, rows: &[TrainingRow]) -> Result<Box<dyn ParserModel>, BackendError> {
        Ok(Box::new(self.fit(rows)?))
    }
}

#[derive(Debug, Clone)]
pub struct TemplateParserModel {
    id: String,
    anonymizer: Anonymizer,
    config: TemplateConfig,
    index: BTreeMap<String, Entry>,
    /// Rows whose key was already taken by a different SQL template.
    pub conflicts: usize,
}

pub fn train_template_parser(
    rows: &[TrainingRow],
    lexicon: &Lexicon,
    config: TemplateConfig,
) -> Result<TemplateParserModel, BackendError> {
    if rows.is_empty() {
        return Err(BackendError::EmptyDataset);
    }
    let anonymizer = Anonymizer::new(lexicon, config.fold_synonyms);
    let mut index: BTreeMap<String, Entry> = BTreeMap::new();
    let mut conflicts = 0;
    for (row, pair) in rows.iter().enumerate() {
        let query = sql::parse_sql(&pair.sql).map_err(|source| BackendError::UnparseableSql { row, source })?;
        let tokens = sql::tokenize(&query.normalized).map_err(|source| BackendError::UnparseableSql { row, source })?;
        let anon = anonymizer.anonymize(&pair.utterance);
        let template = sql_template(tokens, &anon.slots);
        let key = anon.key.join(" ");
        match index.get(&key) {
            Some(existing) if existing.template != template => conflicts += 1,
            Some(_) => {}
            None => {
                index.insert(key, Entry { key: anon.key, template });
            }
        }
    }
    let fingerprint: String = index
        .iter()
        .map(|(k, e)| format!("{k}\t{:?}\n", e.template))
        .collect();
    let id = format!("template-{:016x}", text::fnv1a(fingerprint.as_bytes()));
    if conflicts > 0 {
        log::info!("template parser: {conflicts} conflicting training rows ignored");
    }
    Ok(TemplateParserModel {
        id,
        anonymizer,
        config,
        index,
        conflicts,
    })
}

/// String literals equal to a slot value become that slot, first unused label first.
fn sql_template(tokens: Vec<SqlToken>, slots: &BTreeMap<String, String>) -> Vec<Piece> {
    let mut used: Vec<&str> = Vec::new();
    tokens
        .into_iter()
        .map(|t| {
            if t.kind == TokenKind::Str {
                let label = slots
                    .iter()
                    .find(|(label, value)| **value == t.text.to_lowercase() && !used.contains(&label.as_str()))
                    .map(|(label, _)| label.as_str());
                if let Some(label) = label {
                    used.push(label);
                    return Piece::Slot(label.to_string());
                }
            }
            Piece::Token(t)
        })
        .collect()
}

impl TemplateParserModel {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    fn rebind(entry: &Entry, slots: &BTreeMap<String, String>) -> Option<String> {
        let mut out = Vec::with_capacity(entry.template.len());
        for piece in &entry.template {
            match piece {
                Piece::Token(t) => out.push(t.clone()),
                Piece::Slot(label) => out.push(SqlToken::string(slots.get(label)?.clone())),
            }
        }
        Some(sql::render_tokens(&out))
    }
}

impl ParserModel for TemplateParserModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn predict(&self, utterance: &str) -> Result<Option<String>, BackendError> {
        let anon = self.anonymizer.anonymize(utterance);
        if let Some(entry) = self.index.get(&anon.key.join(" ")) {
            return Ok(Self::rebind(entry, &anon.slots));
        }
        let theta = (self.config.theta_fraction * anon.key.len() as f64).ceil() as usize;
        let mut best: Option<(usize, &Entry)> = None;
        for entry in self.index.values() {
            // Distances are at least the length difference.
            if entry.key.len().abs_diff(anon.key.len()) > theta {
                continue;
            }
            let d = text::edit_distance(&entry.key, &anon.key);
            if d <= theta && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, entry));
            }
        }
        Ok(best.and_then(|(_, entry)| Self::rebind(entry, &anon.slots)))
    }

    fn predict_batch(&self, utterances: &[String]) -> Result<Vec<Option<String>>, BackendError> {
        utterances.par_iter().map(|u| self.predict(u)).collect()
    }
}

/// Backend living behind the wire protocol; one connection is shared by the
/// backend and every model it trained.
pub struct ExternalBackend {
    endpoint: Endpoint,
    timeout: Duration,
    channel: Arc<Mutex<Option<Channel>>>,
    counter: Mutex<u64>,
}

impl ExternalBackend {
    pub fn new(endpoint: Endpoint, timeout: Duration) -> ExternalBackend {
        ExternalBackend {
            endpoint,
            timeout,
            channel: Arc::new(Mutex::new(None)),
            counter: Mutex::new(0),
        }
    }

    fn next_id(&self, prefix: &str) -> String {
        let mut c = self.counter.lock().expect("counter lock");
        *c += 1;
        format!("{prefix}{c}")
    }
}

fn with_channel<T>(
    slot: &Mutex<Option<Channel>>,
    endpoint: &Endpoint,
    timeout: Duration,
    f: impl FnOnce(&mut Channel) -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut guard = slot.lock().expect("channel lock");
    if guard.is_none() {
        *guard = Some(endpoint.connect(timeout)?);
    }
    let result = f(guard.as_mut().expect("connected"));
    if let Err(BackendError::Transport(TransportError::Timeout(_) | TransportError::Closed | TransportError::Io(_))) =
        &result
    {
        *guard = None;
    }
    result
}

fn decode(line: &str, id: &str) -> Result<BackendResponse, BackendError> {
    let resp: BackendResponse =
        serde_json::from_str(line).map_err(|e| BackendError::Protocol(format!("unreadable response: {e}")))?;
    if let Some(err) = resp.error {
        return Err(TransportError::Remote {
            code: err.code,
            message: err.message,
        }
        .into());
    }
    if resp.id.as_deref() != Some(id) {
        return Err(BackendError::Protocol(format!(
            "response id {:?} does not match request id {id}",
            resp.id
        )));
    }
    Ok(resp)
}

impl ParserBackend for ExternalBackend {
    fn spec(&self) -> BackendSpec {
        let timeout_ms = self.timeout.as_millis() as u64;
        match &self.endpoint {
            Endpoint::Subprocess { command } => BackendSpec::Subprocess {
                command: command.clone(),
                timeout_ms,
            },
            Endpoint::Http { url } => BackendSpec::Http {
                url: url.clone(),
                timeout_ms,
            },
        }
    }

    fn train(&self, rows: &[TrainingRow]) -> Result<Box<dyn ParserModel>, BackendError> {
        if rows.is_empty() {
            return Err(BackendError::EmptyDataset);
        }
        let id = self.next_id("t");
        let mut lines = vec![protocol::to_line(&BackendRequest::Train {
            id: id.clone(),
            count: rows.len(),
        })];
        lines.extend(rows.iter().map(protocol::to_line));
        let resp = with_channel(&self.channel, &self.endpoint, self.timeout, |ch| {
            let out = ch.exchange(&lines, 1)?;
            decode(&out[0], &id)
        })?;
        let model = resp
            .model
            .ok_or_else(|| BackendError::Protocol("train response has no model id".into()))?;
        Ok(Box::new(ExternalModel {
            model,
            endpoint: self.endpoint.clone(),
            timeout: self.timeout,
            channel: Arc::clone(&self.channel),
        }))
    }
}

pub struct ExternalModel {
    model: String,
    endpoint: Endpoint,
    timeout: Duration,
    channel: Arc<Mutex<Option<Channel>>>,
}

impl ParserModel for ExternalModel {
    fn id(&self) -> &str {
        &self.model
    }

    fn predict(&self, utterance: &str) -> Result<Option<String>, BackendError> {
        Ok(self.predict_batch(&[utterance.to_string()])?.pop().flatten())
    }

    fn predict_batch(&self, utterances: &[String]) -> Result<Vec<Option<String>>, BackendError> {
        if utterances.is_empty() {
            return Ok(Vec::new());
        }
        let ids: Vec<String> = (0..utterances.len()).map(|i| format!("p{i}")).collect();
        let lines: Vec<String> = ids
            .iter()
            .zip(utterances)
            .map(|(id, text)| {
                protocol::to_line(&BackendRequest::Predict {
                    id: id.clone(),
                    model: self.model.clone(),
                    text: text.clone(),
                })
            })
            .collect();
        with_channel(&self.channel, &self.endpoint, self.timeout, |ch| {
            let out = ch.exchange(&lines, lines.len())?;
            out.iter()
                .zip(&ids)
                .map(|(line, id)| {
                    let resp = decode(line, id)?;
                    resp.sql
                        .ok_or_else(|| BackendError::Protocol(format!("predict response {id} has no sql field")))
                })
                .collect()
        })
    }
}
