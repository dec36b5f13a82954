//! Paraphrase providers behind one contract, abstract-token repair, and
//! order-aligned merging of candidates from several providers.

pub mod builtin;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::grammar::CanonicalPair;
use crate::protocol::{self, Channel, Endpoint, ParaphraseRequest, ParaphraseResponse, TransportError};
use crate::text;

pub use builtin::{builtin_paraphrase, fold_synonyms};

pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderSpecError {
    #[error("provider spec '{0}' must look like name=kind[:endpoint]")]
    Shape(String),
    #[error("provider name '{0}' must be non-empty and contain no ':' or whitespace")]
    Name(String),
    #[error("unknown provider kind '{0}' (expected builtin, subprocess or http)")]
    Kind(String),
    #[error("provider '{name}' of kind {kind} needs an endpoint")]
    MissingEndpoint { name: String, kind: String },
    #[error("builtin seed '{0}' is not an integer")]
    Seed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderTransport {
    Builtin { seed: u64 },
    Subprocess { command: Vec<String> },
    Http { url: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub name: String,
    pub transport: ProviderTransport,
    pub batch_size: usize,
    pub timeout_ms: u64,
}

impl ProviderSpec {
    pub fn builtin(name: &str, seed: u64) -> ProviderSpec {
        ProviderSpec {
            name: name.to_string(),
            transport: ProviderTransport::Builtin { seed },
            batch_size: DEFAULT_BATCH_SIZE,
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }

    /// Builds a spec from a kind name and its endpoint text (a seed for builtin).
    pub fn from_parts(name: &str, kind: &str, endpoint: Option<&str>) -> Result<ProviderSpec, ProviderSpecError> {
        if name.is_empty() || name.contains(':') || name.chars().any(char::is_whitespace) {
            return Err(ProviderSpecError::Name(name.to_string()));
        }
        let endpoint = endpoint.map(str::trim).filter(|e| !e.is_empty());
        let transport = match kind {
            "builtin" => {
                let seed = match endpoint {
                    Some(s) => s.parse().map_err(|_| ProviderSpecError::Seed(s.to_string()))?,
                    None => 0,
                };
                ProviderTransport::Builtin { seed }
            }
            "subprocess" | "http" => {
                let missing = || ProviderSpecError::MissingEndpoint {
                    name: name.to_string(),
                    kind: kind.to_string(),
                };
                match Endpoint::parse(kind, endpoint.ok_or_else(missing)?).ok_or_else(missing)? {
                    Endpoint::Subprocess { command } => ProviderTransport::Subprocess { command },
                    Endpoint::Http { url } => ProviderTransport::Http { url },
                }
            }
            other => return Err(ProviderSpecError::Kind(other.to_string())),
        };
        Ok(ProviderSpec {
            name: name.to_string(),
            transport,
            batch_size: DEFAULT_BATCH_SIZE,
            timeout_ms: DEFAULT_TIMEOUT_MS,
        })
    }

    pub fn endpoint(&self) -> Option<Endpoint> {
        match &self.transport {
            ProviderTransport::Builtin { .. } => None,
            ProviderTransport::Subprocess { command } => Some(Endpoint::Subprocess {
                command: command.clone(),
            }),
            ProviderTransport::Http { url } => Some(Endpoint::Http { url: url.clone() }),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

impl FromStr for ProviderSpec {
    type Err = ProviderSpecError;

    /// `name=builtin[:seed]`, `name=subprocess:<command line>`, `name=http:<url>`.
    fn from_str(s: &str) -> Result<ProviderSpec, ProviderSpecError> {
        let (name, rest) = s.split_once('=').ok_or_else(|| ProviderSpecError::Shape(s.to_string()))?;
        let (kind, endpoint) = match rest.split_once(':') {
            Some((k, e)) => (k, Some(e)),
            None => (rest, None),
        };
        ProviderSpec::from_parts(name.trim(), kind.trim(), endpoint)
    }
}

impl fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.transport {
            ProviderTransport::Builtin { seed } => write!(f, "{}=builtin:{seed}", self.name),
            ProviderTransport::Subprocess { command } => write!(f, "{}=subprocess:{}", self.name, command.join(" ")),
            ProviderTransport::Http { url } => write!(f, "{}=http:{url}", self.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseCandidate {
    /// `provider:pair:index`, unique within a run.
    pub id: String,
    pub source_pair_ref: u64,
    pub text: String,
    pub provider: String,
    #[serde(default)]
    pub round_kept: Option<u32>,
    #[serde(default)]
    pub repairs: Vec<String>,
    /// Same text as the source utterance after normalization.
    #[serde(default)]
    pub duplicate: bool,
    /// Reason the candidate cannot be paired with SQL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid: Option<String>,
}

impl ParaphraseCandidate {
    pub fn is_valid(&self) -> bool {
        self.invalid.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Repair {
    pub text: String,
    pub repairs: Vec<String>,
    pub invalid: Option<String>,
}

/// Rejoins split or recased abstract tokens (`$ POS`, `$Pos` to `$pos`) for the
/// names the source uses, then checks the source's `$` tokens occur exactly
/// as often as in the source.
pub fn repair_variables(source: &[String], candidate: &str) -> Repair {
    let wanted: BTreeMap<&str, usize> = source
        .iter()
        .filter(|t| t.starts_with('$') && t.len() > 1)
        .fold(BTreeMap::new(), |mut m, t| {
            *m.entry(t.as_str()).or_default() += 1;
            m
        });
    let names: HashSet<&str> = wanted.keys().map(|t| &t[1..]).collect();

    let mut repaired = String::with_capacity(candidate.len());
    let mut repairs = Vec::new();
    let chars: Vec<char> = candidate.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '$' {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            let mut end = j;
            while end < chars.len() && (chars[end].is_alphanumeric() || chars[end] == '_') {
                end += 1;
            }
            let word: String = chars[j..end].iter().collect();
            let lower = word.to_lowercase();
            if !word.is_empty() && names.contains(lower.as_str()) {
                let original: String = chars[i..end].iter().collect();
                let fixed = format!("${lower}");
                if original != fixed {
                    repairs.push(format!("'{original}' -> '{fixed}'"));
                }
                repaired.push_str(&fixed);
                i = end;
                continue;
            }
        }
        repaired.push(chars[i]);
        i += 1;
    }

    let tokens = text::tokenize(&repaired);
    let text = text::join(&tokens);
    let mut found: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tokens.iter().filter(|t| t.starts_with('$') && t.len() > 1) {
        *found.entry(t.as_str()).or_default() += 1;
    }
    let invalid = if tokens.is_empty() {
        Some("empty text".to_string())
    } else if let Some((t, _)) = wanted.iter().find(|(t, _)| !found.contains_key(*t)) {
        Some(format!("missing {t}"))
    } else if let Some((t, _)) = found.iter().find(|(t, n)| wanted.get(*t).is_some_and(|w| *n > w)) {
        Some(format!("duplicated {t}"))
    } else {
        found
            .keys()
            .find(|t| !wanted.contains_key(*t))
            .map(|t| format!("unexpected {t}"))
    };
    Repair { text, repairs, invalid }
}

/// Spans of a pair that paraphrasers must leave untouched.
pub fn protected_spans(pair: &CanonicalPair) -> Vec<Vec<String>> {
    pair.concrete_values().map(text::tokenize).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderStats {
    pub requested: usize,
    pub returned: usize,
    pub invalid: usize,
    pub duplicates: usize,
    /// Candidates dropped because an earlier provider produced the same text.
    pub merged: usize,
    /// Failed batches (timeouts, transport failures, malformed or error responses).
    pub errors: usize,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// One list per input pair, order aligned.
    pub candidates: Vec<Vec<ParaphraseCandidate>>,
    pub stats: ProviderStats,
}

fn make_candidate(provider: &str, pair: &CanonicalPair, j: usize, raw: &str) -> ParaphraseCandidate {
    let source = text::tokenize(&pair.utterance);
    let repair = repair_variables(&source, raw);
    let duplicate = repair.text == text::join(&source);
    ParaphraseCandidate {
        id: format!("{provider}:{}:{j}", pair.id),
        source_pair_ref: pair.id,
        text: repair.text,
        provider: provider.to_string(),
        round_kept: None,
        repairs: repair.repairs,
        duplicate,
        invalid: repair.invalid,
    }
}

/// Requests `k` paraphrases per pair from one provider. Transport problems
/// never abort: the affected batch yields empty lists and bumps `errors`.
pub fn paraphrase_batch(provider: &ProviderSpec, pairs: &[CanonicalPair], k: usize) -> BatchOutcome {
    let mut stats = ProviderStats {
        requested: pairs.len(),
        ..Default::default()
    };
    let raw: Vec<Vec<String>> = match &provider.transport {
        ProviderTransport::Builtin { seed } => pairs
            .iter()
            .map(|p| builtin_paraphrase(&text::tokenize(&p.utterance), &protected_spans(p), *seed, k))
            .collect(),
        ProviderTransport::Subprocess { .. } | ProviderTransport::Http { .. } => {
            let endpoint = provider.endpoint().expect("external transport");
            external_batches(provider, &endpoint, pairs, k, &mut stats)
        }
    };
    let candidates: Vec<Vec<ParaphraseCandidate>> = pairs
        .iter()
        .zip(&raw)
        .map(|(pair, texts)| {
            texts
                .iter()
                .take(k)
                .enumerate()
                .map(|(j, t)| make_candidate(&provider.name, pair, j, t))
                .collect()
        })
        .collect();
    for c in candidates.iter().flatten() {
        stats.returned += 1;
        stats.invalid += usize::from(!c.is_valid());
        stats.duplicates += usize::from(c.duplicate);
    }
    BatchOutcome { candidates, stats }
}

fn external_batches(
    provider: &ProviderSpec,
    endpoint: &Endpoint,
    pairs: &[CanonicalPair],
    k: usize,
    stats: &mut ProviderStats,
) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new(); pairs.len()];
    let mut channel: Option<Channel> = None;
    for (b, chunk) in pairs.chunks(provider.batch_size.max(1)).enumerate() {
        let offset = b * provider.batch_size.max(1);
        if channel.is_none() {
            match endpoint.connect(provider.timeout()) {
                Ok(c) => channel = Some(c),
                Err(e) => {
                    log::warn!("provider {}: {e}", provider.name);
                    stats.errors += 1;
                    continue;
                }
            }
        }
        let ch = channel.as_mut().expect("connected");
        let requests: Vec<ParaphraseRequest> = chunk
            .iter()
            .map(|p| ParaphraseRequest {
                id: p.id.to_string(),
                text: p.utterance.clone(),
                n: k,
            })
            .collect();
        let lines: Vec<String> = requests.iter().map(protocol::to_line).collect();
        match ch
            .exchange(&lines, lines.len())
            .and_then(|resp| decode_paraphrases(&requests, &resp))
        {
            Ok(lists) => {
                for (i, list) in lists.into_iter().enumerate() {
                    out[offset + i] = list;
                }
            }
            Err(e) => {
                log::warn!("provider {} batch {b}: {e}", provider.name);
                stats.errors += 1;
                // A stream may be out of step after a failure; reconnect.
                if matches!(e, TransportError::Timeout(_) | TransportError::Closed | TransportError::Io(_)) {
                    channel = None;
                }
            }
        }
    }
    out
}

/// Validates that responses echo request ids in order and carry candidates.
pub fn decode_paraphrases(
    requests: &[ParaphraseRequest],
    lines: &[String],
) -> Result<Vec<Vec<String>>, TransportError> {
    if lines.len() != requests.len() {
        return Err(TransportError::Malformed(format!(
            "{} responses for {} requests",
            lines.len(),
            requests.len()
        )));
    }
    requests
        .iter()
        .zip(lines)
        .map(|(req, line)| {
            let resp: ParaphraseResponse =
                serde_json::from_str(line).map_err(|e| TransportError::Malformed(e.to_string()))?;
            if let Some(err) = resp.error {
                return Err(TransportError::Remote {
                    code: err.code,
                    message: err.message,
                });
            }
            if resp.id.as_deref() != Some(req.id.as_str()) {
                return Err(TransportError::Malformed(format!(
                    "response id {:?} does not match request id {}",
                    resp.id, req.id
                )));
            }
            resp.candidates
                .ok_or_else(|| TransportError::Malformed(format!("response {} has no candidates", req.id)))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseReport {
    pub sources: usize,
    pub candidates: usize,
    pub valid: usize,
    pub per_provider: BTreeMap<String, ProviderStats>,
}

/// Runs every provider (concurrently) and merges per source pair in provider
/// order; a text already produced for that pair by an earlier provider is dropped.
pub fn paraphrase_all(
    providers: &[ProviderSpec],
    pairs: &[CanonicalPair],
    k: usize,
) -> (Vec<ParaphraseCandidate>, ParaphraseReport) {
    let outcomes: Vec<BatchOutcome> = std::thread::scope(|scope| {
        let handles: Vec<_> = providers
            .iter()
            .map(|p| scope.spawn(move || paraphrase_batch(p, pairs, k)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("paraphrase worker panicked"))
            .collect()
    });

    let mut report = ParaphraseReport {
        sources: pairs.len(),
        ..Default::default()
    };
    let mut stats: Vec<ProviderStats> = outcomes.iter().map(|o| o.stats.clone()).collect();
    let mut merged = Vec::new();
    for i in 0..pairs.len() {
        let mut seen: HashSet<String> = HashSet::new();
        for (p, outcome) in outcomes.iter().enumerate() {
            for c in &outcome.candidates[i] {
                if seen.insert(text::normalize(&c.text)) {
                    merged.push(c.clone());
                } else {
                    stats[p].merged += 1;
                }
            }
        }
    }
    report.candidates = merged.len();
    report.valid = merged.iter().filter(|c| c.is_valid()).count();
    for (p, s) in providers.iter().zip(stats) {
        report.per_provider.insert(p.name.clone(), s);
    }
    (merged, report)
}
