//! Self-training filter: train on synthetic pairs, keep the paraphrases the
//! model maps back to their source SQL, retrain with them, repeat.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conformance::{check_backend, ConformanceReport};
use crate::grammar::CanonicalPair;
use crate::paraphrase::ParaphraseCandidate;
use crate::parser::{BackendError, BackendSpec, ParserBackend};
use crate::protocol::TrainingRow;
use crate::sql::{self, SqlError, SqlQuery};
use crate::text;

pub const DEFAULT_ROUNDS: u32 = 3;
/// Synthetic rows used for the pre-flight conformance check.
pub const CONFORMANCE_ROWS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    Exact,
    NoOrder,
}

impl MatchMode {
    pub fn matches(self, a: &SqlQuery, b: &SqlQuery) -> bool {
        match self {
            MatchMode::Exact => sql::equal_exact(a, b),
            MatchMode::NoOrder => sql::equal_no_order(a, b),
        }
    }
}

impl FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<MatchMode, String> {
        match s {
            "exact" => Ok(MatchMode::Exact),
            "no_order" | "no-order" => Ok(MatchMode::NoOrder),
            other => Err(format!("unknown match mode '{other}' (expected exact or no_order)")),
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchMode::Exact => "exact",
            MatchMode::NoOrder => "no_order",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("rounds must be at least 1")]
    ZeroRounds,
    #[error("no synthetic pairs to train on")]
    NoSyntheticData,
    #[error("candidate {candidate} references unknown pair {pair}")]
    UnknownSource { candidate: String, pair: u64 },
    #[error("synthetic pair {pair}: unparseable SQL: {source}")]
    SyntheticSql {
        pair: u64,
        #[source]
        source: SqlError,
    },
    #[error("backend failed conformance:\n{0}")]
    Conformance(String),
    #[error("backend failed in round {round}: {source}{}", resume_hint(.checkpoint))]
    Backend {
        round: u32,
        #[source]
        source: BackendError,
        checkpoint: Option<PathBuf>,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

fn resume_hint(checkpoint: &Option<PathBuf>) -> String {
    checkpoint
        .as_ref()
        .map(|p| format!(" (resume from {})", p.display()))
        .unwrap_or_default()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProviderRound {
    pub total: usize,
    pub evaluated: usize,
    pub kept_this_round: usize,
    pub cumulative_kept: usize,
    pub cumulative_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRoundReport {
    pub round: u32,
    /// Valid candidates not kept before this round.
    pub evaluated: usize,
    pub kept_this_round: usize,
    pub cumulative_kept: usize,
    /// Percentage of valid candidates kept so far.
    pub cumulative_fraction: f64,
    pub total_candidates: usize,
    /// Excluded from the denominator: failed abstract-token repair.
    pub invalid: usize,
    pub training_size: usize,
    pub model: String,
    pub per_provider: BTreeMap<String, ProviderRound>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptPair {
    pub candidate_id: String,
    pub source_pair_ref: u64,
    pub provider: String,
    pub utterance: String,
    /// SQL of the source pair, which the kept utterance is now paired with.
    pub sql: String,
    pub predicted_sql: String,
    pub round_kept: u32,
}

#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub rounds: u32,
    pub match_mode: MatchMode,
    pub checkpoint: Option<PathBuf>,
}

impl Default for FilterConfig {
    fn default() -> FilterConfig {
        FilterConfig {
            rounds: DEFAULT_ROUNDS,
            match_mode: MatchMode::Exact,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<KeptPair>,
    pub reports: Vec<FilterRoundReport>,
    /// True when a round kept nothing before the round limit.
    pub stopped_early: bool,
    pub match_mode: MatchMode,
    pub backend: BackendSpec,
    pub conformance: ConformanceReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    fingerprint: String,
    reports: Vec<FilterRoundReport>,
    kept: Vec<KeptPair>,
    stopped_early: bool,
}

fn fingerprint(
    synthetic: &[CanonicalPair],
    candidates: &[ParaphraseCandidate],
    backend: &BackendSpec,
    mode: MatchMode,
) -> String {
    let mut h = String::new();
    for p in synthetic {
        h.push_str(&format!("{}\t{}\t{}\n", p.id, p.utterance, p.sql));
    }
    for c in candidates {
        h.push_str(&format!("{}\t{}\t{:?}\n", c.id, c.text, c.invalid));
    }
    h.push_str(&format!("{backend:?}\t{mode}"));
    format!("{:016x}", text::fnv1a(h.as_bytes()))
}

fn load_checkpoint(path: &Path, expected: &str) -> Result<Option<Checkpoint>, FilterError> {
    if !path.exists() {
        return Ok(None);
    }
    let err = |message: String| FilterError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let cp: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if cp.fingerprint != expected {
        log::warn!("checkpoint {} belongs to different inputs; starting over", path.display());
        return Ok(None);
    }
    Ok(Some(cp))
}

fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<(), FilterError> {
    let tmp = path.with_extension("tmp");
    let body = serde_json::to_string_pretty(cp).expect("checkpoint serializes");
    std::fs::write(&tmp, body)
        .and_then(|()| std::fs::rename(&tmp, path))
        .map_err(|e| FilterError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn training_rows(synthetic: &[CanonicalPair], kept: &[KeptPair]) -> Vec<TrainingRow> {
    synthetic
        .iter()
        .map(|p| TrainingRow {
            utterance: p.utterance.clone(),
            sql: p.sql.clone(),
        })
        .chain(kept.iter().map(|k| TrainingRow {
            utterance: k.utterance.clone(),
            sql: k.sql.clone(),
        }))
        .collect()
}

pub fn run_filter(
    synthetic: &[CanonicalPair],
    candidates: &[ParaphraseCandidate],
    backend: &dyn ParserBackend,
    config: &FilterConfig,
) -> Result<FilterOutcome, FilterError> {
    if config.rounds == 0 {
        return Err(FilterError::ZeroRounds);
    }
    if synthetic.is_empty() {
        return Err(FilterError::NoSyntheticData);
    }
    let mut gold: HashMap<u64, (&CanonicalPair, SqlQuery)> = HashMap::new();
    for p in synthetic {
        let q = sql::parse_sql(&p.sql).map_err(|source| FilterError::SyntheticSql { pair: p.id, source })?;
        gold.insert(p.id, (p, q));
    }
    for c in candidates {
        if !gold.contains_key(&c.source_pair_ref) {
            return Err(FilterError::UnknownSource {
                candidate: c.id.clone(),
                pair: c.source_pair_ref,
            });
        }
    }

    let probe = training_rows(&synthetic[..synthetic.len().min(CONFORMANCE_ROWS)], &[]);
    let conformance = check_backend(backend, &probe);
    if !conformance.passed() {
        return Err(FilterError::Conformance(conformance.render()));
    }

    let valid: Vec<&ParaphraseCandidate> = candidates.iter().filter(|c| c.is_valid()).collect();
    let invalid = candidates.len() - valid.len();
    let mut totals: BTreeMap<String, usize> = BTreeMap::new();
    for c in candidates {
        totals.entry(c.provider.clone()).or_default();
    }
    for c in &valid {
        *totals.entry(c.provider.clone()).or_default() += 1;
    }

    let spec = backend.spec();
    let fp = fingerprint(synthetic, candidates, &spec, config.match_mode);
    let mut state = match &config.checkpoint {
        Some(path) => load_checkpoint(path, &fp)?,
        None => None,
    }
    .unwrap_or(Checkpoint {
        fingerprint: fp,
        reports: Vec::new(),
        kept: Vec::new(),
        stopped_early: false,
    });
    if !state.reports.is_empty() {
        log::info!("resuming filter after round {}", state.reports.len());
    }

    while (state.reports.len() as u32) < config.rounds && !state.stopped_early {
        let round = state.reports.len() as u32 + 1;
        let backend_err = |source| FilterError::Backend {
            round,
            source,
            checkpoint: config.checkpoint.clone(),
        };
        let rows = training_rows(synthetic, &state.kept);
        let model = backend.train(&rows).map_err(backend_err)?;

        let kept_ids: std::collections::HashSet<&str> = state.kept.iter().map(|k| k.candidate_id.as_str()).collect();
        let pending: Vec<&ParaphraseCandidate> =
            valid.iter().copied().filter(|c| !kept_ids.contains(c.id.as_str())).collect();
        let texts: Vec<String> = pending.iter().map(|c| c.text.clone()).collect();
        let predictions = model.predict_batch(&texts).map_err(backend_err)?;

        let mut per_provider: BTreeMap<String, ProviderRound> = totals
            .iter()
            .map(|(name, &total)| {
                (
                    name.clone(),
                    ProviderRound {
                        total,
                        ..Default::default()
                    },
                )
            })
            .collect();
        let mut newly = Vec::new();
        for (c, pred) in pending.iter().zip(predictions) {
            per_provider.get_mut(&c.provider).expect("provider total").evaluated += 1;
            let (pair, gold_q) = &gold[&c.source_pair_ref];
            let Some(pred) = pred else { continue };
            let Ok(pred_q) = sql::parse_sql(&pred) else { continue };
            if config.match_mode.matches(&pred_q, gold_q) {
                newly.push(KeptPair {
                    candidate_id: c.id.clone(),
                    source_pair_ref: c.source_pair_ref,
                    provider: c.provider.clone(),
                    utterance: c.text.clone(),
                    sql: pair.sql.clone(),
                    predicted_sql: pred,
                    round_kept: round,
                });
            }
        }
        let kept_this_round = newly.len();
        state.kept.extend(newly);

        for k in &state.kept {
            let p = per_provider.get_mut(&k.provider).expect("provider total");
            p.cumulative_kept += 1;
            p.kept_this_round += usize::from(k.round_kept == round);
        }
        for p in per_provider.values_mut() {
            p.cumulative_fraction = percent(p.cumulative_kept, p.total);
        }
        let report = FilterRoundReport {
            round,
            evaluated: pending.len(),
            kept_this_round,
            cumulative_kept: state.kept.len(),
            cumulative_fraction: percent(state.kept.len(), valid.len()),
            total_candidates: valid.len(),
            invalid,
            training_size: rows.len(),
            model: model.id().to_string(),
            per_provider,
        };
        log::info!(
            "filter round {round}: kept {kept_this_round} of {} ({:.2}% cumulative)",
            report.evaluated,
            report.cumulative_fraction
        );
        state.reports.push(report);
        state.stopped_early = kept_this_round == 0 && round < config.rounds;
        if let Some(path) = &config.checkpoint {
            save_checkpoint(path, &state)?;
        }
    }

    Ok(FilterOutcome {
        kept: state.kept,
        reports: state.reports,
        stopped_early: state.stopped_early,
        match_mode: config.match_mode,
        backend: spec,
        conformance,
    })
}

fn percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// Re-checks every kept pair from the output alone; returns the failures.
pub fn verify_kept(kept: &[KeptPair], mode: MatchMode) -> Vec<String> {
    kept.iter()
        .filter_map(|k| {
            let ok = match (sql::parse_sql(&k.predicted_sql), sql::parse_sql(&k.sql)) {
                (Ok(p), Ok(g)) => mode.matches(&p, &g),
                _ => false,
            };
            (!ok).then(|| k.candidate_id.clone())
        })
        .collect()
}

/// Cumulative kept percentage per provider (rows) and round (columns).
pub fn render_table(reports: &[FilterRoundReport]) -> String {
    let mut providers: Vec<&String> = reports.iter().flat_map(|r| r.per_provider.keys()).collect();
    providers.sort();
    providers.dedup();
    let width = providers.iter().map(|p| p.len()).max().unwrap_or(0).max(8);
    let mut out = format!("{:<width$}", "provider");
    for r in reports {
        out.push_str(&format!(" {:>9}", format!("round {}", r.round)));
    }
    out.push('\n');
    for p in &providers {
        out.push_str(&format!("{p:<width$}"));
        for r in reports {
            let v = r.per_provider.get(*p).map_or(0.0, |x| x.cumulative_fraction);
            out.push_str(&format!(" {v:>9.2}"));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<width$}", "total"));
    for r in reports {
        out.push_str(&format!(" {:>9.2}", r.cumulative_fraction));
    }
    out.push('\n');
    out
}

pub fn reports_jsonl(reports: &[FilterRoundReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
        .collect()
}
