//! End-to-end run driven by one TOML config: generate, sample, paraphrase,
//! filter, train, evaluate. Writes every artifact plus a manifest of counts,
//! reports and content digests; nothing time-dependent is recorded, so
//! builtin-only runs reproduce the manifest byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::filter::{self, FilterConfig, FilterOutcome, FilterRoundReport, KeptPair, MatchMode};
use crate::grammar::{count_expansions, expand, CanonicalPair, Grammar};
use crate::jsonl;
use crate::lexicon::{Lexicon, SchemaManifest};
use crate::metrics::{self, DiversityReport, EvalReport};
use crate::paraphrase::{paraphrase_all, ParaphraseCandidate, ParaphraseReport, ProviderSpec};
use crate::parser::{BackendSpec, ParserBackend};
use crate::protocol::TrainingRow;
use crate::sampler::{sample_uat, Budget, SamplingReport};
use crate::sql;

pub const DEFAULT_CANDIDATES_PER_UTTERANCE: usize = 1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Load(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    /// 2 for configuration or input problems, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Load(_) => 2,
            PipelineError::Stage { .. } => 1,
        }
    }
}

fn stage_err(stage: &'static str) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError::Stage { stage, message }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub grammar: PathBuf,
    pub lexicon: PathBuf,
    #[serde(default)]
    pub schema: Option<PathBuf>,
    /// Share of generated pairs sent for paraphrasing; 0 skips paraphrasing.
    pub sample_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default, rename = "match")]
    pub match_mode: MatchMode,
    #[serde(default = "default_k")]
    pub candidates_per_utterance: usize,
    #[serde(default)]
    pub heldout: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default, rename = "provider")]
    pub providers: Vec<ProviderConfig>,
}

fn default_rounds() -> u32 {
    filter::DEFAULT_ROUNDS
}

fn default_k() -> usize {
    DEFAULT_CANDIDATES_PER_UTTERANCE
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<PipelineConfig, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&cfg.sample_fraction) {
            return Err(PipelineError::Config(format!(
                "sample_fraction {} is outside [0, 1]",
                cfg.sample_fraction
            )));
        }
        if cfg.rounds == 0 {
            return Err(PipelineError::Config("rounds must be at least 1".into()));
        }
        if cfg.candidates_per_utterance == 0 {
            return Err(PipelineError::Config("candidates_per_utterance must be at least 1".into()));
        }
        if cfg.sample_fraction > 0.0 && cfg.providers.is_empty() {
            return Err(PipelineError::Config("sample_fraction > 0 needs at least one [[provider]]".into()));
        }
        let mut names: Vec<&str> = cfg.providers.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(PipelineError::Config("provider names must be unique".into()));
        }
        cfg.provider_specs()?;
        Ok(cfg)
    }

    pub fn provider_specs(&self) -> Result<Vec<ProviderSpec>, PipelineError> {
        self.providers
            .iter()
            .map(|p| {
                let endpoint = match (p.kind.as_str(), &p.endpoint, p.seed) {
                    ("builtin", _, seed) => Some(seed.unwrap_or(self.seed).to_string()),
                    (_, e, _) => e.clone(),
                };
                let mut spec = ProviderSpec::from_parts(&p.name, &p.kind, endpoint.as_deref())
                    .map_err(|e| PipelineError::Config(e.to_string()))?;
                if let Some(b) = p.batch_size {
                    spec.batch_size = b.max(1);
                }
                if let Some(t) = p.timeout_ms {
                    spec.timeout_ms = t;
                }
                Ok(spec)
            })
            .collect()
    }
}

/// Loads the lexicon (checked against the schema when given) and grammar,
/// expands every pair and normalizes its SQL.
pub fn generate_pairs(
    grammar: &Path,
    lexicon: &Path,
    schema: Option<&Path>,
) -> Result<(Vec<CanonicalPair>, Lexicon), PipelineError> {
    let load = |what: &str, path: &Path, e: String| PipelineError::Load(format!("{what} {}: {e}", path.display()));
    let lex = Lexicon::load(lexicon).map_err(|e| load("lexicon", lexicon, e.to_string()))?;
    if let Some(schema) = schema {
        let manifest = SchemaManifest::load(schema).map_err(|e| load("schema", schema, e.to_string()))?;
        lex.check_schema(&manifest).map_err(|e| load("lexicon", lexicon, e.to_string()))?;
    }
    let g = Grammar::load(grammar, &lex).map_err(|e| load("grammar", grammar, e.to_string()))?;
    count_expansions(&g, &lex).map_err(|e| load("grammar", grammar, e.to_string()))?;
    let mut pairs = Vec::new();
    for mut pair in expand(&g, &lex) {
        pair.sql = sql::normalize(&pair.sql).map_err(|e| PipelineError::Stage {
            stage: "generate",
            message: format!("pair {} has SQL outside the supported subset: {e}", pair.id),
        })?;
        pairs.push(pair);
    }
    Ok((pairs, lex))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub generated: usize,
    pub templates: usize,
    pub sampled: usize,
    pub paraphrased: usize,
    pub valid_candidates: usize,
    pub kept_per_round: Vec<usize>,
    pub kept_total: usize,
    pub final_training: usize,
    pub heldout: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub match_mode: MatchMode,
    pub backend: BackendSpec,
    pub stopped_early: bool,
    pub rounds: Vec<FilterRoundReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub sample_fraction: f64,
    pub rounds: u32,
    pub candidates_per_utterance: usize,
    pub providers: Vec<ProviderSpec>,
    pub counts: StageCounts,
    pub sampling: Option<SamplingReport>,
    pub paraphrase: Option<ParaphraseReport>,
    pub diversity: Option<DiversityReport>,
    pub filter: Option<FilterSummary>,
    pub final_model: String,
    pub evaluation: Option<EvalReport>,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Checkpoint {
    config_sha256: String,
    completed: Vec<String>,
    sampling: Option<SamplingReport>,
    paraphrase: Option<ParaphraseReport>,
    filter: Option<FilterSummary>,
}

const CHECKPOINT: &str = "checkpoint.json";

struct Run {
    out: PathBuf,
    checkpoint: Checkpoint,
    resume: bool,
    artifacts: BTreeMap<String, String>,
}

impl Run {
    fn done(&self, stage: &str) -> bool {
        self.resume && self.checkpoint.completed.iter().any(|s| s == stage)
    }

    fn write<T: Serialize>(&mut self, stage: &'static str, name: &str, rows: &[T]) -> Result<(), PipelineError> {
        self.write_text(stage, name, &jsonl::to_string(rows))
    }

    fn write_text(&mut self, stage: &'static str, name: &str, body: &str) -> Result<(), PipelineError> {
        std::fs::write(self.out.join(name), body)
            .map_err(|e| stage_err(stage)(format!("cannot write {name}: {e}")))?;
        self.artifacts.insert(name.to_string(), sha256_hex(body.as_bytes()));
        Ok(())
    }

    fn reload<T: for<'de> Deserialize<'de>>(&mut self, stage: &'static str, name: &str) -> Result<Vec<T>, PipelineError> {
        let path = self.out.join(name);
        let bytes = std::fs::read(&path).map_err(|e| stage_err(stage)(format!("cannot reload {name}: {e}")))?;
        self.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        jsonl::read(&path).map_err(|e| stage_err(stage)(e.to_string()))
    }

    fn complete(&mut self, stage: &str) -> Result<(), PipelineError> {
        if !self.checkpoint.completed.iter().any(|s| s == stage) {
            self.checkpoint.completed.push(stage.to_string());
        }
        let body = serde_json::to_string_pretty(&self.checkpoint).expect("checkpoint serializes");
        std::fs::write(self.out.join(CHECKPOINT), body)
            .map_err(|e| PipelineError::Load(format!("cannot write checkpoint: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub filter_table: Option<String>,
}

/// Runs every stage for the config at `config_path`. With `resume`, stages
/// recorded in the output directory's checkpoint are reloaded, not rerun.
pub fn run_pipeline(config_path: &Path, resume: bool) -> Result<PipelineRun, PipelineError> {
    let raw = std::fs::read(config_path)
        .map_err(|e| PipelineError::Load(format!("cannot read config {}: {e}", config_path.display())))?;
    let text = String::from_utf8(raw.clone()).map_err(|_| PipelineError::Config("config is not UTF-8".into()))?;
    let cfg = PipelineConfig::parse(&text)?;
    let config_sha256 = sha256_hex(&raw);
    let base = config_path.parent().unwrap_or(Path::new("."));
    let at = |p: &Path| base.join(p);
    let out = at(&cfg.out_dir);
    std::fs::create_dir_all(&out)
        .map_err(|e| PipelineError::Load(format!("cannot create {}: {e}", out.display())))?;

    let mut checkpoint = Checkpoint::default();
    if resume {
        if let Ok(body) = std::fs::read_to_string(out.join(CHECKPOINT)) {
            match serde_json::from_str::<Checkpoint>(&body) {
                Ok(cp) if cp.config_sha256 == config_sha256 => checkpoint = cp,
                Ok(_) => log::warn!("checkpoint belongs to a different config; running all stages"),
                Err(e) => log::warn!("ignoring unreadable checkpoint: {e}"),
            }
        }
    }
    checkpoint.config_sha256 = config_sha256.clone();
    let mut run = Run {
        out: out.clone(),
        checkpoint,
        resume,
        artifacts: BTreeMap::new(),
    };
    let providers = cfg.provider_specs()?;
    let mut counts = StageCounts::default();

    // Generate. Loading is always redone: later stages need the lexicon.
    let (generated, lexicon) = generate_pairs(&at(&cfg.grammar), &at(&cfg.lexicon), cfg.schema.as_deref().map(&at).as_deref())?;
    if generated.is_empty() {
        return Err(stage_err("generate")("grammar produced no pairs".into()));
    }
    if run.done("generate") {
        run.reload::<CanonicalPair>("generate", "generated.jsonl")?;
    } else {
        run.write("generate", "generated.jsonl", &generated)?;
        run.complete("generate")?;
    }
    counts.generated = generated.len();
    counts.templates = generated
        .iter()
        .map(|p| p.template_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    log::info!("generated {} pairs over {} templates", counts.generated, counts.templates);

    // Sample.
    let sampled: Vec<CanonicalPair> = if cfg.sample_fraction == 0.0 {
        Vec::new()
    } else if run.done("sample") {
        run.reload("sample", "sampled.jsonl")?
    } else {
        let (s, report) = sample_uat(&generated, Budget::Fraction(cfg.sample_fraction), cfg.seed)
            .map_err(|e| stage_err("sample")(e.to_string()))?;
        run.write("sample", "sampled.jsonl", &s)?;
        run.checkpoint.sampling = Some(report);
        run.complete("sample")?;
        s
    };
    counts.sampled = sampled.len();

    // Paraphrase.
    let candidates: Vec<ParaphraseCandidate> = if sampled.is_empty() {
        Vec::new()
    } else if run.done("paraphrase") {
        run.reload("paraphrase", "candidates.jsonl")?
    } else {
        let (c, report) = paraphrase_all(&providers, &sampled, cfg.candidates_per_utterance);
        for (name, s) in &report.per_provider {
            if s.errors > 0 {
                log::warn!("provider {name}: {} failed batch(es)", s.errors);
            }
        }
        run.write("paraphrase", "candidates.jsonl", &c)?;
        run.checkpoint.paraphrase = Some(report);
        run.complete("paraphrase")?;
        c
    };
    counts.paraphrased = candidates.len();
    counts.valid_candidates = candidates.iter().filter(|c| c.is_valid()).count();
    let diversity = diversity_of(&candidates, &sampled);

    // Filter.
    let backend: Box<dyn ParserBackend> = cfg.backend.build(&lexicon);
    let kept: Vec<KeptPair> = if candidates.is_empty() {
        Vec::new()
    } else if run.done("filter") {
        run.reload("filter", "kept.jsonl")?
    } else {
        let outcome: FilterOutcome = filter::run_filter(
            &generated,
            &candidates,
            backend.as_ref(),
            &FilterConfig {
                rounds: cfg.rounds,
                match_mode: cfg.match_mode,
                checkpoint: Some(out.join("filter_checkpoint.json")),
            },
        )
        .map_err(|e| stage_err("filter")(e.to_string()))?;
        run.write("filter", "kept.jsonl", &outcome.kept)?;
        run.write_text("filter", "filter_rounds.jsonl", &filter::reports_jsonl(&outcome.reports))?;
        run.write_text("filter", "filter_table.txt", &filter::render_table(&outcome.reports))?;
        run.checkpoint.filter = Some(FilterSummary {
            match_mode: outcome.match_mode,
            backend: outcome.backend,
            stopped_early: outcome.stopped_early,
            rounds: outcome.reports,
        });
        run.complete("filter")?;
        outcome.kept
    };
    if run.done("filter") {
        for name in ["filter_rounds.jsonl", "filter_table.txt"] {
            let bytes = std::fs::read(out.join(name))
                .map_err(|e| stage_err("filter")(format!("cannot reload {name}: {e}")))?;
            run.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        }
    }
    if let Some(f) = &run.checkpoint.filter {
        counts.kept_per_round = f.rounds.iter().map(|r| r.kept_this_round).collect();
    }
    counts.kept_total = kept.len();

    // Train the final model on everything synthetic plus everything kept.
    let mut training: Vec<TrainingRow> = generated
        .iter()
        .map(|p| TrainingRow {
            utterance: p.utterance.clone(),
            sql: p.sql.clone(),
        })
        .collect();
    training.extend(kept.iter().map(|k| TrainingRow {
        utterance: k.utterance.clone(),
        sql: k.sql.clone(),
    }));
    counts.final_training = training.len();
    run.write("train", "train.jsonl", &training)?;
    let model = backend
        .train(&training)
        .map_err(|e| stage_err("train")(e.to_string()))?;

    // Evaluate.
    let evaluation = match &cfg.heldout {
        None => None,
        Some(path) => {
            let heldout: Vec<TrainingRow> = jsonl::read(at(path)).map_err(|e| PipelineError::Load(e.to_string()))?;
            counts.heldout = heldout.len();
            let utterances: Vec<String> = heldout.iter().map(|r| r.utterance.clone()).collect();
            let predictions = model
                .predict_batch(&utterances)
                .map_err(|e| stage_err("evaluate")(e.to_string()))?;
            let gold: Vec<String> = heldout.iter().map(|r| r.sql.clone()).collect();
            let report = metrics::evaluate(&predictions, &gold).map_err(|e| stage_err("evaluate")(e.to_string()))?;
            let rows: Vec<Prediction> = heldout
                .iter()
                .zip(predictions)
                .map(|(r, p)| Prediction {
                    utterance: r.utterance.clone(),
                    gold: r.sql.clone(),
                    sql: p,
                })
                .collect();
            run.write("evaluate", "predictions.jsonl", &rows)?;
            Some(report)
        }
    };

    let manifest = Manifest {
        config_sha256,
        seed: cfg.seed,
        sample_fraction: cfg.sample_fraction,
        rounds: cfg.rounds,
        candidates_per_utterance: cfg.candidates_per_utterance,
        providers,
        counts,
        sampling: run.checkpoint.sampling.clone(),
        paraphrase: run.checkpoint.paraphrase.clone(),
        diversity,
        filter: run.checkpoint.filter.clone(),
        final_model: model.id().to_string(),
        evaluation,
        artifacts: run
            .artifacts
            .iter()
            .map(|(path, sha256)| Artifact {
                path: path.clone(),
                sha256: sha256.clone(),
            })
            .collect(),
    };
    let manifest_path = out.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(&manifest_path, body)
        .map_err(|e| PipelineError::Load(format!("cannot write {}: {e}", manifest_path.display())))?;
    let filter_table = manifest.filter.as_ref().map(|f| filter::render_table(&f.rounds));
    Ok(PipelineRun {
        manifest,
        manifest_path,
        filter_table,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub utterance: String,
    pub gold: String,
    pub sql: Option<String>,
}

/// BLEU of valid candidates against their source utterances.
fn diversity_of(candidates: &[ParaphraseCandidate], sources: &[CanonicalPair]) -> Option<DiversityReport> {
    let by_id: BTreeMap<u64, &str> = sources.iter().map(|p| (p.id, p.utterance.as_str())).collect();
    let (cands, refs): (Vec<String>, Vec<String>) = candidates
        .iter()
        .filter(|c| c.is_valid())
        .filter_map(|c| by_id.get(&c.source_pair_ref).map(|r| (c.text.clone(), r.to_string())))
        .unzip();
    metrics::diversity(&cands, &refs).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let cfg = PipelineConfig::parse(
            r#"
grammar = "g"
lexicon = "l"
sample_fraction = 0.5
[[provider]]
name = "b"
kind = "builtin"
"#,
        )
        .unwrap();
        assert_eq!(cfg.rounds, 3);
        assert_eq!(cfg.match_mode, MatchMode::Exact);
        assert_eq!(cfg.candidates_per_utterance, 1);
        assert_eq!(cfg.backend, BackendSpec::default());
        assert_eq!(cfg.provider_specs().unwrap()[0].to_string(), "b=builtin:0");

        for bad in [
            "grammar = \"g\"\nlexicon = \"l\"\nsample_fraction = 2.0\n",
            "grammar = \"g\"\nlexicon = \"l\"\nsample_fraction = 0.1\n",
            "grammar = \"g\"\nlexicon = \"l\"\nsample_fraction = 0.0\nrounds = 0\n",
            "grammar = \"g\"\nlexicon = \"l\"\nsample_fraction = 0.0\ntypo = 1\n",
            "grammar = \"g\"\nsample_fraction = 0.0\n",
        ] {
            assert!(matches!(PipelineConfig::parse(bad), Err(PipelineError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn backend_table_parses() {
        let cfg = PipelineConfig::parse(
            "grammar = \"g\"\nlexicon = \"l\"\nsample_fraction = 0.0\n[backend]\nkind = \"template\"\nfold_synonyms = true\n",
        )
        .unwrap();
        assert_eq!(
            cfg.backend,
            BackendSpec::Template {
                theta_fraction: 0.25,
                fold_synonyms: true
            }
        );
    }
}
