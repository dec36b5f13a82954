use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use sqlboot::conformance::{check_backend, check_backend_endpoint, check_provider};
use sqlboot::filter::{self, FilterConfig, MatchMode};
use sqlboot::grammar::{count_expansions, CanonicalPair, Grammar};
use sqlboot::lexicon::Lexicon;
use sqlboot::metrics;
use sqlboot::paraphrase::{paraphrase_all, ProviderSpec};
use sqlboot::parser::{BackendSpec, TemplateConfig, DEFAULT_THETA_FRACTION};
use sqlboot::pipeline::{self, generate_pairs, PipelineError};
use sqlboot::protocol::{Endpoint, TrainingRow};
use sqlboot::sampler::{sample_uat, Budget};
use sqlboot::serve::{serve_stream, ParaphraseSession, ParserSession, Session};
use sqlboot::jsonl;

#[derive(Parser)]
#[command(name = "sqlboot", version, about = "Bootstrap text-to-SQL training data from a synchronous grammar")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand a grammar into (utterance, SQL) pairs.
    Generate {
        #[arg(long)]
        grammar: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, required_unless_present = "count_only")]
        out: Option<PathBuf>,
        /// Print the number of pairs without expanding them.
        #[arg(long)]
        count_only: bool,
    },
    /// Pick a template-balanced subset of generated pairs.
    Sample {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fraction (`0.1`, `10%`) or count (`25`).
        #[arg(long = "sample-fraction")]
        budget: Budget,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Paraphrase pairs with one or more providers.
    Paraphrase {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `name=builtin[:seed]`, `name=subprocess:<command>` or `name=http:<url>`.
        #[arg(long = "provider", required = true)]
        providers: Vec<ProviderSpec>,
        #[arg(long, default_value_t = pipeline::DEFAULT_CANDIDATES_PER_UTTERANCE)]
        candidates_per_utterance: usize,
    },
    /// Keep candidates that a parser trained on the synthetic pairs maps back to their SQL.
    Filter {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = filter::DEFAULT_ROUNDS)]
        rounds: u32,
        #[arg(long = "match", default_value = "exact")]
        match_mode: MatchMode,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Score predictions (or a template parser trained on `--train`) against gold SQL.
    Evaluate {
        /// JSONL rows with `utterance` and `sql`.
        #[arg(long)]
        gold: PathBuf,
        /// JSONL rows with an `sql` field (string or null), aligned with gold.
        #[arg(long, conflicts_with = "train")]
        predictions: Option<PathBuf>,
        #[arg(long, requires = "lexicon", required_unless_present = "predictions")]
        train: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        json: bool,
    },
    /// Corpus BLEU of candidate lines against reference lines.
    Bleu {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Highest n-gram order to report.
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=4))]
        max_n: u8,
        #[arg(long)]
        json: bool,
    },
    /// Run every stage from a TOML config and write a manifest.
    Pipeline {
        config: PathBuf,
        /// Reuse stages recorded in the output directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Run the conformance suite against an external paraphrase provider.
    CheckProvider {
        #[arg(long)]
        provider: ProviderSpec,
        /// Text file with one sample utterance per line.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        n: usize,
    },
    /// Run the conformance suite against a parser backend.
    CheckBackend {
        #[command(flatten)]
        backend: BackendArgs,
        /// JSONL training rows; a small builtin set is used otherwise.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Serve a reference endpoint over stdin/stdout.
    Serve {
        #[arg(long, value_enum)]
        mode: ServeMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        fold_synonyms: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ServeMode {
    Paraphrase,
    Parser,
}

#[derive(clap::Args)]
struct BackendArgs {
    /// `template`, `subprocess:<command>` or `http:<url>`.
    #[arg(long, default_value = "template")]
    backend: String,
    #[arg(long, default_value_t = DEFAULT_THETA_FRACTION)]
    theta: f64,
    #[arg(long)]
    fold_synonyms: bool,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
}

impl BackendArgs {
    fn spec(&self) -> Result<BackendSpec, CliError> {
        if self.backend == "template" {
            return Ok(BackendSpec::Template {
                theta_fraction: self.theta,
                fold_synonyms: self.fold_synonyms,
            });
        }
        let (kind, target) = self.backend.split_once(':').unwrap_or((self.backend.as_str(), ""));
        match Endpoint::parse(kind, target) {
            Some(Endpoint::Subprocess { command }) => Ok(BackendSpec::Subprocess {
                command,
                timeout_ms: self.timeout_ms,
            }),
            Some(Endpoint::Http { url }) => Ok(BackendSpec::Http {
                url,
                timeout_ms: self.timeout_ms,
            }),
            None => Err(CliError::Usage(format!(
                "backend '{}' must be template, subprocess:<command> or http:<url>",
                self.backend
            ))),
        }
    }
}

#[derive(Debug)]
enum CliError {
    /// Bad arguments, configuration or unreadable inputs.
    Usage(String),
    /// A stage ran and failed.
    Stage(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> CliError {
        match e.exit_code() {
            2 => CliError::Usage(e.to_string()),
            _ => CliError::Stage(e.to_string()),
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn stage(e: impl std::fmt::Display) -> CliError {
    CliError::Stage(e.to_string())
}

fn load_lexicon(path: &Path) -> Result<Lexicon, CliError> {
    Lexicon::load(path).map_err(|e| CliError::Usage(format!("lexicon {}: {e}", path.display())))
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let body = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(body.lines().map(str::to_string).collect())
}

const PROBE_UTTERANCES: &[&str] = &[
    "how many oil tanker have been hijacked in $loc ?",
    "which weapon did pirates use to rob the container ship on $dat in $loc ?",
    "list the incidents involving the tugboat near $pos ?",
];

fn probe_rows() -> Vec<TrainingRow> {
    [
        ("how many oil tanker have been hijacked in $loc ?", r#"SELECT COUNT(*) FROM incidents AS va WHERE va.victim = "oil tanker" AND va.incident_type = "hijacked" AND va.location = $loc"#),
        ("list the incidents involving the tugboat near $pos ?", r#"SELECT va.id FROM incidents AS va WHERE va.victim = "tugboat" AND va.position = $pos"#),
        ("how many incidents were recorded on $dat ?", "SELECT COUNT(*) FROM incidents AS va WHERE va.date = $dat"),
    ]
    .iter()
    .map(|(u, s)| TrainingRow {
        utterance: u.to_string(),
        sql: s.to_string(),
    })
    .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate {
            grammar,
            lexicon,
            schema,
            out,
            count_only,
        } => {
            if count_only {
                let lex = load_lexicon(&lexicon)?;
                let g = Grammar::load(&grammar, &lex).map_err(|e| CliError::Usage(format!("grammar {}: {e}", grammar.display())))?;
                let n = count_expansions(&g, &lex).map_err(usage)?;
                println!("{n}");
                return Ok(());
            }
            let (pairs, _) = generate_pairs(&grammar, &lexicon, schema.as_deref())?;
            let out = out.expect("clap enforces --out");
            jsonl::write(&out, &pairs).map_err(stage)?;
            let templates: std::collections::BTreeSet<&str> = pairs.iter().map(|p| p.template_id.as_str()).collect();
            let with_abstract = pairs.iter().filter(|p| p.has_abstract()).count();
            println!(
                "{} pairs over {} templates ({} with abstract variables) written to {}",
                pairs.len(),
                templates.len(),
                with_abstract,
                out.display()
            );
        }
        Command::Sample {
            pairs,
            out,
            budget,
            seed,
        } => {
            let pairs: Vec<CanonicalPair> = jsonl::read(&pairs).map_err(usage)?;
            let (sample, report) = sample_uat(&pairs, budget, seed).map_err(usage)?;
            jsonl::write(&out, &sample).map_err(stage)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Paraphrase {
            pairs,
            out,
            providers,
            candidates_per_utterance,
        } => {
            if candidates_per_utterance == 0 {
                return Err(usage("--candidates-per-utterance must be at least 1"));
            }
            let pairs: Vec<CanonicalPair> = jsonl::read(&pairs).map_err(usage)?;
            let (cands, report) = paraphrase_all(&providers, &pairs, candidates_per_utterance);
            jsonl::write(&out, &cands).map_err(stage)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Filter {
            pairs,
            candidates,
            lexicon,
            out_dir,
            rounds,
            match_mode,
            backend,
        } => {
            let lex = load_lexicon(&lexicon)?;
            let pairs: Vec<CanonicalPair> = jsonl::read(&pairs).map_err(usage)?;
            let cands = jsonl::read(&candidates).map_err(usage)?;
            let backend = backend.spec()?.build(&lex);
            std::fs::create_dir_all(&out_dir).map_err(usage)?;
            let outcome = filter::run_filter(
                &pairs,
                &cands,
                backend.as_ref(),
                &FilterConfig {
                    rounds,
                    match_mode,
                    checkpoint: Some(out_dir.join("filter_checkpoint.json")),
                },
            )
            .map_err(stage)?;
            jsonl::write(out_dir.join("kept.jsonl"), &outcome.kept).map_err(stage)?;
            let table = filter::render_table(&outcome.reports);
            std::fs::write(out_dir.join("filter_rounds.jsonl"), filter::reports_jsonl(&outcome.reports)).map_err(stage)?;
            std::fs::write(out_dir.join("filter_table.txt"), &table).map_err(stage)?;
            print!("{table}");
        }
        Command::Evaluate {
            gold,
            predictions,
            train,
            lexicon,
            backend,
            json,
        } => {
            let gold: Vec<TrainingRow> = jsonl::read(&gold).map_err(usage)?;
            let preds: Vec<Option<String>> = match (predictions, train) {
                (Some(p), _) => jsonl::read::<Value>(&p)
                    .map_err(usage)?
                    .into_iter()
                    .map(|v| v.get("sql").and_then(Value::as_str).map(str::to_string))
                    .collect(),
                (None, Some(t)) => {
                    let lex = load_lexicon(lexicon.as_deref().expect("clap enforces --lexicon"))?;
                    let rows: Vec<TrainingRow> = jsonl::read(&t).map_err(usage)?;
                    let model = backend.spec()?.build(&lex).train(&rows).map_err(stage)?;
                    let utterances: Vec<String> = gold.iter().map(|r| r.utterance.clone()).collect();
                    model.predict_batch(&utterances).map_err(stage)?
                }
                (None, None) => unreachable!("clap requires one source of predictions"),
            };
            let gold_sql: Vec<String> = gold.into_iter().map(|r| r.sql).collect();
            let report = metrics::evaluate(&preds, &gold_sql).map_err(usage)?;
            if json {
                println!("{}", serde_json::to_string(&report).expect("report serializes"));
            } else {
                print!("{}", report.render());
            }
        }
        Command::Bleu {
            candidates,
            references,
            max_n,
            json,
        } => {
            let c = read_lines(&candidates)?;
            let r = read_lines(&references)?;
            let mut report = metrics::diversity(&c, &r).map_err(usage)?;
            report.bleu.retain(|n, _| *n <= max_n as usize);
            if json {
                println!("{}", serde_json::to_string(&report).expect("report serializes"));
            } else {
                print!("{}", report.render());
            }
        }
        Command::Pipeline { config, resume } => {
            let run = pipeline::run_pipeline(&config, resume)?;
            if let Some(table) = &run.filter_table {
                print!("{table}");
            }
            if let Some(eval) = &run.manifest.evaluation {
                print!("{}", eval.render());
            }
            println!("manifest written to {}", run.manifest_path.display());
        }
        Command::CheckProvider { provider, samples, n } => {
            let endpoint = provider
                .endpoint()
                .ok_or_else(|| usage("check-provider needs a subprocess or http provider"))?;
            let samples = match samples {
                Some(p) => read_lines(&p)?.into_iter().filter(|l| !l.trim().is_empty()).collect(),
                None => PROBE_UTTERANCES.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            };
            let report = check_provider(&endpoint, provider.timeout(), &samples, n);
            print!("{}", report.render());
            if !report.passed() {
                return Err(CliError::Stage(format!("{} conformance violation(s)", report.violations())));
            }
        }
        Command::CheckBackend { backend, train, lexicon } => {
            let rows = match &train {
                Some(p) => jsonl::read(p).map_err(usage)?,
                None => probe_rows(),
            };
            let spec = backend.spec()?;
            let report = match &spec {
                BackendSpec::Template { .. } => {
                    let lex = match &lexicon {
                        Some(p) => load_lexicon(p)?,
                        None => return Err(usage("the template backend needs --lexicon")),
                    };
                    check_backend(spec.build(&lex).as_ref(), &rows)
                }
                BackendSpec::Subprocess { command, timeout_ms } => check_backend_endpoint(
                    &Endpoint::Subprocess { command: command.clone() },
                    Duration::from_millis(*timeout_ms),
                    &rows,
                ),
                BackendSpec::Http { url, timeout_ms } => check_backend_endpoint(
                    &Endpoint::Http { url: url.clone() },
                    Duration::from_millis(*timeout_ms),
                    &rows,
                ),
            };
            print!("{}", report.render());
            if !report.passed() {
                return Err(CliError::Stage(format!("{} conformance violation(s)", report.violations())));
            }
        }
        Command::Serve {
            mode,
            seed,
            lexicon,
            fold_synonyms,
        } => {
            let lex = lexicon.as_deref().map(load_lexicon).transpose()?;
            let mut session: Box<dyn Session> = match mode {
                ServeMode::Paraphrase => Box::new(ParaphraseSession::new(seed, lex.as_ref())),
                ServeMode::Parser => {
                    let lex = lex.ok_or_else(|| usage("parser mode needs --lexicon"))?;
                    Box::new(ParserSession::new(
                        lex,
                        TemplateConfig {
                            fold_synonyms,
                            ..Default::default()
                        },
                    ))
                }
            };
            let stdin = io::stdin();
            serve_stream(session.as_mut(), stdin.lock(), io::stdout().lock()).map_err(stage)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Stage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
