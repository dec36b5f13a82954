//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqlboot::filter::{run_filter, verify_kept, FilterConfig, MatchMode};
use sqlboot::grammar::{count_expansions, expand, CanonicalPair};
use sqlboot::lexicon::Lexicon;
use sqlboot::metrics::{corpus_bleu, evaluate};
use sqlboot::paraphrase::{paraphrase_all, ParaphraseCandidate, ProviderSpec};
use sqlboot::parser::BackendSpec;
use sqlboot::pipeline::{generate_pairs, run_pipeline};
use sqlboot::sampler::{sample_uat, Budget};
use sqlboot::sql::{equal_exact, equal_no_order, parse_sql};

use common::{fixture, oracle_bleu, random_grammar, read_lines, QueryParts};

const GRAMMAR_CASES: u64 = 200;
const GRAMMAR_SECONDS: f64 = 30.0;
const SQL_PAIRS: usize = 10_000;
const BLEU_TOLERANCE: f64 = 1e-9;
const TOY_SECONDS: f64 = 10.0;

struct Suite {
    failures: usize,
}

impl Suite {
    fn check(&mut self, name: &str, result: Result<String, String>) {
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
}

fn ensure(cond: bool, ok: String, fail: String) -> Result<String, String> {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn grammar_criteria(suite: &mut Suite) {
    let start = Instant::now();
    let mut exhaustive = Ok(());
    let mut synchronous = Ok(());
    let mut total = 0u128;
    for seed in 0..GRAMMAR_CASES {
        let g = random_grammar(seed, 5, 4);
        let expected = count_expansions(&g.grammar, &g.lexicon).unwrap();
        let mut seen = HashSet::new();
        let mut streamed = 0u128;
        let mut dups = 0usize;
        for p in expand(&g.grammar, &g.lexicon) {
            streamed += 1;
            dups += usize::from(!seen.insert((p.utterance.clone(), p.sql.clone())));
            let concrete_ok = p
                .concrete_values()
                .all(|v| p.utterance.contains(v) && p.sql.contains(&format!("\"{v}\"")));
            let utt: HashSet<&str> = p.utterance.split_whitespace().filter(|t| t.starts_with('$')).collect();
            let sql: HashSet<&str> = p.sql.split_whitespace().filter(|t| t.starts_with('$')).collect();
            if (!concrete_ok || utt != sql) && synchronous.is_ok() {
                synchronous = Err(format!("seed {seed}: {} ||| {}", p.utterance, p.sql));
            }
        }
        total += streamed;
        if (streamed != expected || dups > 0) && exhaustive.is_ok() {
            exhaustive = Err(format!("seed {seed}: streamed {streamed}, counted {expected}, {dups} duplicates"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    suite.check(
        "grammar.exhaustive",
        exhaustive.and_then(|()| {
            ensure(
                secs < GRAMMAR_SECONDS,
                format!("{GRAMMAR_CASES} grammars, {total} pairs, 0 duplicates, {secs:.2}s < {GRAMMAR_SECONDS}s"),
                format!("took {secs:.2}s"),
            )
        }),
    );
    suite.check(
        "grammar.synchronous",
        synchronous.map(|()| format!("{total} pairs carry every value and $ token on both sides")),
    );
}

fn sql_criteria(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut both = 0usize;
    let mut violation = None;
    for _ in 0..SQL_PAIRS {
        let a = QueryParts::random(&mut rng);
        let b = match rng.random_range(0..3) {
            0 => a.clone(),
            1 => a.shuffled(&mut rng),
            _ => QueryParts::random(&mut rng),
        };
        let (qa, qb) = (parse_sql(&a.render()).unwrap(), parse_sql(&b.render()).unwrap());
        if equal_exact(&qa, &qb) {
            both += 1;
            if !equal_no_order(&qa, &qb) {
                violation = Some(format!("{} vs {}", a.render(), b.render()));
                break;
            }
        }
    }
    suite.check(
        "sql.exact_implies_no_order",
        match violation {
            None => Ok(format!("{SQL_PAIRS} pairs, {both} exact-equal, all no-order-equal")),
            Some(v) => Err(v),
        },
    );

    let gold = r#"SELECT va.victim FROM incidents AS va WHERE va.aggressor = "pirates" AND va.victim = "container ship""#;
    let pred = r#"SELECT va.victim FROM incidents AS va WHERE va.victim = "container ship" AND va.aggressor = "pirates""#;
    let (g, p) = (parse_sql(gold).unwrap(), parse_sql(pred).unwrap());
    let report = evaluate(&[Some(pred.to_string())], &[gold.to_string()]).unwrap();
    let (exact, no_order, f1) = (equal_exact(&g, &p), equal_no_order(&g, &p), report.component_f1);
    suite.check(
        "sql.where_reorder",
        ensure(
            !exact && no_order && f1 == 1.0,
            format!("exact={exact} no_order={no_order} component_f1={f1}"),
            format!("exact={exact} no_order={no_order} component_f1={f1}"),
        ),
    );
}

fn bleu_criteria(suite: &mut Suite) {
    let cands = read_lines(fixture("diversity_candidates.txt"));
    let refs = read_lines(fixture("diversity_references.txt"));
    let mut worst = 0.0f64;
    let mut scores = Vec::new();
    for n in 1..=4 {
        let fast = corpus_bleu(&cands, &refs, n).unwrap();
        worst = worst.max((fast - oracle_bleu(&cands, &refs, n)).abs());
        scores.push(format!("{fast:.4}"));
    }
    suite.check(
        "bleu.oracle",
        ensure(
            cands.len() == 100 && worst < BLEU_TOLERANCE,
            format!("{} sentences, BLEU-1..4 = {}, max |diff| = {worst:.2e} < {BLEU_TOLERANCE:e}", cands.len(), scores.join("/")),
            format!("max |diff| = {worst:e}"),
        ),
    );
    let identical: Vec<f64> = (1..=4).map(|n| corpus_bleu(&refs, &refs, n).unwrap()).collect();
    suite.check(
        "bleu.identical",
        ensure(
            identical.iter().all(|&s| s == 100.0),
            "BLEU-1..4 = 100.0 exactly".into(),
            format!("{identical:?}"),
        ),
    );
}

fn manual_candidate(p: &CanonicalPair, text: String) -> ParaphraseCandidate {
    ParaphraseCandidate {
        id: format!("t:{}:0", p.id),
        source_pair_ref: p.id,
        text,
        provider: "t".into(),
        round_kept: None,
        repairs: vec![],
        duplicate: false,
        invalid: None,
    }
}

fn filter_criteria(suite: &mut Suite, pairs: &[CanonicalPair], lex: &Lexicon) {
    let backend = BackendSpec::default().build(lex);
    let (sample, _) = sample_uat(pairs, Budget::Fraction(0.1), 7).unwrap();

    let identity: Vec<_> = sample.iter().map(|p| manual_candidate(p, p.utterance.clone())).collect();
    let out = run_filter(pairs, &identity, backend.as_ref(), &FilterConfig::default()).unwrap();
    let r1 = &out.reports[0];
    suite.check(
        "filter.identity",
        ensure(
            r1.kept_this_round == identity.len(),
            format!("round 1 kept {}/{} (100%)", r1.kept_this_round, identity.len()),
            format!("round 1 kept {}/{}", r1.kept_this_round, identity.len()),
        ),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise: Vec<_> = sample
        .iter()
        .map(|p| {
            let mut w = p.tokens();
            w.shuffle(&mut rng);
            w.reverse();
            manual_candidate(p, w.join(" "))
        })
        .collect();
    let out = run_filter(pairs, &noise, backend.as_ref(), &FilterConfig::default()).unwrap();
    suite.check(
        "filter.noise",
        ensure(
            out.kept.is_empty() && out.stopped_early && out.reports.len() == 1,
            format!("0/{} kept, stopped after round {}", noise.len(), out.reports.len()),
            format!("{} kept, {} rounds, stopped_early={}", out.kept.len(), out.reports.len(), out.stopped_early),
        ),
    );

    let (cands, _) = paraphrase_all(&[ProviderSpec::builtin("builtin", 7)], &sample, 2);
    let config = FilterConfig {
        rounds: 3,
        ..Default::default()
    };
    let out = run_filter(pairs, &cands, backend.as_ref(), &config).unwrap();
    let fractions: Vec<f64> = out.reports.iter().map(|r| r.cumulative_fraction).collect();
    let shown = fractions.iter().map(|f| format!("{f:.2}%")).collect::<Vec<_>>().join(" -> ");
    suite.check(
        "filter.monotone",
        ensure(
            fractions.windows(2).all(|w| w[0] <= w[1]),
            format!("cumulative {shown}"),
            format!("cumulative {shown}"),
        ),
    );
    let failing = verify_kept(&out.kept, MatchMode::Exact);
    suite.check(
        "filter.reverify",
        ensure(
            failing.is_empty() && !out.kept.is_empty(),
            format!("{} kept pairs re-verify", out.kept.len()),
            format!("{} of {} kept pairs fail: {:?}", failing.len(), out.kept.len(), failing.first()),
        ),
    );
}

fn toy_config(dir: &Path, body_extra: &str) -> std::path::PathBuf {
    let cfg = format!(
        "grammar = {:?}\nlexicon = {:?}\nschema = {:?}\nsample_fraction = 1.0\nseed = 7\nrounds = 3\ncandidates_per_utterance = 2\nout_dir = \"out\"\n{body_extra}\n[[provider]]\nname = \"builtin\"\nkind = \"builtin\"\n",
        fixture("toy.grammar").display().to_string(),
        fixture("toy.lexicon").display().to_string(),
        fixture("maritime.schema").display().to_string(),
    );
    let path = dir.join("toy.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn pipeline_criteria(suite: &mut Suite) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "");
    let start = Instant::now();
    let run = run_pipeline(&cfg, false);
    let secs = start.elapsed().as_secs_f64();
    suite.check(
        "filter.toy_pipeline_speed",
        match run {
            Ok(run) => {
                let rounds = run.manifest.filter.as_ref().map_or(0, |f| f.rounds.len());
                ensure(
                    run.manifest.counts.generated == 6 && secs < TOY_SECONDS,
                    format!("6 pairs, {rounds} rounds in {secs:.2}s < {TOY_SECONDS}s"),
                    format!("{} pairs in {secs:.2}s", run.manifest.counts.generated),
                )
            }
            Err(e) => Err(e.to_string()),
        },
    );

    let manifests: Vec<Result<Vec<u8>, String>> = (0..2)
        .map(|_| {
            let d = tempfile::tempdir().unwrap();
            let cfg = toy_config(d.path(), "");
            let out = Command::new(env!("CARGO_BIN_EXE_sqlboot"))
                .args(["pipeline", &cfg.display().to_string()])
                .output()
                .map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(String::from_utf8_lossy(&out.stderr).into_owned());
            }
            std::fs::read(d.path().join("out/manifest.json")).map_err(|e| e.to_string())
        })
        .collect();
    suite.check(
        "pipeline.deterministic_manifest",
        match (&manifests[0], &manifests[1]) {
            (Ok(a), Ok(b)) => ensure(
                a == b,
                format!("two runs, {} identical bytes", a.len()),
                "manifests differ".into(),
            ),
            (Err(e), _) | (_, Err(e)) => Err(e.clone()),
        },
    );
}

fn sampler_criteria(suite: &mut Suite, pairs: &[CanonicalPair]) {
    let templates: HashSet<&str> = pairs.iter().map(|p| p.template_id.as_str()).collect();
    let sizes: BTreeMap<&str, usize> = pairs.iter().fold(BTreeMap::new(), |mut m, p| {
        *m.entry(p.template_id.as_str()).or_insert(0) += 1;
        m
    });
    let mut coverage = Ok(());
    let mut balance = Ok(());
    let mut determinism = Ok(());
    for budget in [templates.len(), templates.len() + 1, 100, 177, 500, pairs.len()] {
        for seed in [0u64, 1, 99] {
            let (a, report) = sample_uat(pairs, Budget::Count(budget), seed).unwrap();
            let (b, _) = sample_uat(pairs, Budget::Count(budget), seed).unwrap();
            if a != b && determinism.is_ok() {
                determinism = Err(format!("budget {budget} seed {seed} differs between runs"));
            }
            let seen: HashSet<&str> = a.iter().map(|p| p.template_id.as_str()).collect();
            if seen.len() != templates.len() && coverage.is_ok() {
                coverage = Err(format!("budget {budget}: {} of {} templates", seen.len(), templates.len()));
            }
            let open: Vec<usize> = report
                .allocation
                .iter()
                .filter(|(t, &c)| c < sizes[t.as_str()])
                .map(|(_, &c)| c)
                .collect();
            if let Some(&lo) = open.iter().min() {
                if report.allocation.values().any(|&c| c > lo + 1) && balance.is_ok() {
                    balance = Err(format!("budget {budget}: allocation {:?}", report.allocation));
                }
            }
        }
    }
    suite.check(
        "sampler.coverage",
        coverage.map(|()| format!("all {} templates present for budgets >= {}", templates.len(), templates.len())),
    );
    suite.check("sampler.balance", balance.map(|()| "per-template counts differ by <= 1".into()));
    suite.check("sampler.deterministic", determinism.map(|()| "identical samples for equal seeds".into()));
}

fn budget_trend(suite: &mut Suite) {
    let mut scores = Vec::new();
    for fraction in [0.0, 0.1, 0.2] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = format!(
            "grammar = {:?}\nlexicon = {:?}\nschema = {:?}\nheldout = {:?}\nsample_fraction = {fraction}\nseed = 7\nrounds = 3\ncandidates_per_utterance = 2\nout_dir = \"out\"\n[backend]\nkind = \"template\"\nfold_synonyms = false\n[[provider]]\nname = \"builtin\"\nkind = \"builtin\"\n",
            fixture("maritime.grammar").display().to_string(),
            fixture("maritime.lexicon").display().to_string(),
            fixture("maritime.schema").display().to_string(),
            fixture("maritime_heldout.jsonl").display().to_string(),
        );
        let path = dir.path().join("trend.toml");
        std::fs::write(&path, cfg).unwrap();
        match run_pipeline(&path, false) {
            Ok(run) => match run.manifest.evaluation {
                Some(e) => scores.push((fraction, 100.0 * e.component_f1)),
                None => return suite.check("budget.trend", Err("no held-out evaluation".into())),
            },
            Err(e) => return suite.check("budget.trend", Err(e.to_string())),
        }
    }
    let shown = scores
        .iter()
        .map(|(f, s)| format!("{:.0}%: {s:.2}", 100.0 * f))
        .collect::<Vec<_>>()
        .join(", ");
    suite.check(
        "budget.trend",
        ensure(
            scores.windows(2).all(|w| w[0].1 <= w[1].1),
            format!("held-out component F1 {shown}"),
            format!("held-out component F1 {shown}"),
        ),
    );
}

fn main() {
    let mut suite = Suite { failures: 0 };
    let (pairs, lex) = generate_pairs(
        &fixture("maritime.grammar"),
        &fixture("maritime.lexicon"),
        Some(&fixture("maritime.schema")),
    )
    .expect("maritime fixtures load");

    grammar_criteria(&mut suite);
    sql_criteria(&mut suite);
    bleu_criteria(&mut suite);
    filter_criteria(&mut suite, &pairs, &lex);
    pipeline_criteria(&mut suite);
    sampler_criteria(&mut suite, &pairs);
    budget_trend(&mut suite);

    if suite.failures > 0 {
        println!("{} acceptance criteria failed", suite.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
