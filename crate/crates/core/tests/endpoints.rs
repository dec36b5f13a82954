mod common;

use std::time::Duration;

use sqlboot::conformance::{check_backend, check_backend_endpoint, check_provider};
use sqlboot::grammar::{expand, Grammar};
use sqlboot::lexicon::Lexicon;
use sqlboot::paraphrase::{paraphrase_all, ProviderSpec, ProviderTransport};
use sqlboot::parser::{BackendSpec, TemplateConfig};
use sqlboot::protocol::{Endpoint, TrainingRow};
use sqlboot::serve::{ParaphraseSession, ParserSession, Session};

use common::{fixture, http_server};

const BIN: &str = env!("CARGO_BIN_EXE_sqlboot");
const TIMEOUT: Duration = Duration::from_secs(20);

fn toy() -> (Lexicon, Vec<sqlboot::grammar::CanonicalPair>) {
    let lex = Lexicon::load(fixture("toy.lexicon")).unwrap();
    let g = Grammar::load(fixture("toy.grammar"), &lex).unwrap();
    let pairs = expand(&g, &lex).collect();
    (lex, pairs)
}

fn rows(pairs: &[sqlboot::grammar::CanonicalPair]) -> Vec<TrainingRow> {
    pairs
        .iter()
        .map(|p| TrainingRow {
            utterance: p.utterance.clone(),
            sql: sqlboot::sql::normalize(&p.sql).unwrap(),
        })
        .collect()
}

fn serve_command(mode: &str) -> Vec<String> {
    let lexicon = fixture("toy.lexicon").display().to_string();
    vec![BIN.into(), "serve".into(), "--mode".into(), mode.into(), "--lexicon".into(), lexicon]
}

fn samples() -> Vec<String> {
    toy().1.iter().map(|p| p.utterance.clone()).collect()
}

#[test]
fn subprocess_paraphrase_endpoint_conforms() {
    let ep = Endpoint::Subprocess {
        command: serve_command("paraphrase"),
    };
    let report = check_provider(&ep, TIMEOUT, &samples(), 3);
    assert!(report.passed(), "{}", report.render());
}

#[test]
fn http_paraphrase_endpoint_conforms() {
    let url = http_server(Box::new(ParaphraseSession::new(0, None)));
    let report = check_provider(&Endpoint::Http { url }, TIMEOUT, &samples(), 3);
    assert!(report.passed(), "{}", report.render());
}

#[test]
fn subprocess_backend_endpoint_conforms() {
    let ep = Endpoint::Subprocess {
        command: serve_command("parser"),
    };
    let report = check_backend_endpoint(&ep, TIMEOUT, &rows(&toy().1));
    assert!(report.passed(), "{}", report.render());
}

#[test]
fn http_backend_endpoint_conforms() {
    let (lex, pairs) = toy();
    let url = http_server(Box::new(ParserSession::new(lex, TemplateConfig::default())));
    let report = check_backend_endpoint(&Endpoint::Http { url }, TIMEOUT, &rows(&pairs));
    assert!(report.passed(), "{}", report.render());
}

#[test]
fn echo_provider_is_rejected() {
    // `cat` echoes requests: ids match but there are no candidates.
    let ep = Endpoint::Subprocess {
        command: vec!["cat".into()],
    };
    let report = check_provider(&ep, Duration::from_secs(5), &samples(), 2);
    assert!(!report.passed());
    assert!(report.violations() >= 1, "{}", report.render());
}

struct WrongId;

impl Session for WrongId {
    fn feed(&mut self, _line: &str) -> Option<String> {
        Some(r#"{"id":"nope","candidates":["x"]}"#.into())
    }
}

#[test]
fn wrong_id_provider_is_rejected() {
    let url = http_server(Box::new(WrongId));
    let report = check_provider(&Endpoint::Http { url }, TIMEOUT, &samples(), 1);
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert!(failed.contains(&"order_and_id_echo"), "{}", report.render());
    assert!(failed.contains(&"bad_request"), "{}", report.render());
}

#[test]
fn unreachable_endpoints_fail_connect_or_exchange() {
    let ep = Endpoint::Subprocess {
        command: vec!["/no/such/binary".into()],
    };
    let report = check_provider(&ep, Duration::from_secs(1), &samples(), 1);
    assert!(!report.checks[0].passed);
    let report = check_provider(
        &Endpoint::Http {
            url: "http://127.0.0.1:9/".into(),
        },
        Duration::from_secs(2),
        &samples(),
        1,
    );
    assert!(!report.passed());
}

#[test]
fn external_providers_agree_with_builtin() {
    let (_, pairs) = toy();
    let builtin = ProviderSpec::builtin("p", 5);
    let mut sub = ProviderSpec::from_parts("p", "subprocess", Some(&format!("{BIN} serve --mode paraphrase --seed 5"))).unwrap();
    sub.batch_size = 4;
    let (a, ra) = paraphrase_all(&[builtin], &pairs, 3);
    let (b, rb) = paraphrase_all(&[sub], &pairs, 3);
    assert_eq!(ra.per_provider["p"].errors, 0);
    assert_eq!(rb.per_provider["p"].errors, 0, "{rb:?}");
    let texts = |c: &[sqlboot::paraphrase::ParaphraseCandidate]| c.iter().map(|c| c.text.clone()).collect::<Vec<_>>();
    assert_eq!(texts(&a), texts(&b));
}

#[test]
fn provider_errors_are_counted_not_fatal() {
    let (_, pairs) = toy();
    let dead = ProviderSpec {
        name: "dead".into(),
        transport: ProviderTransport::Subprocess {
            command: vec!["/no/such/binary".into()],
        },
        batch_size: 2,
        timeout_ms: 1000,
    };
    let (cands, report) = paraphrase_all(&[ProviderSpec::builtin("ok", 0), dead], &pairs, 2);
    assert!(!cands.is_empty());
    assert!(cands.iter().all(|c| c.provider == "ok"));
    assert!(report.per_provider["dead"].errors > 0);
}

#[test]
fn external_backend_matches_in_process_template() {
    let (lex, pairs) = toy();
    let train = rows(&pairs);
    let local = BackendSpec::default().build(&lex).train(&train).unwrap();
    let remote_spec = BackendSpec::Subprocess {
        command: serve_command("parser"),
        timeout_ms: 20_000,
    };
    let backend = remote_spec.build(&lex);
    let report = check_backend(backend.as_ref(), &train);
    assert!(report.passed(), "{}", report.render());
    let remote = backend.train(&train).unwrap();
    let queries: Vec<String> = pairs
        .iter()
        .map(|p| p.utterance.replace("have been", "were"))
        .chain(["complete nonsense".to_string()])
        .collect();
    assert_eq!(local.predict_batch(&queries).unwrap(), remote.predict_batch(&queries).unwrap());
    assert_eq!(local.id(), remote.id());
}
