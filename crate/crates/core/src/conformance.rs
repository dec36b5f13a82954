//! Conformance suites for external paraphrase providers and parser backends.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::paraphrase::decode_paraphrases;
use crate::parser::{ParserBackend, ParserModel};
use crate::protocol::{
    self, BackendRequest, BackendResponse, Channel, Endpoint, ParaphraseRequest, ParaphraseResponse, TrainingRow,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub target: String,
    pub checks: Vec<Check>,
}

impl ConformanceReport {
    fn record(&mut self, name: &str, result: Result<(), String>) {
        let (passed, detail) = match result {
            Ok(()) => (true, String::new()),
            Err(d) => (false, d),
        };
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    pub fn violations(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }

    pub fn render(&self) -> String {
        let mut out = format!("conformance: {}\n", self.target);
        for c in &self.checks {
            let status = if c.passed { "ok  " } else { "FAIL" };
            if c.detail.is_empty() {
                out.push_str(&format!("  {status} {}\n", c.name));
            } else {
                out.push_str(&format!("  {status} {}: {}\n", c.name, c.detail));
            }
        }
        out.push_str(&format!("  {} violation(s)\n", self.violations()));
        out
    }
}

fn exchange(ch: &mut Channel, lines: &[String], expected: usize) -> Result<Vec<String>, String> {
    ch.exchange(lines, expected).map_err(|e| e.to_string())
}

/// Exercises a paraphrase endpoint with `samples`, asking for `n` candidates each.
pub fn check_provider(endpoint: &Endpoint, timeout: Duration, samples: &[String], n: usize) -> ConformanceReport {
    let mut report = ConformanceReport {
        target: endpoint.describe(),
        ..Default::default()
    };
    let mut ch = match endpoint.connect(timeout) {
        Ok(ch) => ch,
        Err(e) => {
            report.record("connect", Err(e.to_string()));
            return report;
        }
    };
    report.record("connect", Ok(()));

    let requests: Vec<ParaphraseRequest> = samples
        .iter()
        .enumerate()
        .map(|(i, t)| ParaphraseRequest {
            id: format!("c{i}"),
            text: t.clone(),
            n,
        })
        .collect();
    let lines: Vec<String> = requests.iter().map(protocol::to_line).collect();

    let first = exchange(&mut ch, &lines, lines.len());
    let decoded = first
        .as_ref()
        .map_err(Clone::clone)
        .and_then(|resp| decode_paraphrases(&requests, resp).map_err(|e| e.to_string()));
    report.record("order_and_id_echo", decoded.as_ref().map(|_| ()).map_err(Clone::clone));
    report.record(
        "n_respected",
        match &decoded {
            Ok(lists) => lists
                .iter()
                .zip(&requests)
                .find(|(l, _)| l.len() > n)
                .map_or(Ok(()), |(l, r)| Err(format!("{} returned {} candidates for n={n}", r.id, l.len()))),
            Err(_) => Err("no decodable response".into()),
        },
    );
    report.record(
        "totality",
        match &decoded {
            Ok(lists) => lists
                .iter()
                .flatten()
                .find(|c| c.trim().is_empty())
                .map_or(Ok(()), |_| Err("empty candidate text".into())),
            Err(_) => Err("no decodable response".into()),
        },
    );

    let second = exchange(&mut ch, &lines, lines.len());
    report.record(
        "determinism",
        match (&first, &second) {
            (Ok(a), Ok(b)) if a == b => Ok(()),
            (Ok(_), Ok(_)) => Err("repeated batch produced different responses".into()),
            (_, Err(e)) | (Err(e), _) => Err(e.clone()),
        },
    );

    let bad = r#"{"id":"bad","text":42}"#.to_string();
    report.record(
        "bad_request",
        exchange(&mut ch, &[bad], 1).and_then(|resp| {
            let r: ParaphraseResponse = serde_json::from_str(&resp[0]).map_err(|e| e.to_string())?;
            match r.error {
                Some(e) if !e.code.is_empty() => Ok(()),
                _ => Err("malformed request was not answered with an error object".into()),
            }
        }),
    );
    report
}

fn decode_backend(line: &str, id: &str) -> Result<BackendResponse, String> {
    let r: BackendResponse = serde_json::from_str(line).map_err(|e| format!("unreadable response: {e}"))?;
    if let Some(e) = &r.error {
        return Err(format!("error {}: {}", e.code, e.message));
    }
    if r.id.as_deref() != Some(id) {
        return Err(format!("response id {:?} does not echo {id}", r.id));
    }
    Ok(r)
}

/// Exercises a backend endpoint at the wire level: train twice on `rows`,
/// predict every training utterance under both models.
pub fn check_backend_endpoint(endpoint: &Endpoint, timeout: Duration, rows: &[TrainingRow]) -> ConformanceReport {
    let mut report = ConformanceReport {
        target: endpoint.describe(),
        ..Default::default()
    };
    let mut ch = match endpoint.connect(timeout) {
        Ok(ch) => ch,
        Err(e) => {
            report.record("connect", Err(e.to_string()));
            return report;
        }
    };
    report.record("connect", Ok(()));

    let train = |ch: &mut Channel, id: &str| -> Result<String, String> {
        let mut lines = vec![protocol::to_line(&BackendRequest::Train {
            id: id.to_string(),
            count: rows.len(),
        })];
        lines.extend(rows.iter().map(protocol::to_line));
        let resp = exchange(ch, &lines, 1)?;
        decode_backend(&resp[0], id)?
            .model
            .ok_or_else(|| "train response has no model".to_string())
    };
    let model_a = train(&mut ch, "train-a");
    report.record("train", model_a.as_ref().map(|_| ()).map_err(Clone::clone));
    let model_b = train(&mut ch, "train-b");

    let predict_all = |ch: &mut Channel, model: &str| -> Result<Vec<Option<String>>, String> {
        let lines: Vec<String> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                protocol::to_line(&BackendRequest::Predict {
                    id: format!("q{i}"),
                    model: model.to_string(),
                    text: r.utterance.clone(),
                })
            })
            .collect();
        let resp = exchange(ch, &lines, lines.len())?;
        resp.iter()
            .enumerate()
            .map(|(i, line)| {
                decode_backend(line, &format!("q{i}"))?
                    .sql
                    .ok_or_else(|| format!("q{i}: predict response lacks the sql field"))
            })
            .collect()
    };

    match &model_a {
        Ok(a) => {
            let p1 = predict_all(&mut ch, a);
            report.record("order_id_echo_and_totality", p1.as_ref().map(|_| ()).map_err(Clone::clone));
            let p2 = predict_all(&mut ch, a);
            report.record(
                "predict_determinism",
                match (&p1, &p2) {
                    (Ok(x), Ok(y)) if x == y => Ok(()),
                    (Ok(_), Ok(_)) => Err("same model, same input, different output".into()),
                    (_, Err(e)) | (Err(e), _) => Err(e.clone()),
                },
            );
            let reproducible = model_b.clone().and_then(|b| {
                let pb = predict_all(&mut ch, &b)?;
                match &p1 {
                    Ok(x) if *x == pb => Ok(()),
                    Ok(_) => Err("retraining on the same data changed predictions".into()),
                    Err(e) => Err(e.clone()),
                }
            });
            report.record("train_reproducibility", reproducible);
        }
        Err(_) => {
            for name in ["order_id_echo_and_totality", "predict_determinism", "train_reproducibility"] {
                report.record(name, Err("training failed".into()));
            }
        }
    }

    let bad = r#"{"verb":"explode","id":"bad"}"#.to_string();
    report.record(
        "bad_request",
        exchange(&mut ch, &[bad], 1).and_then(|resp| {
            let r: BackendResponse = serde_json::from_str(&resp[0]).map_err(|e| e.to_string())?;
            match r.error {
                Some(e) if !e.code.is_empty() => Ok(()),
                _ => Err("unknown verb was not answered with an error object".into()),
            }
        }),
    );
    report
}

/// Contract checks through the [`ParserBackend`] trait: totality,
/// determinism and reproducibility of training.
pub fn check_backend(backend: &dyn ParserBackend, rows: &[TrainingRow]) -> ConformanceReport {
    let mut report = ConformanceReport {
        target: format!("{:?}", backend.spec()),
        ..Default::default()
    };
    let utterances: Vec<String> = rows.iter().map(|r| r.utterance.clone()).collect();
    let run = |m: &dyn ParserModel| m.predict_batch(&utterances).map_err(|e| e.to_string());
    let a = backend.train(rows).map_err(|e| e.to_string());
    report.record("train", a.as_ref().map(|_| ()).map_err(Clone::clone));
    let Ok(a) = a else {
        return report;
    };
    let p1 = run(a.as_ref());
    report.record(
        "totality",
        p1.as_ref().map_err(Clone::clone).and_then(|p| {
            if p.len() == utterances.len() {
                Ok(())
            } else {
                Err(format!("{} answers for {} inputs", p.len(), utterances.len()))
            }
        }),
    );
    let p2 = run(a.as_ref());
    report.record(
        "predict_determinism",
        match (&p1, &p2) {
            (Ok(x), Ok(y)) if x == y => Ok(()),
            (Ok(_), Ok(_)) => Err("same model, same input, different output".into()),
            (_, Err(e)) | (Err(e), _) => Err(e.clone()),
        },
    );
    let reproducible = backend
        .train(rows)
        .map_err(|e| e.to_string())
        .and_then(|b| run(b.as_ref()))
        .and_then(|pb| match &p1 {
            Ok(x) if *x == pb => Ok(()),
            Ok(_) => Err("retraining on the same data changed predictions".into()),
            Err(e) => Err(e.clone()),
        });
    report.record("train_reproducibility", reproducible);
    report
}
