//! Reference endpoints for both wire protocols, built from the builtin
//! paraphraser and template parser. They back `sqlboot serve` and give the
//! external transports and conformance checkers something real to talk to.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde_json::Value;

use crate::lexicon::Lexicon;
use crate::paraphrase::builtin_paraphrase;
use crate::parser::{train_template_parser, ParserModel, TemplateConfig, TemplateParserModel};
use crate::protocol::{
    self, BackendRequest, BackendResponse, ErrorBody, ParaphraseRequest, ParaphraseResponse, TrainingRow,
};
use crate::text;

/// Consumes request lines one at a time, producing a response line whenever
/// a request is complete.
pub trait Session {
    fn feed(&mut self, line: &str) -> Option<String>;
}

fn error_line(id: Option<String>, code: &str, message: impl Into<String>) -> String {
    protocol::to_line(&BackendResponse {
        id,
        error: Some(ErrorBody {
            code: code.to_string(),
            message: message.into(),
        }),
        ..Default::default()
    })
}

fn request_id(line: &str) -> Option<String> {
    let v: Value = serde_json::from_str(line).ok()?;
    match v.get("id")? {
        Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

pub struct ParaphraseSession {
    seed: u64,
    protected: Vec<Vec<String>>,
}

impl ParaphraseSession {
    /// Values of `lexicon` (if any) are protected from rewriting.
    pub fn new(seed: u64, lexicon: Option<&Lexicon>) -> ParaphraseSession {
        let protected = lexicon
            .map(|lex| {
                lex.iter()
                    .filter(|v| !v.is_abstract())
                    .flat_map(|v| v.values.iter().map(|x| text::tokenize(x)))
                    .collect()
            })
            .unwrap_or_default();
        ParaphraseSession { seed, protected }
    }
}

impl Session for ParaphraseSession {
    fn feed(&mut self, line: &str) -> Option<String> {
        if line.trim().is_empty() {
            return None;
        }
        let req: ParaphraseRequest = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => return Some(error_line(request_id(line), "bad_request", e.to_string())),
        };
        let candidates = if req.n == 0 {
            Vec::new()
        } else {
            builtin_paraphrase(&text::tokenize(&req.text), &self.protected, self.seed, req.n)
        };
        Some(protocol::to_line(&ParaphraseResponse {
            id: Some(req.id),
            candidates: Some(candidates),
            error: None,
        }))
    }
}

pub struct ParserSession {
    lexicon: Lexicon,
    config: TemplateConfig,
    models: BTreeMap<String, TemplateParserModel>,
    pending: Option<(String, usize, Vec<TrainingRow>, Option<String>)>,
}

impl ParserSession {
    pub fn new(lexicon: Lexicon, config: TemplateConfig) -> ParserSession {
        ParserSession {
            lexicon,
            config,
            models: BTreeMap::new(),
            pending: None,
        }
    }

    fn finish_training(&mut self) -> Option<String> {
        let (id, _, rows, failure) = self.pending.take()?;
        if let Some(msg) = failure {
            return Some(error_line(Some(id), "bad_request", msg));
        }
        match train_template_parser(&rows, &self.lexicon, self.config) {
            Ok(model) => {
                let model_id = model.id().to_string();
                self.models.insert(model_id.clone(), model);
                Some(protocol::to_line(&BackendResponse {
                    id: Some(id),
                    model: Some(model_id),
                    ..Default::default()
                }))
            }
            Err(e) => Some(error_line(Some(id), "train_failed", e.to_string())),
        }
    }
}

impl Session for ParserSession {
    fn feed(&mut self, line: &str) -> Option<String> {
        if line.trim().is_empty() {
            return None;
        }
        if let Some((_, remaining, rows, failure)) = self.pending.as_mut() {
            match serde_json::from_str::<TrainingRow>(line) {
                Ok(row) => rows.push(row),
                Err(e) => {
                    failure.get_or_insert_with(|| format!("training row {}: {e}", rows.len()));
                }
            }
            *remaining -= 1;
            return if *remaining == 0 { self.finish_training() } else { None };
        }
        let req: BackendRequest = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => return Some(error_line(request_id(line), "bad_request", e.to_string())),
        };
        match req {
            BackendRequest::Train { id, count } => {
                self.pending = Some((id, count, Vec::with_capacity(count), None));
                if count == 0 {
                    self.finish_training()
                } else {
                    None
                }
            }
            BackendRequest::Predict { id, model, text } => match self.models.get(&model) {
                None => Some(error_line(Some(id), "unknown_model", format!("no model {model}"))),
                Some(m) => {
                    let sql = m.predict(&text).ok().flatten();
                    Some(protocol::to_line(&BackendResponse {
                        id: Some(id),
                        sql: Some(sql),
                        ..Default::default()
                    }))
                }
            },
        }
    }
}

/// Runs a session over a line stream, flushing after every response.
pub fn serve_stream(session: &mut dyn Session, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    for line in input.lines() {
        if let Some(resp) = session.feed(&line?) {
            output.write_all(resp.as_bytes())?;
            output.write_all(b"\n")?;
            output.flush()?;
        }
    }
    Ok(())
}

/// Feeds a whole request body and returns the response body.
pub fn serve_block(session: &mut dyn Session, body: &str) -> String {
    let mut out = String::new();
    for line in body.lines() {
        if let Some(resp) = session.feed(line) {
            out.push_str(&resp);
            out.push('\n');
        }
    }
    out
}
