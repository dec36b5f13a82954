//! Newline-delimited JSON wire protocol spoken by external paraphrase
//! providers and parser backends, over a child process's stdio or HTTP.
//!
//! Paraphrase: request `{"id", "text", "n"}`, response `{"id", "candidates": [..]}`.
//!
//! Parser: `{"verb": "train", "id", "count": N}` followed by N lines of
//! `{"utterance", "sql"}` answers `{"id", "model"}`; `{"verb": "predict", "id",
//! "model", "text"}` answers `{"id", "sql": text-or-null}`.
//!
//! Any request may instead be answered with `{"id", "error": {"code", "message"}}`.
//! Responses are order aligned with requests.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("cannot start '{command}': {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("endpoint closed the stream")]
    Closed,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("http error: {0}")]
    Http(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("endpoint error {code}: {message}")]
    Remote { code: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseRequest {
    pub id: String,
    pub text: String,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verb", rename_all = "lowercase")]
pub enum BackendRequest {
    Train { id: String, count: usize },
    Predict { id: String, model: String, text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub utterance: String,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct BackendResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Present (possibly null) on predict responses.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "nullable")]
    pub sql: Option<Option<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

/// Distinguishes an absent `sql` field from an explicit `null`.
mod nullable {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Option<String>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(inner) => inner.serialize(s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Option<String>>, D::Error> {
        Option::<String>::deserialize(d).map(Some)
    }
}

/// Where an external endpoint lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Endpoint {
    Subprocess { command: Vec<String> },
    Http { url: String },
}

impl Endpoint {
    /// `subprocess:<command line>` or `http:<url>`.
    pub fn parse(kind: &str, target: &str) -> Option<Endpoint> {
        match kind {
            "subprocess" => {
                let command: Vec<String> = target.split_whitespace().map(str::to_string).collect();
                (!command.is_empty()).then_some(Endpoint::Subprocess { command })
            }
            "http" => (!target.trim().is_empty()).then(|| Endpoint::Http {
                url: target.trim().to_string(),
            }),
            _ => None,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Endpoint::Subprocess { command } => format!("subprocess:{}", command.join(" ")),
            Endpoint::Http { url } => format!("http:{url}"),
        }
    }

    pub fn connect(&self, timeout: Duration) -> Result<Channel, TransportError> {
        match self {
            Endpoint::Subprocess { command } => Ok(Channel::Process(ProcessChannel::spawn(command, timeout)?)),
            Endpoint::Http { url } => Ok(Channel::Http(HttpChannel::new(url, timeout))),
        }
    }
}

/// A live connection able to exchange a block of request lines for the
/// same number of response lines.
pub enum Channel {
    Process(ProcessChannel),
    Http(HttpChannel),
}

impl Channel {
    /// Sends `lines` and collects `expected` response lines.
    pub fn exchange(&mut self, lines: &[String], expected: usize) -> Result<Vec<String>, TransportError> {
        match self {
            Channel::Process(p) => p.exchange(lines, expected),
            Channel::Http(h) => h.exchange(lines, expected),
        }
    }
}

pub struct ProcessChannel {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
}

impl ProcessChannel {
    pub fn spawn(command: &[String], timeout: Duration) -> Result<ProcessChannel, TransportError> {
        let (program, args) = command.split_first().ok_or(TransportError::Closed)?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| TransportError::Spawn {
                command: command.join(" "),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ProcessChannel {
            child,
            stdin,
            lines: rx,
            timeout,
        })
    }

    fn exchange(&mut self, lines: &[String], expected: usize) -> Result<Vec<String>, TransportError> {
        for line in lines {
            self.stdin.write_all(line.as_bytes())?;
            self.stdin.write_all(b"\n")?;
        }
        self.stdin.flush()?;
        let deadline = Instant::now() + self.timeout;
        let mut out = Vec::with_capacity(expected);
        while out.len() < expected {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.lines.recv_timeout(left) {
                Ok(Ok(line)) if line.trim().is_empty() => {}
                Ok(Ok(line)) => out.push(line),
                Ok(Err(e)) => return Err(e.into()),
                Err(RecvTimeoutError::Timeout) => return Err(TransportError::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Closed),
            }
        }
        Ok(out)
    }
}

impl Drop for ProcessChannel {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct HttpChannel {
    agent: ureq::Agent,
    url: String,
}

impl HttpChannel {
    pub fn new(url: &str, timeout: Duration) -> HttpChannel {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpChannel {
            agent,
            url: url.to_string(),
        }
    }

    fn exchange(&mut self, lines: &[String], expected: usize) -> Result<Vec<String>, TransportError> {
        let mut body = lines.join("\n");
        body.push('\n');
        let mut response = self
            .agent
            .post(&self.url)
            .content_type("application/x-ndjson")
            .send(body)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => TransportError::Timeout(Duration::ZERO),
                other => TransportError::Http(other.to_string()),
            })?;
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Http(e.to_string()))?;
        let out: Vec<String> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect();
        if out.len() != expected {
            return Err(TransportError::Malformed(format!(
                "expected {expected} response lines, got {}",
                out.len()
            )));
        }
        Ok(out)
    }
}

pub fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("protocol messages serialize")
}
