//! Shared helpers for integration tests: fixture paths, a seeded random
//! grammar generator, a random SQL generator, a brute-force BLEU oracle and a
//! minimal HTTP server wrapping a reference session.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sqlboot::grammar::{Grammar, GrammarError};
use sqlboot::lexicon::Lexicon;
use sqlboot::serve::{serve_block, Session};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub struct RandomGrammar {
    pub lexicon: Lexicon,
    pub grammar: Grammar,
    pub lexicon_text: String,
    pub grammar_text: String,
}

/// Builds an acyclic grammar with at most `max_rules` rules and at most
/// `max_values` values per concrete variable. Nonterminal `Ni` only refers
/// to `Nj` with `j > i`; every rule starts with its own marker literal on
/// both sides so distinct derivations give distinct pairs.
pub fn random_grammar(seed: u64, max_rules: usize, max_values: usize) -> RandomGrammar {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n_concrete = rng.random_range(1..=3);
        let n_abstract = rng.random_range(0..=2);
        let mut lexicon_text = String::new();
        let mut vars: Vec<(String, bool)> = Vec::new();
        for c in 0..n_concrete {
            let name = format!("c{c}");
            lexicon_text.push_str(&format!("var {name} : t.{name}\n"));
            for k in 0..rng.random_range(1..=max_values) {
                if rng.random_bool(0.3) {
                    lexicon_text.push_str(&format!("  \"w{c}x{k} tail{k}\"\n"));
                } else {
                    lexicon_text.push_str(&format!("  \"w{c}x{k}\"\n"));
                }
            }
            vars.push((name, false));
        }
        for a in 0..n_abstract {
            let name = format!("a{a}");
            lexicon_text.push_str(&format!("abstract {name} : t.{name}\n"));
            vars.push((name, true));
        }
        let lexicon = Lexicon::parse(&lexicon_text).expect("generated lexicon parses");

        let n_rules = rng.random_range(1..=max_rules);
        let n_nts = rng.random_range(1..=n_rules.min(3));
        // Every nonterminal gets one rule; the rest are spread at random.
        let mut owners: Vec<usize> = (0..n_nts).collect();
        for _ in n_nts..n_rules {
            owners.push(rng.random_range(0..n_nts));
        }
        owners.sort_unstable();

        let mut grammar_text = String::from("%start N0\n");
        for (r, &nt) in owners.iter().enumerate() {
            let mut items: Vec<(String, String)> = Vec::new();
            for (name, is_abstract) in &vars {
                if rng.random_bool(0.4) {
                    let sql = if *is_abstract { format!("${name}") } else { format!("{{{name}}}") };
                    items.push((format!("${name}"), sql));
                }
            }
            for child in nt + 1..n_nts {
                if rng.random_bool(0.5) {
                    items.push((format!("N{child}"), format!("<N{child}>")));
                }
            }
            items.shuffle(&mut rng);
            let utt: Vec<&str> = items.iter().map(|(u, _)| u.as_str()).collect();
            let mut sql: Vec<&str> = items.iter().map(|(_, s)| s.as_str()).collect();
            if rng.random_bool(0.5) {
                sql.shuffle(&mut rng);
            }
            grammar_text.push_str(&format!(
                "[r{r}] N{nt} -> \"m{r}\" {} ||| m{r} {}\n",
                utt.join(" "),
                sql.join(" ")
            ));
        }
        match Grammar::parse(&grammar_text, &lexicon) {
            Ok(grammar) => {
                return RandomGrammar {
                    lexicon,
                    grammar,
                    lexicon_text,
                    grammar_text,
                }
            }
            Err(GrammarError::DoubleBinding { .. }) => continue,
            Err(e) => panic!("generator produced an invalid grammar: {e}\n{grammar_text}"),
        }
    }
}

/// Independent derivation count: Σ over rules of Π of value counts and child counts.
pub fn oracle_count(g: &RandomGrammar) -> u128 {
    fn count(g: &RandomGrammar, nt: &str) -> u128 {
        g.grammar
            .rules()
            .iter()
            .filter(|r| r.lhs == nt)
            .map(|r| {
                let mut n: u128 = 1;
                for s in r.utterance_slots() {
                    let var = g.lexicon.get(s).expect("declared slot");
                    n *= if var.is_abstract() { 1 } else { var.values.len() as u128 };
                }
                for c in r.children() {
                    n *= count(g, c);
                }
                n
            })
            .sum()
    }
    count(g, g.grammar.start())
}

const COLUMNS: &[&str] = &["va.victim", "va.aggressor", "va.weapon", "va.location", "va.date", "va.id"];
const VALUES: &[&str] = &["\"pirates\"", "\"container ship\"", "\"guns\"", "3", "$loc", "$dat"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

/// Clause lists for a random query in the supported subset.
#[derive(Debug, Clone)]
pub struct QueryParts {
    pub distinct: bool,
    pub select: Vec<String>,
    pub conds: Vec<String>,
    pub group: Vec<String>,
    pub order: Vec<String>,
}

impl QueryParts {
    pub fn random(rng: &mut ChaCha8Rng) -> QueryParts {
        let mut select: Vec<String> = (0..rng.random_range(1..=3)).map(|_| pick(rng, COLUMNS).to_string()).collect();
        if rng.random_bool(0.3) {
            select.push("COUNT(*)".into());
        }
        let conds = (0..rng.random_range(0..=3))
            .map(|_| {
                let c = pick(rng, COLUMNS);
                let v = pick(rng, VALUES);
                if rng.random_bool(0.15) {
                    format!("({c} = {v} OR {c} = \"robbers\")")
                } else {
                    format!("{c} = {v}")
                }
            })
            .collect();
        let group = if rng.random_bool(0.3) { vec![pick(rng, COLUMNS).to_string()] } else { vec![] };
        let order = if rng.random_bool(0.3) {
            vec![format!("{}{}", pick(rng, COLUMNS), if rng.random_bool(0.5) { " DESC" } else { "" })]
        } else {
            vec![]
        };
        QueryParts {
            distinct: rng.random_bool(0.2),
            select,
            conds,
            group,
            order,
        }
    }

    pub fn render(&self) -> String {
        let mut q = format!(
            "SELECT {}{} FROM incidents AS va",
            if self.distinct { "DISTINCT " } else { "" },
            self.select.join(", ")
        );
        if !self.conds.is_empty() {
            q.push_str(&format!(" WHERE {}", self.conds.join(" AND ")));
        }
        if !self.group.is_empty() {
            q.push_str(&format!(" GROUP BY {}", self.group.join(", ")));
        }
        if !self.order.is_empty() {
            q.push_str(&format!(" ORDER BY {}", self.order.join(", ")));
        }
        q
    }

    /// Same clauses with each list shuffled.
    pub fn shuffled(&self, rng: &mut ChaCha8Rng) -> QueryParts {
        let mut q = self.clone();
        q.select.shuffle(rng);
        q.conds.shuffle(rng);
        q.group.shuffle(rng);
        q.order.shuffle(rng);
        q
    }
}

fn oracle_tokens(s: &str) -> Vec<String> {
    // Lowercase, whitespace split, then peel edge punctuation one char at a time.
    let punct = "?!.,;:()\"'";
    let mut out = Vec::new();
    for w in s.to_lowercase().split_whitespace() {
        let mut core: Vec<char> = w.chars().collect();
        let mut head = Vec::new();
        while !core.is_empty() && punct.contains(core[0]) {
            head.push(core.remove(0).to_string());
        }
        let mut tail = Vec::new();
        while !core.is_empty() && punct.contains(*core.last().unwrap()) {
            tail.insert(0, core.pop().unwrap().to_string());
        }
        out.extend(head);
        if !core.is_empty() {
            out.push(core.into_iter().collect());
        }
        out.extend(tail);
    }
    out
}

/// Brute-force corpus BLEU: explicit n-gram lists, quadratic counting,
/// product of precisions raised to 1/n.
pub fn oracle_bleu(cands: &[String], refs: &[String], n: usize) -> f64 {
    let mut num = vec![0u64; n + 1];
    let mut den = vec![0u64; n + 1];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in cands.iter().zip(refs) {
        let ct = oracle_tokens(c);
        let rt = oracle_tokens(r);
        c_len += ct.len();
        r_len += rt.len();
        for k in 1..=n {
            let cg: Vec<&[String]> = if ct.len() >= k { (0..=ct.len() - k).map(|i| &ct[i..i + k]).collect() } else { vec![] };
            let rg: Vec<&[String]> = if rt.len() >= k { (0..=rt.len() - k).map(|i| &rt[i..i + k]).collect() } else { vec![] };
            let mut done: Vec<&[String]> = Vec::new();
            for g in &cg {
                if done.contains(g) {
                    continue;
                }
                done.push(g);
                let in_c = cg.iter().filter(|x| *x == g).count() as u64;
                let in_r = rg.iter().filter(|x| *x == g).count() as u64;
                num[k] += in_c.min(in_r);
            }
            den[k] += cg.len() as u64;
        }
    }
    let mut prod = 1.0f64;
    for k in 1..=n {
        if num[k] == 0 {
            return 0.0;
        }
        prod *= num[k] as f64 / den[k] as f64;
    }
    let bp = if c_len < r_len { (1.0 - r_len as f64 / c_len as f64).exp() } else { 1.0 };
    100.0 * bp * prod.powf(1.0 / n as f64)
}

pub fn read_lines(path: PathBuf) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

/// Serves `session` over HTTP on an ephemeral port; each POST body is one
/// block of request lines. Returns the URL.
pub fn http_server(session: Box<dyn Session + Send>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let session = Arc::new(Mutex::new(session));
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let session = Arc::clone(&session);
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0usize;
                let mut line = String::new();
                loop {
                    line.clear();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = l.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            length = v.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut body = vec![0u8; length];
                reader.read_exact(&mut body).unwrap();
                let reply = serve_block(session.lock().unwrap().as_mut(), &String::from_utf8_lossy(&body));
                let mut stream = stream;
                let _ = write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/x-ndjson\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    reply.len(),
                    reply
                );
            });
        }
    });
    format!("http://{addr}/")
}
