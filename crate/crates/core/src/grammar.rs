//! Synchronous grammar DSL, validation and exhaustive expansion.
//!
//! One rule per line:
//!
//! ```text
//! %start Q
//! [count_by_place] Q -> "how many" $victim "have been" $incident PLACE "?" ||| SELECT COUNT(*) FROM incidents AS va WHERE va.victim = {victim} AND va.incident_type = {incident} <PLACE>
//! PLACE -> "in" $loc ||| AND va.location = $loc
//! ```
//!
//! On the utterance side quoted text and bare lowercase words are literals,
//! `$name` is a variable slot and an uppercase identifier (or `<NAME>`) is a
//! nonterminal. On the SQL side `{name}` is a concrete slot, rendered as a
//! double-quoted string literal, `$name` is an abstract slot, `<NAME>` is a
//! nonterminal and everything else is copied verbatim.
//!
//! Rule order is file order. Expansion walks derivations lexicographically
//! by the rule indices of their pre-order trace, and within a derivation
//! iterates slot values like an odometer (rightmost utterance slot fastest).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::lexicon::{is_ident, Lexicon, VarKind};
use crate::text;

#[derive(Debug, thiserror::Error)]
pub enum GrammarError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("grammar has no rules")]
    Empty,
    #[error("line {line}: duplicate rule id '{id}'")]
    DuplicateRuleId { id: String, line: usize },
    #[error("rule '{rule}' (line {line}): unknown variable '{name}'")]
    UnknownVariable {
        name: String,
        rule: String,
        line: usize,
    },
    #[error("rule '{rule}' (line {line}): unknown nonterminal '{name}'")]
    UnknownNonterminal {
        name: String,
        rule: String,
        line: usize,
    },
    #[error("start symbol '{0}' has no rules")]
    UnknownStart(String),
    #[error("rule '{rule}' (line {line}): {detail}")]
    Asymmetric {
        rule: String,
        line: usize,
        detail: String,
    },
    #[error("rule '{rule}' (line {line}): {detail}")]
    SlotSyntax {
        rule: String,
        line: usize,
        detail: String,
    },
    #[error("rule '{rule}' (line {line}): '{symbol}' appears more than once on the {side} side")]
    Repeated {
        rule: String,
        line: usize,
        symbol: String,
        side: &'static str,
    },
    #[error("rule '{rule}': variable '{var}' can be bound twice in one derivation")]
    DoubleBinding { rule: String, var: String },
    #[error("grammar is cyclic: {0}")]
    Cycle(String),
    #[error("expansion count overflows")]
    CountOverflow,
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> GrammarError {
    GrammarError::Parse {
        line,
        column,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Symbol {
    /// One utterance word, or one verbatim SQL chunk.
    Literal(String),
    Slot(String),
    NonTerminal(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynchronousRule {
    pub rule_id: String,
    pub lhs: String,
    pub utterance: Vec<Symbol>,
    pub sql: Vec<Symbol>,
    pub line: usize,
}

impl SynchronousRule {
    fn slots<'a>(side: &'a [Symbol]) -> impl Iterator<Item = &'a str> {
        side.iter().filter_map(|s| match s {
            Symbol::Slot(v) => Some(v.as_str()),
            _ => None,
        })
    }

    fn nonterminals<'a>(side: &'a [Symbol]) -> impl Iterator<Item = &'a str> {
        side.iter().filter_map(|s| match s {
            Symbol::NonTerminal(n) => Some(n.as_str()),
            _ => None,
        })
    }

    /// Nonterminal children in utterance order.
    pub fn children(&self) -> impl Iterator<Item = &str> {
        Self::nonterminals(&self.utterance)
    }

    pub fn utterance_slots(&self) -> impl Iterator<Item = &str> {
        Self::slots(&self.utterance)
    }
}

#[derive(Debug, Clone)]
pub struct Grammar {
    rules: Vec<SynchronousRule>,
    start: String,
    by_lhs: BTreeMap<String, Vec<usize>>,
}

/// A variable slot as written on the SQL side, before lexicon resolution.
#[derive(Debug)]
enum SqlVarSyntax {
    Braced,
    Dollar,
}

struct RawRule {
    rule: SynchronousRule,
    sql_var_syntax: Vec<(String, SqlVarSyntax)>,
}

impl Grammar {
    pub fn load(path: impl AsRef<Path>, lexicon: &Lexicon) -> Result<Grammar, GrammarError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GrammarError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Grammar::parse(&text, lexicon)
    }

    pub fn parse(source: &str, lexicon: &Lexicon) -> Result<Grammar, GrammarError> {
        let mut start = None;
        let mut raw_rules = Vec::new();
        let mut per_lhs: HashMap<String, usize> = HashMap::new();
        for (idx, line) in source.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix("%start") {
                let name = rest.trim();
                if !is_nonterminal(name) {
                    return Err(parse_err(line_no, 8, format!("invalid start symbol '{name}'")));
                }
                start = Some(name.to_string());
                continue;
            }
            let raw = parse_rule(line, line_no, &mut per_lhs)?;
            raw_rules.push(raw);
        }
        if raw_rules.is_empty() {
            return Err(GrammarError::Empty);
        }
        let start = start.unwrap_or_else(|| raw_rules[0].rule.lhs.clone());

        let mut ids = BTreeSet::new();
        for raw in &raw_rules {
            if !ids.insert(raw.rule.rule_id.clone()) {
                return Err(GrammarError::DuplicateRuleId {
                    id: raw.rule.rule_id.clone(),
                    line: raw.rule.line,
                });
            }
        }

        let mut by_lhs: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, raw) in raw_rules.iter().enumerate() {
            by_lhs.entry(raw.rule.lhs.clone()).or_default().push(i);
        }
        for raw in &raw_rules {
            validate_rule(raw, lexicon, &by_lhs)?;
        }
        if !by_lhs.contains_key(&start) {
            return Err(GrammarError::UnknownStart(start));
        }

        let grammar = Grammar {
            rules: raw_rules.into_iter().map(|r| r.rule).collect(),
            start,
            by_lhs,
        };
        grammar.check_acyclic()?;
        grammar.check_single_binding()?;
        Ok(grammar)
    }

    pub fn rules(&self) -> &[SynchronousRule] {
        &self.rules
    }

    pub fn start(&self) -> &str {
        &self.start
    }

    fn alternatives(&self, nt: &str) -> &[usize] {
        self.by_lhs.get(nt).map(Vec::as_slice).unwrap_or(&[])
    }

    fn check_acyclic(&self) -> Result<(), GrammarError> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Active,
            Done,
        }
        fn visit<'g>(
            g: &'g Grammar,
            nt: &'g str,
            marks: &mut HashMap<&'g str, Mark>,
            path: &mut Vec<&'g str>,
        ) -> Result<(), GrammarError> {
            match marks.get(nt) {
                Some(Mark::Done) => return Ok(()),
                Some(Mark::Active) => {
                    let from = path.iter().position(|n| *n == nt).unwrap_or(0);
                    let mut cycle: Vec<&str> = path[from..].to_vec();
                    cycle.push(nt);
                    return Err(GrammarError::Cycle(cycle.join(" -> ")));
                }
                None => {}
            }
            marks.insert(nt, Mark::Active);
            path.push(nt);
            for &r in g.alternatives(nt) {
                for child in g.rules[r].children() {
                    visit(g, child, marks, path)?;
                }
            }
            path.pop();
            marks.insert(nt, Mark::Done);
            Ok(())
        }
        let mut marks = HashMap::new();
        for nt in self.by_lhs.keys() {
            visit(self, nt, &mut marks, &mut Vec::new())?;
        }
        Ok(())
    }

    /// Variables that some derivation of each nonterminal can bind.
    fn reachable_vars(&self) -> HashMap<&str, BTreeSet<&str>> {
        fn go<'g>(g: &'g Grammar, nt: &'g str, memo: &mut HashMap<&'g str, BTreeSet<&'g str>>) {
            if memo.contains_key(nt) {
                return;
            }
            let mut vars = BTreeSet::new();
            for &r in g.alternatives(nt) {
                let rule = &g.rules[r];
                vars.extend(rule.utterance_slots());
                for child in rule.children() {
                    go(g, child, memo);
                    vars.extend(memo[child].iter().copied());
                }
            }
            memo.insert(nt, vars);
        }
        let mut memo = HashMap::new();
        for nt in self.by_lhs.keys() {
            go(self, nt, &mut memo);
        }
        memo
    }

    /// Every derivation must bind each variable at most once so that a pair's
    /// bindings stay a map.
    fn check_single_binding(&self) -> Result<(), GrammarError> {
        let reach = self.reachable_vars();
        for rule in &self.rules {
            let mut seen: BTreeSet<&str> = rule.utterance_slots().collect();
            for child in rule.children() {
                for var in &reach[child] {
                    if !seen.insert(var) {
                        return Err(GrammarError::DoubleBinding {
                            rule: rule.rule_id.clone(),
                            var: var.to_string(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

fn is_nonterminal(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_uppercase())
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

fn angle_nonterminal(tok: &str) -> Option<&str> {
    tok.strip_prefix('<')
        .and_then(|t| t.strip_suffix('>'))
        .filter(|t| is_nonterminal(t))
}

fn parse_rule(
    line: &str,
    line_no: usize,
    per_lhs: &mut HashMap<String, usize>,
) -> Result<RawRule, GrammarError> {
    let indent = line.len() - line.trim_start().len();
    let mut body = line.trim();
    let mut col = indent + 1;
    let mut explicit_id = None;
    if let Some(rest) = body.strip_prefix('[') {
        let close = rest
            .find(']')
            .ok_or_else(|| parse_err(line_no, col, "unterminated rule id"))?;
        let id = rest[..close].trim();
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(parse_err(line_no, col, "rule id must be a single non-empty word"));
        }
        explicit_id = Some(id.to_string());
        let consumed = close + 2;
        col += consumed;
        body = body[consumed..].trim_start();
    }
    let arrow = body
        .find("->")
        .ok_or_else(|| parse_err(line_no, col, "expected '->'"))?;
    let lhs = body[..arrow].trim();
    if !is_nonterminal(lhs) {
        return Err(parse_err(line_no, col, format!("left-hand side '{lhs}' is not an uppercase nonterminal")));
    }
    let rhs = &body[arrow + 2..];
    let rhs_col = col + arrow + 2;
    let sep = find_separator(rhs).ok_or_else(|| parse_err(line_no, rhs_col, "expected '|||'"))?;
    let utterance = parse_utterance_side(&rhs[..sep], line_no, rhs_col)?;
    let (sql, sql_var_syntax) = parse_sql_side(&rhs[sep + 3..], line_no, rhs_col + sep + 3)?;

    let ordinal = per_lhs.entry(lhs.to_string()).or_insert(0);
    *ordinal += 1;
    let rule_id = explicit_id.unwrap_or_else(|| format!("{lhs}.{ordinal}"));
    Ok(RawRule {
        rule: SynchronousRule {
            rule_id,
            lhs: lhs.to_string(),
            utterance,
            sql,
            line: line_no,
        },
        sql_var_syntax,
    })
}

/// Position of `|||` outside quoted text.
fn find_separator(rhs: &str) -> Option<usize> {
    let bytes = rhs.as_bytes();
    let mut quote: Option<u8> = None;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some(q) if b == q => quote = None,
            Some(_) => {}
            None if b == b'"' => quote = Some(b),
            None if rhs[i..].starts_with("|||") => return Some(i),
            None => {}
        }
        i += 1;
    }
    None
}

fn parse_utterance_side(side: &str, line: usize, base: usize) -> Result<Vec<Symbol>, GrammarError> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = side.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (off, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '"' {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1 != '"' {
                j += 1;
            }
            if j == chars.len() {
                return Err(parse_err(line, base + off, "unterminated quoted literal"));
            }
            let literal: String = chars[i + 1..j].iter().map(|(_, c)| *c).collect();
            out.extend(text::tokenize(&literal).into_iter().map(Symbol::Literal));
            i = j + 1;
            continue;
        }
        let mut j = i;
        while j < chars.len() && !chars[j].1.is_whitespace() && chars[j].1 != '"' {
            j += 1;
        }
        let word: String = chars[i..j].iter().map(|(_, c)| *c).collect();
        if let Some(name) = word.strip_prefix('$') {
            if !is_ident(name) {
                return Err(parse_err(line, base + off, format!("invalid variable '{word}'")));
            }
            out.push(Symbol::Slot(name.to_lowercase()));
        } else if let Some(nt) = angle_nonterminal(&word) {
            out.push(Symbol::NonTerminal(nt.to_string()));
        } else if is_nonterminal(&word) {
            out.push(Symbol::NonTerminal(word));
        } else if word.starts_with('{') {
            return Err(parse_err(line, base + off, "'{var}' slots belong on the SQL side; use '$var'"));
        } else {
            out.extend(text::tokenize(&word).into_iter().map(Symbol::Literal));
        }
        i = j;
    }
    Ok(out)
}

fn parse_sql_side(
    side: &str,
    line: usize,
    base: usize,
) -> Result<(Vec<Symbol>, Vec<(String, SqlVarSyntax)>), GrammarError> {
    let mut out = Vec::new();
    let mut syntax = Vec::new();
    let chars: Vec<(usize, char)> = side.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (off, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        // A chunk runs to the next whitespace outside quotes.
        let mut j = i;
        let mut quote = None;
        while j < chars.len() {
            let ch = chars[j].1;
            match quote {
                Some(q) if ch == q => quote = None,
                Some(_) => {}
                None if ch == '"' || ch == '\'' => quote = Some(ch),
                None if ch.is_whitespace() => break,
                None => {}
            }
            j += 1;
        }
        if quote.is_some() {
            return Err(parse_err(line, base + off, "unterminated SQL string literal"));
        }
        let chunk: String = chars[i..j].iter().map(|(_, c)| *c).collect();
        if let Some(name) = chunk.strip_prefix('{').and_then(|c| c.strip_suffix('}')) {
            if !is_ident(name) {
                return Err(parse_err(line, base + off, format!("invalid slot '{chunk}'")));
            }
            let name = name.to_lowercase();
            syntax.push((name.clone(), SqlVarSyntax::Braced));
            out.push(Symbol::Slot(name));
        } else if let Some(name) = chunk.strip_prefix('$').filter(|n| is_ident(n)) {
            let name = name.to_lowercase();
            syntax.push((name.clone(), SqlVarSyntax::Dollar));
            out.push(Symbol::Slot(name));
        } else if let Some(nt) = angle_nonterminal(&chunk) {
            out.push(Symbol::NonTerminal(nt.to_string()));
        } else {
            out.push(Symbol::Literal(chunk));
        }
        i = j;
    }
    Ok((out, syntax))
}

fn validate_rule(
    raw: &RawRule,
    lexicon: &Lexicon,
    by_lhs: &BTreeMap<String, Vec<usize>>,
) -> Result<(), GrammarError> {
    let rule = &raw.rule;
    let id = || rule.rule_id.clone();
    for side in [&rule.utterance, &rule.sql] {
        for sym in side.iter() {
            match sym {
                Symbol::Slot(name) if lexicon.get(name).is_none() => {
                    return Err(GrammarError::UnknownVariable {
                        name: name.clone(),
                        rule: id(),
                        line: rule.line,
                    })
                }
                Symbol::NonTerminal(name) if !by_lhs.contains_key(name) => {
                    return Err(GrammarError::UnknownNonterminal {
                        name: name.clone(),
                        rule: id(),
                        line: rule.line,
                    })
                }
                _ => {}
            }
        }
    }
    for (name, syntax) in &raw.sql_var_syntax {
        let kind = lexicon.get(name).map(|v| v.kind);
        match (kind, syntax) {
            (Some(VarKind::Concrete), SqlVarSyntax::Dollar) => {
                return Err(GrammarError::SlotSyntax {
                    rule: id(),
                    line: rule.line,
                    detail: format!("concrete variable '{name}' must appear as {{{name}}} in SQL"),
                })
            }
            (Some(VarKind::Abstract), SqlVarSyntax::Braced) => {
                return Err(GrammarError::SlotSyntax {
                    rule: id(),
                    line: rule.line,
                    detail: format!("abstract variable '{name}' must appear as ${name} in SQL"),
                })
            }
            _ => {}
        }
    }

    for (side_name, side) in [("utterance", &rule.utterance), ("SQL", &rule.sql)] {
        let mut seen = BTreeSet::new();
        for sym in side.iter() {
            let key = match sym {
                Symbol::Slot(v) => format!("${v}"),
                Symbol::NonTerminal(n) => n.clone(),
                Symbol::Literal(_) => continue,
            };
            if !seen.insert(key.clone()) {
                return Err(GrammarError::Repeated {
                    rule: id(),
                    line: rule.line,
                    symbol: key,
                    side: side_name,
                });
            }
        }
    }

    let collect = |side: &[Symbol]| -> BTreeSet<String> {
        side.iter()
            .filter_map(|s| match s {
                Symbol::Slot(v) => Some(format!("${v}")),
                Symbol::NonTerminal(n) => Some(n.clone()),
                Symbol::Literal(_) => None,
            })
            .collect()
    };
    let utt = collect(&rule.utterance);
    let sql = collect(&rule.sql);
    if utt != sql {
        let only_utt: Vec<_> = utt.difference(&sql).cloned().collect();
        let only_sql: Vec<_> = sql.difference(&utt).cloned().collect();
        let mut parts = Vec::new();
        if !only_utt.is_empty() {
            parts.push(format!("only in utterance: {}", only_utt.join(", ")));
        }
        if !only_sql.is_empty() {
            parts.push(format!("only in SQL: {}", only_sql.join(", ")));
        }
        return Err(GrammarError::Asymmetric {
            rule: id(),
            line: rule.line,
            detail: format!("slots are not synchronous ({})", parts.join("; ")),
        });
    }
    Ok(())
}

/// One synthesized (canonical utterance, SQL) example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalPair {
    /// Position in the expansion stream.
    pub id: u64,
    pub utterance: String,
    pub sql: String,
    pub template_id: String,
    /// Variable name to chosen value (abstract variables map to their `$` token).
    pub bindings: BTreeMap<String, String>,
    pub rule_trace: Vec<String>,
}

impl CanonicalPair {
    pub fn tokens(&self) -> Vec<String> {
        self.utterance.split_whitespace().map(str::to_string).collect()
    }

    pub fn has_abstract(&self) -> bool {
        self.bindings.values().any(|v| v.starts_with('$'))
    }

    /// Concrete values bound in this pair.
    pub fn concrete_values(&self) -> impl Iterator<Item = &str> {
        self.bindings
            .values()
            .filter(|v| !v.starts_with('$'))
            .map(String::as_str)
    }
}

/// Replaces every bound concrete value in the utterance with `{varname}`.
///
/// Longer values are placed first; each binding replaces its leftmost
/// token-aligned occurrence that has not already been replaced.
pub fn abstract_template(pair: &CanonicalPair) -> String {
    enum Tok<'a> {
        Orig(&'a str),
        Placeholder(String),
    }
    let mut toks: Vec<Tok> = pair.utterance.split_whitespace().map(Tok::Orig).collect();
    let mut concrete: Vec<(&String, Vec<&str>)> = pair
        .bindings
        .iter()
        .filter(|(_, v)| !v.starts_with('$'))
        .map(|(k, v)| (k, v.split_whitespace().collect()))
        .collect();
    concrete.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
    for (name, words) in concrete {
        if words.is_empty() {
            continue;
        }
        let found = (0..toks.len()).find(|&start| {
            start + words.len() <= toks.len()
                && words
                    .iter()
                    .enumerate()
                    .all(|(k, w)| matches!(toks[start + k], Tok::Orig(t) if t == *w))
        });
        if let Some(start) = found {
            toks.splice(start..start + words.len(), [Tok::Placeholder(format!("{{{name}}}"))]);
        }
    }
    toks.iter()
        .map(|t| match t {
            Tok::Orig(s) => *s,
            Tok::Placeholder(p) => p.as_str(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Σ over derivations of Π of value-list sizes, without materializing pairs.
pub fn count_expansions(grammar: &Grammar, lexicon: &Lexicon) -> Result<u128, GrammarError> {
    fn count<'g>(
        g: &'g Grammar,
        lex: &Lexicon,
        nt: &'g str,
        memo: &mut HashMap<&'g str, u128>,
    ) -> Result<u128, GrammarError> {
        if let Some(&c) = memo.get(nt) {
            return Ok(c);
        }
        let mut total: u128 = 0;
        for &r in g.alternatives(nt) {
            let rule = &g.rules[r];
            let mut product: u128 = 1;
            for var in rule.utterance_slots() {
                let arity = lex.get(var).map_or(0, |v| v.arity()) as u128;
                product = product.checked_mul(arity).ok_or(GrammarError::CountOverflow)?;
            }
            for child in rule.children() {
                let c = count(g, lex, child, memo)?;
                product = product.checked_mul(c).ok_or(GrammarError::CountOverflow)?;
            }
            total = total.checked_add(product).ok_or(GrammarError::CountOverflow)?;
        }
        memo.insert(nt, total);
        Ok(total)
    }
    count(grammar, lexicon, grammar.start(), &mut HashMap::new())
}

/// Lazily streams every derivation of the grammar's start symbol.
pub fn expand<'a>(grammar: &'a Grammar, lexicon: &'a Lexicon) -> Expansion<'a> {
    Expansion {
        grammar,
        lexicon,
        trees: TreeIter::new(grammar, grammar.start()),
        current: None,
        next_id: 0,
    }
}

#[derive(Debug)]
struct Tree {
    rule: usize,
    children: Vec<Rc<Tree>>,
}

struct TreeIter<'a> {
    grammar: &'a Grammar,
    alternatives: &'a [usize],
    pos: usize,
    children: Vec<TreeIter<'a>>,
    current: Vec<Rc<Tree>>,
    started: bool,
    exhausted: bool,
}

impl<'a> TreeIter<'a> {
    fn new(grammar: &'a Grammar, nt: &str) -> TreeIter<'a> {
        TreeIter {
            grammar,
            alternatives: grammar.alternatives(nt),
            pos: 0,
            children: Vec::new(),
            current: Vec::new(),
            started: false,
            exhausted: false,
        }
    }

    /// Positions the iterator on the first tree of the alternative at `pos`
    /// or a later one.
    fn init_alternative(&mut self) -> bool {
        'alts: while self.pos < self.alternatives.len() {
            let rule = &self.grammar.rules[self.alternatives[self.pos]];
            self.children.clear();
            self.current.clear();
            for child in rule.children() {
                let mut it = TreeIter::new(self.grammar, child);
                match it.next() {
                    Some(t) => {
                        self.children.push(it);
                        self.current.push(t);
                    }
                    None => {
                        self.pos += 1;
                        continue 'alts;
                    }
                }
            }
            return true;
        }
        false
    }

    fn advance_children(&mut self) -> bool {
        for i in (0..self.children.len()).rev() {
            if let Some(t) = self.children[i].next() {
                self.current[i] = t;
                let rule = &self.grammar.rules[self.alternatives[self.pos]];
                for (j, child) in rule.children().enumerate().skip(i + 1) {
                    let mut it = TreeIter::new(self.grammar, child);
                    self.current[j] = it.next().expect("child produced a tree before");
                    self.children[j] = it;
                }
                return true;
            }
        }
        false
    }
}

impl Iterator for TreeIter<'_> {
    type Item = Rc<Tree>;

    fn next(&mut self) -> Option<Rc<Tree>> {
        if self.exhausted {
            return None;
        }
        let ok = if !self.started {
            self.started = true;
            self.init_alternative()
        } else if self.advance_children() {
            true
        } else {
            self.pos += 1;
            self.init_alternative()
        };
        if !ok {
            self.exhausted = true;
            return None;
        }
        Some(Rc::new(Tree {
            rule: self.alternatives[self.pos],
            children: self.current.clone(),
        }))
    }
}

#[derive(Debug, Clone)]
enum Piece {
    Lit(String),
    Slot(usize),
}

/// A derivation tree flattened to slot-indexed utterance and SQL templates.
struct Rendered {
    utterance: Vec<Piece>,
    sql: Vec<Piece>,
    /// Slot variables in utterance order.
    slots: Vec<String>,
    trace: Vec<String>,
    template_id: String,
    /// Current value index per slot.
    odometer: Vec<usize>,
    arities: Vec<usize>,
    fresh: bool,
}

pub struct Expansion<'a> {
    grammar: &'a Grammar,
    lexicon: &'a Lexicon,
    trees: TreeIter<'a>,
    current: Option<Rendered>,
    next_id: u64,
}

impl Expansion<'_> {
    fn render(&self, tree: &Tree) -> Rendered {
        let mut slots = Vec::new();
        let mut trace = Vec::new();
        let mut utterance = Vec::new();
        render_utterance(self.grammar, tree, &mut utterance, &mut slots, &mut trace);
        let index: HashMap<&str, usize> =
            slots.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut sql = Vec::new();
        render_sql(self.grammar, tree, &index, &mut sql);
        let arities: Vec<usize> = slots
            .iter()
            .map(|s| self.lexicon.get(s).map_or(0, |v| v.arity()))
            .collect();
        let template_id = utterance
            .iter()
            .map(|p| match p {
                Piece::Lit(w) => w.clone(),
                Piece::Slot(i) => {
                    let var = self.lexicon.get(&slots[*i]).expect("validated slot");
                    if var.is_abstract() {
                        var.surface_token()
                    } else {
                        format!("{{{}}}", var.name)
                    }
                }
            })
            .collect::<Vec<_>>()
            .join(" ");
        Rendered {
            utterance,
            sql,
            odometer: vec![0; slots.len()],
            slots,
            trace,
            template_id,
            arities,
            fresh: true,
        }
    }

    fn emit(&mut self) -> CanonicalPair {
        let r = self.current.as_ref().expect("current derivation");
        let values: Vec<(String, bool)> = r
            .slots
            .iter()
            .zip(&r.odometer)
            .map(|(s, &k)| {
                let var = self.lexicon.get(s).expect("validated slot");
                if var.is_abstract() {
                    (var.surface_token(), true)
                } else {
                    (var.values[k].clone(), false)
                }
            })
            .collect();
        let utterance = r
            .utterance
            .iter()
            .map(|p| match p {
                Piece::Lit(w) => w.clone(),
                Piece::Slot(i) => values[*i].0.clone(),
            })
            .collect::<Vec<_>>()
            .join(" ");
        let sql = r
            .sql
            .iter()
            .map(|p| match p {
                Piece::Lit(w) => w.clone(),
                Piece::Slot(i) => {
                    let (v, is_abstract) = &values[*i];
                    if *is_abstract {
                        v.clone()
                    } else {
                        format!("\"{}\"", v.replace('"', "\"\""))
                    }
                }
            })
            .collect::<Vec<_>>()
            .join(" ");
        let bindings = r
            .slots
            .iter()
            .cloned()
            .zip(values.into_iter().map(|(v, _)| v))
            .collect();
        let pair = CanonicalPair {
            id: self.next_id,
            utterance,
            sql,
            template_id: r.template_id.clone(),
            bindings,
            rule_trace: r.trace.clone(),
        };
        self.next_id += 1;
        pair
    }
}

impl Iterator for Expansion<'_> {
    type Item = CanonicalPair;

    fn next(&mut self) -> Option<CanonicalPair> {
        loop {
            if let Some(r) = self.current.as_mut() {
                if r.fresh {
                    r.fresh = false;
                    if r.arities.iter().all(|&a| a > 0) {
                        return Some(self.emit());
                    }
                } else {
                    let mut advanced = false;
                    for i in (0..r.odometer.len()).rev() {
                        if r.odometer[i] + 1 < r.arities[i] {
                            r.odometer[i] += 1;
                            for k in &mut r.odometer[i + 1..] {
                                *k = 0;
                            }
                            advanced = true;
                            break;
                        }
                    }
                    if advanced {
                        return Some(self.emit());
                    }
                }
            }
            let tree = self.trees.next()?;
            self.current = Some(self.render(&tree));
        }
    }
}

fn render_utterance(
    g: &Grammar,
    tree: &Tree,
    out: &mut Vec<Piece>,
    slots: &mut Vec<String>,
    trace: &mut Vec<String>,
) {
    let rule = &g.rules[tree.rule];
    trace.push(rule.rule_id.clone());
    let mut child = 0;
    for sym in &rule.utterance {
        match sym {
            Symbol::Literal(w) => out.push(Piece::Lit(w.clone())),
            Symbol::Slot(v) => {
                out.push(Piece::Slot(slots.len()));
                slots.push(v.clone());
            }
            Symbol::NonTerminal(_) => {
                render_utterance(g, &tree.children[child], out, slots, trace);
                child += 1;
            }
        }
    }
}

fn render_sql(g: &Grammar, tree: &Tree, index: &HashMap<&str, usize>, out: &mut Vec<Piece>) {
    let rule = &g.rules[tree.rule];
    for sym in &rule.sql {
        match sym {
            Symbol::Literal(w) => out.push(Piece::Lit(w.clone())),
            Symbol::Slot(v) => out.push(Piece::Slot(index[v.as_str()])),
            Symbol::NonTerminal(n) => {
                let pos = rule.children().position(|c| c == n).expect("synchronous rule");
                render_sql(g, &tree.children[pos], index, out);
            }
        }
    }
}
