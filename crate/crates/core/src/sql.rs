//! The SQL subset emitted by the grammars and expected from parsers.
//!
//! Supported: `SELECT [DISTINCT] items FROM tables [WHERE cond] [GROUP BY cols]
//! [ORDER BY items]`, where items are columns, `*` or aggregates, tables are
//! `name [AS alias]`, and conditions combine `operand op operand` with
//! AND/OR/NOT and parentheses. Anything else is rejected by name.
//!
//! Normalization uppercases keywords, lowercases identifiers, double-quotes
//! string literals and renders with single spaces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SqlError {
    #[error("empty query")]
    Empty,
    #[error("unsupported construct '{0}'")]
    Unsupported(String),
    #[error("unbalanced {0}")]
    Unbalanced(&'static str),
    #[error("unexpected character '{ch}' at offset {offset}")]
    UnexpectedChar { ch: char, offset: usize },
    #[error("syntax error at token {position}: {message}")]
    Syntax { position: usize, message: String },
}

const KEYWORDS: &[&str] = &[
    "SELECT", "DISTINCT", "FROM", "AS", "WHERE", "AND", "OR", "NOT", "LIKE", "GROUP", "ORDER", "BY",
    "ASC", "DESC", "COUNT", "SUM", "AVG", "MIN", "MAX",
];

const UNSUPPORTED: &[&str] = &[
    "HAVING", "JOIN", "INNER", "LEFT", "RIGHT", "OUTER", "CROSS", "ON", "UNION", "INTERSECT",
    "EXCEPT", "LIMIT", "OFFSET", "IN", "EXISTS", "BETWEEN", "IS", "NULL", "CASE", "WITH",
];

const AGGREGATES: &[&str] = &["COUNT", "SUM", "AVG", "MIN", "MAX"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    Keyword,
    Ident,
    /// String literal; `text` holds the unquoted content.
    Str,
    Number,
    /// `$name` placeholder for an abstract variable.
    Abstract,
    Op,
    Punct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SqlToken {
    pub kind: TokenKind,
    pub text: String,
}

impl SqlToken {
    fn new(kind: TokenKind, text: impl Into<String>) -> SqlToken {
        SqlToken {
            kind,
            text: text.into(),
        }
    }

    pub fn string(content: impl Into<String>) -> SqlToken {
        SqlToken::new(TokenKind::Str, content)
    }

    fn is_kw(&self, kw: &str) -> bool {
        self.kind == TokenKind::Keyword && self.text == kw
    }

    fn is_punct(&self, p: &str) -> bool {
        self.kind == TokenKind::Punct && self.text == p
    }

    /// Normalized surface form.
    pub fn render(&self) -> String {
        match self.kind {
            TokenKind::Str => quote_literal(&self.text),
            _ => self.text.clone(),
        }
    }
}

fn quote_literal(content: &str) -> String {
    format!("\"{}\"", content.replace('"', "\"\""))
}

/// Lexes SQL text into normalized tokens.
pub fn tokenize(text: &str) -> Result<Vec<SqlToken>, SqlError> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut depth: i64 = 0;
    let mut i = 0;
    while i < chars.len() {
        let (offset, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '"' || c == '\'' {
            let mut content = String::new();
            let mut j = i + 1;
            loop {
                match chars.get(j) {
                    None => return Err(SqlError::Unbalanced("quotes")),
                    Some(&(_, ch)) if ch == c => {
                        if chars.get(j + 1).map(|x| x.1) == Some(c) {
                            content.push(c);
                            j += 2;
                        } else {
                            j += 1;
                            break;
                        }
                    }
                    Some(&(_, ch)) => {
                        content.push(ch);
                        j += 1;
                    }
                }
            }
            out.push(SqlToken::string(content));
            i = j;
            continue;
        }
        if c.is_ascii_digit() {
            let mut j = i;
            while j < chars.len() && (chars[j].1.is_ascii_digit() || chars[j].1 == '.') {
                j += 1;
            }
            out.push(SqlToken::new(TokenKind::Number, collect(&chars[i..j])));
            i = j;
            continue;
        }
        if c == '$' {
            let mut j = i + 1;
            while j < chars.len() && (chars[j].1.is_ascii_alphanumeric() || chars[j].1 == '_') {
                j += 1;
            }
            if j == i + 1 {
                return Err(SqlError::UnexpectedChar { ch: c, offset });
            }
            out.push(SqlToken::new(TokenKind::Abstract, collect(&chars[i..j]).to_lowercase()));
            i = j;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let mut j = i;
            while j < chars.len()
                && (chars[j].1.is_ascii_alphanumeric() || chars[j].1 == '_' || chars[j].1 == '.')
            {
                j += 1;
            }
            let word = collect(&chars[i..j]);
            let upper = word.to_ascii_uppercase();
            if KEYWORDS.contains(&upper.as_str()) {
                out.push(SqlToken::new(TokenKind::Keyword, upper));
            } else if UNSUPPORTED.contains(&upper.as_str()) {
                return Err(SqlError::Unsupported(upper));
            } else {
                out.push(SqlToken::new(TokenKind::Ident, word.to_lowercase()));
            }
            i = j;
            continue;
        }
        match c {
            '(' | ')' | ',' | '*' | ';' => {
                if c == '(' {
                    depth += 1;
                } else if c == ')' {
                    depth -= 1;
                    if depth < 0 {
                        return Err(SqlError::Unbalanced("parentheses"));
                    }
                }
                out.push(SqlToken::new(TokenKind::Punct, c.to_string()));
                i += 1;
            }
            '=' => {
                out.push(SqlToken::new(TokenKind::Op, "="));
                i += 1;
            }
            '<' | '>' | '!' => {
                let next = chars.get(i + 1).map(|x| x.1);
                let op = match (c, next) {
                    ('<', Some('=')) => "<=",
                    ('>', Some('=')) => ">=",
                    ('!', Some('=')) | ('<', Some('>')) => "!=",
                    ('<', _) => "<",
                    ('>', _) => ">",
                    _ => return Err(SqlError::UnexpectedChar { ch: c, offset }),
                };
                i += if op.len() == 2 { 2 } else { 1 };
                out.push(SqlToken::new(TokenKind::Op, op));
            }
            _ => return Err(SqlError::UnexpectedChar { ch: c, offset }),
        }
    }
    if depth != 0 {
        return Err(SqlError::Unbalanced("parentheses"));
    }
    Ok(out)
}

fn collect(chars: &[(usize, char)]) -> String {
    chars.iter().map(|(_, c)| *c).collect()
}

/// Joins tokens with the canonical spacing used by normalized SQL.
pub fn render_tokens(tokens: &[SqlToken]) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        if i > 0 {
            let prev = &tokens[i - 1];
            let tight = tok.is_punct(",")
                || tok.is_punct(")")
                || prev.is_punct("(")
                || (tok.is_punct("(")
                    && prev.kind == TokenKind::Keyword
                    && AGGREGATES.contains(&prev.text.as_str()));
            if !tight {
                out.push(' ');
            }
        }
        out.push_str(&tok.render());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "SELECT")]
    Select,
    #[serde(rename = "FROM")]
    From,
    #[serde(rename = "WHERE")]
    Where,
    #[serde(rename = "GROUP_BY")]
    GroupBy,
    #[serde(rename = "ORDER_BY")]
    OrderBy,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Select,
        Component::From,
        Component::Where,
        Component::GroupBy,
        Component::OrderBy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Select => "SELECT",
            Component::From => "FROM",
            Component::Where => "WHERE",
            Component::GroupBy => "GROUP BY",
            Component::OrderBy => "ORDER BY",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SqlQuery {
    pub raw: String,
    pub normalized: String,
    pub tokens: Vec<String>,
    pub components: BTreeMap<Component, BTreeSet<String>>,
}

impl SqlQuery {
    pub fn component(&self, c: Component) -> &BTreeSet<String> {
        &self.components[&c]
    }
}

pub fn parse_sql(text: &str) -> Result<SqlQuery, SqlError> {
    let tokens = tokenize(text)?;
    let query = Parser { tokens: &tokens, pos: 0 }.query()?;
    let normalized = query.render();
    let tokens = tokenize(&normalized)?.iter().map(SqlToken::render).collect();
    Ok(SqlQuery {
        raw: text.to_string(),
        normalized,
        tokens,
        components: query.components(),
    })
}

pub fn normalize(text: &str) -> Result<String, SqlError> {
    parse_sql(text).map(|q| q.normalized)
}

/// Whole-query equivalence on normalized token sequences.
pub fn equal_exact(a: &SqlQuery, b: &SqlQuery) -> bool {
    a.tokens == b.tokens
}

/// Equivalence ignoring order within each of the five components.
pub fn equal_no_order(a: &SqlQuery, b: &SqlQuery) -> bool {
    a.components == b.components
}

#[derive(Debug, Clone)]
enum Operand {
    Column(String),
    Str(String),
    Number(String),
    Abstract(String),
}

impl Operand {
    fn render(&self) -> String {
        match self {
            Operand::Column(s) | Operand::Number(s) | Operand::Abstract(s) => s.clone(),
            Operand::Str(s) => quote_literal(s),
        }
    }
}

#[derive(Debug, Clone)]
enum Expr {
    Star,
    Column(String),
    Aggregate {
        func: String,
        distinct: bool,
        arg: Box<Expr>,
    },
}

impl Expr {
    fn render(&self) -> String {
        match self {
            Expr::Star => "*".into(),
            Expr::Column(c) => c.clone(),
            Expr::Aggregate { func, distinct, arg } => {
                let d = if *distinct { "DISTINCT " } else { "" };
                format!("{func}({d}{})", arg.render())
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Cond {
    Compare {
        left: Operand,
        op: String,
        right: Operand,
    },
    Not(Box<Cond>),
    And(Vec<Cond>),
    Or(Vec<Cond>),
    Paren(Box<Cond>),
}

impl Cond {
    fn render(&self) -> String {
        match self {
            Cond::Compare { left, op, right } => format!("{} {op} {}", left.render(), right.render()),
            Cond::Not(c) => format!("NOT {}", c.render()),
            Cond::And(cs) => cs.iter().map(Cond::render).collect::<Vec<_>>().join(" AND "),
            Cond::Or(cs) => cs.iter().map(Cond::render).collect::<Vec<_>>().join(" OR "),
            Cond::Paren(c) => format!("({})", c.render()),
        }
    }

    /// Top-level AND splits into conjuncts; anything else is atomic.
    fn conjuncts(&self) -> Vec<String> {
        match self {
            Cond::And(cs) => cs.iter().map(Cond::render).collect(),
            other => vec![other.render()],
        }
    }
}

#[derive(Debug, Clone)]
struct Query {
    distinct: bool,
    select: Vec<Expr>,
    from: Vec<(String, Option<String>)>,
    filter: Option<Cond>,
    group_by: Vec<String>,
    order_by: Vec<(Expr, Option<String>)>,
}

impl Query {
    fn render_from(item: &(String, Option<String>)) -> String {
        match &item.1 {
            Some(alias) => format!("{} AS {alias}", item.0),
            None => item.0.clone(),
        }
    }

    fn render_order(item: &(Expr, Option<String>)) -> String {
        match &item.1 {
            Some(dir) => format!("{} {dir}", item.0.render()),
            None => item.0.render(),
        }
    }

    fn render(&self) -> String {
        let mut out = String::from("SELECT ");
        if self.distinct {
            out.push_str("DISTINCT ");
        }
        out.push_str(&self.select.iter().map(Expr::render).collect::<Vec<_>>().join(", "));
        out.push_str(" FROM ");
        out.push_str(&self.from.iter().map(Self::render_from).collect::<Vec<_>>().join(", "));
        if let Some(c) = &self.filter {
            out.push_str(" WHERE ");
            out.push_str(&c.render());
        }
        if !self.group_by.is_empty() {
            out.push_str(" GROUP BY ");
            out.push_str(&self.group_by.join(", "));
        }
        if !self.order_by.is_empty() {
            out.push_str(" ORDER BY ");
            out.push_str(&self.order_by.iter().map(Self::render_order).collect::<Vec<_>>().join(", "));
        }
        out
    }

    fn components(&self) -> BTreeMap<Component, BTreeSet<String>> {
        let mut select: BTreeSet<String> = self.select.iter().map(Expr::render).collect();
        if self.distinct {
            select.insert("DISTINCT".into());
        }
        let mut map = BTreeMap::new();
        map.insert(Component::Select, select);
        map.insert(Component::From, self.from.iter().map(Self::render_from).collect());
        map.insert(
            Component::Where,
            self.filter.as_ref().map(Cond::conjuncts).unwrap_or_default().into_iter().collect(),
        );
        map.insert(Component::GroupBy, self.group_by.iter().cloned().collect());
        map.insert(Component::OrderBy, self.order_by.iter().map(Self::render_order).collect());
        map
    }
}

struct Parser<'t> {
    tokens: &'t [SqlToken],
    pos: usize,
}

impl<'t> Parser<'t> {
    fn peek(&self) -> Option<&'t SqlToken> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<&'t SqlToken> {
        let t = self.tokens.get(self.pos);
        self.pos += 1;
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, SqlError> {
        Err(SqlError::Syntax {
            position: self.pos,
            message: message.into(),
        })
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.peek().is_some_and(|t| t.is_kw(kw)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.peek().is_some_and(|t| t.is_punct(p)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), SqlError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            self.err(format!("expected {kw}"))
        }
    }

    fn query(mut self) -> Result<Query, SqlError> {
        if self.tokens.is_empty() {
            return Err(SqlError::Empty);
        }
        self.expect_kw("SELECT")?;
        let distinct = self.eat_kw("DISTINCT");
        let select = self.list(Self::select_item)?;
        self.expect_kw("FROM")?;
        let from = self.list(Self::table_ref)?;
        let filter = if self.eat_kw("WHERE") { Some(self.or_cond()?) } else { None };
        let mut group_by = Vec::new();
        if self.eat_kw("GROUP") {
            self.expect_kw("BY")?;
            group_by = self.list(Self::column)?;
        }
        let mut order_by = Vec::new();
        if self.eat_kw("ORDER") {
            self.expect_kw("BY")?;
            order_by = self.list(Self::order_item)?;
        }
        self.eat_punct(";");
        match self.peek() {
            None => {}
            Some(t) if t.is_kw("SELECT") => return Err(SqlError::Unsupported("nested SELECT".into())),
            Some(t) if t.is_punct(";") => return Err(SqlError::Unsupported("multiple statements".into())),
            Some(t) => return self.err(format!("unexpected '{}'", t.render())),
        }
        Ok(Query {
            distinct,
            select,
            from,
            filter,
            group_by,
            order_by,
        })
    }

    fn list<T>(&mut self, item: fn(&mut Self) -> Result<T, SqlError>) -> Result<Vec<T>, SqlError> {
        let mut items = vec![item(self)?];
        while self.eat_punct(",") {
            items.push(item(self)?);
        }
        Ok(items)
    }

    fn column(&mut self) -> Result<String, SqlError> {
        match self.bump() {
            Some(t) if t.kind == TokenKind::Ident => Ok(t.text.clone()),
            Some(t) if t.is_kw("SELECT") => Err(SqlError::Unsupported("nested SELECT".into())),
            Some(t) => self.err(format!("expected a column, found '{}'", t.render())),
            None => self.err("expected a column"),
        }
    }

    fn expr(&mut self) -> Result<Expr, SqlError> {
        match self.peek() {
            Some(t) if t.is_punct("*") => {
                self.pos += 1;
                Ok(Expr::Star)
            }
            Some(t) if t.kind == TokenKind::Keyword && AGGREGATES.contains(&t.text.as_str()) => {
                self.pos += 1;
                if !self.eat_punct("(") {
                    return self.err(format!("expected '(' after {}", t.text));
                }
                let distinct = self.eat_kw("DISTINCT");
                let arg = if self.eat_punct("*") {
                    Expr::Star
                } else {
                    Expr::Column(self.column()?)
                };
                if !self.eat_punct(")") {
                    return self.err("expected ')'");
                }
                Ok(Expr::Aggregate {
                    func: t.text.clone(),
                    distinct,
                    arg: Box::new(arg),
                })
            }
            _ => Ok(Expr::Column(self.column()?)),
        }
    }

    fn select_item(&mut self) -> Result<Expr, SqlError> {
        self.expr()
    }

    fn order_item(&mut self) -> Result<(Expr, Option<String>), SqlError> {
        let e = self.expr()?;
        let dir = if self.eat_kw("ASC") {
            Some("ASC".to_string())
        } else if self.eat_kw("DESC") {
            Some("DESC".to_string())
        } else {
            None
        };
        Ok((e, dir))
    }

    fn table_ref(&mut self) -> Result<(String, Option<String>), SqlError> {
        if self.peek().is_some_and(|t| t.is_punct("(")) {
            return Err(SqlError::Unsupported("subquery in FROM".into()));
        }
        let name = self.column()?;
        let alias = if self.eat_kw("AS") {
            Some(self.column()?)
        } else if self.peek().is_some_and(|t| t.kind == TokenKind::Ident) {
            Some(self.column()?)
        } else {
            None
        };
        Ok((name, alias))
    }

    fn or_cond(&mut self) -> Result<Cond, SqlError> {
        let mut parts = vec![self.and_cond()?];
        while self.eat_kw("OR") {
            parts.push(self.and_cond()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Cond::Or(parts) })
    }

    fn and_cond(&mut self) -> Result<Cond, SqlError> {
        let mut parts = vec![self.unary_cond()?];
        while self.eat_kw("AND") {
            parts.push(self.unary_cond()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Cond::And(parts) })
    }

    fn unary_cond(&mut self) -> Result<Cond, SqlError> {
        if self.eat_kw("NOT") {
            return Ok(Cond::Not(Box::new(self.unary_cond()?)));
        }
        if self.eat_punct("(") {
            if self.peek().is_some_and(|t| t.is_kw("SELECT")) {
                return Err(SqlError::Unsupported("nested SELECT".into()));
            }
            let inner = self.or_cond()?;
            if !self.eat_punct(")") {
                return self.err("expected ')'");
            }
            return Ok(Cond::Paren(Box::new(inner)));
        }
        let left = self.operand()?;
        let op = match self.bump() {
            Some(t) if t.kind == TokenKind::Op => t.text.clone(),
            Some(t) if t.is_kw("LIKE") => "LIKE".to_string(),
            Some(t) if t.is_kw("NOT") => {
                if self.eat_kw("LIKE") {
                    "NOT LIKE".to_string()
                } else {
                    return self.err("expected LIKE after NOT");
                }
            }
            Some(t) => return self.err(format!("expected a comparison operator, found '{}'", t.render())),
            None => return self.err("expected a comparison operator"),
        };
        let right = self.operand()?;
        Ok(Cond::Compare { left, op, right })
    }

    fn operand(&mut self) -> Result<Operand, SqlError> {
        match self.bump() {
            Some(t) => match t.kind {
                TokenKind::Ident => Ok(Operand::Column(t.text.clone())),
                TokenKind::Str => Ok(Operand::Str(t.text.clone())),
                TokenKind::Number => Ok(Operand::Number(t.text.clone())),
                TokenKind::Abstract => Ok(Operand::Abstract(t.text.clone())),
                _ if t.is_kw("SELECT") => Err(SqlError::Unsupported("nested SELECT".into())),
                _ if t.is_punct("(") && self.peek().is_some_and(|n| n.is_kw("SELECT")) => {
                    Err(SqlError::Unsupported("nested SELECT".into()))
                }
                _ => {
                    self.pos -= 1;
                    self.err(format!("expected an operand, found '{}'", t.render()))
                }
            },
            None => self.err("expected an operand"),
        }
    }
}
