//! Domain vocabulary: typed variables, their surface values and the schema
//! manifest their SQL bindings resolve against.
//!
//! Lexicon files are line oriented:
//!
//! ```text
//! # victims of an incident
//! var victim : va.victim
//!   "oil tanker"
//!   "container ship"
//! abstract loc : va.location
//! ```
//!
//! Schema manifests list tables, their columns and relationship kinds:
//!
//! ```text
//! table incidents as va
//! col va.victim
//! rel victim victim_aggressor aggressor
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
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
    #[error("line {line}: duplicate variable name '{name}'")]
    DuplicateName { name: String, line: usize },
    #[error("line {line}: abstract variable '{name}' cannot have values")]
    AbstractWithValues { name: String, line: usize },
    #[error("concrete variable '{name}' has no values")]
    NoValues { name: String },
    #[error("lexicon must declare at least one variable")]
    Empty,
    #[error("variable '{name}' is bound to undeclared column '{column}'")]
    UnknownColumn { name: String, column: String },
    #[error("line {line}: duplicate table alias '{alias}'")]
    DuplicateAlias { alias: String, line: usize },
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> LexiconError {
    LexiconError::Parse {
        line,
        column,
        message: message.into(),
    }
}

/// `alias.column`
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ColumnPath {
    pub alias: String,
    pub column: String,
}

impl ColumnPath {
    pub fn parse(text: &str) -> Option<ColumnPath> {
        let (alias, column) = text.split_once('.')?;
        if is_ident(alias) && is_ident(column) {
            Some(ColumnPath {
                alias: alias.to_lowercase(),
                column: column.to_lowercase(),
            })
        } else {
            None
        }
    }
}

impl fmt::Display for ColumnPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.alias, self.column)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Concrete,
    Abstract,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableDef {
    pub name: String,
    pub kind: VarKind,
    /// Lowercased surface values; empty iff the variable is abstract.
    pub values: Vec<String>,
    pub sql_binding: Option<ColumnPath>,
}

impl VariableDef {
    pub fn is_abstract(&self) -> bool {
        self.kind == VarKind::Abstract
    }

    /// `$name`, the opaque token an abstract variable contributes.
    pub fn surface_token(&self) -> String {
        format!("${}", self.name)
    }

    /// Number of alternatives an occurrence of this variable expands to.
    pub fn arity(&self) -> usize {
        match self.kind {
            VarKind::Concrete => self.values.len(),
            VarKind::Abstract => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lexicon {
    variables: BTreeMap<String, VariableDef>,
}

impl Lexicon {
    pub fn load(path: impl AsRef<Path>) -> Result<Lexicon, LexiconError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Lexicon::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Lexicon, LexiconError> {
        let mut variables: BTreeMap<String, VariableDef> = BTreeMap::new();
        let mut current: Option<(String, usize)> = None;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let indent = raw.len() - raw.trim_start().len();
            if indent > 0 && trimmed.starts_with('"') {
                let Some((name, _)) = &current else {
                    return Err(parse_err(line_no, indent + 1, "value outside a variable block"));
                };
                let var = variables.get_mut(name).expect("current variable registered");
                if var.is_abstract() {
                    return Err(LexiconError::AbstractWithValues {
                        name: name.clone(),
                        line: line_no,
                    });
                }
                let value = parse_quoted(trimmed, line_no, indent + 1)?;
                if value.trim().is_empty() {
                    return Err(parse_err(line_no, indent + 1, "empty value"));
                }
                var.values.push(value.to_lowercase());
                continue;
            }
            if indent > 0 {
                return Err(parse_err(line_no, indent + 1, "expected a quoted value"));
            }

            let (keyword, rest) = trimmed
                .split_once(char::is_whitespace)
                .unwrap_or((trimmed, ""));
            let kind = match keyword {
                "var" => VarKind::Concrete,
                "abstract" => VarKind::Abstract,
                other => {
                    return Err(parse_err(
                        line_no,
                        1,
                        format!("expected 'var' or 'abstract', found '{other}'"),
                    ))
                }
            };
            let (name, binding) = match rest.split_once(':') {
                Some((n, b)) => (n.trim(), Some(b.trim())),
                None => (rest.trim(), None),
            };
            let name_col = keyword.len() + 2;
            let name = name.strip_prefix('$').unwrap_or(name);
            if !is_ident(name) {
                return Err(parse_err(line_no, name_col, format!("invalid variable name '{name}'")));
            }
            let sql_binding = match binding {
                Some(b) => Some(ColumnPath::parse(b).ok_or_else(|| {
                    parse_err(line_no, name_col, format!("invalid column path '{b}'"))
                })?),
                None if kind == VarKind::Concrete => {
                    return Err(parse_err(
                        line_no,
                        raw.len() + 1,
                        format!("variable '{name}' needs ': <alias.column>'"),
                    ))
                }
                None => None,
            };
            let name = name.to_lowercase();
            if variables.contains_key(&name) {
                return Err(LexiconError::DuplicateName { name, line: line_no });
            }
            variables.insert(
                name.clone(),
                VariableDef {
                    name: name.clone(),
                    kind,
                    values: Vec::new(),
                    sql_binding,
                },
            );
            current = Some((name, line_no));
        }

        if variables.is_empty() {
            return Err(LexiconError::Empty);
        }
        for var in variables.values() {
            if var.kind == VarKind::Concrete && var.values.is_empty() {
                return Err(LexiconError::NoValues {
                    name: var.name.clone(),
                });
            }
        }
        Ok(Lexicon { variables })
    }

    pub fn get(&self, name: &str) -> Option<&VariableDef> {
        self.variables.get(name)
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &VariableDef> {
        self.variables.values()
    }

    /// Maps an abstract surface token (`$loc`) back to its variable.
    pub fn abstract_by_token(&self, token: &str) -> Option<&VariableDef> {
        let name = token.strip_prefix('$')?;
        self.variables.get(name).filter(|v| v.is_abstract())
    }

    pub fn abstract_tokens(&self) -> BTreeSet<String> {
        self.iter()
            .filter(|v| v.is_abstract())
            .map(VariableDef::surface_token)
            .collect()
    }

    pub fn check_schema(&self, schema: &SchemaManifest) -> Result<(), LexiconError> {
        for var in self.iter() {
            if let Some(col) = &var.sql_binding {
                if !schema.has_column(col) {
                    return Err(LexiconError::UnknownColumn {
                        name: var.name.clone(),
                        column: col.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for var in self.iter() {
            let binding = var
                .sql_binding
                .as_ref()
                .map(|b| format!(" : {b}"))
                .unwrap_or_default();
            match var.kind {
                VarKind::Concrete => {
                    out.push_str(&format!("var {}{}\n", var.name, binding));
                    for v in &var.values {
                        out.push_str(&format!("  {}\n", quote(v)));
                    }
                }
                VarKind::Abstract => out.push_str(&format!("abstract {}{}\n", var.name, binding)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableDef {
    pub name: String,
    pub alias: String,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationKind {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SchemaManifest {
    pub tables: Vec<TableDef>,
    pub relationships: Vec<RelationKind>,
}

impl SchemaManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<SchemaManifest, LexiconError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        SchemaManifest::parse(&text)
    }

    pub fn parse(text: &str) -> Result<SchemaManifest, LexiconError> {
        let mut schema = SchemaManifest::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let words: Vec<&str> = line.split_whitespace().collect();
            match words.as_slice() {
                ["table", name, as_kw, alias] if as_kw.eq_ignore_ascii_case("as") => {
                    if !is_ident(name) || !is_ident(alias) {
                        return Err(parse_err(line_no, 7, "invalid table name or alias"));
                    }
                    let alias = alias.to_lowercase();
                    if schema.tables.iter().any(|t| t.alias == alias) {
                        return Err(LexiconError::DuplicateAlias { alias, line: line_no });
                    }
                    schema.tables.push(TableDef {
                        name: name.to_lowercase(),
                        alias,
                        columns: Vec::new(),
                    });
                }
                ["col", path] => {
                    let col = ColumnPath::parse(path)
                        .ok_or_else(|| parse_err(line_no, 5, format!("invalid column path '{path}'")))?;
                    let table = schema
                        .tables
                        .iter_mut()
                        .find(|t| t.alias == col.alias)
                        .ok_or_else(|| parse_err(line_no, 5, format!("unknown alias '{}'", col.alias)))?;
                    if !table.columns.contains(&col.column) {
                        table.columns.push(col.column);
                    }
                }
                ["rel", subject, relation, object] => schema.relationships.push(RelationKind {
                    subject: subject.to_lowercase(),
                    relation: relation.to_lowercase(),
                    object: object.to_lowercase(),
                }),
                _ => return Err(parse_err(line_no, 1, format!("unrecognised schema line '{line}'"))),
            }
        }
        Ok(schema)
    }

    pub fn has_column(&self, col: &ColumnPath) -> bool {
        self.tables
            .iter()
            .any(|t| t.alias == col.alias && t.columns.contains(&col.column))
    }
}

pub(crate) fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn quote(value: &str) -> String {
    let mut out = String::with_capacity(value.len() + 2);
    out.push('"');
    for c in value.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

fn parse_quoted(text: &str, line: usize, column: usize) -> Result<String, LexiconError> {
    let mut chars = text.chars();
    debug_assert_eq!(chars.next(), Some('"'));
    let mut out = String::new();
    loop {
        match chars.next() {
            None => return Err(parse_err(line, column, "unterminated quoted value")),
            Some('\\') => match chars.next() {
                Some(c) => out.push(c),
                None => return Err(parse_err(line, column, "dangling escape")),
            },
            Some('"') => break,
            Some(c) => out.push(c),
        }
    }
    let rest: String = chars.collect();
    if !rest.trim().is_empty() && !rest.trim().starts_with('#') {
        return Err(parse_err(line, column, "trailing text after value"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MARITIME: &str = r#"
var victim : va.victim
  "oil tanker"
  "Offshore Supply Vessel"
  "container ship"
var aggressor : va.aggressor
  "pirates"
abstract loc : va.location
abstract pos
abstract $dat
"#;

    #[test]
    fn loads_maritime_sample() {
        let lex = Lexicon::parse(MARITIME).unwrap();
        assert_eq!(lex.len(), 5);
        let victim = lex.get("victim").unwrap();
        assert_eq!(victim.values, ["oil tanker", "offshore supply vessel", "container ship"]);
        assert_eq!(lex.get("aggressor").unwrap().values, ["pirates"]);
        assert!(lex.get("dat").unwrap().is_abstract());
        assert_eq!(lex.abstract_by_token("$pos").unwrap().name, "pos");
        assert!(lex.abstract_by_token("$victim").is_none());
    }

    #[test]
    fn empty_block_rejected() {
        let err = Lexicon::parse("# nothing here\n").unwrap_err();
        assert_eq!(err.to_string(), "lexicon must declare at least one variable");
    }

    #[test]
    fn abstract_with_values_rejected() {
        let err = Lexicon::parse("abstract loc\n  \"singapore\"\n").unwrap_err();
        assert!(matches!(err, LexiconError::AbstractWithValues { ref name, line: 2 } if name == "loc"));
    }

    #[test]
    fn duplicate_and_parse_errors_carry_positions() {
        let err = Lexicon::parse("abstract loc\nabstract loc\n").unwrap_err();
        assert!(matches!(err, LexiconError::DuplicateName { line: 2, .. }));

        let err = Lexicon::parse("var victim : va.victim\n  \"oil tanker\n").unwrap_err();
        assert!(matches!(err, LexiconError::Parse { line: 2, column: 3, .. }), "{err}");

        let err = Lexicon::parse("var victim\n  \"x\"\n").unwrap_err();
        assert!(matches!(err, LexiconError::Parse { line: 1, .. }));

        let err = Lexicon::parse("var victim : va.victim\n").unwrap_err();
        assert!(matches!(err, LexiconError::NoValues { .. }));
    }

    #[test]
    fn text_round_trip() {
        let lex = Lexicon::parse(MARITIME).unwrap();
        assert_eq!(Lexicon::parse(&lex.to_text()).unwrap(), lex);
        let tricky = Lexicon::parse("var q : t.q\n  \"say \\\"hi\\\" \\\\ now\"\n").unwrap();
        assert_eq!(tricky.get("q").unwrap().values[0], "say \"hi\" \\ now");
        assert_eq!(Lexicon::parse(&tricky.to_text()).unwrap(), tricky);
    }

    #[test]
    fn schema_resolution() {
        let schema = SchemaManifest::parse(
            "table incidents as va\ncol va.victim\ncol va.aggressor\ncol va.location\nrel victim victim_aggressor aggressor\n",
        )
        .unwrap();
        assert_eq!(schema.relationships.len(), 1);
        let lex = Lexicon::parse(MARITIME).unwrap();
        lex.check_schema(&schema).unwrap();

        let lex = Lexicon::parse("var w : va.weapon\n  \"guns\"\n").unwrap();
        assert!(matches!(lex.check_schema(&schema), Err(LexiconError::UnknownColumn { .. })));

        assert!(matches!(
            SchemaManifest::parse("table a as x\ntable b as x\n"),
            Err(LexiconError::DuplicateAlias { line: 2, .. })
        ));
        assert!(SchemaManifest::parse("col zz.victim\n").is_err());
    }
}
