//! Deterministic rule-based paraphraser: a fixed synonym table plus two
//! structural rewrites (fronting a trailing prepositional phrase, and
//! active/passive voice for a small verb whitelist).
//!
//! Bound lexicon values and `$` tokens are treated as opaque spans and are
//! never rewritten.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::text::fnv1a;

/// Canonical phrase to its substitutes.
pub const SYNONYMS: &[(&str, &[&str])] = &[
    ("how many", &["what number of"]),
    ("which", &["what"]),
    ("rob", &["steal"]),
    ("incidents", &["events", "cases"]),
    ("incident", &["event"]),
    ("happened", &["occurred", "took place"]),
    ("list", &["show", "display"]),
    ("targeted", &["assaulted"]),
    ("involving", &["concerning"]),
    ("use", &["employ"]),
    ("used", &["employed"]),
    ("ships", &["vessels"]),
    ("most recent", &["latest"]),
    ("near", &["close to"]),
    ("each", &["every"]),
    ("type", &["kind"]),
    ("weapons", &["arms"]),
    ("recorded", &["reported"]),
];

/// (base form, past participle) pairs eligible for the voice rewrite.
pub const VOICE_VERBS: &[(&str, &str)] = &[
    ("attack", "attacked"),
    ("board", "boarded"),
    ("hijack", "hijacked"),
    ("rob", "robbed"),
    ("target", "targeted"),
    ("approach", "approached"),
];

/// Prepositions that may follow a rewritten clause or head a fronted phrase.
pub const PREPOSITIONS: &[&str] = &["in", "on", "at", "near", "during", "off", "with", "since", "between"];
const FRONTABLE: &[&str] = &["in", "on", "near", "at"];

/// Upper bound on enumerated variants per utterance.
pub const MAX_VARIANTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unit {
    Word(String),
    /// A protected span: a bound value or an abstract token.
    Span(Vec<String>),
}

impl Unit {
    fn word(&self) -> Option<&str> {
        match self {
            Unit::Word(w) => Some(w),
            Unit::Span(_) => None,
        }
    }

    fn is_word(&self, w: &str) -> bool {
        self.word() == Some(w)
    }
}

/// Groups tokens into words and protected spans. `$` tokens are always
/// protected; among `protected` sequences longer ones claim tokens first.
pub fn units(tokens: &[String], protected: &[Vec<String>]) -> Vec<Unit> {
    let mut claimed: Vec<Option<usize>> = vec![None; tokens.len()];
    let mut order: Vec<&Vec<String>> = protected.iter().filter(|p| !p.is_empty()).collect();
    order.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    let mut next_id = 0;
    for seq in order {
        let n = seq.len();
        let mut start = 0;
        while start + n <= tokens.len() {
            if tokens[start..start + n] == seq[..] && claimed[start..start + n].iter().all(Option::is_none) {
                for c in &mut claimed[start..start + n] {
                    *c = Some(next_id);
                }
                next_id += 1;
                start += n;
            } else {
                start += 1;
            }
        }
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        match claimed[i] {
            Some(id) => {
                let mut j = i;
                while j < tokens.len() && claimed[j] == Some(id) {
                    j += 1;
                }
                out.push(Unit::Span(tokens[i..j].to_vec()));
                i = j;
            }
            None if tokens[i].starts_with('$') => {
                out.push(Unit::Span(vec![tokens[i].clone()]));
                i += 1;
            }
            None => {
                out.push(Unit::Word(tokens[i].clone()));
                i += 1;
            }
        }
    }
    out
}

pub fn flatten(units: &[Unit]) -> Vec<String> {
    let mut out = Vec::new();
    for u in units {
        match u {
            Unit::Word(w) => out.push(w.clone()),
            Unit::Span(s) => out.extend(s.iter().cloned()),
        }
    }
    out
}

/// `... P <span> ?` becomes `P <span> , ... ?`.
pub fn front(units: &[Unit]) -> Option<Vec<Unit>> {
    let n = units.len();
    if n < 5 || !units[n - 1].is_word("?") {
        return None;
    }
    let prep = units[n - 3].word().filter(|p| FRONTABLE.contains(p))?;
    if !matches!(units[n - 2], Unit::Span(_)) {
        return None;
    }
    let mut out = vec![Unit::Word(prep.to_string()), units[n - 2].clone(), Unit::Word(",".into())];
    out.extend_from_slice(&units[..n - 3]);
    out.push(Unit::Word("?".into()));
    Some(out)
}

fn clause_boundary(units: &[Unit], at: usize) -> bool {
    match units.get(at) {
        None => true,
        Some(Unit::Word(w)) => w == "?" || PREPOSITIONS.contains(&w.as_str()),
        Some(Unit::Span(_)) => false,
    }
}

/// Swaps `were PP by <span>` with `did <span> BASE` at the first eligible site.
pub fn flip_voice(units: &[Unit]) -> Option<Vec<Unit>> {
    for i in 0..units.len() {
        if units[i].is_word("were") && i + 3 < units.len() {
            let pp = units[i + 1].word();
            let base = VOICE_VERBS.iter().find(|(_, p)| Some(*p) == pp).map(|(b, _)| *b);
            if let (Some(base), true, Unit::Span(_)) = (base, units[i + 2].is_word("by"), &units[i + 3]) {
                if clause_boundary(units, i + 4) {
                    let mut out = units[..i].to_vec();
                    out.push(Unit::Word("did".into()));
                    out.push(units[i + 3].clone());
                    out.push(Unit::Word(base.into()));
                    out.extend_from_slice(&units[i + 4..]);
                    return Some(out);
                }
            }
        }
        if units[i].is_word("did") && i + 2 < units.len() {
            let base = units[i + 2].word();
            let pp = VOICE_VERBS.iter().find(|(b, _)| Some(*b) == base).map(|(_, p)| *p);
            if let (Some(pp), Unit::Span(_)) = (pp, &units[i + 1]) {
                if clause_boundary(units, i + 3) {
                    let mut out = units[..i].to_vec();
                    out.push(Unit::Word("were".into()));
                    out.push(Unit::Word(pp.into()));
                    out.push(Unit::Word("by".into()));
                    out.push(units[i + 1].clone());
                    out.extend_from_slice(&units[i + 3..]);
                    return Some(out);
                }
            }
        }
    }
    None
}

/// One position where a synonym may be substituted.
struct Site {
    start: usize,
    len: usize,
    alternatives: &'static [&'static str],
}

fn phrase_at(units: &[Unit], start: usize, phrase: &str) -> Option<usize> {
    let words: Vec<&str> = phrase.split(' ').collect();
    if start + words.len() > units.len() {
        return None;
    }
    words
        .iter()
        .enumerate()
        .all(|(k, w)| units[start + k].is_word(w))
        .then_some(words.len())
}

fn synonym_sites(units: &[Unit]) -> Vec<Site> {
    let mut sites = Vec::new();
    let mut i = 0;
    while i < units.len() {
        let best = SYNONYMS
            .iter()
            .filter_map(|(key, alts)| phrase_at(units, i, key).map(|len| (len, *alts)))
            .max_by_key(|(len, _)| *len);
        match best {
            Some((len, alternatives)) => {
                sites.push(Site { start: i, len, alternatives });
                i += len;
            }
            None => i += 1,
        }
    }
    sites
}

/// Every synonym assignment over `units`, in odometer order (identity first).
fn synonym_variants(units: &[Unit], cap: usize) -> Vec<Vec<String>> {
    let sites = synonym_sites(units);
    let mut choice = vec![0usize; sites.len()];
    let mut out = Vec::new();
    loop {
        let mut rendered = Vec::new();
        let mut i = 0;
        let mut s = 0;
        while i < units.len() {
            if s < sites.len() && sites[s].start == i {
                let c = choice[s];
                if c == 0 {
                    rendered.extend(flatten(&units[i..i + sites[s].len]));
                } else {
                    rendered.extend(sites[s].alternatives[c - 1].split(' ').map(str::to_string));
                }
                i += sites[s].len;
                s += 1;
            } else {
                rendered.extend(flatten(&units[i..i + 1]));
                i += 1;
            }
        }
        out.push(rendered);
        if out.len() >= cap {
            break;
        }
        let mut k = sites.len();
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            choice[k] += 1;
            if choice[k] <= sites[k].alternatives.len() {
                break;
            }
            choice[k] = 0;
        }
    }
    out
}

/// All distinct rewrites of `tokens`, identity first.
pub fn variants(tokens: &[String], protected: &[Vec<String>]) -> Vec<Vec<String>> {
    let base = units(tokens, protected);
    let mut forms = vec![base.clone()];
    if let Some(f) = front(&base) {
        forms.push(f);
    }
    if let Some(v) = flip_voice(&base) {
        if let Some(fv) = front(&v) {
            forms.push(fv);
        }
        forms.push(v);
    }
    let per_form = (MAX_VARIANTS / forms.len()).max(1);
    let mut out: Vec<Vec<String>> = Vec::new();
    for form in &forms {
        for v in synonym_variants(form, per_form) {
            if !out.contains(&v) {
                out.push(v);
            }
        }
    }
    out
}

/// Picks `k` rewrites by a seeded shuffle of [`variants`]; the identity is
/// part of the pool.
pub fn builtin_paraphrase(tokens: &[String], protected: &[Vec<String>], seed: u64, k: usize) -> Vec<String> {
    let mut pool = variants(tokens, protected);
    let key = tokens.join(" ");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(key.as_bytes()));
    pool.shuffle(&mut rng);
    pool.into_iter().take(k).map(|t| t.join(" ")).collect()
}

/// Maps substitutes back to canonical phrases, longest match first. Tokens
/// with `skip[i]` set are left as they are.
pub fn fold_synonyms(tokens: &[String], skip: &[bool]) -> Vec<String> {
    let mut table: Vec<(Vec<&str>, &str)> = SYNONYMS
        .iter()
        .flat_map(|(canon, alts)| alts.iter().map(move |a| (a.split(' ').collect::<Vec<_>>(), *canon)))
        .collect();
    table.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
    let mut out = Vec::new();
    let mut i = 0;
    'outer: while i < tokens.len() {
        for (alt, canon) in &table {
            let n = alt.len();
            if i + n <= tokens.len()
                && (0..n).all(|k| !skip.get(i + k).copied().unwrap_or(false) && tokens[i + k] == alt[k])
            {
                out.extend(canon.split(' ').map(str::to_string));
                i += n;
                continue 'outer;
            }
        }
        out.push(tokens[i].clone());
        i += 1;
    }
    out
}
