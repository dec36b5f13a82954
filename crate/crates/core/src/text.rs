//! Utterance tokenization shared by the anonymizer, the paraphrasers and BLEU.

/// Characters split off the edges of a whitespace token.
const EDGE_PUNCT: &[char] = &['?', '!', '.', ',', ';', ':', '(', ')', '"', '\''];

/// Lowercases, splits on whitespace and detaches leading/trailing punctuation.
///
/// Word-internal punctuation survives (`what's`, `1.5`), and abstract tokens
/// such as `$loc` or placeholders such as `{victim}` stay whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        let mut leading = Vec::new();
        while start < end && EDGE_PUNCT.contains(&chars[start]) {
            leading.push(chars[start].to_string());
            start += 1;
        }
        let mut trailing = Vec::new();
        while end > start && EDGE_PUNCT.contains(&chars[end - 1]) {
            trailing.push(chars[end - 1].to_string());
            end -= 1;
        }
        out.extend(leading);
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

pub fn join(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Whitespace/case normalization used for candidate deduplication.
pub fn normalize(text: &str) -> String {
    join(&tokenize(text))
}

/// Token-level Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Stable 64-bit FNV-1a, used to derive per-item RNG streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
