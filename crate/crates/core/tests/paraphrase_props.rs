mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use sqlboot::grammar::CanonicalPair;
use sqlboot::paraphrase::{paraphrase_all, repair_variables, ProviderSpec};
use sqlboot::pipeline::generate_pairs;
use sqlboot::text::tokenize;

use common::fixture;

/// Substitute to canonical, multiword entries first.
const INVERSE: &[(&str, &str)] = &[
    ("what number of", "how many"),
    ("took place", "happened"),
    ("close to", "near"),
    ("what", "which"),
    ("steal", "rob"),
    ("events", "incidents"),
    ("cases", "incidents"),
    ("event", "incident"),
    ("occurred", "happened"),
    ("show", "list"),
    ("display", "list"),
    ("assaulted", "targeted"),
    ("concerning", "involving"),
    ("employ", "use"),
    ("employed", "used"),
    ("vessels", "ships"),
    ("latest", "most recent"),
    ("every", "each"),
    ("kind", "type"),
    ("arms", "weapons"),
    ("reported", "recorded"),
];

const PARTICIPLES: &[(&str, &str)] = &[
    ("attacked", "attack"),
    ("boarded", "board"),
    ("hijacked", "hijack"),
    ("robbed", "rob"),
    ("targeted", "target"),
    ("approached", "approach"),
];

/// Bag of content words after undoing synonym choice, voice and fronting.
fn content_bag(text: &str) -> BTreeMap<String, usize> {
    let mut words = format!(" {} ", tokenize(text).join(" "));
    for (from, to) in INVERSE {
        words = words.replace(&format!(" {from} "), &format!(" {to} "));
    }
    let mut bag = BTreeMap::new();
    for w in words.split_whitespace() {
        let w = PARTICIPLES.iter().find(|(pp, _)| *pp == w).map_or(w, |(_, base)| *base);
        if matches!(w, "were" | "did" | "by" | ",") {
            continue;
        }
        *bag.entry(w.to_string()).or_insert(0) += 1;
    }
    bag
}

fn pairs() -> Vec<CanonicalPair> {
    generate_pairs(&fixture("maritime.grammar"), &fixture("maritime.lexicon"), None).unwrap().0
}

#[test]
fn builtin_candidates_preserve_content() {
    let pairs = pairs();
    let (cands, report) = paraphrase_all(&[ProviderSpec::builtin("b", 3)], &pairs, 4);
    assert!(report.valid > pairs.len());
    let by_id: BTreeMap<u64, &CanonicalPair> = pairs.iter().map(|p| (p.id, p)).collect();
    let mut rewritten = 0;
    for c in &cands {
        let p = by_id[&c.source_pair_ref];
        assert_eq!(content_bag(&c.text), content_bag(&p.utterance), "{} -> {}", p.utterance, c.text);
        for v in p.concrete_values() {
            assert!(c.text.contains(v), "{v} lost in {}", c.text);
        }
        assert!(c.is_valid(), "{c:?}");
        rewritten += usize::from(c.text != p.utterance);
    }
    assert!(rewritten * 2 > cands.len(), "too few rewrites: {rewritten} of {}", cands.len());
}

#[test]
fn builtin_is_seed_deterministic() {
    let pairs = pairs();
    let run = |seed| paraphrase_all(&[ProviderSpec::builtin("b", seed)], &pairs[..50], 3).0;
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

proptest! {
    #[test]
    fn repair_never_invents_variables(
        words in prop::collection::vec(prop::sample::select(vec!["ships", "$loc", "$dat", "in", "were", "?", "$pos"]), 0..10),
    ) {
        let source: Vec<String> = "how many ships in $loc on $dat ?".split(' ').map(str::to_string).collect();
        let r = repair_variables(&source, &words.join(" "));
        if r.invalid.is_none() {
            let mut got: Vec<&str> = r.text.split_whitespace().filter(|t| t.starts_with('$')).collect();
            got.sort_unstable();
            prop_assert_eq!(got, vec!["$dat", "$loc"]);
        }
    }
}
