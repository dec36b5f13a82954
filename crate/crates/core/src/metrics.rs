//! Parser accuracy (exact, exact without order, component F1) and corpus BLEU.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::sql::{self, Component, SqlError, SqlQuery};
use crate::text;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("{left} predictions/candidates but {right} gold/references")]
    LengthMismatch { left: usize, right: usize },
    #[error("nothing to score")]
    Empty,
    #[error("gold row {row} is not parseable SQL: {source}")]
    UnparseableGold {
        row: usize,
        #[source]
        source: SqlError,
    },
    #[error("BLEU order {0} is outside 1..=4")]
    Order(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set-overlap scores; two empty sets match perfectly.
pub fn set_prf<T: Ord>(pred: &std::collections::BTreeSet<T>, gold: &std::collections::BTreeSet<T>) -> Prf {
    if pred.is_empty() && gold.is_empty() {
        return Prf {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let inter = pred.intersection(gold).count() as f64;
    let precision = if pred.is_empty() { 0.0 } else { inter / pred.len() as f64 };
    let recall = if gold.is_empty() { 0.0 } else { inter / gold.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub exact: bool,
    pub no_order: bool,
    pub component_f1: f64,
    pub components: BTreeMap<Component, Prf>,
}

/// Scores one prediction against parsed gold; `None` or unparseable
/// predictions score zero everywhere.
pub fn score_example(prediction: Option<&str>, gold: &SqlQuery) -> ExampleScore {
    match prediction.map(sql::parse_sql) {
        Some(Ok(pred)) => {
            let components: BTreeMap<Component, Prf> = Component::ALL
                .iter()
                .map(|&c| (c, set_prf(pred.component(c), gold.component(c))))
                .collect();
            let component_f1 = components.values().map(|p| p.f1).sum::<f64>() / Component::ALL.len() as f64;
            ExampleScore {
                exact: sql::equal_exact(&pred, gold),
                no_order: sql::equal_no_order(&pred, gold),
                component_f1,
                components,
            }
        }
        _ => ExampleScore {
            exact: false,
            no_order: false,
            component_f1: 0.0,
            components: Component::ALL.iter().map(|&c| (c, Prf::default())).collect(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub exact_match_acc: f64,
    pub exact_match_no_order_acc: f64,
    /// Mean over examples of the per-example mean over the five components.
    pub component_f1: f64,
    pub per_component: BTreeMap<Component, Prf>,
    pub abstained: usize,
}

pub fn evaluate(predictions: &[Option<String>], gold: &[String]) -> Result<EvalReport, MetricsError> {
    if predictions.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            left: predictions.len(),
            right: gold.len(),
        });
    }
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    let gold: Vec<SqlQuery> = gold
        .iter()
        .enumerate()
        .map(|(row, g)| sql::parse_sql(g).map_err(|source| MetricsError::UnparseableGold { row, source }))
        .collect::<Result<_, _>>()?;
    let scores: Vec<ExampleScore> = predictions
        .iter()
        .zip(&gold)
        .map(|(p, g)| score_example(p.as_deref(), g))
        .collect();
    let n = scores.len() as f64;
    let mean = |f: &dyn Fn(&ExampleScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let per_component = Component::ALL
        .iter()
        .map(|&c| {
            (
                c,
                Prf {
                    precision: mean(&|s| s.components[&c].precision),
                    recall: mean(&|s| s.components[&c].recall),
                    f1: mean(&|s| s.components[&c].f1),
                },
            )
        })
        .collect();
    Ok(EvalReport {
        n: scores.len(),
        exact_match_acc: mean(&|s| f64::from(u8::from(s.exact))),
        exact_match_no_order_acc: mean(&|s| f64::from(u8::from(s.no_order))),
        component_f1: mean(&|s| s.component_f1),
        per_component,
        abstained: predictions.iter().filter(|p| p.is_none()).count(),
    })
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<28} {:>8}\n", "metric", "value"));
        out.push_str(&format!("{:<28} {:>8.2}\n", "Exact match (acc)", 100.0 * self.exact_match_acc));
        out.push_str(&format!(
            "{:<28} {:>8.2}\n",
            "Exact match no order (acc)",
            100.0 * self.exact_match_no_order_acc
        ));
        out.push_str(&format!("{:<28} {:>8.2}\n", "Component match (F1)", 100.0 * self.component_f1));
        out.push_str(&format!("{:<28} {:>8}\n", "examples", self.n));
        out.push_str(&format!("{:<28} {:>8}\n", "abstained", self.abstained));
        out.push_str(&format!("\n{:<10} {:>9} {:>9} {:>9}\n", "component", "P", "R", "F1"));
        for (c, p) in &self.per_component {
            out.push_str(&format!(
                "{:<10} {:>9.2} {:>9.2} {:>9.2}\n",
                c.name(),
                100.0 * p.precision,
                100.0 * p.recall,
                100.0 * p.f1
            ));
        }
        out
    }
}

fn ngram_counts(tokens: &[String], k: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= k {
        for w in tokens.windows(k) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-n with one reference per candidate, clipped counts pooled
/// over the corpus and no smoothing; scaled to [0, 100].
pub fn corpus_bleu(candidates: &[String], references: &[String], n: usize) -> Result<f64, MetricsError> {
    if !(1..=4).contains(&n) {
        return Err(MetricsError::Order(n));
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            left: candidates.len(),
            right: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricsError::Empty);
    }
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| text::tokenize(c)).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|r| text::tokenize(r)).collect();
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    for (c, r) in cands.iter().zip(&refs) {
        for k in 1..=n {
            let rc = ngram_counts(r, k);
            for (gram, count) in ngram_counts(c, k) {
                matched[k - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
                total[k - 1] += count;
            }
        }
    }
    if matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_mean = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * log_mean.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub bleu: BTreeMap<usize, f64>,
}

/// BLEU-1..4 of paraphrases against their sources; lower means more diverse.
pub fn diversity(candidates: &[String], references: &[String]) -> Result<DiversityReport, MetricsError> {
    let bleu = (1..=4)
        .map(|n| corpus_bleu(candidates, references, n).map(|s| (n, s)))
        .collect::<Result<_, _>>()?;
    Ok(DiversityReport { bleu })
}

impl DiversityReport {
    pub fn render(&self) -> String {
        let mut out = format!("{:<8} {:>8}\n", "metric", "score");
        for (n, s) in &self.bleu {
            out.push_str(&format!("{:<8} {:>8.2}\n", format!("BLEU-{n}"), s));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> String {
        x.to_string()
    }

    const GOLD: &str = r#"SELECT va.victim FROM incidents AS va WHERE va.aggressor = "pirates" AND va.victim = "container ship""#;

    #[test]
    fn identical_predictions_score_one() {
        let r = evaluate(&[Some(s(GOLD))], &[s(GOLD)]).unwrap();
        assert_eq!((r.exact_match_acc, r.exact_match_no_order_acc, r.component_f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn where_reorder() {
        let pred = r#"SELECT va.victim FROM incidents AS va WHERE va.victim = "container ship" AND va.aggressor = "pirates""#;
        let r = evaluate(&[Some(s(pred))], &[s(GOLD)]).unwrap();
        assert_eq!((r.exact_match_acc, r.exact_match_no_order_acc, r.component_f1), (0.0, 1.0, 1.0));
    }

    #[test]
    fn missing_group_by_costs_one_fifth() {
        let gold = "SELECT va.weapon, COUNT(*) FROM incidents AS va WHERE va.victim = \"tanker\" GROUP BY va.weapon ORDER BY va.weapon";
        let pred = "SELECT va.weapon, COUNT(*) FROM incidents AS va WHERE va.victim = \"tanker\" ORDER BY va.weapon";
        let r = evaluate(&[Some(s(pred))], &[s(gold)]).unwrap();
        assert!((r.component_f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn unparseable_and_abstain_score_zero() {
        let r = evaluate(&[Some(s("not sql")), None], &[s(GOLD), s(GOLD)]).unwrap();
        assert_eq!((r.exact_match_acc, r.component_f1, r.abstained), (0.0, 0.0, 1));
        assert!(matches!(evaluate(&[None], &[]), Err(MetricsError::LengthMismatch { .. })));
        assert!(matches!(evaluate(&[None], &[s("nope")]), Err(MetricsError::UnparseableGold { row: 0, .. })));
    }

    #[test]
    fn bleu_hand_examples() {
        let c = [s("pirates robbed the ship")];
        let r = [s("pirates robbed the tanker")];
        assert!((corpus_bleu(&c, &r, 1).unwrap() - 75.0).abs() < 1e-12);
        assert_eq!(corpus_bleu(&r, &r, 4).unwrap(), 100.0);
        // No 4-gram overlap at all: unsmoothed score is zero.
        assert_eq!(corpus_bleu(&c, &r, 4).unwrap(), 0.0);
        assert!(matches!(corpus_bleu(&[], &[], 1), Err(MetricsError::Empty)));
        assert!(matches!(corpus_bleu(&c, &r, 5), Err(MetricsError::Order(5))));
    }

    #[test]
    fn brevity_penalty() {
        let c = [s("pirates robbed")];
        let r = [s("pirates robbed the tanker")];
        let expected = 100.0 * (1.0f64 - 4.0 / 2.0).exp();
        assert!((corpus_bleu(&c, &r, 1).unwrap() - expected).abs() < 1e-12);
    }
}
