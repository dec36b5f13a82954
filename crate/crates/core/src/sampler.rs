//! Budgeted sampling that spreads picks uniformly over abstract templates.
//!
//! Templates are visited in sorted order, one pick per template per pass,
//! until the budget is spent. Inside a template the picks are a seeded
//! permutation prefix, so a larger budget under the same seed always
//! contains the smaller one.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grammar::CanonicalPair;
use crate::text::fnv1a;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SampleError {
    #[error("sampling budget must be positive")]
    ZeroBudget,
    #[error("sample fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),
    #[error("budget {requested} exceeds the population of {population}")]
    ExceedsPopulation { requested: usize, population: usize },
    #[error("cannot parse budget '{0}'")]
    Unparseable(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Fraction(f64),
    Count(usize),
}

impl Budget {
    /// Resolves the budget against a population size; fractions round up.
    pub fn resolve(self, population: usize) -> Result<usize, SampleError> {
        let n = match self {
            Budget::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(if f == 0.0 {
                        SampleError::ZeroBudget
                    } else {
                        SampleError::InvalidFraction(f)
                    });
                }
                // Guard against 0.1 * 60 = 6.000000000000001 rounding up to 7.
                ((f * population as f64) - 1e-9).ceil().max(0.0) as usize
            }
            Budget::Count(n) => n,
        };
        if n == 0 {
            return Err(SampleError::ZeroBudget);
        }
        if n > population {
            return Err(SampleError::ExceedsPopulation {
                requested: n,
                population,
            });
        }
        Ok(n)
    }
}

impl FromStr for Budget {
    type Err = SampleError;

    /// `0.1` and `10%` are fractions; a bare integer is a count.
    fn from_str(s: &str) -> Result<Budget, SampleError> {
        let s = s.trim();
        if let Some(pct) = s.strip_suffix('%') {
            let v: f64 = pct.trim().parse().map_err(|_| SampleError::Unparseable(s.into()))?;
            return Ok(Budget::Fraction(v / 100.0));
        }
        if let Ok(n) = s.parse::<usize>() {
            return Ok(Budget::Count(n));
        }
        s.parse::<f64>()
            .map(Budget::Fraction)
            .map_err(|_| SampleError::Unparseable(s.into()))
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Fraction(x) => write!(f, "{x}"),
            Budget::Count(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub population: usize,
    pub selected: usize,
    pub template_count: usize,
    pub allocation: BTreeMap<String, usize>,
    /// Fraction of selected pairs with at least one abstract variable.
    pub abstract_fraction: f64,
}

pub fn sample_uat(
    pairs: &[CanonicalPair],
    budget: Budget,
    seed: u64,
) -> Result<(Vec<CanonicalPair>, SamplingReport), SampleError> {
    let target = budget.resolve(pairs.len())?;

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry(p.template_id.as_str()).or_default().push(i);
    }

    let mut counts: Vec<usize> = vec![0; groups.len()];
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let mut remaining = target;
    while remaining > 0 {
        for (count, size) in counts.iter_mut().zip(&sizes) {
            if remaining == 0 {
                break;
            }
            if *count < *size {
                *count += 1;
                remaining -= 1;
            }
        }
    }

    let mut picked = Vec::with_capacity(target);
    let mut allocation = BTreeMap::new();
    for ((template, members), &count) in groups.iter().zip(&counts) {
        let mut order = members.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(template.as_bytes()));
        order.shuffle(&mut rng);
        picked.extend_from_slice(&order[..count]);
        allocation.insert(template.to_string(), count);
    }
    picked.sort_unstable();

    let selected: Vec<CanonicalPair> = picked.iter().map(|&i| pairs[i].clone()).collect();
    let with_abstract = selected.iter().filter(|p| p.has_abstract()).count();
    let report = SamplingReport {
        population: pairs.len(),
        selected: selected.len(),
        template_count: groups.len(),
        allocation,
        abstract_fraction: with_abstract as f64 / selected.len() as f64,
    };
    Ok((selected, report))
}
