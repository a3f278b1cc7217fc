//! Decision rules and per-image ranking of predicted triplets.
//!
//! Score vectors carry the background class at index 0 and foreground
//! predicates at `1..=C`. The filtering rule abstains (returns 0) whenever the
//! background score reaches the threshold; otherwise it picks the best
//! foreground predicate.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::metrics::RelInstance;

/// Background threshold used when nothing else is configured.
pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterRule {
    theta: f64,
}

impl FilterRule {
    pub const BACKGROUND: usize = 0;

    pub fn new(theta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::InvalidConfig(format!("theta must lie in [0, 1], got {theta}")));
        }
        Ok(Self { theta })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}

impl Default for FilterRule {
    fn default() -> Self {
        Self { theta: DEFAULT_THETA }
    }
}

/// Index of the best foreground score, 1-based; ties go to the lowest class.
pub fn argmax_decision(foreground: &[f64]) -> Result<usize> {
    if foreground.is_empty() {
        return Err(Error::EmptyInput("no foreground scores"));
    }
    let mut best = 0;
    for (k, &s) in foreground.iter().enumerate().skip(1) {
        if s > foreground[best] {
            best = k;
        }
    }
    Ok(best + 1)
}

/// Background filtering over a full score vector (background at index 0).
pub fn nrf_decision(scores: &[f64], rule: FilterRule) -> Result<usize> {
    if scores.len() < 2 {
        return Err(Error::EmptyInput("need a background score and at least one foreground score"));
    }
    if scores[0] < rule.theta() {
        argmax_decision(&scores[1..])
    } else {
        Ok(FilterRule::BACKGROUND)
    }
}

/// How a full score vector is turned into a predicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    /// Best foreground predicate, ignoring the background score.
    Unfiltered,
    /// Background filtering with the given threshold.
    Filtered(FilterRule),
}

impl Decision {
    pub fn decide(&self, scores: &[f64]) -> Result<usize> {
        match self {
            Decision::Unfiltered => {
                if scores.len() < 2 {
                    return Err(Error::EmptyInput("need a background score and at least one foreground score"));
                }
                argmax_decision(&scores[1..])
            }
            Decision::Filtered(rule) => nrf_decision(scores, *rule),
        }
    }
}

/// One candidate subject-object pair with its full score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub image: u64,
    pub subject: u64,
    pub object: u64,
    pub scores: Vec<f64>,
}

/// A ranked prediction; always carries a score.
pub type ScoredTriplet = RelInstance;

/// Per-image top-`k` triplets.
///
/// Each pair yields at most one triplet (its decided predicate, scored by that
/// predicate's score); background decisions yield nothing. Within an image,
/// triplets are ordered by descending score, then by the pair's position in
/// the input, then by class.
pub fn rank_predictions(
    pairs: &[ScoredPair],
    decision: Decision,
    k: usize,
) -> Result<BTreeMap<u64, Vec<ScoredTriplet>>> {
    let mut per_image: BTreeMap<u64, Vec<(usize, ScoredTriplet)>> = BTreeMap::new();
    let mut seen = HashSet::with_capacity(pairs.len());
    let mut position: BTreeMap<u64, usize> = BTreeMap::new();
    for pair in pairs {
        if !seen.insert((pair.image, pair.subject, pair.object)) {
            return Err(Error::DuplicatePair { image: pair.image, subject: pair.subject, object: pair.object });
        }
        let pair_id = {
            let slot = position.entry(pair.image).or_insert(0);
            *slot += 1;
            *slot - 1
        };
        let entry = per_image.entry(pair.image).or_default();
        let class = decision.decide(&pair.scores)?;
        if class == FilterRule::BACKGROUND {
            continue;
        }
        entry.push((
            pair_id,
            RelInstance {
                image: pair.image,
                subject: pair.subject,
                object: pair.object,
                predicate: class,
                score: Some(pair.scores[class]),
            },
        ));
    }

    Ok(per_image
        .into_iter()
        .map(|(image, mut triplets)| {
            triplets.sort_by(|(pa, a), (pb, b)| {
                let (sa, sb) = (a.score.unwrap_or(0.0), b.score.unwrap_or(0.0));
                sb.total_cmp(&sa).then(pa.cmp(pb)).then(a.predicate.cmp(&b.predicate))
            });
            triplets.truncate(k);
            (image, triplets.into_iter().map(|(_, t)| t).collect())
        })
        .collect())
}
