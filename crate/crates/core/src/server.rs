//! Server-side aggregation of per-class client knowledge.

use crate::client::ClassKnowledge;
use crate::error::{Error, Result};
use crate::numerics::ProbVec;

/// Count-weighted mean of client soft labels, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedKnowledge {
    pub per_class: Vec<ProbVec>,
    /// Total samples of each class across all clients.
    pub totals: Vec<usize>,
    pub round: usize,
}

impl AggregatedKnowledge {
    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn max_simplex_error(&self) -> f64 {
        self.per_class.iter().map(ProbVec::deviation).fold(0.0, f64::max)
    }
}

/// Aggregates client knowledge of one round. Every class must be held by at least
/// one client, and every record must carry the same round number.
pub fn aggregate(knowledges: &[ClassKnowledge]) -> Result<AggregatedKnowledge> {
    let first = knowledges
        .first()
        .ok_or_else(|| Error::InvalidInput("no client knowledge to aggregate".into()))?;
    let classes = first.classes();
    let round = first.round;
    for k in knowledges {
        if k.classes() != classes || k.counts.len() != classes {
            return Err(Error::Shape(format!(
                "client reports {} classes, expected {classes}",
                k.classes()
            )));
        }
        if k.round != round {
            return Err(Error::InvalidInput(format!(
                "knowledge from round {} mixed with round {round}",
                k.round
            )));
        }
    }

    let mut per_class = Vec::with_capacity(classes);
    let mut totals = Vec::with_capacity(classes);
    for c in 0..classes {
        let total: usize = knowledges
            .iter()
            .filter(|k| k.per_class[c].is_some())
            .map(|k| k.counts[c])
            .sum();
        if total == 0 {
            return Err(Error::MissingClass { class: c });
        }
        let mut acc = vec![0.0; classes];
        for k in knowledges {
            let Some(l) = &k.per_class[c] else { continue };
            if l.len() != classes {
                return Err(Error::Shape(format!("soft label of length {} for {classes} classes", l.len())));
            }
            let w = k.counts[c] as f64 / total as f64;
            for (a, v) in acc.iter_mut().zip(l.as_slice()) {
                *a += w * v;
            }
        }
        per_class.push(ProbVec::new(acc)?);
        totals.push(total);
    }
    Ok(AggregatedKnowledge {
        per_class,
        totals,
        round,
    })
}
