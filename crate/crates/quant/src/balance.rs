//! Oversampling of calibration data for rarely routed experts.

use std::collections::BTreeMap;

use compass_moe::MoeModel;
use serde::{Deserialize, Serialize};

use crate::calib::{route_counts, CalibrationStats};
use crate::error::{QuantError, Result};

/// Result of [`balance_calibration`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Balanced {
    /// Original calibration sequences followed by the accepted pool sequences.
    pub sequences: Vec<Vec<u32>>,
    /// Pool indices that were appended, in order.
    pub added: Vec<usize>,
    /// Final per-layer expert counts.
    pub counts: BTreeMap<usize, Vec<u64>>,
}

fn deficits(counts: &BTreeMap<usize, Vec<u64>>, tau: u64) -> Vec<(usize, usize)> {
    counts
        .iter()
        .flat_map(|(&l, c)| {
            c.iter()
                .enumerate()
                .filter(|&(_, &n)| n < tau)
                .map(move |(e, _)| (l, e))
        })
        .collect()
}

/// Grow `calib` with pool sequences until every expert of every MoE layer
/// has been routed at least `tau` tokens.
///
/// The pool is pre-routed once; a pool sequence is accepted, in pool
/// order, when it routes at least one token to an expert that is still in
/// deficit. `stats` must come from `calib`.
pub fn balance_calibration(
    stats: &CalibrationStats,
    calib: &[Vec<u32>],
    pool: &[Vec<u32>],
    model: &MoeModel,
    tau: u64,
) -> Result<Balanced> {
    if tau == 0 {
        return Err(QuantError::InvalidArgument("tau must be at least 1".into()));
    }
    let mut counts = stats.counts.clone();
    let mut added = Vec::new();
    if !deficits(&counts, tau).is_empty() {
        let routed = route_counts(model, pool)?;
        for (i, seq_counts) in routed.iter().enumerate() {
            let need = deficits(&counts, tau);
            if need.is_empty() {
                break;
            }
            if need
                .iter()
                .any(|&(l, e)| seq_counts.get(&l).is_some_and(|c| c[e] > 0))
            {
                for (l, c) in seq_counts {
                    let acc = counts.entry(*l).or_insert_with(|| vec![0; c.len()]);
                    for (a, &b) in acc.iter_mut().zip(c) {
                        *a += b;
                    }
                }
                added.push(i);
            }
        }
        if let Some(&(layer, expert)) = deficits(&counts, tau).first() {
            return Err(QuantError::Unbalanced {
                layer,
                expert,
                count: counts[&layer][expert],
                tau,
            });
        }
    }
    let mut sequences = calib.to_vec();
    sequences.extend(added.iter().map(|&i| pool[i].clone()));
    Ok(Balanced {
        sequences,
        added,
        counts,
    })
}
