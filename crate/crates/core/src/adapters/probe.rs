use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{AdapterState, MoeVariant, Strategy};
use crate::error::{Error, Result};
use crate::model::{BaseModel, GateTrace};
use crate::slot::Slot;
use crate::tape::Tape;

/// Mean gate probability per expert, one row per discipline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingMatrix {
    pub slot: Slot,
    pub disciplines: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl RoutingMatrix {
    pub fn experts(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Total-variation distance between two discipline rows.
    pub fn total_variation(&self, i: usize, j: usize) -> f64 {
        0.5 * self.rows[i]
            .iter()
            .zip(&self.rows[j])
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Averages the gate output at `slot` over every token of every sequence,
/// grouped by discipline (rows in first-seen order). Rank-wise gates are
/// folded to per-expert mass.
pub fn routing_probe<'a, I>(
    model: &BaseModel,
    state: &AdapterState,
    sequences: I,
    slot: Slot,
) -> Result<RoutingMatrix>
where
    I: IntoIterator<Item = (&'a str, &'a [u32])>,
{
    if !state.has_gate(slot) {
        return Err(Error::NoGate(slot.to_string()));
    }
    let k = state.spec().experts;
    let rank = state.spec().rank;
    let fold = matches!(state.spec().strategy, Strategy::Moe(MoeVariant::RankWise));

    let mut order: Vec<String> = Vec::new();
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (discipline, tokens) in sequences {
        let mut tape = Tape::new();
        let mut trace = GateTrace::new();
        model.forward_on_tape(&mut tape, Some(state), tokens, Some(&mut trace))?;
        let omega = tape.value(*trace.get(&slot).ok_or_else(|| Error::NoGate(slot.to_string()))?);
        let entry = sums.entry(discipline.to_string()).or_insert_with(|| {
            order.push(discipline.to_string());
            (vec![0.0; k], 0)
        });
        for row in 0..omega.rows() {
            let r = omega.row_slice(row);
            for e in 0..k {
                entry.0[e] += if fold {
                    r[e * rank..(e + 1) * rank].iter().sum::<f64>()
                } else {
                    r[e]
                };
            }
            entry.1 += 1;
        }
    }
    let rows = order
        .iter()
        .map(|d| {
            let (s, n) = &sums[d];
            s.iter().map(|v| v / *n as f64).collect()
        })
        .collect();
    Ok(RoutingMatrix {
        slot,
        disciplines: order,
        rows,
    })
}
