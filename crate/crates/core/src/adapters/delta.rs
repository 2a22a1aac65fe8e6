//! Adapter arithmetic recorded on a tape.
//!
//! All variants share one code path: per expert, `h = x·Aᵀ` is scaled row-wise
//! by that expert's gate weight before `h·Bᵀ`, the expert outputs are summed
//! in index order, and the `α/r` multiplier is applied last. Rank-wise routing
//! swaps the per-row scale for a per-rank-component scale; with `r = 1` the
//! two routes perform identical floating-point operations.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeVariant {
    Vanilla,
    SharedExpert,
    SharedA,
    RankWise,
}

impl MoeVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            MoeVariant::Vanilla => "vanilla",
            MoeVariant::SharedExpert => "shared_expert",
            MoeVariant::SharedA => "shared_a",
            MoeVariant::RankWise => "rank_wise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vanilla" => Some(Self::Vanilla),
            "shared_expert" => Some(Self::SharedExpert),
            "shared_a" => Some(Self::SharedA),
            "rank_wise" => Some(Self::RankWise),
            _ => None,
        }
    }
}

/// Tape handles for one mixture slot.
#[derive(Clone, Debug)]
pub struct MixtureVars {
    pub variant: MoeVariant,
    /// One `A` per expert; empty for the shared-A variant.
    pub experts_a: Vec<Var>,
    pub experts_b: Vec<Var>,
    pub shared_a: Option<Var>,
    pub shared_expert: Option<(Var, Var)>,
    pub gate_w: Var,
    pub gate_b: Var,
}

/// `(α/r) · (x·Aᵀ)·Bᵀ` for row activations `x`.
pub fn lora_on(tape: &mut Tape, x: Var, a: Var, b: Var, scale: f64) -> Result<Var> {
    let h = tape.matmul_nt(x, a)?;
    let o = tape.matmul_nt(h, b)?;
    tape.scale(o, scale)
}

/// Row-wise `softmax(x·Wᵀ + bias)`.
pub fn gate_on(tape: &mut Tape, x: Var, w: Var, bias: Var) -> Result<Var> {
    let logits = tape.matmul_nt(x, w)?;
    let logits = tape.add_row(logits, bias)?;
    tape.softmax(logits)
}

fn sum_in_order(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let mut acc = *parts.first().ok_or(Error::MissingBlock("experts"))?;
    for p in &parts[1..] {
        acc = tape.add(acc, *p)?;
    }
    Ok(acc)
}

fn routed(tape: &mut Tape, h: Var, omega: Var, col: usize, b: Var) -> Result<Var> {
    let hw = tape.scale_col(h, omega, col)?;
    tape.matmul_nt(hw, b)
}

/// Mixture delta and gate probabilities for one slot.
///
/// `x` feeds the experts, `gate_input` feeds the gate (the same activation for
/// per-token routing, a pooled version otherwise). `rank` is the per-expert rank.
pub fn mixture_on(
    tape: &mut Tape,
    x: Var,
    gate_input: Var,
    m: &MixtureVars,
    rank: usize,
    scale: f64,
) -> Result<(Var, Var)> {
    let k = m.experts_b.len();
    if k == 0 {
        return Err(Error::MissingBlock("experts"));
    }
    let omega = gate_on(tape, gate_input, m.gate_w, m.gate_b)?;
    let arity = tape.value(omega).cols();
    let expected = if m.variant == MoeVariant::RankWise { k * rank } else { k };
    if arity != expected {
        return Err(Error::GateArity {
            expected,
            found: arity,
        });
    }

    let mut parts = Vec::with_capacity(k + 1);
    match m.variant {
        MoeVariant::Vanilla | MoeVariant::SharedExpert => {
            if m.experts_a.len() != k {
                return Err(Error::MissingBlock("expert A matrices"));
            }
            if m.variant == MoeVariant::SharedExpert {
                let (sa, sb) = m.shared_expert.ok_or(Error::MissingBlock("shared expert"))?;
                let h = tape.matmul_nt(x, sa)?;
                parts.push(tape.matmul_nt(h, sb)?);
            } else if m.shared_expert.is_some() || m.shared_a.is_some() {
                return Err(Error::VariantMismatch {
                    expected: "vanilla",
                    found: "mixture with shared block",
                });
            }
            for i in 0..k {
                let h = tape.matmul_nt(x, m.experts_a[i])?;
                parts.push(routed(tape, h, omega, i, m.experts_b[i])?);
            }
        }
        MoeVariant::SharedA => {
            let a = m.shared_a.ok_or(Error::MissingBlock("shared A"))?;
            let h = tape.matmul_nt(x, a)?;
            for i in 0..k {
                parts.push(routed(tape, h, omega, i, m.experts_b[i])?);
            }
        }
        MoeVariant::RankWise => {
            if m.experts_a.len() != k {
                return Err(Error::MissingBlock("expert A matrices"));
            }
            // mass per component is rescaled by r so equal splits reproduce vanilla
            let weights = tape.scale(omega, rank as f64)?;
            for i in 0..k {
                let h = tape.matmul_nt(x, m.experts_a[i])?;
                let w = tape.slice_cols(weights, i * rank, rank)?;
                let hw = tape.mul(h, w)?;
                parts.push(tape.matmul_nt(hw, m.experts_b[i])?);
            }
        }
    }
    let total = sum_in_order(tape, &parts)?;
    Ok((tape.scale(total, scale)?, omega))
}
