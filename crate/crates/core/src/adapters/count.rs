use serde::{Deserialize, Serialize};

use super::{MoeVariant, Strategy};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::slot::Slot;

/// Strategy plus the sizes that determine its parameter budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyDescriptor {
    pub strategy: Strategy,
    pub rank: usize,
    pub experts: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub base: usize,
}

impl ParamCount {
    /// Trainable share of the base parameter count, in percent.
    pub fn percent(&self) -> f64 {
        100.0 * self.trainable as f64 / self.base as f64
    }
}

fn gate(n_out: usize, d_in: usize) -> usize {
    n_out * d_in + n_out
}

/// Closed-form trainable parameter count, summed over all slots.
pub fn trainable_param_count(desc: &StrategyDescriptor, model: &ModelConfig) -> Result<ParamCount> {
    model.validate()?;
    let base = model.param_count();
    let (r, k) = (desc.rank, desc.experts);
    let per_slot = |din: usize, dout: usize| -> usize {
        match desc.strategy {
            Strategy::Full => 0,
            Strategy::Lora => r * (din + dout),
            Strategy::Moe(MoeVariant::Vanilla) => k * r * (din + dout) + gate(k, din),
            Strategy::Moe(MoeVariant::SharedA) => r * din + k * r * dout + gate(k, din),
            Strategy::Moe(MoeVariant::SharedExpert) => (k + 1) * r * (din + dout) + gate(k, din),
            Strategy::Moe(MoeVariant::RankWise) => k * r * (din + dout) + gate(k * r, din),
            Strategy::Comp => gate(k, din),
        }
    };
    let trainable = match desc.strategy {
        Strategy::Full => base,
        _ => Slot::all(model.n_layers)
            .map(|s| {
                let (din, dout) = model.slot_dims(s.role);
                per_slot(din, dout)
            })
            .sum(),
    };
    Ok(ParamCount { trainable, base })
}
