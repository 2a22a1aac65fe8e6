//! Grid runs over one experimental axis, fanned out over a bounded pool.

use std::fmt::Write as _;
use std::str::FromStr;

use multitune_core::adapters::{trainable_param_count, AdapterState, Strategy, StrategyDescriptor};
use multitune_core::data::subset;
use multitune_core::model::BaseModel;
use multitune_core::train::RunRecord;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiments::train_and_evaluate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    DataFraction,
    Rank,
    Experts,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data_fraction" => Ok(Axis::DataFraction),
            "rank" => Ok(Axis::Rank),
            "experts" => Ok(Axis::Experts),
            other => Err(Error::Usage(format!(
                "unknown axis `{other}` (expected data_fraction, rank or experts)"
            ))),
        }
    }
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::DataFraction => "data_fraction",
            Axis::Rank => "rank",
            Axis::Experts => "experts",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: Axis,
    pub value: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub trainable: usize,
    pub base: usize,
    pub param_pct: f64,
    /// Absent when only parameters were counted.
    pub average: Option<f64>,
    pub general_acc: Option<f64>,
    pub run_id: Option<String>,
    #[serde(skip)]
    pub record: Option<RunRecord>,
}

/// Resolves the configuration of one grid point. Rank points keep α/r fixed.
pub fn point_config(cfg: &ExperimentConfig, axis: Axis, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    let whole = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Usage(format!("{} value {v} must be a positive integer", axis.as_str())))
        }
    };
    match axis {
        Axis::DataFraction => {
            if !(value > 0.0 && value <= 1.0) {
                return Err(Error::Usage(format!("data fraction {value} outside (0, 1]")));
            }
        }
        Axis::Rank => {
            let r = whole(value)?;
            c.adapter.alpha = cfg.adapter.alpha / cfg.adapter.rank as f64 * r as f64;
            c.adapter.rank = r;
        }
        Axis::Experts => c.adapter.experts = whole(value)?,
    }
    Ok(c)
}

/// Runs every grid point with at most `jobs` concurrent runs. Results come
/// back in `values` order regardless of scheduling.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    base: Option<&BaseModel>,
    axis: Axis,
    values: &[f64],
    strategy: Strategy,
    seed: u64,
    jobs: usize,
) -> Result<Vec<SweepPoint>> {
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| point_config(cfg, axis, v))
        .collect::<Result<_>>()?;
    for c in &configs {
        if strategy.is_peft() {
            c.adapter_spec(strategy).validate(&c.model)?;
        }
    }
    let data = match base {
        Some(_) => Some(cfg.synthetic(seed)?),
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    pool.install(|| {
        configs
            .par_iter()
            .zip(values.par_iter())
            .map(|(c, &value)| {
                let tc = c.train_config(strategy, seed);
                let desc = StrategyDescriptor {
                    strategy,
                    rank: tc.rank,
                    experts: tc.adapter_spec().experts,
                };
                let count = trainable_param_count(&desc, &c.model)?;
                let trainable = match strategy {
                    Strategy::Full | Strategy::Comp => count.trainable,
                    s => AdapterState::new(c.adapter_spec(s), &c.model, seed)?
                        .store()
                        .trainable_params(),
                };
                let mut point = SweepPoint {
                    axis,
                    value,
                    strategy,
                    seed,
                    trainable,
                    base: count.base,
                    param_pct: 100.0 * trainable as f64 / count.base as f64,
                    average: None,
                    general_acc: None,
                    run_id: None,
                    record: None,
                };
                if let (Some(base), Some(data)) = (base, &data) {
                    let corpus = match axis {
                        Axis::DataFraction => subset(&data.train, value, seed)?,
                        _ => data.train.clone(),
                    };
                    let label = format!("{}={value}", axis.as_str());
                    let run = train_and_evaluate(c, &label, base, &corpus, data, &tc)?;
                    point.average = Some(run.report.average);
                    point.general_acc = run.report.general_acc;
                    point.run_id = Some(run.report.run_id.clone());
                    point.record = Some(run.record);
                }
                Ok(point)
            })
            .collect::<Result<Vec<_>>>()
    })
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("axis,value,strategy,seed,trainable,base,param_pct,average,general,run_id\n");
    let opt = |v: Option<f64>| v.map(|a| format!("{a:.4}")).unwrap_or_default();
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.4},{},{},{}",
            p.axis.as_str(),
            p.value,
            p.strategy,
            p.seed,
            p.trainable,
            p.base,
            p.param_pct,
            opt(p.average),
            opt(p.general_acc),
            p.run_id.as_deref().unwrap_or("")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use multitune_core::adapters::MoeVariant;
    use multitune_core::model::ModelConfig;

    fn wide() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.model = ModelConfig {
            n_layers: 1,
            d_model: 192,
            n_heads: 4,
            d_ff: 384,
            ..ModelConfig::default()
        };
        c
    }

    #[test]
    fn rank_counts_increase_and_experts_match_formula() {
        let c = wide();
        let s = Strategy::Moe(MoeVariant::SharedA);
        let pts = run_sweep(&c, None, Axis::Rank, &[16.0, 80.0, 160.0], s, 0, 2).unwrap();
        assert!(pts.windows(2).all(|w| w[0].param_pct < w[1].param_pct));
        let pts = run_sweep(&c, None, Axis::Experts, &[5.0, 10.0, 20.0], s, 0, 1).unwrap();
        for p in &pts {
            let (din, dout) = (192usize, 192usize);
            let k = p.value as usize;
            let r = c.adapter.rank;
            let attn = 4 * (r * din + k * r * dout + k * din + k);
            let up = r * 192 + k * r * 384 + k * 192 + k;
            let down = r * 384 + k * r * 192 + k * 384 + k;
            assert_eq!(p.trainable, attn + up + down);
        }
    }

    #[test]
    fn bad_points_are_rejected() {
        let c = ExperimentConfig::default();
        assert!(point_config(&c, Axis::DataFraction, 1.5).is_err());
        assert!(point_config(&c, Axis::Rank, 2.5).is_err());
        let s = Strategy::Lora;
        assert!(run_sweep(&c, None, Axis::Rank, &[160.0], s, 0, 1).is_err());
        let r = point_config(&c, Axis::Rank, 4.0).unwrap();
        assert_eq!((r.adapter.rank, r.adapter.alpha), (4, 8.0));
    }
}
