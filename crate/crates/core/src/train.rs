//! Training runs for every strategy.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSpec, AdapterState, GateMode, MoeVariant, Strategy};
use crate::data::{label_hash, stream_rng, Corpus, Sample, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::BaseModel;
use crate::optim::{lr_schedule, AdamW, AdamWConfig};
use crate::tape::Tape;

/// Which next-token targets contribute to the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Answer tokens and the closing EOS.
    #[default]
    Answer,
    /// Every position (pretraining).
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    /// Effective batch size; per-sample gradients are accumulated up to it.
    pub batch_size: usize,
    pub seed: u64,
    pub rank: usize,
    pub experts: usize,
    pub alpha: f64,
    #[serde(default)]
    pub gate_mode: GateMode,
    #[serde(default)]
    pub loss: LossScope,
    /// Global gradient-norm clip; off by default.
    #[serde(default)]
    pub clip: Option<f64>,
}

impl TrainConfig {
    /// Full fine-tuning preset.
    pub fn full(seed: u64) -> Self {
        Self {
            strategy: Strategy::Full,
            lr: 7e-6,
            weight_decay: 0.1,
            warmup_ratio: 0.05,
            epochs: 1,
            batch_size: 128,
            seed,
            rank: 16,
            experts: 5,
            alpha: 32.0,
            gate_mode: GateMode::PerToken,
            loss: LossScope::Answer,
            clip: None,
        }
    }

    /// Parameter-efficient preset for `strategy`.
    pub fn peft(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            lr: 1e-4,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            experts: if strategy == Strategy::Lora { 1 } else { 5 },
            ..Self::full(seed)
        }
    }

    pub fn preset(strategy: Strategy, seed: u64) -> Self {
        match strategy {
            Strategy::Full => Self::full(seed),
            s => Self::peft(s, seed),
        }
    }

    pub fn adapter_spec(&self) -> AdapterSpec {
        AdapterSpec {
            strategy: self.strategy,
            rank: self.rank,
            experts: if self.strategy == Strategy::Lora { 1 } else { self.experts },
            alpha: self.alpha,
            gate_mode: self.gate_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSchedule(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warm-up ratio {}", self.warmup_ratio));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if let Some(c) = self.clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("clip {c}"));
            }
        }
        Ok(())
    }

    /// Human-readable differences from the preset of the same strategy.
    pub fn deviations(&self) -> Vec<String> {
        let p = Self::preset(self.strategy, self.seed);
        let mut out = Vec::new();
        let mut cmp = |name: &str, a: String, b: String| {
            if a != b {
                out.push(format!("{name}={a} (preset {b})"));
            }
        };
        cmp("lr", format!("{}", self.lr), format!("{}", p.lr));
        cmp("weight_decay", format!("{}", self.weight_decay), format!("{}", p.weight_decay));
        cmp("warmup_ratio", format!("{}", self.warmup_ratio), format!("{}", p.warmup_ratio));
        cmp("epochs", format!("{}", self.epochs), format!("{}", p.epochs));
        cmp("batch_size", format!("{}", self.batch_size), format!("{}", p.batch_size));
        if self.strategy.is_peft() {
            cmp("rank", format!("{}", self.rank), format!("{}", p.rank));
            cmp("alpha", format!("{}", self.alpha), format!("{}", p.alpha));
            if self.strategy != Strategy::Lora {
                cmp("experts", format!("{}", self.experts), format!("{}", p.experts));
            }
        }
        out
    }
}

/// Everything needed to audit and reproduce one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    /// Mean training loss of each optimizer update.
    pub losses: Vec<f64>,
    pub updates: usize,
    pub samples_seen: usize,
    pub trainable_params: usize,
    pub notes: Vec<String>,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub wall_clock_secs: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The tuned model for full tuning, otherwise a copy of the base.
    pub model: BaseModel,
    pub adapters: Option<AdapterState>,
    pub record: RunRecord,
}

/// `[BOS] prompt answer [EOS]` with per-position next-token targets.
pub fn training_sequence(sample: &Sample, scope: LossScope) -> (Vec<u32>, Vec<Option<usize>>) {
    let mut seq = Vec::with_capacity(sample.prompt.len() + sample.answer.len() + 2);
    seq.push(BOS);
    seq.extend_from_slice(&sample.prompt);
    let answer_start = seq.len();
    seq.extend_from_slice(&sample.answer);
    seq.push(EOS);
    let targets = (0..seq.len())
        .map(|i| {
            let next = i + 1;
            if next >= seq.len() {
                None
            } else if scope == LossScope::All || next >= answer_start {
                Some(seq[next] as usize)
            } else {
                None
            }
        })
        .collect();
    (seq, targets)
}

/// Mean masked cross-entropy of one sample.
pub fn sample_loss(
    model: &BaseModel,
    adapters: Option<&AdapterState>,
    sample: &Sample,
    scope: LossScope,
) -> Result<f64> {
    let (seq, targets) = training_sequence(sample, scope);
    let mut tape = Tape::new();
    let logits = model.forward_on_tape(&mut tape, adapters, &seq, None)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok(tape.value(loss).data()[0])
}

fn fit(
    model: &mut BaseModel,
    mut adapters: Option<&mut AdapterState>,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<RunRecord> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let batches_per_epoch = corpus.len().div_ceil(config.batch_size);
    let total = batches_per_epoch * config.epochs;
    let mut opt = match adapters.as_deref() {
        Some(a) => AdamW::new(a.store(), AdamWConfig::default()),
        None => AdamW::new(model.store(), AdamWConfig::default()),
    };
    let trainable_params = match adapters.as_deref() {
        Some(a) => a.store().trainable_params(),
        None => model.store().trainable_params(),
    };
    let mut losses = Vec::with_capacity(total);
    let mut update = 0;
    let mut samples_seen = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut stream_rng(config.seed, label_hash("epoch") ^ epoch as u64));
        for batch in order.chunks(config.batch_size) {
            match adapters.as_deref_mut() {
                Some(a) => a.store_mut().zero_grad(),
                None => model.store_mut().zero_grad(),
            }
            let weight = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (seq, targets) = training_sequence(&corpus.samples[i], config.loss);
                let grads = {
                    let mut tape = Tape::new();
                    let logits = model.forward_on_tape(&mut tape, adapters.as_deref(), &seq, None)?;
                    let loss = tape.cross_entropy(logits, &targets)?;
                    let value = tape.value(loss).data()[0];
                    if !value.is_finite() {
                        return Err(Error::Diverged {
                            step: update,
                            reason: format!("loss {value}"),
                        });
                    }
                    batch_loss += value * weight;
                    tape.backward(loss)?
                };
                match adapters.as_deref_mut() {
                    Some(a) => a.store_mut().accumulate_scaled(&grads, weight)?,
                    None => model.store_mut().accumulate_scaled(&grads, weight)?,
                }
            }
            samples_seen += batch.len();
            let store = match adapters.as_deref_mut() {
                Some(a) => a.store_mut(),
                None => model.store_mut(),
            };
            if let Some(c) = config.clip {
                let n = store.grad_norm();
                if n > c {
                    store.scale_grads(c / n);
                }
            }
            let lr = lr_schedule(update, total, config.warmup_ratio, config.lr)?;
            opt.step(store, lr, config.weight_decay).map_err(|e| match e {
                Error::NonFiniteGradient(name) => Error::Diverged {
                    step: update,
                    reason: format!("non-finite gradient for `{name}`"),
                },
                other => other,
            })?;
            losses.push(batch_loss);
            update += 1;
        }
    }
    Ok(RunRecord {
        config: config.clone(),
        losses,
        updates: update,
        samples_seen,
        trainable_params,
        notes: config.deviations(),
        checkpoint: None,
        wall_clock_secs: None,
    })
}

/// Full tuning or fresh adapters, per `config.strategy`. Composition needs
/// trained experts and goes through [`train_comp_gate`].
pub fn train(base: &BaseModel, corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    match config.strategy {
        Strategy::Full => {
            let mut model = base.clone();
            model.set_trainable(true);
            let record = fit(&mut model, None, corpus, config)?;
            Ok(TrainOutcome {
                model,
                adapters: None,
                record,
            })
        }
        Strategy::Comp => Err(Error::InvalidAdapter(
            "composition trains a gate over existing experts; train per-discipline LoRAs first".into(),
        )),
        _ => {
            let state = AdapterState::new(config.adapter_spec(), base.config(), config.seed)?;
            train_adapters(base, state, corpus, config)
        }
    }
}

/// Continues training an existing adapter state against a frozen base.
pub fn train_adapters(
    base: &BaseModel,
    mut adapters: AdapterState,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut model = base.clone();
    model.set_trainable(false);
    let record = fit(&mut model, Some(&mut adapters), corpus, config)?;
    Ok(TrainOutcome {
        model,
        adapters: Some(adapters),
        record,
    })
}

/// One plain LoRA per discipline, identical hyperparameters.
pub fn train_discipline_loras(
    base: &BaseModel,
    corpus: &Corpus,
    disciplines: &[String],
    config: &TrainConfig,
) -> Result<Vec<(String, AdapterState, RunRecord)>> {
    let mut cfg = config.clone();
    cfg.strategy = Strategy::Lora;
    cfg.experts = 1;
    let mut out = Vec::with_capacity(disciplines.len());
    for d in disciplines {
        let sub = corpus.filter(d);
        let wrap = |reason: String| Error::DisciplineRun {
            discipline: d.clone(),
            reason,
        };
        if sub.is_empty() {
            return Err(wrap("no samples".to_string()));
        }
        let outcome = train(base, &sub, &cfg).map_err(|e| wrap(e.to_string()))?;
        out.push((d.clone(), outcome.adapters.expect("lora run"), outcome.record));
    }
    Ok(out)
}

/// Freezes `experts` and trains only a fresh gate on `corpus`.
pub fn train_comp_gate(
    base: &BaseModel,
    experts: &[AdapterState],
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<(AdapterState, RunRecord)> {
    let state = AdapterState::compose(experts, config.gate_mode)?;
    let mut cfg = config.clone();
    cfg.strategy = Strategy::Comp;
    cfg.experts = experts.len();
    cfg.rank = state.spec().rank;
    cfg.alpha = state.spec().alpha;
    let outcome = train_adapters(base, state, corpus, &cfg)?;
    Ok((outcome.adapters.expect("adapter run"), outcome.record))
}

/// Strategy label used in reports, e.g. `LoRA-MoE (shared A)`.
pub fn strategy_label(s: Strategy) -> &'static str {
    match s {
        Strategy::Full => "FT",
        Strategy::Lora => "LoRA",
        Strategy::Comp => "LoRA-Comp",
        Strategy::Moe(MoeVariant::Vanilla) => "LoRA-MoE",
        Strategy::Moe(MoeVariant::SharedA) => "LoRA-MoE (shared A)",
        Strategy::Moe(MoeVariant::SharedExpert) => "LoRA-MoE (shared expert)",
        Strategy::Moe(MoeVariant::RankWise) => "LoRA-MoE (rank-wise)",
    }
}
