//! Low-rank adapters and their mixtures.
//!
//! [`AdapterState`] owns the trainable (or frozen) adapter parameters for
//! every slot of a model and is what the model consults during its forward
//! pass. The free functions ([`lora_delta`], [`moe_delta`], ...) evaluate the
//! same arithmetic on plain tensors and exist for inspection and oracles.

mod count;
mod delta;
mod probe;

pub use count::{trainable_param_count, ParamCount, StrategyDescriptor};
pub use delta::{gate_on, lora_on, mixture_on, MixtureVars, MoeVariant};
pub use probe::{routing_probe, RoutingMatrix};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BaseModel, ModelConfig};
use crate::slot::Slot;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{matmul, Tensor};

/// Fine-tuning strategy. Serialized as its display string, e.g. `lora_moe:shared_a`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    Full,
    Lora,
    Moe(MoeVariant),
    Comp,
}

impl Strategy {
    pub fn is_peft(self) -> bool {
        self != Strategy::Full
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Full => f.write_str("full"),
            Strategy::Lora => f.write_str("lora"),
            Strategy::Moe(v) => write!(f, "lora_moe:{}", v.as_str()),
            Strategy::Comp => f.write_str("lora_comp"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts `full`, `lora`, `lora_comp`, `lora_moe` (vanilla) and `lora_moe:<variant>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Strategy::Full),
            "lora" => Ok(Strategy::Lora),
            "lora_comp" => Ok(Strategy::Comp),
            "lora_moe" => Ok(Strategy::Moe(MoeVariant::Vanilla)),
            other => other
                .strip_prefix("lora_moe:")
                .and_then(MoeVariant::parse)
                .map(Strategy::Moe)
                .ok_or_else(|| Error::InvalidAdapter(format!("unknown strategy `{other}`"))),
        }
    }
}

/// What the gate sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Each token is routed on its own slot input.
    #[default]
    PerToken,
    /// Each token is routed on the running mean of slot inputs up to itself.
    PrefixMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub strategy: Strategy,
    pub rank: usize,
    pub experts: usize,
    pub alpha: f64,
    #[serde(default)]
    pub gate_mode: GateMode,
}

impl AdapterSpec {
    pub fn lora(rank: usize, alpha: f64) -> Self {
        Self {
            strategy: Strategy::Lora,
            rank,
            experts: 1,
            alpha,
            gate_mode: GateMode::PerToken,
        }
    }

    pub fn moe(variant: MoeVariant, rank: usize, experts: usize, alpha: f64) -> Self {
        Self {
            strategy: Strategy::Moe(variant),
            rank,
            experts,
            alpha,
            gate_mode: GateMode::PerToken,
        }
    }

    pub fn comp(rank: usize, experts: usize, alpha: f64) -> Self {
        Self {
            strategy: Strategy::Comp,
            rank,
            experts,
            alpha,
            gate_mode: GateMode::PerToken,
        }
    }

    /// The multiplier applied to every low-rank product.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidAdapter(m));
        if self.strategy == Strategy::Full {
            return bad("full tuning carries no adapter".into());
        }
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        let min_dim = model.d_model.min(model.d_ff);
        if self.rank > min_dim {
            return bad(format!("rank {} exceeds smallest projection width {min_dim}", self.rank));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha {}", self.alpha));
        }
        match self.strategy {
            Strategy::Lora if self.experts != 1 => bad("plain LoRA has exactly one expert".into()),
            Strategy::Moe(_) | Strategy::Comp if self.experts == 0 => {
                bad("mixtures need at least one expert".into())
            }
            _ => Ok(()),
        }
    }
}

/// Plain-tensor low-rank factors: `A` is `r×d_in`, `B` is `d_out×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
}

impl LoraFactors {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    /// `n_out × d_in`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Plain-tensor mixture for one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeAdapterState {
    pub variant: MoeVariant,
    pub rank: usize,
    pub alpha: f64,
    pub experts_a: Vec<Tensor>,
    pub experts_b: Vec<Tensor>,
    pub shared_a: Option<Tensor>,
    pub shared_expert: Option<LoraFactors>,
    pub gate: GateParams,
}

/// Frozen discipline experts combined by a trainable gate.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositionState {
    pub experts: Vec<LoraFactors>,
    pub gate: GateParams,
}

fn as_rows(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() == 1 {
        Tensor::row(x.data().to_vec())
    } else {
        Ok(x.clone())
    }
}

pub fn lora_delta(x: &Tensor, f: &LoraFactors) -> Result<Tensor> {
    let mut t = Tape::new();
    let xv = t.constant(as_rows(x)?)?;
    let a = t.constant(f.a.clone())?;
    let b = t.constant(f.b.clone())?;
    if f.b.cols() != f.rank() {
        return Err(Error::ShapeMismatch {
            op: "lora_delta",
            left: f.a.shape().to_vec(),
            right: f.b.shape().to_vec(),
        });
    }
    let d = lora_on(&mut t, xv, a, b, f.scale())?;
    Ok(t.value(d).clone())
}

pub fn gate_weights(x: &Tensor, g: &GateParams) -> Result<Tensor> {
    let mut t = Tape::new();
    let xv = t.constant(as_rows(x)?)?;
    let w = t.constant(g.weight.clone())?;
    let b = t.constant(g.bias.clone())?;
    let o = gate_on(&mut t, xv, w, b)?;
    Ok(t.value(o).clone())
}

fn eval_mixture(x: &Tensor, s: &MoeAdapterState) -> Result<(Tensor, Tensor)> {
    let mut t = Tape::new();
    let xv = t.constant(as_rows(x)?)?;
    let consts = |t: &mut Tape, v: &[Tensor]| -> Result<Vec<Var>> {
        v.iter().map(|m| t.constant(m.clone())).collect()
    };
    let experts_a = consts(&mut t, &s.experts_a)?;
    let experts_b = consts(&mut t, &s.experts_b)?;
    let shared_a = s.shared_a.clone().map(|a| t.constant(a)).transpose()?;
    let shared_expert = match &s.shared_expert {
        Some(f) => Some((t.constant(f.a.clone())?, t.constant(f.b.clone())?)),
        None => None,
    };
    let vars = MixtureVars {
        variant: s.variant,
        experts_a,
        experts_b,
        shared_a,
        shared_expert,
        gate_w: t.constant(s.gate.weight.clone())?,
        gate_b: t.constant(s.gate.bias.clone())?,
    };
    let (d, w) = mixture_on(&mut t, xv, xv, &vars, s.rank, s.alpha / s.rank as f64)?;
    Ok((t.value(d).clone(), t.value(w).clone()))
}

fn require(s: &MoeAdapterState, v: MoeVariant) -> Result<()> {
    if s.variant != v {
        return Err(Error::VariantMismatch {
            expected: v.as_str(),
            found: s.variant.as_str(),
        });
    }
    Ok(())
}

/// `Σᵢ ωᵢ·(α/r)·Bᵢ(Aᵢx)` with `ω` from the gate on the same `x`.
pub fn moe_delta(x: &Tensor, s: &MoeAdapterState) -> Result<Tensor> {
    require(s, MoeVariant::Vanilla)?;
    eval_mixture(x, s).map(|r| r.0)
}

/// Always-on shared expert plus softmax-routed experts.
pub fn shared_expert_delta(x: &Tensor, s: &MoeAdapterState) -> Result<Tensor> {
    require(s, MoeVariant::SharedExpert)?;
    eval_mixture(x, s).map(|r| r.0)
}

/// One shared `A`, routed `B` matrices.
pub fn shared_a_delta(x: &Tensor, s: &MoeAdapterState) -> Result<Tensor> {
    require(s, MoeVariant::SharedA)?;
    eval_mixture(x, s).map(|r| r.0)
}

/// Routing over the `k·r` rank-one components of all experts.
pub fn rank_wise_delta(x: &Tensor, s: &MoeAdapterState) -> Result<Tensor> {
    require(s, MoeVariant::RankWise)?;
    eval_mixture(x, s).map(|r| r.0)
}

pub fn comp_delta(x: &Tensor, s: &CompositionState) -> Result<Tensor> {
    let first = s.experts.first().ok_or(Error::MissingBlock("experts"))?;
    let mixture = MoeAdapterState {
        variant: MoeVariant::Vanilla,
        rank: first.rank(),
        alpha: first.alpha,
        experts_a: s.experts.iter().map(|e| e.a.clone()).collect(),
        experts_b: s.experts.iter().map(|e| e.b.clone()).collect(),
        shared_a: None,
        shared_expert: None,
        gate: s.gate.clone(),
    };
    for (i, e) in s.experts.iter().enumerate() {
        if e.a.shape() != first.a.shape() || e.b.shape() != first.b.shape() || e.alpha != first.alpha {
            return Err(Error::IncompatibleExpert {
                index: i,
                reason: "factor shapes or alpha differ".into(),
            });
        }
    }
    moe_delta(x, &mixture)
}

/// `W + (α/r)·B·A`.
pub fn merge(w: &Tensor, f: &LoraFactors) -> Result<Tensor> {
    let ba = matmul(&f.b, &f.a)?;
    if ba.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            op: "merge",
            left: w.shape().to_vec(),
            right: ba.shape().to_vec(),
        });
    }
    let s = f.scale();
    let data = w.data().iter().zip(ba.data()).map(|(a, b)| a + s * b).collect();
    Tensor::new(w.shape().to_vec(), data)
}

#[derive(Clone, Debug)]
enum SlotAdapter {
    Lora {
        a: ParamId,
        b: ParamId,
    },
    Mixture {
        variant: MoeVariant,
        experts_a: Vec<ParamId>,
        experts_b: Vec<ParamId>,
        shared_a: Option<ParamId>,
        shared_expert: Option<(ParamId, ParamId)>,
        gate_w: ParamId,
        gate_b: ParamId,
    },
}

/// Result of evaluating one slot's adapter.
#[derive(Clone, Copy, Debug)]
pub struct SlotOutput {
    pub delta: Var,
    pub gate: Option<Var>,
}

struct Block {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    kind: BlockKind,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    A,
    B,
    Gate,
}

/// Parameter blocks of a spec, in registration order.
fn plan(spec: &AdapterSpec, model: &ModelConfig) -> Vec<(Slot, Vec<Block>)> {
    let (r, k) = (spec.rank, spec.experts);
    let mut out = Vec::new();
    for slot in Slot::all(model.n_layers) {
        let (din, dout) = model.slot_dims(slot.role);
        let mut blocks = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, trainable: bool, kind: BlockKind| {
            blocks.push(Block {
                name: format!("{slot}.{name}"),
                shape,
                trainable,
                kind,
            })
        };
        let experts_trainable = spec.strategy != Strategy::Comp;
        match spec.strategy {
            Strategy::Full => {}
            Strategy::Lora => {
                push("A".into(), vec![r, din], true, BlockKind::A);
                push("B".into(), vec![dout, r], true, BlockKind::B);
            }
            Strategy::Moe(_) | Strategy::Comp => {
                let variant = match spec.strategy {
                    Strategy::Moe(v) => v,
                    _ => MoeVariant::Vanilla,
                };
                match variant {
                    MoeVariant::SharedA => push("sA".into(), vec![r, din], true, BlockKind::A),
                    MoeVariant::SharedExpert => {
                        push("s.A".into(), vec![r, din], true, BlockKind::A);
                        push("s.B".into(), vec![dout, r], true, BlockKind::B);
                    }
                    _ => {}
                }
                for i in 0..k {
                    if variant != MoeVariant::SharedA {
                        push(format!("e{i}.A"), vec![r, din], experts_trainable, BlockKind::A);
                    }
                    push(format!("e{i}.B"), vec![dout, r], experts_trainable, BlockKind::B);
                }
                let arity = if variant == MoeVariant::RankWise { k * r } else { k };
                push("gate.w".into(), vec![arity, din], true, BlockKind::Gate);
                push("gate.b".into(), vec![arity], true, BlockKind::Gate);
            }
        }
        out.push((slot, blocks));
    }
    out
}

/// Scale of the random gate initialisation. Identical zero-initialised `B`
/// matrices behind one shared `A` receive identical updates, so an exactly
/// uniform gate would never let them diverge.
pub const GATE_INIT: f64 = 0.1;

/// Adapter parameters for every slot of one model.
#[derive(Clone, Debug)]
pub struct AdapterState {
    spec: AdapterSpec,
    model: ModelConfig,
    store: ParamStore,
    slots: BTreeMap<Slot, SlotAdapter>,
}

impl AdapterState {
    /// Fresh adapters: `A` uniform in `±1/√d_in`, `B` zero, gate weights
    /// uniform in `±GATE_INIT/√d_in` with zero bias. The initial delta is
    /// exactly zero and routing starts near uniform.
    pub fn new(spec: AdapterSpec, model: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(spec, model, seed)
    }

    fn build(spec: AdapterSpec, model: &ModelConfig, seed: u64) -> Result<Self> {
        spec.validate(model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (_, blocks) in plan(&spec, model) {
            for b in blocks {
                let numel: usize = b.shape.iter().product();
                let data = match b.kind {
                    BlockKind::A => {
                        let bound = 1.0 / libm::sqrt(b.shape[1] as f64);
                        (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
                    }
                    BlockKind::Gate if b.shape.len() == 2 && spec.strategy != Strategy::Comp => {
                        let bound = GATE_INIT / libm::sqrt(b.shape[1] as f64);
                        (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
                    }
                    BlockKind::B | BlockKind::Gate => vec![0.0; numel],
                };
                params.push((b.name, Tensor::new(b.shape, data)?));
            }
        }
        Self::from_params(spec, model, params)
    }

    /// Rebuilds adapters from named tensors (e.g. a checkpoint). Names and
    /// shapes must match the layout implied by `spec` and `model`.
    pub fn from_params(
        spec: AdapterSpec,
        model: &ModelConfig,
        params: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        spec.validate(model)?;
        let layout = plan(&spec, model);
        let expected: usize = layout.iter().map(|(_, b)| b.len()).sum();
        if expected != params.len() {
            return Err(Error::InvalidAdapter(format!(
                "expected {expected} parameter blocks, found {}",
                params.len()
            )));
        }
        let mut store = ParamStore::new();
        let mut it = params.into_iter();
        let mut slots = BTreeMap::new();
        for (slot, blocks) in layout {
            let mut ids = BTreeMap::new();
            for b in blocks {
                let (name, value) = it.next().expect("length checked");
                if name != b.name || value.shape() != b.shape.as_slice() {
                    return Err(Error::InvalidAdapter(format!(
                        "block `{name}` {:?} does not match expected `{}` {:?}",
                        value.shape(),
                        b.name,
                        b.shape
                    )));
                }
                let id = store.add(&name, value, b.trainable)?;
                let short = name[format!("{slot}.").len()..].to_string();
                ids.insert(short, id);
            }
            let get = |n: &str| ids.get(n).copied();
            let adapter = match spec.strategy {
                Strategy::Full => unreachable!("validated"),
                Strategy::Lora => SlotAdapter::Lora {
                    a: get("A").expect("planned"),
                    b: get("B").expect("planned"),
                },
                Strategy::Moe(_) | Strategy::Comp => {
                    let variant = match spec.strategy {
                        Strategy::Moe(v) => v,
                        _ => MoeVariant::Vanilla,
                    };
                    SlotAdapter::Mixture {
                        variant,
                        experts_a: (0..spec.experts)
                            .filter_map(|i| get(&format!("e{i}.A")))
                            .collect(),
                        experts_b: (0..spec.experts)
                            .map(|i| get(&format!("e{i}.B")).expect("planned"))
                            .collect(),
                        shared_a: get("sA"),
                        shared_expert: get("s.A").zip(get("s.B")),
                        gate_w: get("gate.w").expect("planned"),
                        gate_b: get("gate.b").expect("planned"),
                    }
                }
            };
            slots.insert(slot, adapter);
        }
        Ok(Self {
            spec,
            model: model.clone(),
            store,
            slots,
        })
    }

    /// Composition of frozen single-discipline LoRA experts with a fresh,
    /// zero-initialised trainable gate.
    pub fn compose(experts: &[AdapterState], gate_mode: GateMode) -> Result<Self> {
        let first = experts.first().ok_or(Error::MissingBlock("experts"))?;
        for (i, e) in experts.iter().enumerate() {
            if e.spec.strategy != Strategy::Lora {
                return Err(Error::IncompatibleExpert {
                    index: i,
                    reason: format!("expected a LoRA adapter, found {}", e.spec.strategy),
                });
            }
            if e.model != first.model || e.spec.rank != first.spec.rank || e.spec.alpha != first.spec.alpha {
                return Err(Error::IncompatibleExpert {
                    index: i,
                    reason: "rank, alpha or model shape differs".into(),
                });
            }
        }
        let mut spec = AdapterSpec::comp(first.spec.rank, experts.len(), first.spec.alpha);
        spec.gate_mode = gate_mode;
        let mut state = Self::build(spec, &first.model, 0)?;
        let slots: Vec<Slot> = state.slots.keys().copied().collect();
        for slot in slots {
            let SlotAdapter::Mixture {
                experts_a,
                experts_b,
                ..
            } = state.slots[&slot].clone()
            else {
                unreachable!()
            };
            for (i, e) in experts.iter().enumerate() {
                let f = e.slot_ids(slot).expect("lora slot");
                *state.store.value_mut(experts_a[i]) = e.store.value(f.0).clone();
                *state.store.value_mut(experts_b[i]) = e.store.value(f.1).clone();
            }
        }
        Ok(state)
    }

    fn slot_ids(&self, slot: Slot) -> Option<(ParamId, ParamId)> {
        match self.slots.get(&slot)? {
            SlotAdapter::Lora { a, b } => Some((*a, *b)),
            SlotAdapter::Mixture { .. } => None,
        }
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.store
            .groups()
            .iter()
            .map(|g| (String::from(g.name()), g.value().clone()))
            .collect()
    }

    pub fn has_gate(&self, slot: Slot) -> bool {
        matches!(self.slots.get(&slot), Some(SlotAdapter::Mixture { .. }))
    }

    /// Names of the parameter groups that make up the gates.
    pub fn is_gate_param(&self, id: ParamId) -> bool {
        let n = self.store.group(id).name();
        n.ends_with(".gate.w") || n.ends_with(".gate.b")
    }

    /// Plain-tensor copy of a LoRA slot.
    pub fn lora_factors(&self, slot: Slot) -> Option<LoraFactors> {
        let (a, b) = self.slot_ids(slot)?;
        Some(LoraFactors {
            a: self.store.value(a).clone(),
            b: self.store.value(b).clone(),
            alpha: self.spec.alpha,
        })
    }

    /// Plain-tensor copy of a mixture slot.
    pub fn mixture(&self, slot: Slot) -> Option<MoeAdapterState> {
        let SlotAdapter::Mixture {
            variant,
            experts_a,
            experts_b,
            shared_a,
            shared_expert,
            gate_w,
            gate_b,
        } = self.slots.get(&slot)?
        else {
            return None;
        };
        let v = |id: &ParamId| self.store.value(*id).clone();
        Some(MoeAdapterState {
            variant: *variant,
            rank: self.spec.rank,
            alpha: self.spec.alpha,
            experts_a: experts_a.iter().map(v).collect(),
            experts_b: experts_b.iter().map(v).collect(),
            shared_a: shared_a.as_ref().map(v),
            shared_expert: shared_expert.map(|(a, b)| LoraFactors {
                a: v(&a),
                b: v(&b),
                alpha: self.spec.alpha,
            }),
            gate: GateParams {
                weight: v(gate_w),
                bias: v(gate_b),
            },
        })
    }

    fn gate_input(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.spec.gate_mode {
            GateMode::PerToken => Ok(x),
            GateMode::PrefixMean => {
                let n = tape.value(x).rows();
                let mut m = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for j in 0..=i {
                        m.data_mut()[i * n + j] = 1.0 / (i + 1) as f64;
                    }
                }
                let avg = tape.constant(m)?;
                tape.matmul(avg, x)
            }
        }
    }

    /// Records this slot's delta on the tape; `None` when the slot carries no adapter.
    pub fn slot_delta(&self, tape: &mut Tape, slot: Slot, x: Var) -> Result<Option<SlotOutput>> {
        let Some(adapter) = self.slots.get(&slot) else {
            return Ok(None);
        };
        let scale = self.spec.scale();
        match adapter {
            SlotAdapter::Lora { a, b } => {
                let (a, b) = (tape.param(&self.store, *a), tape.param(&self.store, *b));
                let delta = lora_on(tape, x, a, b, scale)?;
                Ok(Some(SlotOutput { delta, gate: None }))
            }
            SlotAdapter::Mixture {
                variant,
                experts_a,
                experts_b,
                shared_a,
                shared_expert,
                gate_w,
                gate_b,
            } => {
                let vars = MixtureVars {
                    variant: *variant,
                    experts_a: experts_a.iter().map(|id| tape.param(&self.store, *id)).collect(),
                    experts_b: experts_b.iter().map(|id| tape.param(&self.store, *id)).collect(),
                    shared_a: shared_a.map(|id| tape.param(&self.store, id)),
                    shared_expert: shared_expert
                        .map(|(a, b)| (tape.param(&self.store, a), tape.param(&self.store, b))),
                    gate_w: tape.param(&self.store, *gate_w),
                    gate_b: tape.param(&self.store, *gate_b),
                };
                let gi = self.gate_input(tape, x)?;
                let (delta, omega) = mixture_on(tape, x, gi, &vars, self.spec.rank, scale)?;
                Ok(Some(SlotOutput {
                    delta,
                    gate: Some(omega),
                }))
            }
        }
    }

    /// Base model with every LoRA slot folded into its weight.
    pub fn merge_into(&self, base: &BaseModel) -> Result<BaseModel> {
        if self.spec.strategy != Strategy::Lora {
            return Err(Error::VariantMismatch {
                expected: "lora",
                found: "mixture",
            });
        }
        let mut merged = base.clone();
        for slot in self.slots.keys() {
            let f = self.lora_factors(*slot).expect("lora slots");
            let w = merge(base.slot_weight(*slot), &f)?;
            *merged.slot_weight_mut(*slot) = w;
        }
        Ok(merged)
    }
}

#[cfg(test)]
mod tests;
