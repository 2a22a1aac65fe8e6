//! A tiny pre-norm decoder-only transformer.
//!
//! Every attention projection (q, k, v, o) and both feed-forward projections
//! are named [`Slot`]s; when an [`AdapterState`] is attached, each slot adds
//! the adapter's delta to its base projection `x · Wᵀ`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterState;
use crate::error::{Error, Result};
use crate::slot::{Role, Slot};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 64,
            max_seq: 24,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad(format!("all extents must be positive: {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 2 || self.max_seq == 0 {
            return bad(format!("vocab_size {} / max_seq {}", self.vocab_size, self.max_seq));
        }
        Ok(())
    }

    /// `(d_in, d_out)` of a slot's projection.
    pub fn slot_dims(&self, role: Role) -> (usize, usize) {
        match role {
            Role::Q | Role::K | Role::V | Role::O => (self.d_model, self.d_model),
            Role::FfnUp => (self.d_model, self.d_ff),
            Role::FfnDown => (self.d_ff, self.d_model),
        }
    }

    /// Closed-form parameter count of [`BaseModel`].
    pub fn param_count(&self) -> usize {
        let (v, s, d, f, l) = (
            self.vocab_size,
            self.max_seq,
            self.d_model,
            self.d_ff,
            self.n_layers,
        );
        let per_layer = 4 * d * d + 2 * d * f + f + d + 4 * d;
        2 * v * d + s * d + l * per_layer + 2 * d
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    up: ParamId,
    up_b: ParamId,
    down: ParamId,
    down_b: ParamId,
}

impl LayerIds {
    fn weight(&self, role: Role) -> ParamId {
        match role {
            Role::Q => self.q,
            Role::K => self.k,
            Role::V => self.v,
            Role::O => self.o,
            Role::FfnUp => self.up,
            Role::FfnDown => self.down,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaseModel {
    config: ModelConfig,
    store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head: ParamId,
}

/// Parameter names in registration order, with shapes.
fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (c.d_model, c.d_ff);
    let mut out = vec![
        ("tok_emb".into(), vec![c.vocab_size, d]),
        ("pos_emb".into(), vec![c.max_seq, d]),
    ];
    for l in 0..c.n_layers {
        let p = |n: &str| format!("l{l}.{n}");
        out.push((p("ln1.g"), vec![d]));
        out.push((p("ln1.b"), vec![d]));
        out.push((p("q.w"), vec![d, d]));
        out.push((p("k.w"), vec![d, d]));
        out.push((p("v.w"), vec![d, d]));
        out.push((p("o.w"), vec![d, d]));
        out.push((p("ln2.g"), vec![d]));
        out.push((p("ln2.b"), vec![d]));
        out.push((p("ffn_up.w"), vec![f, d]));
        out.push((p("ffn_up.b"), vec![f]));
        out.push((p("ffn_down.w"), vec![d, f]));
        out.push((p("ffn_down.b"), vec![d]));
    }
    out.push(("lnf.g".into(), vec![d]));
    out.push(("lnf.b".into(), vec![d]));
    out.push(("head".into(), vec![c.vocab_size, d]));
    out
}

fn init_value(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let data: Vec<f64> = if name.ends_with(".g") {
        vec![1.0; numel]
    } else if name.ends_with(".b") {
        vec![0.0; numel]
    } else {
        let bound = match leaf {
            "tok_emb" | "pos_emb" => 0.5,
            "head" => 0.5 / libm::sqrt(shape[1] as f64),
            _ => 1.0 / libm::sqrt(shape[1] as f64),
        };
        (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("layout shapes are positive")
}

/// Per-slot gate probabilities captured during a forward pass.
pub type GateTrace = BTreeMap<Slot, Var>;

impl BaseModel {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = layout(config)
            .into_iter()
            .map(|(name, shape)| {
                let v = init_value(&name, &shape, &mut rng);
                (name, v)
            })
            .collect();
        Self::from_params(config.clone(), params)
    }

    /// Rebuilds a model from named tensors; names and shapes must match the layout.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter blocks, found {}",
                expected.len(),
                params.len()
            )));
        }
        let mut store = ParamStore::new();
        for ((name, shape), (pname, value)) in expected.iter().zip(params) {
            if *name != pname || value.shape() != shape.as_slice() {
                return Err(Error::InvalidConfig(format!(
                    "block `{pname}` {:?} does not match expected `{name}` {shape:?}",
                    value.shape()
                )));
            }
            store.add(name, value, true)?;
        }
        let id = |n: &str| store.id_of(n);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |n: &str| id(&format!("l{l}.{n}"));
            layers.push(LayerIds {
                ln1_g: p("ln1.g")?,
                ln1_b: p("ln1.b")?,
                q: p("q.w")?,
                k: p("k.w")?,
                v: p("v.w")?,
                o: p("o.w")?,
                ln2_g: p("ln2.g")?,
                ln2_b: p("ln2.b")?,
                up: p("ffn_up.w")?,
                up_b: p("ffn_up.b")?,
                down: p("ffn_down.w")?,
                down_b: p("ffn_down.b")?,
            });
        }
        Ok(Self {
            tok_emb: id("tok_emb")?,
            pos_emb: id("pos_emb")?,
            lnf_g: id("lnf.g")?,
            lnf_b: id("lnf.b")?,
            head: id("head")?,
            layers,
            store,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.store.set_all_trainable(trainable);
    }

    pub fn slot_weight(&self, slot: Slot) -> &Tensor {
        self.store.value(self.layers[slot.layer].weight(slot.role))
    }

    pub fn slot_weight_mut(&mut self, slot: Slot) -> &mut Tensor {
        let id = self.layers[slot.layer].weight(slot.role);
        self.store.value_mut(id)
    }

    /// Named parameter tensors in layout order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.store
            .groups()
            .iter()
            .map(|g| (String::from(g.name()), g.value().clone()))
            .collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::OutOfVocab {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn project(
        &self,
        tape: &mut Tape,
        adapters: Option<&AdapterState>,
        slot: Slot,
        x: Var,
        trace: &mut Option<&mut GateTrace>,
    ) -> Result<Var> {
        let w = tape.param(&self.store, self.layers[slot.layer].weight(slot.role));
        let base = tape.matmul_nt(x, w)?;
        let Some(state) = adapters else {
            return Ok(base);
        };
        match state.slot_delta(tape, slot, x)? {
            None => Ok(base),
            Some(out) => {
                if let (Some(trace), Some(g)) = (trace.as_deref_mut(), out.gate) {
                    trace.insert(slot, g);
                }
                tape.add(base, out.delta)
            }
        }
    }

    /// Records the forward pass on `tape` and returns the `(len, vocab)` logits.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        adapters: Option<&AdapterState>,
        tokens: &[u32],
        mut trace: Option<&mut GateTrace>,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let c = &self.config;
        let dh = c.d_model / c.n_heads;
        let att_scale = 1.0 / libm::sqrt(dh as f64);

        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let tok_table = tape.param(&self.store, self.tok_emb);
        let pos_table = tape.param(&self.store, self.pos_emb);
        let te = tape.embedding(tok_table, &ids)?;
        let pe = tape.embedding(pos_table, &positions)?;
        let mut x = tape.add(te, pe)?;

        for (l, ids) in self.layers.iter().enumerate() {
            let g1 = tape.param(&self.store, ids.ln1_g);
            let b1 = tape.param(&self.store, ids.ln1_b);
            let h = tape.layer_norm(x, g1, b1)?;
            let q = self.project(tape, adapters, Slot::new(l, Role::Q), h, &mut trace)?;
            let k = self.project(tape, adapters, Slot::new(l, Role::K), h, &mut trace)?;
            let v = self.project(tape, adapters, Slot::new(l, Role::V), h, &mut trace)?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for hd in 0..c.n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s, att_scale)?;
                let p = tape.causal_softmax(s)?;
                heads.push(tape.matmul(p, vh)?);
            }
            let att = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            };
            let o = self.project(tape, adapters, Slot::new(l, Role::O), att, &mut trace)?;
            x = tape.add(x, o)?;

            let g2 = tape.param(&self.store, ids.ln2_g);
            let b2 = tape.param(&self.store, ids.ln2_b);
            let h2 = tape.layer_norm(x, g2, b2)?;
            let up = self.project(tape, adapters, Slot::new(l, Role::FfnUp), h2, &mut trace)?;
            let ub = tape.param(&self.store, ids.up_b);
            let up = tape.add_row(up, ub)?;
            let act = tape.gelu(up)?;
            let down = self.project(tape, adapters, Slot::new(l, Role::FfnDown), act, &mut trace)?;
            let db = tape.param(&self.store, ids.down_b);
            let down = tape.add_row(down, db)?;
            x = tape.add(x, down)?;
        }
        let gf = tape.param(&self.store, self.lnf_g);
        let bf = tape.param(&self.store, self.lnf_b);
        let xf = tape.layer_norm(x, gf, bf)?;
        let head = tape.param(&self.store, self.head);
        tape.matmul_nt(xf, head)
    }

    /// Logits per position, shape `(len, vocab_size)`.
    pub fn forward(&self, adapters: Option<&AdapterState>, tokens: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.forward_on_tape(&mut tape, adapters, tokens, None)?;
        Ok(tape.value(v).clone())
    }

    /// Summed teacher-forced log-likelihood of `continuation` after `context`.
    pub fn continuation_logprob(
        &self,
        adapters: Option<&AdapterState>,
        context: &[u32],
        continuation: &[u32],
    ) -> Result<f64> {
        if context.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut seq = Vec::with_capacity(context.len() + continuation.len());
        seq.extend_from_slice(context);
        seq.extend_from_slice(continuation);
        let logits = self.forward(adapters, &seq)?;
        let mut total = 0.0;
        for (i, &tok) in continuation.iter().enumerate() {
            let pos = context.len() + i - 1;
            total += crate::tape::log_softmax_at(logits.row_slice(pos), tok as usize);
        }
        Ok(total)
    }

    /// Index of the option with the highest summed log-likelihood; ties go to
    /// the lowest index.
    pub fn score_options(
        &self,
        adapters: Option<&AdapterState>,
        prompt: &[u32],
        options: &[Vec<u32>],
    ) -> Result<usize> {
        if options.len() < 2 {
            return Err(Error::TooFewOptions(options.len()));
        }
        if let Some(i) = options.iter().position(Vec::is_empty) {
            return Err(Error::EmptyOption(i));
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (i, opt) in options.iter().enumerate() {
            let lp = self.continuation_logprob(adapters, prompt, opt)?;
            if lp > best.1 {
                best = (i, lp);
            }
        }
        Ok(best.0)
    }

    /// Greedy argmax decoding until `eos` or `max_new` tokens; `eos` is not returned.
    pub fn greedy_decode(
        &self,
        adapters: Option<&AdapterState>,
        prompt: &[u32],
        max_new: usize,
        eos: u32,
    ) -> Result<Vec<u32>> {
        if max_new == 0 {
            return Err(Error::InvalidConfig("max_new must be at least 1".into()));
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && seq.len() < self.config.max_seq {
            let logits = self.forward(adapters, &seq)?;
            let last = logits.row_slice(seq.len() - 1);
            let next = argmax(last) as u32;
            if next == eos {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
