use multitune_core::adapters::{
    trainable_param_count, AdapterSpec, AdapterState, GateMode, MoeVariant, Strategy, StrategyDescriptor,
};
use multitune_core::data::{default_disciplines, default_general, generate_synthetic};
use multitune_core::model::{BaseModel, GateTrace, ModelConfig};
use multitune_core::tape::{ParamStore, Tape};
use multitune_core::train::{train, train_comp_gate, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 40,
        max_seq: 16,
        seed: 2,
    }
}

const VARIANTS: [MoeVariant; 4] = [
    MoeVariant::Vanilla,
    MoeVariant::SharedA,
    MoeVariant::SharedExpert,
    MoeVariant::RankWise,
];

fn every_spec(r: usize, k: usize) -> Vec<AdapterSpec> {
    let mut v = vec![AdapterSpec::lora(r, 2.0 * r as f64)];
    v.extend(VARIANTS.map(|m| AdapterSpec::moe(m, r, k, 2.0 * r as f64)));
    v
}

fn snapshot(store: &ParamStore) -> Vec<Vec<u64>> {
    store
        .groups()
        .iter()
        .map(|g| g.value().data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in 0..store.len() {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

#[test]
fn fresh_adapters_leave_logits_bit_identical() {
    let base = BaseModel::init(&small()).unwrap();
    let tokens = [1, 9, 4, 20, 33, 3, 5];
    let plain = base.forward(None, &tokens).unwrap();
    for spec in every_spec(4, 3) {
        let s = AdapterState::new(spec.clone(), &small(), 7).unwrap();
        let with = base.forward(Some(&s), &tokens).unwrap();
        assert!(with.bit_eq(&plain), "{}", spec.strategy);
    }
}

#[test]
fn merged_lora_matches_attached_lora() {
    let base = BaseModel::init(&small()).unwrap();
    let mut s = AdapterState::new(AdapterSpec::lora(4, 8.0), &small(), 1).unwrap();
    randomize(s.store_mut(), 9);
    let merged = s.merge_into(&base).unwrap();
    let tokens = [1, 30, 4, 12, 7, 3, 8, 2];
    let a = base.forward(Some(&s), &tokens).unwrap();
    let b = merged.forward(None, &tokens).unwrap();
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-9, "{diff:e}");
}

#[test]
fn peft_and_composition_freeze_byte_exactly() {
    let data = generate_synthetic(&default_disciplines(1000, 20), &default_general(), 3, 40).unwrap();
    let base = BaseModel::init(&small()).unwrap();
    let before = snapshot(base.store());
    let mut cfg = TrainConfig::peft(Strategy::Moe(MoeVariant::SharedA), 0);
    cfg.rank = 4;
    cfg.experts = 3;
    cfg.epochs = 1;
    cfg.batch_size = 32;
    cfg.lr = 1e-2;
    let trained = train(&base, &data.train, &cfg).unwrap();
    assert_eq!(snapshot(trained.model.store()), before);
    assert_eq!(snapshot(base.store()), before);

    let mut experts = Vec::new();
    for seed in 0..3 {
        let mut e = AdapterState::new(AdapterSpec::lora(4, 8.0), &small(), seed).unwrap();
        randomize(e.store_mut(), 40 + seed);
        experts.push(e);
    }
    let frozen: Vec<_> = experts.iter().map(|e| snapshot(e.store())).collect();
    let (comp, _) = train_comp_gate(&base, &experts, &data.train.filter("chemistry"), &cfg).unwrap();
    for (e, snap) in experts.iter().zip(&frozen) {
        assert_eq!(snapshot(e.store()), *snap);
    }
    // frozen blocks inside the composition keep the expert values
    let names: Vec<(String, Vec<u64>)> = comp
        .store()
        .groups()
        .iter()
        .filter(|g| !g.trainable)
        .map(|g| (g.name().to_string(), g.value().data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    assert!(!names.is_empty());
    let fresh = AdapterState::compose(&experts, GateMode::PerToken).unwrap();
    for (n, bits) in names {
        let id = fresh.store().id_of(&n).unwrap();
        let orig: Vec<u64> = fresh.store().value(id).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig, "{n}");
    }
}

fn wide() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 192,
        n_heads: 4,
        d_ff: 384,
        vocab_size: 64,
        max_seq: 16,
        seed: 0,
    }
}

#[test]
fn parameter_accounting_grid() {
    let m = wide();
    for r in [16, 80, 160] {
        for k in [5, 10, 20] {
            let mut counts = std::collections::BTreeMap::new();
            for v in VARIANTS {
                let spec = AdapterSpec::moe(v, r, k, 2.0 * r as f64);
                let enumerated = AdapterState::new(spec, &m, 0).unwrap().store().trainable_params();
                let desc = StrategyDescriptor {
                    strategy: Strategy::Moe(v),
                    rank: r,
                    experts: k,
                };
                let formula = trainable_param_count(&desc, &m).unwrap().trainable;
                assert_eq!(enumerated, formula, "{v:?} r={r} k={k}");
                counts.insert(v.as_str(), formula);
            }
            assert!(counts["shared_a"] < counts["vanilla"], "r={r} k={k}");

            let lora = AdapterState::new(AdapterSpec::lora(r, 2.0 * r as f64), &m, 0).unwrap();
            let desc = StrategyDescriptor {
                strategy: Strategy::Lora,
                rank: r,
                experts: 1,
            };
            assert_eq!(lora.store().trainable_params(), trainable_param_count(&desc, &m).unwrap().trainable);
        }
    }
}

#[test]
fn composition_accounting() {
    let m = wide();
    let experts: Vec<AdapterState> = (0..5)
        .map(|i| AdapterState::new(AdapterSpec::lora(16, 32.0), &m, i).unwrap())
        .collect();
    let comp = AdapterState::compose(&experts, GateMode::PerToken).unwrap();
    let desc = StrategyDescriptor {
        strategy: Strategy::Comp,
        rank: 16,
        experts: 5,
    };
    assert_eq!(comp.store().trainable_params(), trainable_param_count(&desc, &m).unwrap().trainable);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_gate_output_is_on_the_simplex(
        seed in 0u64..10_000,
        tokens in proptest::collection::vec(0u32..40, 1..16),
        prefix in any::<bool>(),
    ) {
        let base = BaseModel::init(&small()).unwrap();
        for v in VARIANTS {
            let mut spec = AdapterSpec::moe(v, 4, 3, 8.0);
            if prefix {
                spec.gate_mode = GateMode::PrefixMean;
            }
            let mut s = AdapterState::new(spec, &small(), seed).unwrap();
            randomize(s.store_mut(), seed ^ 0xfeed);
            let mut tape = Tape::new();
            let mut trace = GateTrace::new();
            base.forward_on_tape(&mut tape, Some(&s), &tokens, Some(&mut trace)).unwrap();
            prop_assert_eq!(trace.len(), 12);
            for g in trace.values() {
                let t = tape.value(*g);
                for row in 0..t.rows() {
                    let r = t.row_slice(row);
                    prop_assert!(r.iter().all(|&p| p >= 0.0));
                    prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
