use super::*;
use alloc::vec;
use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
use super::Strategy;
use rand::Rng;

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

// --- brute-force oracles, written against raw indices only ---

fn oracle_product(b: &Tensor, a: &Tensor) -> Vec<Vec<f64>> {
    let (dout, r, din) = (b.rows(), a.rows(), a.cols());
    (0..dout)
        .map(|i| {
            (0..din)
                .map(|j| (0..r).map(|p| b.at(i, p) * a.at(p, j)).sum())
                .collect()
        })
        .collect()
}

fn oracle_apply(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn oracle_lora(x: &[f64], a: &Tensor, b: &Tensor, alpha: f64) -> Vec<f64> {
    let s = alpha / a.rows() as f64;
    oracle_apply(&oracle_product(b, a), x)
        .into_iter()
        .map(|v| v * s)
        .collect()
}

fn oracle_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| libm::exp(v - m)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn oracle_gate(x: &[f64], g: &GateParams) -> Vec<f64> {
    let logits: Vec<f64> = (0..g.weight.rows())
        .map(|i| {
            g.weight.row_slice(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + g.bias.data()[i]
        })
        .collect();
    oracle_softmax(&logits)
}

fn add_into(acc: &mut [f64], v: &[f64], w: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += w * b;
    }
}

/// Weighted sum of separately evaluated experts.
fn oracle_mixture(x: &[f64], s: &MoeAdapterState) -> Vec<f64> {
    let dout = s.experts_b[0].rows();
    let omega = oracle_gate(x, &s.gate);
    let mut out = vec![0.0; dout];
    let k = s.experts_b.len();
    match s.variant {
        MoeVariant::Vanilla | MoeVariant::SharedExpert => {
            for i in 0..k {
                let d = oracle_lora(x, &s.experts_a[i], &s.experts_b[i], s.alpha);
                add_into(&mut out, &d, omega[i]);
            }
            if let Some(f) = &s.shared_expert {
                add_into(&mut out, &oracle_lora(x, &f.a, &f.b, s.alpha), 1.0);
            }
        }
        MoeVariant::SharedA => {
            let a = s.shared_a.as_ref().unwrap();
            for i in 0..k {
                let d = oracle_lora(x, a, &s.experts_b[i], s.alpha);
                add_into(&mut out, &d, omega[i]);
            }
        }
        MoeVariant::RankWise => {
            let r = s.rank;
            let scale = s.alpha / r as f64;
            for i in 0..k {
                let (a, b) = (&s.experts_a[i], &s.experts_b[i]);
                for j in 0..r {
                    let proj: f64 = a.row_slice(j).iter().zip(x).map(|(p, q)| p * q).sum();
                    let w = r as f64 * omega[i * r + j];
                    for o in 0..dout {
                        out[o] += scale * w * b.at(o, j) * proj;
                    }
                }
            }
        }
    }
    out
}

fn random_mixture(seed: u64, variant: MoeVariant, k: usize, r: usize, din: usize, dout: usize) -> MoeAdapterState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let has_a = variant != MoeVariant::SharedA;
    let arity = if variant == MoeVariant::RankWise { k * r } else { k };
    MoeAdapterState {
        variant,
        rank: r,
        alpha: 2.0 * r as f64,
        experts_a: if has_a {
            (0..k).map(|_| rand_matrix(&mut rng, r, din, 1.0)).collect()
        } else {
            vec![]
        },
        experts_b: (0..k).map(|_| rand_matrix(&mut rng, dout, r, 1.0)).collect(),
        shared_a: (!has_a).then(|| rand_matrix(&mut rng, r, din, 1.0)),
        shared_expert: (variant == MoeVariant::SharedExpert).then(|| LoraFactors {
            a: rand_matrix(&mut rng, r, din, 1.0),
            b: rand_matrix(&mut rng, dout, r, 1.0),
            alpha: 2.0 * r as f64,
        }),
        gate: GateParams {
            weight: rand_matrix(&mut rng, arity, din, 1.0),
            bias: rand_matrix(&mut rng, 1, arity, 1.0),
        },
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn eval_variant(x: &Tensor, s: &MoeAdapterState) -> Tensor {
    match s.variant {
        MoeVariant::Vanilla => moe_delta(x, s),
        MoeVariant::SharedExpert => shared_expert_delta(x, s),
        MoeVariant::SharedA => shared_a_delta(x, s),
        MoeVariant::RankWise => rank_wise_delta(x, s),
    }
    .unwrap()
}

#[test]
fn zero_b_gives_zero_delta() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = LoraFactors {
        a: rand_matrix(&mut rng, 4, 8, 1.0),
        b: Tensor::zeros(&[6, 4]),
        alpha: 8.0,
    };
    let x = rand_matrix(&mut rng, 3, 8, 1.0);
    assert!(lora_delta(&x, &f).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn rank_16_alpha_32_doubles() {
    let f = LoraFactors {
        a: Tensor::zeros(&[16, 32]),
        b: Tensor::zeros(&[32, 16]),
        alpha: 32.0,
    };
    assert_eq!(f.scale(), 2.0);
    assert_eq!(AdapterSpec::lora(16, 32.0).scale(), 2.0);
}

#[test]
fn lora_shape_mismatch() {
    let f = LoraFactors {
        a: Tensor::zeros(&[2, 4]),
        b: Tensor::zeros(&[3, 2]),
        alpha: 1.0,
    };
    assert!(lora_delta(&Tensor::zeros(&[1, 5]), &f).is_err());
}

#[test]
fn zero_gate_is_uniform_and_saturates() {
    let g = GateParams {
        weight: Tensor::zeros(&[5, 3]),
        bias: Tensor::zeros(&[5]),
    };
    let w = gate_weights(&Tensor::row(vec![0.3, -1.0, 2.0]).unwrap(), &g).unwrap();
    for v in w.data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
    let g = GateParams {
        weight: Tensor::zeros(&[3, 3]),
        bias: Tensor::row(vec![0.0, 50.0, 0.0]).unwrap(),
    };
    let w = gate_weights(&Tensor::row(vec![1.0, 1.0, 1.0]).unwrap(), &g).unwrap();
    assert!((w.data()[1] - 1.0).abs() < 1e-12);
}

#[test]
fn identical_experts_reduce_to_single_lora() {
    let mut s = random_mixture(7, MoeVariant::Vanilla, 3, 2, 5, 4);
    let (a, b) = (s.experts_a[0].clone(), s.experts_b[0].clone());
    s.experts_a = vec![a.clone(); 3];
    s.experts_b = vec![b.clone(); 3];
    let x = rand_matrix(&mut ChaCha8Rng::seed_from_u64(8), 2, 5, 1.0);
    let single = lora_delta(&x, &LoraFactors { a, b, alpha: s.alpha }).unwrap();
    assert!(moe_delta(&x, &s).unwrap().max_abs_diff(&single) < 1e-12);
}

#[test]
fn one_hot_gate_selects_expert() {
    let mut s = random_mixture(9, MoeVariant::Vanilla, 3, 2, 5, 4);
    s.gate.weight.fill(0.0);
    s.gate.bias = Tensor::row(vec![-400.0, 400.0, -400.0]).unwrap();
    let x = rand_matrix(&mut ChaCha8Rng::seed_from_u64(10), 2, 5, 1.0);
    let f = LoraFactors {
        a: s.experts_a[1].clone(),
        b: s.experts_b[1].clone(),
        alpha: s.alpha,
    };
    assert!(moe_delta(&x, &s).unwrap().max_abs_diff(&lora_delta(&x, &f).unwrap()) < 1e-12);
}

#[test]
fn variant_guard() {
    let s = random_mixture(1, MoeVariant::SharedA, 2, 2, 4, 4);
    let x = Tensor::zeros(&[1, 4]);
    assert!(matches!(moe_delta(&x, &s), Err(Error::VariantMismatch { .. })));
    let mut s = random_mixture(1, MoeVariant::SharedExpert, 2, 2, 4, 4);
    s.shared_expert = None;
    assert!(matches!(
        shared_expert_delta(&x, &s),
        Err(Error::MissingBlock(_))
    ));
    let mut s = random_mixture(1, MoeVariant::SharedA, 2, 2, 4, 4);
    s.shared_a = None;
    assert!(matches!(shared_a_delta(&x, &s), Err(Error::MissingBlock(_))));
    let mut s = random_mixture(1, MoeVariant::RankWise, 2, 2, 4, 4);
    s.gate.weight = Tensor::zeros(&[3, 4]);
    s.gate.bias = Tensor::zeros(&[3]);
    assert!(matches!(rank_wise_delta(&x, &s), Err(Error::GateArity { .. })));
}

#[test]
fn shared_expert_limits() {
    let x = rand_matrix(&mut ChaCha8Rng::seed_from_u64(3), 3, 6, 1.0);
    let mut s = random_mixture(2, MoeVariant::SharedExpert, 3, 2, 6, 5);
    let shared = s.shared_expert.clone().unwrap();
    let zeroed: Vec<Tensor> = s.experts_b.iter().map(|b| Tensor::zeros(b.shape())).collect();
    let mut routed_zero = s.clone();
    routed_zero.experts_b = zeroed;
    let d = shared_expert_delta(&x, &routed_zero).unwrap();
    assert!(d.max_abs_diff(&lora_delta(&x, &shared).unwrap()) < 1e-12);

    s.shared_expert.as_mut().unwrap().b.fill(0.0);
    let mut vanilla = s.clone();
    vanilla.variant = MoeVariant::Vanilla;
    vanilla.shared_expert = None;
    let d = shared_expert_delta(&x, &s).unwrap();
    assert!(d.max_abs_diff(&moe_delta(&x, &vanilla).unwrap()) < 1e-12);
}

#[test]
fn shared_a_limits() {
    let x = rand_matrix(&mut ChaCha8Rng::seed_from_u64(4), 2, 6, 1.0);
    let s = random_mixture(5, MoeVariant::SharedA, 1, 3, 6, 4);
    let f = LoraFactors {
        a: s.shared_a.clone().unwrap(),
        b: s.experts_b[0].clone(),
        alpha: s.alpha,
    };
    assert!(shared_a_delta(&x, &s).unwrap().bit_eq(&lora_delta(&x, &f).unwrap()));

    let mut s = random_mixture(6, MoeVariant::SharedA, 4, 3, 6, 4);
    let b = s.experts_b[2].clone();
    s.experts_b = vec![b.clone(); 4];
    let f = LoraFactors {
        a: s.shared_a.clone().unwrap(),
        b,
        alpha: s.alpha,
    };
    assert!(shared_a_delta(&x, &s).unwrap().max_abs_diff(&lora_delta(&x, &f).unwrap()) < 1e-12);
}

#[test]
fn rank_wise_tied_weights_reduce_to_vanilla() {
    let (k, r, din, dout) = (3, 4, 6, 5);
    let vanilla = random_mixture(11, MoeVariant::Vanilla, k, r, din, dout);
    let mut rw = vanilla.clone();
    rw.variant = MoeVariant::RankWise;
    let mut w = Vec::new();
    let mut b = Vec::new();
    for i in 0..k {
        for _ in 0..r {
            w.extend_from_slice(vanilla.gate.weight.row_slice(i));
            b.push(vanilla.gate.bias.data()[i]);
        }
    }
    rw.gate = GateParams {
        weight: Tensor::matrix(k * r, din, w).unwrap(),
        bias: Tensor::row(b).unwrap(),
    };
    let x = rand_matrix(&mut ChaCha8Rng::seed_from_u64(12), 3, din, 1.0);
    let d = rank_wise_delta(&x, &rw).unwrap();
    assert!(d.max_abs_diff(&moe_delta(&x, &vanilla).unwrap()) < 1e-9);
}

#[test]
fn rank_wise_rank_one_is_bitwise_vanilla() {
    let vanilla = random_mixture(13, MoeVariant::Vanilla, 4, 1, 6, 5);
    let mut rw = vanilla.clone();
    rw.variant = MoeVariant::RankWise;
    let x = rand_matrix(&mut ChaCha8Rng::seed_from_u64(14), 3, 6, 1.0);
    assert!(rank_wise_delta(&x, &rw).unwrap().bit_eq(&moe_delta(&x, &vanilla).unwrap()));
}

#[test]
fn merge_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w = rand_matrix(&mut rng, 5, 7, 1.0);
    let mut f = LoraFactors {
        a: rand_matrix(&mut rng, 2, 7, 1.0),
        b: Tensor::zeros(&[5, 2]),
        alpha: 4.0,
    };
    assert!(merge(&w, &f).unwrap().bit_eq(&w));
    f.b = rand_matrix(&mut rng, 5, 2, 1.0);
    let merged = merge(&w, &f).unwrap();
    let ba = oracle_product(&f.b, &f.a);
    let mut back = merged.clone();
    for i in 0..5 {
        for j in 0..7 {
            back.data_mut()[i * 7 + j] -= f.scale() * ba[i][j];
        }
    }
    assert!(back.max_abs_diff(&w) < 1e-12);
    assert!(merge(&Tensor::zeros(&[4, 7]), &f).is_err());
}

#[test]
fn comp_matches_vanilla_arithmetic() {
    let s = random_mixture(16, MoeVariant::Vanilla, 3, 2, 5, 4);
    let comp = CompositionState {
        experts: (0..3)
            .map(|i| LoraFactors {
                a: s.experts_a[i].clone(),
                b: s.experts_b[i].clone(),
                alpha: s.alpha,
            })
            .collect(),
        gate: s.gate.clone(),
    };
    let x = rand_matrix(&mut ChaCha8Rng::seed_from_u64(17), 2, 5, 1.0);
    assert!(comp_delta(&x, &comp).unwrap().bit_eq(&moe_delta(&x, &s).unwrap()));
    let mut bad = comp.clone();
    bad.experts[1].a = Tensor::zeros(&[3, 5]);
    assert!(matches!(
        comp_delta(&x, &bad),
        Err(Error::IncompatibleExpert { index: 1, .. })
    ));
}

#[test]
fn strategy_round_trips_through_strings() {
    for s in [
        Strategy::Full,
        Strategy::Lora,
        Strategy::Comp,
        Strategy::Moe(MoeVariant::Vanilla),
        Strategy::Moe(MoeVariant::SharedA),
        Strategy::Moe(MoeVariant::SharedExpert),
        Strategy::Moe(MoeVariant::RankWise),
    ] {
        assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
    }
    assert!("lora_moe:bogus".parse::<Strategy>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn lora_matches_product_oracle(seed in any::<u64>(), r in 1usize..5, din in 4usize..9, dout in 4usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = LoraFactors { a: rand_matrix(&mut rng, r, din, 1.0), b: rand_matrix(&mut rng, dout, r, 1.0), alpha: 3.0 };
        let x = rand_matrix(&mut rng, 1, din, 1.0);
        let d = lora_delta(&x, &f).unwrap();
        prop_assert!(max_diff(d.data(), &oracle_lora(x.data(), &f.a, &f.b, f.alpha)) < 1e-12);
    }

    #[test]
    fn gate_is_simplex(seed in any::<u64>(), k in 1usize..8, din in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GateParams { weight: rand_matrix(&mut rng, k, din, 3.0), bias: rand_matrix(&mut rng, 1, k, 3.0) };
        let x = rand_matrix(&mut rng, 4, din, 2.0);
        let w = gate_weights(&x, &g).unwrap();
        for i in 0..4 {
            let row = w.row_slice(i);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(max_diff(row, &oracle_gate(x.row_slice(i), &g)) < 1e-12);
        }
    }

    #[test]
    fn every_variant_matches_explicit_sum(seed in any::<u64>(), v in 0usize..4, k in 1usize..5, r in 1usize..4) {
        let variant = [MoeVariant::Vanilla, MoeVariant::SharedExpert, MoeVariant::SharedA, MoeVariant::RankWise][v];
        let s = random_mixture(seed, variant, k, r, 6, 5);
        let x = rand_matrix(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc), 1, 6, 1.0);
        let d = eval_variant(&x, &s);
        prop_assert!(max_diff(d.data(), &oracle_mixture(x.data(), &s)) < 1e-12);
    }
}
