use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{label_hash, stream_rng, Corpus, Sample, Vocab, ANS};
use crate::error::{Error, Result};

/// Number of shared content tokens `v0..v9`.
pub const CONTENT_TOKENS: u32 = 10;
const FIRST_CONTENT: u32 = 4;
const OPS: [&str; 4] = ["copy", "rev", "first", "last"];
/// Operands of the modular sum live in `0..SUM_MODULUS`.
const SUM_MODULUS: u32 = 5;

pub const GENERAL_DISCIPLINE: &str = "general";

/// Reference discipline shares in percent.
pub const TABLE1_SHARES: [(&str, f64); 5] = [
    ("math", 60.7),
    ("chemistry", 21.6),
    ("biology", 1.6),
    ("medicine", 14.9),
    ("geography", 1.2),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    /// `(a + b) mod 5`
    ModularSum,
    /// three tokens, repeated
    Copy,
    /// three tokens, reversed
    Reverse,
    /// largest of four tokens
    MaxToken,
    /// `v0` when the first of two tokens is even, `v1` otherwise
    Parity,
}

impl TaskFamily {
    fn arity(self) -> usize {
        match self {
            TaskFamily::ModularSum | TaskFamily::Parity => 2,
            TaskFamily::Copy | TaskFamily::Reverse => 3,
            TaskFamily::MaxToken => 4,
        }
    }

    fn operand_range(self) -> u32 {
        match self {
            TaskFamily::ModularSum => SUM_MODULUS,
            _ => CONTENT_TOKENS,
        }
    }

    fn options(self) -> usize {
        match self {
            TaskFamily::Parity => 2,
            _ => 4,
        }
    }
}

/// Reference answer, in content indices, for operands in content indices.
pub fn solve(family: TaskFamily, operands: &[u32]) -> Vec<u32> {
    match family {
        TaskFamily::ModularSum => vec![operands.iter().sum::<u32>() % SUM_MODULUS],
        TaskFamily::Copy => operands.to_vec(),
        TaskFamily::Reverse => operands.iter().rev().copied().collect(),
        TaskFamily::MaxToken => vec![operands.iter().copied().max().unwrap_or(0)],
        TaskFamily::Parity => vec![operands[0] % 2],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalFormat {
    MultipleChoice,
    Generative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisciplineSpec {
    pub name: String,
    pub family: TaskFamily,
    pub markers: Vec<String>,
    /// Training samples.
    pub size: usize,
    pub test_size: usize,
    pub format: EvalFormat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralSpec {
    pub size: usize,
    pub test_size: usize,
}

pub fn default_general() -> GeneralSpec {
    GeneralSpec {
        size: 1000,
        test_size: 200,
    }
}

/// Five disciplines sized by the reference shares of `total` training samples.
pub fn default_disciplines(total: usize, test_size: usize) -> Vec<DisciplineSpec> {
    let families = [
        (TaskFamily::ModularSum, EvalFormat::Generative),
        (TaskFamily::Copy, EvalFormat::MultipleChoice),
        (TaskFamily::Reverse, EvalFormat::MultipleChoice),
        (TaskFamily::MaxToken, EvalFormat::MultipleChoice),
        (TaskFamily::Parity, EvalFormat::MultipleChoice),
    ];
    TABLE1_SHARES
        .iter()
        .zip(families)
        .map(|((name, share), (family, format))| DisciplineSpec {
            name: name.to_string(),
            family,
            markers: (0..3).map(|i| format!("{name}_{i}")).collect(),
            size: libm::round(share / 100.0 * total as f64) as usize,
            test_size,
            format,
        })
        .collect()
}

/// Everything one generation call produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub vocab: Vocab,
    pub train: Corpus,
    pub test: Corpus,
    pub general: Corpus,
    pub general_test: Corpus,
}

fn content(i: u32) -> u32 {
    FIRST_CONTENT + i
}

fn build_vocab(specs: &[DisciplineSpec]) -> Result<Vocab> {
    let mut v = Vocab::new();
    for i in 0..CONTENT_TOKENS {
        let id = v.intern(&format!("v{i}"));
        debug_assert_eq!(id, content(i));
    }
    for op in OPS {
        v.intern(op);
    }
    let reserved = v.len();
    let mut seen = BTreeSet::new();
    for s in specs {
        for m in &s.markers {
            if m.split_whitespace().count() != 1 {
                return Err(Error::InvalidDataSpec(format!("marker `{m}` is not a single word")));
            }
            if !seen.insert(m.clone()) || v.id(m).is_some_and(|id| (id as usize) < reserved) {
                return Err(Error::MarkerCollision(m.clone()));
            }
            v.intern(m);
        }
    }
    Ok(v)
}

fn validate(specs: &[DisciplineSpec], general: &GeneralSpec) -> Result<()> {
    if specs.len() < 2 {
        return Err(Error::InvalidDataSpec("need at least two disciplines".into()));
    }
    let mut names = BTreeSet::new();
    for s in specs {
        if s.name.is_empty() || s.name == GENERAL_DISCIPLINE || !names.insert(s.name.as_str()) {
            return Err(Error::InvalidDataSpec(format!("bad or duplicate discipline name `{}`", s.name)));
        }
        if s.size < 10 {
            return Err(Error::InvalidDataSpec(format!("discipline `{}` has fewer than 10 samples", s.name)));
        }
        if s.test_size == 0 {
            return Err(Error::InvalidDataSpec(format!("discipline `{}` has an empty test split", s.name)));
        }
        if s.markers.is_empty() {
            return Err(Error::InvalidDataSpec(format!("discipline `{}` has no marker tokens", s.name)));
        }
    }
    let generative = specs.iter().filter(|s| s.format == EvalFormat::Generative).count();
    if generative != 1 {
        return Err(Error::InvalidDataSpec(format!(
            "exactly one generative discipline required, found {generative}"
        )));
    }
    if general.size == 0 || general.test_size == 0 {
        return Err(Error::InvalidDataSpec("general corpus splits must be nonempty".into()));
    }
    Ok(())
}

fn operands(rng: &mut ChaCha8Rng, family: TaskFamily) -> Vec<u32> {
    (0..family.arity())
        .map(|_| rng.gen_range(0..family.operand_range()))
        .collect()
}

/// Gold plus distractors of the same length, gold at a uniform position.
fn options(rng: &mut ChaCha8Rng, family: TaskFamily, ops: &[u32], gold: &[u32]) -> (Vec<Vec<u32>>, usize) {
    let n = family.options();
    let mut out: Vec<Vec<u32>> = vec![gold.to_vec()];
    let push = |cand: Vec<u32>, out: &mut Vec<Vec<u32>>| {
        if out.len() < n && !out.contains(&cand) {
            out.push(cand);
        }
    };
    match family {
        TaskFamily::Reverse => push(ops.to_vec(), &mut out),
        TaskFamily::MaxToken => {
            let mut others: Vec<u32> = ops.iter().copied().filter(|&o| o != gold[0]).collect();
            others.sort_unstable();
            others.dedup();
            others.shuffle(rng);
            for o in others {
                push(vec![o], &mut out);
            }
        }
        _ => {}
    }
    let range = match family {
        TaskFamily::ModularSum => SUM_MODULUS,
        TaskFamily::Parity => 2,
        _ => CONTENT_TOKENS,
    };
    while out.len() < n {
        let cand: Vec<u32> = match family {
            TaskFamily::Reverse => {
                let mut c = ops.to_vec();
                c.shuffle(rng);
                if out.contains(&c) {
                    (0..gold.len()).map(|_| rng.gen_range(0..range)).collect()
                } else {
                    c
                }
            }
            _ => (0..gold.len()).map(|_| rng.gen_range(0..range)).collect(),
        };
        push(cand, &mut out);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let shuffled: Vec<Vec<u32>> = order.iter().map(|&i| out[i].clone()).collect();
    let gold_at = order.iter().position(|&i| i == 0).expect("gold present");
    (shuffled, gold_at)
}

fn to_tokens(xs: &[u32]) -> Vec<u32> {
    xs.iter().map(|&x| content(x)).collect()
}

fn discipline_split(
    spec: &DisciplineSpec,
    vocab: &Vocab,
    split: &str,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    let markers: Vec<u32> = spec.markers.iter().map(|m| vocab.id(m).expect("interned")).collect();
    (0..n)
        .map(|i| {
            let ops = operands(rng, spec.family);
            let gold = solve(spec.family, &ops);
            let marker = markers[rng.gen_range(0..markers.len())];
            let mut prompt = vec![marker];
            prompt.extend(to_tokens(&ops));
            let (answer, options) = match spec.format {
                EvalFormat::Generative => {
                    let mut a = vec![ANS];
                    a.extend(to_tokens(&gold));
                    (a, None)
                }
                EvalFormat::MultipleChoice => {
                    let (opts, _) = options(rng, spec.family, &ops, &gold);
                    let opts: Vec<Vec<u32>> = opts.iter().map(|o| to_tokens(o)).collect();
                    (to_tokens(&gold), Some(opts))
                }
            };
            Sample {
                id: format!("{}-{split}-{i:06}", spec.name),
                discipline: spec.name.clone(),
                prompt,
                answer,
                options,
                extra: Default::default(),
            }
        })
        .collect()
}

fn general_answer(op: usize, xs: &[u32]) -> Vec<u32> {
    match op {
        0 => xs.to_vec(),
        1 => xs.iter().rev().copied().collect(),
        2 => vec![xs[0]],
        _ => vec![xs[xs.len() - 1]],
    }
}

fn general_split(vocab: &Vocab, split: &str, n: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let op = rng.gen_range(0..OPS.len());
            let xs: Vec<u32> = (0..3).map(|_| rng.gen_range(0..CONTENT_TOKENS)).collect();
            let mut prompt = vec![vocab.id(OPS[op]).expect("interned")];
            prompt.extend(to_tokens(&xs));
            let mut answer = vec![ANS];
            answer.extend(to_tokens(&general_answer(op, &xs)));
            Sample {
                id: format!("{GENERAL_DISCIPLINE}-{split}-{i:06}"),
                discipline: GENERAL_DISCIPLINE.to_string(),
                prompt,
                answer,
                options: None,
                extra: Default::default(),
            }
        })
        .collect()
}

/// Deterministic corpora for `specs` plus the general instruction analog.
/// `vocab_limit` is the model's vocabulary size.
pub fn generate_synthetic(
    specs: &[DisciplineSpec],
    general: &GeneralSpec,
    seed: u64,
    vocab_limit: usize,
) -> Result<SyntheticData> {
    validate(specs, general)?;
    let vocab = build_vocab(specs)?;
    if vocab.len() > vocab_limit {
        return Err(Error::VocabOverflow {
            needed: vocab.len(),
            limit: vocab_limit,
        });
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in specs {
        let h = label_hash(&s.name);
        let mut rng = stream_rng(seed, h.wrapping_mul(2));
        train.extend(discipline_split(s, &vocab, "train", s.size, &mut rng));
        let mut rng = stream_rng(seed, h.wrapping_mul(2).wrapping_add(1));
        test.extend(discipline_split(s, &vocab, "test", s.test_size, &mut rng));
    }
    let h = label_hash(GENERAL_DISCIPLINE);
    let gen_train = general_split(&vocab, "train", general.size, &mut stream_rng(seed, h.wrapping_mul(2)));
    let gen_test = general_split(
        &vocab,
        "test",
        general.test_size,
        &mut stream_rng(seed, h.wrapping_mul(2).wrapping_add(1)),
    );
    let tag = |c: Corpus, what: &str| c.logged(format!("generate {what} seed={seed}"));
    Ok(SyntheticData {
        vocab,
        train: tag(Corpus::new(train, seed), "train"),
        test: tag(Corpus::new(test, seed), "test"),
        general: tag(Corpus::new(gen_train, seed), "general"),
        general_test: tag(Corpus::new(gen_test, seed), "general_test"),
    })
}

/// Marker-free copy sequences `x… <ans> x…` for base-model pretraining.
pub fn generate_pretrain(n: usize, seed: u64) -> Corpus {
    let mut rng = stream_rng(seed, label_hash("pretrain"));
    let samples = (0..n)
        .map(|i| {
            let len = rng.gen_range(2..=4);
            let xs: Vec<u32> = (0..len).map(|_| rng.gen_range(0..CONTENT_TOKENS)).collect();
            let mut answer = vec![ANS];
            answer.extend(to_tokens(&xs));
            Sample {
                id: format!("pretrain-{i:06}"),
                discipline: "pretrain".to_string(),
                prompt: to_tokens(&xs),
                answer,
                options: None,
                extra: Default::default(),
            }
        })
        .collect();
    Corpus::new(samples, seed).logged(format!("generate pretrain seed={seed}"))
}
