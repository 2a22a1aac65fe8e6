use std::path::Path;

use multitune::checkpoint;
use multitune::core::adapters::{AdapterSpec, AdapterState, MoeVariant};
use multitune::core::data::{Corpus, Sample, Vocab};
use multitune::core::model::{BaseModel, ModelConfig};
use multitune::io::{parse_jsonl, to_jsonl};
use proptest::prelude::*;

fn vocab() -> Vocab {
    let mut v = Vocab::new();
    for i in 0..20 {
        v.intern(&format!("w{i}"));
    }
    v
}

fn tokens() -> impl Strategy<Value = Vec<u32>> {
    proptest::collection::vec(4u32..24, 1..8)
}

fn sample_strategy() -> impl Strategy<Value = Sample> {
    (
        "[a-z]{1,6}-[0-9]{1,4}",
        prop_oneof!["chemistry", "math", "general"],
        tokens(),
        tokens(),
        proptest::option::of((proptest::collection::vec(tokens(), 0..3), any::<proptest::sample::Index>())),
        proptest::collection::btree_map("x_[a-z]{1,5}", prop_oneof![
            any::<i32>().prop_map(|n| n.to_string()),
            "[a-z ]{0,8}".prop_map(|s| serde_json::to_string(&s).unwrap()),
            Just("[1,2,3]".to_string()),
            Just("null".to_string()),
        ], 0..3),
    )
        .prop_map(|(id, discipline, prompt, answer, opts, extra)| {
            let options = opts.map(|(mut o, at)| {
                o.retain(|x| *x != answer);
                o.insert(at.index(o.len() + 1), answer.clone());
                o
            });
            Sample { id, discipline: discipline.to_string(), prompt, answer, options, extra }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn jsonl_round_trip_is_identity(samples in proptest::collection::vec(sample_strategy(), 0..12)) {
        let v = vocab();
        let corpus = Corpus::new(samples.clone(), 0);
        let text = to_jsonl(&corpus, &v).unwrap();
        let mut v2 = vocab();
        let back = parse_jsonl(&text, &mut v2, Path::new("mem.jsonl")).unwrap();
        prop_assert_eq!(&back, &samples);
        prop_assert_eq!(&v2, &v);
        prop_assert_eq!(to_jsonl(&Corpus::new(back, 0), &v2).unwrap(), text);
    }
}

#[test]
fn parse_errors_name_the_line() {
    let mut v = vocab();
    let text = "{\"id\":\"a\",\"discipline\":\"math\",\"prompt\":\"w1\",\"answer\":\"w2\"}\n{\"id\":\"b\",\"prompt\":\"w1\",\"answer\":\"w2\"}\n";
    let e = parse_jsonl(text, &mut v, Path::new("c.jsonl")).unwrap_err().to_string();
    assert!(e.contains("c.jsonl:2") && e.contains("discipline"), "{e}");
    let e = parse_jsonl("{\"id\":", &mut v, Path::new("c.jsonl")).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

fn config() -> ModelConfig {
    ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, d_ff: 16, vocab_size: 30, max_seq: 8, seed: 4 }
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let base = BaseModel::init(&config()).unwrap();
    let p = dir.path().join("base.ckpt");
    checkpoint::save_base(&p, &base, Some("h")).unwrap();
    let back = checkpoint::load_base(&p).unwrap();
    assert_eq!(back.store().total_params(), base.store().total_params());
    for (a, b) in base.store().groups().iter().zip(back.store().groups()) {
        assert_eq!(a.name(), b.name());
        let bits = |g: &multitune::core::tape::ParamGroup| g.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }

    let state = AdapterState::new(AdapterSpec::moe(MoeVariant::RankWise, 2, 3, 4.0), &config(), 1).unwrap();
    let p = dir.path().join("moe.ckpt");
    checkpoint::save_adapters(&p, &state, Some("chemistry"), None).unwrap();
    let (s, header) = checkpoint::load_adapters(&p).unwrap();
    assert_eq!(header.label.as_deref(), Some("chemistry"));
    assert_eq!(s.spec(), state.spec());
    assert_eq!(s.named_params(), state.named_params());
    assert!(checkpoint::load_base(&p).is_err());
}

#[test]
fn truncated_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    checkpoint::save_base(&p, &BaseModel::init(&config()).unwrap(), None).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(checkpoint::load_base(&p).unwrap_err().exit_code(), 3);
}
