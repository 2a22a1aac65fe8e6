use std::collections::BTreeMap;

use multitune_core::data::{
    default_disciplines, default_general, eligible_for_unique, generate_synthetic, mix_general, ngram_diversity,
    subset, upsample_diverse, upsample_unique, Corpus, Sample, DEFAULT_NGRAMS,
};
use proptest::prelude::*;

fn sample(id: String, discipline: &str, prompt: Vec<u32>) -> Sample {
    Sample {
        id,
        discipline: discipline.to_string(),
        prompt,
        answer: vec![4],
        options: None,
        extra: BTreeMap::new(),
    }
}

/// 160 samples of `bio`, the first 16 carrying the bio-only token 99 as a
/// trailing marker; every other token also occurs in `chem`.
fn eligibility_fixture() -> Corpus {
    let mut samples = Vec::new();
    for i in 0..160u32 {
        let mut p = vec![5 + i % 7, 5 + (i / 7) % 7, 5 + (i / 49) % 7];
        if i < 16 {
            p.push(99);
        }
        samples.push(sample(format!("bio-{i}"), "bio", p));
    }
    for i in 0..200u32 {
        samples.push(sample(format!("chem-{i}"), "chem", vec![5 + i % 7, 5 + (i / 7) % 7]));
    }
    Corpus::new(samples, 0)
}

#[test]
fn unique_draws_only_eligible_and_is_less_diverse() {
    let c = eligibility_fixture();
    let eligible = eligible_for_unique(&c, "bio").unwrap();
    assert_eq!(eligible, (0..16).collect::<Vec<_>>());
    let uq = upsample_unique(&c, "bio", 1000, 3).unwrap();
    let dv = upsample_diverse(&c, "bio", 1000, 3).unwrap();
    assert_eq!(uq.count("bio"), 1000);
    assert_eq!(dv.count("bio"), 1000);
    let eligible_ids: Vec<&str> = eligible.iter().map(|&i| c.samples[i].id.as_str()).collect();
    assert!(uq.samples[c.len()..].iter().all(|s| eligible_ids.contains(&s.id.as_str())));
    let du = ngram_diversity(&uq.filter("bio"), &DEFAULT_NGRAMS).unwrap();
    let dd = ngram_diversity(&dv.filter("bio"), &DEFAULT_NGRAMS).unwrap();
    assert!(dd > du, "diverse {dd} vs unique {du}");
}

#[test]
fn diverse_duplication_is_uniform() {
    // chi-square over 1000 seeds, 9 degrees of freedom, 0.01 critical value
    let samples = (0..10).map(|i| sample(format!("s{i}"), "a", vec![5 + i])).collect();
    let c = Corpus::new(samples, 0);
    let mut counts = [0usize; 10];
    for seed in 0..1000 {
        let up = upsample_diverse(&c, "a", 20, seed).unwrap();
        for s in &up.samples[10..] {
            counts[s.id[1..].parse::<usize>().unwrap()] += 1;
        }
    }
    let expected = 1000.0;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 21.666, "chi2 {chi2} counts {counts:?}");
}

#[test]
fn generation_and_transforms_are_deterministic() {
    let specs = default_disciplines(2000, 20);
    let a = generate_synthetic(&specs, &default_general(), 11, 64).unwrap();
    let b = generate_synthetic(&specs, &default_general(), 11, 64).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&specs, &default_general(), 12, 64).unwrap();
    assert_ne!(a.train.samples, c.train.samples);
    assert_eq!(subset(&a.train, 0.3, 5).unwrap(), subset(&b.train, 0.3, 5).unwrap());
    assert_eq!(
        upsample_diverse(&a.train, "geography", 300, 2).unwrap(),
        upsample_diverse(&b.train, "geography", 300, 2).unwrap()
    );
    assert_eq!(
        mix_general(&a.train, &a.general, 70, 4).unwrap(),
        mix_general(&b.train, &b.general, 70, 4).unwrap()
    );
}

fn corpus_with(sizes: &[usize]) -> Corpus {
    let mut samples = Vec::new();
    for (d, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let p = vec![4 + (i % 9) as u32, 4 + (i / 9 % 9) as u32, 4 + d as u32];
            samples.push(sample(format!("d{d}-{i}"), &format!("d{d}"), p));
        }
    }
    Corpus::new(samples, 1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn duplication_strictly_lowers_diversity(
        sizes in proptest::collection::vec(1usize..30, 1..4),
        picks in proptest::collection::vec(any::<proptest::sample::Index>(), 1..20),
    ) {
        let c = corpus_with(&sizes);
        let before = ngram_diversity(&c, &DEFAULT_NGRAMS).unwrap();
        let mut dup = c.clone();
        for p in &picks {
            dup.samples.push(c.samples[p.index(c.len())].clone());
        }
        let after = ngram_diversity(&dup, &DEFAULT_NGRAMS).unwrap();
        prop_assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn upsample_hits_targets_exactly(
        sizes in proptest::collection::vec(1usize..40, 2..4),
        extra in 0usize..100,
        seed in any::<u64>(),
    ) {
        let c = corpus_with(&sizes);
        let target = sizes[0] + extra;
        let up = upsample_diverse(&c, "d0", target, seed).unwrap();
        prop_assert_eq!(up.count("d0"), target);
        for (d, &n) in sizes.iter().enumerate().skip(1) {
            prop_assert_eq!(up.count(&format!("d{d}")), n);
        }
        prop_assert_eq!(&up.samples[..c.len()], &c.samples[..]);
    }

    #[test]
    fn subset_sizes_are_exact(
        sizes in proptest::collection::vec(10usize..60, 1..4),
        fraction in 0.1f64..=1.0,
        seed in any::<u64>(),
    ) {
        let c = corpus_with(&sizes);
        let s = subset(&c, fraction, seed).unwrap();
        for (d, &n) in sizes.iter().enumerate() {
            let want = (fraction * n as f64).round() as usize;
            prop_assert_eq!(s.count(&format!("d{d}")), want);
        }
        prop_assert!(s.samples.iter().all(|x| c.samples.contains(x)));
    }
}
