use std::collections::BTreeMap;

use multitune_core::data::{Sample, StatsBuilder};
use multitune_core::eval::{delta_m, format_delta_m};

// columns: chemistry, medicine, biology, math, geography
const DISCIPLINE_LORA: [f64; 5] = [0.530, 0.581, 0.713, 0.845, 0.745];
const ROWS: [([f64; 5], &str); 4] = [
    ([0.619, 0.545, 0.646, 0.830, 0.707], "-1.135"),
    ([0.649, 0.588, 0.821, 0.831, 0.743], "+7.376"),
    ([0.535, 0.550, 0.683, 0.847, 0.741], "-1.780"),
    ([0.613, 0.603, 0.823, 0.839, 0.760], "+7.236"),
];

#[test]
fn delta_m_reproduces_the_published_rows() {
    for (accs, want) in ROWS {
        let got = delta_m(&accs, &DISCIPLINE_LORA).unwrap();
        let want_v: f64 = want.parse().unwrap();
        assert!((got - want_v).abs() < 0.005, "{got} vs {want}");
        assert_eq!(format_delta_m(got), want);
    }
    assert_eq!(delta_m(&DISCIPLINE_LORA, &DISCIPLINE_LORA).unwrap(), 0.0);
}

#[test]
fn delta_m_matches_a_direct_mean_of_relative_changes() {
    for (accs, _) in ROWS {
        let mut sum = 0.0;
        for i in 0..5 {
            sum += (accs[i] - DISCIPLINE_LORA[i]) / DISCIPLINE_LORA[i];
        }
        let oracle = 100.0 * sum / 5.0;
        assert!((delta_m(&accs, &DISCIPLINE_LORA).unwrap() - oracle).abs() < 1e-12);
    }
}

#[test]
fn corpus_shares_at_full_scale() {
    let counts = [
        ("math", 2_000_000usize),
        ("chemistry", 713_218),
        ("biology", 51_427),
        ("medicine", 490_766),
        ("geography", 39_749),
    ];
    let mut b = StatsBuilder::new();
    let mut s = Sample {
        id: String::new(),
        discipline: String::new(),
        prompt: vec![10, 11],
        answer: vec![12],
        options: None,
        extra: BTreeMap::new(),
    };
    for (i, (d, n)) in counts.iter().enumerate() {
        s.discipline = d.to_string();
        s.prompt[0] = 20 + i as u32;
        for _ in 0..*n {
            b.add(&s);
        }
    }
    let stats = b.finish().unwrap();
    assert_eq!(stats.total_samples(), 3_295_160);
    let shares: Vec<String> = stats.rows.iter().map(|r| format!("{:.1}", r.share_pct)).collect();
    assert_eq!(shares, ["60.7", "21.6", "1.6", "14.9", "1.2"]);
    // one marker token per discipline, the rest shared by all
    assert!(stats.rows.iter().all(|r| r.unique_tokens == 1 && r.avg_words == 3.0));
}
