//! Text and CSV renderings of statistics, comparisons and routing matrices.

use std::fmt::Write as _;

use multitune_core::adapters::RoutingMatrix;
use multitune_core::data::CorpusStats;
use multitune_core::eval::{format_delta_m, Accuracies};
use serde::{Deserialize, Serialize};

/// One row of a method comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub strategy: String,
    pub accuracies: Accuracies,
    pub average: f64,
    /// `None` when the baseline has a zero entry.
    pub delta_m: Option<f64>,
    pub param_pct: f64,
    pub general_acc: Option<f64>,
}

pub const STATS_HEADER: &str = "discipline,samples,share_pct,avg_words,unique_tokens";

pub fn stats_csv(stats: &CorpusStats) -> String {
    let mut out = String::from(STATS_HEADER);
    out.push('\n');
    for r in &stats.rows {
        let _ = writeln!(
            out,
            "{},{},{:.1},{:.2},{}",
            r.discipline, r.samples, r.share_pct, r.avg_words, r.unique_tokens
        );
    }
    out
}

pub fn stats_table(stats: &CorpusStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>10} {:>7} {:>9} {:>7}", "discipline", "samples", "%", "words", "unique");
    for r in &stats.rows {
        let _ = writeln!(
            out,
            "{:<12} {:>10} {:>7.1} {:>9.2} {:>7}",
            r.discipline, r.samples, r.share_pct, r.avg_words, r.unique_tokens
        );
    }
    let _ = writeln!(out, "{:<12} {:>10}", "total", stats.total_samples());
    out
}

fn disciplines(rows: &[ComparisonRow]) -> Vec<String> {
    rows.first()
        .map(|r| r.accuracies.names().into_iter().map(str::to_string).collect())
        .unwrap_or_default()
}

fn opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_else(|| "n/a".into())
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let ds = disciplines(rows);
    let mut out = String::from("method,strategy");
    for d in &ds {
        let _ = write!(out, ",{d}");
    }
    out.push_str(",average,delta_m,param_pct,general\n");
    for r in rows {
        let _ = write!(out, "{},{}", r.label, r.strategy);
        for d in &ds {
            let _ = write!(out, ",{}", opt(r.accuracies.get(d), |a| format!("{a:.4}")));
        }
        let _ = writeln!(
            out,
            ",{:.4},{},{:.4},{}",
            r.average,
            opt(r.delta_m, format_delta_m),
            r.param_pct,
            opt(r.general_acc, |a| format!("{a:.4}"))
        );
    }
    out
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let ds = disciplines(rows);
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}", "method");
    for d in &ds {
        let short: String = d.chars().take(9).collect();
        let _ = write!(out, " {short:>9}");
    }
    let _ = writeln!(out, " {:>8} {:>8} {:>8} {:>8}", "avg", "dm", "param%", "general");
    for r in rows {
        let _ = write!(out, "{:<width$}", r.label);
        for d in &ds {
            let _ = write!(out, " {:>9}", opt(r.accuracies.get(d), |a| format!("{a:.3}")));
        }
        let _ = writeln!(
            out,
            " {:>8.3} {:>8} {:>8.3} {:>8}",
            r.average,
            opt(r.delta_m, format_delta_m),
            r.param_pct,
            opt(r.general_acc, |a| format!("{a:.3}"))
        );
    }
    out
}

/// Disciplines as rows, experts as columns.
pub fn routing_csv(m: &RoutingMatrix) -> String {
    let mut out = String::from("discipline");
    for e in 0..m.experts() {
        let _ = write!(out, ",expert_{e}");
    }
    out.push('\n');
    for (d, row) in m.disciplines.iter().zip(&m.rows) {
        out.push_str(d);
        for v in row {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}

pub fn accuracy_csv(accs: &Accuracies) -> String {
    let mut out = String::from("discipline,accuracy\n");
    for (d, a) in &accs.0 {
        let _ = writeln!(out, "{d},{a:.4}");
    }
    out
}
