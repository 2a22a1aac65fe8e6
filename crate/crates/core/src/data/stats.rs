use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Corpus, Sample};
use crate::error::{Error, Result};

/// A token is unique to a discipline when it occurs fewer than this many
/// times in all other disciplines combined.
pub const UNIQUE_LIMIT: u64 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisciplineStats {
    pub discipline: String,
    pub samples: usize,
    pub share_pct: f64,
    pub avg_words: f64,
    pub unique_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// In first-seen discipline order.
    pub rows: Vec<DisciplineStats>,
}

impl CorpusStats {
    pub fn total_samples(&self) -> usize {
        self.rows.iter().map(|r| r.samples).sum()
    }

    pub fn row(&self, discipline: &str) -> Option<&DisciplineStats> {
        self.rows.iter().find(|r| r.discipline == discipline)
    }
}

/// Streaming accumulator behind [`corpus_stats`]; lets very large corpora be
/// measured without materialising them.
#[derive(Clone, Debug, Default)]
pub struct StatsBuilder {
    order: Vec<String>,
    index: BTreeMap<String, usize>,
    samples: Vec<usize>,
    words: Vec<u64>,
    /// `[discipline][token]` occurrence counts
    tokens: Vec<Vec<u64>>,
}

impl StatsBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn slot(&mut self, discipline: &str) -> usize {
        if let Some(&i) = self.index.get(discipline) {
            return i;
        }
        let i = self.order.len();
        self.order.push(discipline.to_string());
        self.index.insert(discipline.to_string(), i);
        self.samples.push(0);
        self.words.push(0);
        self.tokens.push(Vec::new());
        i
    }

    pub fn add(&mut self, sample: &Sample) {
        let d = self.slot(&sample.discipline);
        self.samples[d] += 1;
        self.words[d] += sample.word_count() as u64;
        let counts = &mut self.tokens[d];
        for t in sample.tokens() {
            let t = t as usize;
            if t >= counts.len() {
                counts.resize(t + 1, 0);
            }
            counts[t] += 1;
        }
    }

    /// Per discipline, the tokens satisfying the uniqueness rule.
    fn unique_sets(&self) -> Vec<BTreeSet<u32>> {
        let width = self.tokens.iter().map(Vec::len).max().unwrap_or(0);
        let mut totals = vec![0u64; width];
        for counts in &self.tokens {
            for (t, c) in counts.iter().enumerate() {
                totals[t] += c;
            }
        }
        self.tokens
            .iter()
            .map(|counts| {
                counts
                    .iter()
                    .enumerate()
                    .filter(|(t, &c)| c > 0 && totals[*t] - c < UNIQUE_LIMIT)
                    .map(|(t, _)| t as u32)
                    .collect()
            })
            .collect()
    }

    pub fn finish(&self) -> Result<CorpusStats> {
        let total: usize = self.samples.iter().sum();
        if total == 0 {
            return Err(Error::EmptyCorpus);
        }
        let unique = self.unique_sets();
        let rows = self
            .order
            .iter()
            .enumerate()
            .map(|(d, name)| DisciplineStats {
                discipline: name.clone(),
                samples: self.samples[d],
                share_pct: 100.0 * self.samples[d] as f64 / total as f64,
                avg_words: self.words[d] as f64 / self.samples[d] as f64,
                unique_tokens: unique[d].len(),
            })
            .collect();
        Ok(CorpusStats { rows })
    }
}

pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats> {
    let mut b = StatsBuilder::new();
    for s in &corpus.samples {
        b.add(s);
    }
    b.finish()
}

/// Discipline-unique tokens per discipline.
pub fn unique_tokens(corpus: &Corpus) -> BTreeMap<String, BTreeSet<u32>> {
    let mut b = StatsBuilder::new();
    for s in &corpus.samples {
        b.add(s);
    }
    b.order.iter().cloned().zip(b.unique_sets()).collect()
}
