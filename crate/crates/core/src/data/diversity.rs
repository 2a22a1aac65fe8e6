use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use super::Corpus;
use crate::error::{Error, Result};

pub const DEFAULT_NGRAMS: [usize; 4] = [1, 2, 3, 4];

/// Distinct over total `n`-grams of prompt+answer, n-grams never spanning
/// two samples.
pub fn ngram_ratio(corpus: &Corpus, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::NoNgrams);
    }
    let seqs: Vec<Vec<u32>> = corpus.samples.iter().map(|s| s.tokens().collect()).collect();
    let mut distinct: BTreeSet<&[u32]> = BTreeSet::new();
    let mut total = 0usize;
    for s in &seqs {
        if s.len() < n {
            continue;
        }
        for w in s.windows(n) {
            distinct.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::NoNgrams);
    }
    Ok(distinct.len() as f64 / total as f64)
}

/// Mean of [`ngram_ratio`] over `ns`.
pub fn ngram_diversity(corpus: &Corpus, ns: &[usize]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if ns.is_empty() {
        return Err(Error::NoNgrams);
    }
    let mut sum = 0.0;
    for &n in ns {
        sum += ngram_ratio(corpus, n)?;
    }
    Ok(sum / ns.len() as f64)
}
