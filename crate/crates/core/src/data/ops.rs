use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{label_hash, stream_rng, unique_tokens, Corpus};
use crate::error::{Error, Result};

/// Per-discipline sampling without replacement keeping `round(fraction · n)`
/// samples of each discipline, in original order. A shared seed yields nested
/// subsets across fractions.
pub fn subset(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Corpus> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidFraction(fraction));
    }
    let mut keep = alloc::vec![false; corpus.len()];
    for d in corpus.disciplines() {
        let mut idx: Vec<usize> = (0..corpus.len())
            .filter(|&i| corpus.samples[i].discipline == d)
            .collect();
        let k = libm::round(fraction * idx.len() as f64) as usize;
        if k == 0 {
            return Err(Error::EmptyDiscipline(d));
        }
        idx.shuffle(&mut stream_rng(seed, label_hash(&d)));
        for &i in &idx[..k] {
            keep[i] = true;
        }
    }
    let samples = corpus
        .samples
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(Corpus {
        samples,
        provenance: corpus.provenance.clone(),
    }
    .logged(format!("subset fraction={fraction} seed={seed}")))
}

fn discipline_indices(corpus: &Corpus, discipline: &str) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus.samples[i].discipline == discipline)
        .collect();
    if idx.is_empty() {
        return Err(Error::UnknownDiscipline(discipline.to_string()));
    }
    Ok(idx)
}

fn upsample_from(
    corpus: &Corpus,
    discipline: &str,
    current: usize,
    pool: &[usize],
    target: usize,
    seed: u64,
    label: &str,
) -> Result<Corpus> {
    if target < current {
        return Err(Error::TargetTooSmall {
            discipline: discipline.to_string(),
            target,
            current,
        });
    }
    let mut rng = stream_rng(seed, label_hash(discipline) ^ 0x5550);
    let mut out = corpus.clone();
    for _ in current..target {
        let pick = pool[rng.gen_range(0..pool.len())];
        out.samples.push(corpus.samples[pick].clone());
    }
    Ok(out.logged(format!(
        "upsample strategy={label} discipline={discipline} target={target} seed={seed}"
    )))
}

/// Uniform duplication over every sample of `discipline` until it holds
/// exactly `target` samples. Duplicates are appended and keep their ids.
pub fn upsample_diverse(corpus: &Corpus, discipline: &str, target: usize, seed: u64) -> Result<Corpus> {
    let idx = discipline_indices(corpus, discipline)?;
    upsample_from(corpus, discipline, idx.len(), &idx, target, seed, "diverse")
}

/// Indices of samples of `discipline` containing at least one token unique
/// to it.
pub fn eligible_for_unique(corpus: &Corpus, discipline: &str) -> Result<Vec<usize>> {
    let idx = discipline_indices(corpus, discipline)?;
    let unique = unique_tokens(corpus);
    let set = &unique[discipline];
    Ok(idx
        .into_iter()
        .filter(|&i| corpus.samples[i].tokens().any(|t| set.contains(&t)))
        .collect())
}

/// Like [`upsample_diverse`] but duplicates only samples carrying a
/// discipline-unique token.
pub fn upsample_unique(corpus: &Corpus, discipline: &str, target: usize, seed: u64) -> Result<Corpus> {
    let current = discipline_indices(corpus, discipline)?.len();
    let pool = eligible_for_unique(corpus, discipline)?;
    if pool.is_empty() {
        return Err(Error::NoEligibleSamples(discipline.to_string()));
    }
    upsample_from(corpus, discipline, current, &pool, target, seed, "unique")
}

/// Appends `round(percent/100 · |general|)` general samples drawn without
/// replacement, then shuffles the result. Zero percent returns the input.
pub fn mix_general(corpus: &Corpus, general: &Corpus, percent: u32, seed: u64) -> Result<Corpus> {
    if percent > 100 {
        return Err(Error::InvalidPercent(percent));
    }
    let m = libm::round(percent as f64 / 100.0 * general.len() as f64) as usize;
    if m == 0 {
        return Ok(corpus.clone());
    }
    let mut rng = stream_rng(seed, label_hash("mix_general"));
    let mut pick: Vec<usize> = (0..general.len()).collect();
    pick.shuffle(&mut rng);
    pick.truncate(m);
    pick.sort_unstable();
    let mut out = corpus.clone();
    out.samples.extend(pick.iter().map(|&i| general.samples[i].clone()));
    out.samples.shuffle(&mut rng);
    Ok(out.logged(format!("mix_general percent={percent} appended={m} seed={seed}")))
}
