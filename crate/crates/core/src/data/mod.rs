//! Discipline-tagged corpora: synthetic generation, statistics, balancing
//! transforms and the n-gram diversity metric.

mod diversity;
mod ops;
mod stats;
mod synth;

pub use diversity::{ngram_diversity, ngram_ratio, DEFAULT_NGRAMS};
pub use ops::{eligible_for_unique, mix_general, subset, upsample_diverse, upsample_unique};
pub use stats::{corpus_stats, unique_tokens, CorpusStats, DisciplineStats, StatsBuilder, UNIQUE_LIMIT};
pub use synth::{
    default_disciplines, default_general, generate_pretrain, generate_synthetic, solve, EvalFormat,
    GeneralSpec, SyntheticData, TaskFamily, DisciplineSpec, CONTENT_TOKENS, GENERAL_DISCIPLINE,
    TABLE1_SHARES,
};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Answer delimiter of generative samples.
pub const ANS: u32 = 3;

const CONTROL_NAMES: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<ans>"];

/// Independent ChaCha stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stable 64-bit FNV-1a of a label, used to derive per-discipline streams.
pub fn label_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Token name table. The four control tokens always occupy ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            names: Vec::new(),
            index: BTreeMap::new(),
        };
        for n in CONTROL_NAMES {
            v.intern(n);
        }
        v
    }

    /// Rebuilds a vocabulary from its name list.
    pub fn from_names(names: &[String]) -> Result<Self> {
        for (i, n) in CONTROL_NAMES.iter().enumerate() {
            if names.get(i).map(String::as_str) != Some(*n) {
                return Err(Error::InvalidDataSpec(format!(
                    "vocabulary must start with the control tokens, found {:?} at {i}",
                    names.get(i)
                )));
            }
        }
        let mut v = Self {
            names: Vec::new(),
            index: BTreeMap::new(),
        };
        for n in names {
            if v.index.contains_key(n) {
                return Err(Error::MarkerCollision(n.clone()));
            }
            v.intern(n);
        }
        Ok(v)
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn encode(&self, text: &str) -> Option<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for (i, &t) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match self.name(t) {
                Some(n) => out.push_str(n),
                None => out.push_str(&format!("<unk{t}>")),
            }
        }
        out
    }
}

/// One discipline-tagged record. `extra` carries unrecognised fields from
/// the file it was read from, as raw JSON text, so they survive a round trip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub discipline: String,
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    #[serde(default)]
    pub options: Option<Vec<Vec<u32>>>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidSample {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.prompt.is_empty() {
            return Err(bad("empty prompt"));
        }
        if self.answer.is_empty() {
            return Err(bad("empty answer"));
        }
        if let Some(opts) = &self.options {
            let hits = opts.iter().filter(|o| **o == self.answer).count();
            if hits != 1 {
                return Err(bad("answer must match exactly one option"));
            }
        }
        Ok(())
    }

    pub fn is_multiple_choice(&self) -> bool {
        self.options.is_some()
    }

    /// Index of the gold option.
    pub fn gold_index(&self) -> Option<usize> {
        self.options.as_ref()?.iter().position(|o| *o == self.answer)
    }

    /// Prompt followed by answer.
    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.prompt.iter().chain(&self.answer).copied()
    }

    pub fn word_count(&self) -> usize {
        self.prompt.len() + self.answer.len()
    }
}

/// Generation seed plus every transform applied since.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub log: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn new(samples: Vec<Sample>, seed: u64) -> Self {
        Self {
            samples,
            provenance: Provenance {
                seed,
                log: Vec::new(),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Discipline labels in first-seen order.
    pub fn disciplines(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if !out.iter().any(|d| *d == s.discipline) {
                out.push(s.discipline.clone());
            }
        }
        out
    }

    pub fn count(&self, discipline: &str) -> usize {
        self.samples.iter().filter(|s| s.discipline == discipline).count()
    }

    pub fn of(&self, discipline: &str) -> impl Iterator<Item = &Sample> + '_ {
        let d = discipline.to_string();
        self.samples.iter().filter(move |s| s.discipline == d)
    }

    /// Samples of one discipline as a corpus of their own.
    pub fn filter(&self, discipline: &str) -> Corpus {
        let mut c = Corpus {
            samples: self.of(discipline).cloned().collect(),
            provenance: self.provenance.clone(),
        };
        c.provenance.log.push(format!("filter discipline={discipline}"));
        c
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            s.validate()?;
        }
        Ok(())
    }

    /// First duplicated id, if any.
    pub fn duplicate_id(&self) -> Option<&str> {
        let mut seen = alloc::collections::BTreeSet::new();
        self.samples
            .iter()
            .find(|s| !seen.insert(s.id.as_str()))
            .map(|s| s.id.as_str())
    }

    pub fn max_token(&self) -> Option<u32> {
        self.samples
            .iter()
            .flat_map(|s| {
                s.tokens()
                    .chain(s.options.iter().flatten().flatten().copied())
            })
            .max()
    }

    pub(crate) fn logged(mut self, entry: String) -> Self {
        self.provenance.log.push(entry);
        self
    }
}
