//! JSONL corpora, vocabulary files and provenance sidecars.
//!
//! One sample per line. Token sequences are written as space-separated token
//! names; any field the reader does not recognise is carried through verbatim.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use multitune_core::data::{Corpus, Provenance, Sample, Vocab};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const KNOWN: [&str; 5] = ["id", "discipline", "prompt", "answer", "options"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Where an output file came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub seed: u64,
    pub log: Vec<String>,
    #[serde(default)]
    pub config_hash: Option<String>,
    /// Input path to SHA-256.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    pub sha256: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".prov.json");
    PathBuf::from(s)
}

fn names(vocab: &Vocab, ids: &[u32]) -> String {
    vocab.decode(ids)
}

fn sample_to_json(vocab: &Vocab, s: &Sample) -> Result<Map<String, Value>> {
    let mut m = Map::new();
    m.insert("id".into(), Value::String(s.id.clone()));
    m.insert("discipline".into(), Value::String(s.discipline.clone()));
    m.insert("prompt".into(), Value::String(names(vocab, &s.prompt)));
    m.insert("answer".into(), Value::String(names(vocab, &s.answer)));
    if let Some(opts) = &s.options {
        let list = opts.iter().map(|o| Value::String(names(vocab, o))).collect();
        m.insert("options".into(), Value::Array(list));
    }
    for (k, raw) in &s.extra {
        let v: Value = serde_json::from_str(raw).map_err(|e| Error::Format {
            path: PathBuf::from(&s.id),
            message: format!("extra field `{k}` is not valid JSON: {e}"),
        })?;
        m.insert(k.clone(), v);
    }
    Ok(m)
}

/// Serialises `corpus` as JSONL text. Every token id must be named by `vocab`.
pub fn to_jsonl(corpus: &Corpus, vocab: &Vocab) -> Result<String> {
    if let Some(max) = corpus.max_token() {
        if max as usize >= vocab.len() {
            return Err(Error::Usage(format!(
                "token id {max} has no name in a vocabulary of {}",
                vocab.len()
            )));
        }
    }
    let mut out = String::new();
    for s in &corpus.samples {
        let m = sample_to_json(vocab, s)?;
        out.push_str(&serde_json::to_string(&m).expect("map serializes"));
        out.push('\n');
    }
    Ok(out)
}

/// Parses JSONL text. Unknown token names are added to `vocab`.
pub fn parse_jsonl(text: &str, vocab: &mut Vocab, origin: &Path) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(err("expected a JSON object".into()));
        };
        let field = |name: &str| -> Result<&str> {
            match obj.get(name) {
                Some(Value::String(s)) => Ok(s),
                Some(_) => Err(err(format!("field `{name}` must be a string"))),
                None => Err(err(format!("missing field `{name}`"))),
            }
        };
        let mut tokens = |text: &str| -> Vec<u32> { text.split_whitespace().map(|w| vocab.intern(w)).collect() };
        let id = field("id")?.to_string();
        let discipline = field("discipline")?.to_string();
        let prompt = tokens(field("prompt")?);
        let answer = tokens(field("answer")?);
        let options = match obj.get("options") {
            None | Some(Value::Null) => None,
            Some(Value::Array(list)) => {
                let mut opts = Vec::with_capacity(list.len());
                for o in list {
                    match o {
                        Value::String(s) => opts.push(tokens(s)),
                        _ => return Err(err("options must be strings".into())),
                    }
                }
                Some(opts)
            }
            Some(_) => return Err(err("field `options` must be an array".into())),
        };
        let extra = obj
            .iter()
            .filter(|(k, _)| !KNOWN.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.to_string()))
            .collect();
        let sample = Sample {
            id,
            discipline,
            prompt,
            answer,
            options,
            extra,
        };
        sample.validate().map_err(|e| err(e.to_string()))?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes `path` and its provenance sidecar.
pub fn write_corpus(
    path: &Path,
    corpus: &Corpus,
    vocab: &Vocab,
    config_hash: Option<&str>,
    inputs: &[&Path],
) -> Result<()> {
    let text = to_jsonl(corpus, vocab)?;
    write_file(path, text.as_bytes())?;
    let mut hashes = BTreeMap::new();
    for p in inputs {
        hashes.insert(p.display().to_string(), file_sha256(p)?);
    }
    let sidecar = Sidecar {
        seed: corpus.provenance.seed,
        log: corpus.provenance.log.clone(),
        config_hash: config_hash.map(str::to_string),
        inputs: hashes,
        sha256: sha256_hex(text.as_bytes()),
    };
    write_json(&sidecar_path(path), &sidecar)
}

/// Reads a corpus and, when present, the provenance recorded beside it.
pub fn read_corpus(path: &Path, vocab: &mut Vocab) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let samples = parse_jsonl(&text, vocab, path)?;
    let side = sidecar_path(path);
    let provenance = if side.exists() {
        let s: Sidecar = read_json(&side)?;
        Provenance {
            seed: s.seed,
            log: s.log,
        }
    } else {
        Provenance::default()
    };
    let mut corpus = Corpus {
        samples,
        provenance,
    };
    corpus.provenance.log.push(format!("read {}", path.display()));
    Ok(corpus)
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    write_json(path, &vocab.names())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let names: Vec<String> = read_json(path)?;
    Vocab::from_names(&names).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// `vocab.json` next to `corpus`, or the control tokens alone.
pub fn vocab_for(corpus: &Path) -> Result<Vocab> {
    let candidate = corpus.with_file_name("vocab.json");
    if candidate.exists() {
        read_vocab(&candidate)
    } else {
        Ok(Vocab::new())
    }
}
