//! Accuracy in both scoring modes, Δm and cross-seed spread.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::adapters::{AdapterState, RoutingMatrix};
use crate::data::{label_hash, Corpus, Sample, ANS, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::BaseModel;

fn context(sample: &Sample) -> Vec<u32> {
    let mut c = Vec::with_capacity(sample.prompt.len() + 1);
    c.push(BOS);
    c.extend_from_slice(&sample.prompt);
    c
}

/// Whether the model picks the gold option.
pub fn mc_correct(model: &BaseModel, adapters: Option<&AdapterState>, sample: &Sample) -> Result<bool> {
    let opts = sample
        .options
        .as_ref()
        .ok_or_else(|| Error::MissingOptions(sample.id.clone()))?;
    let pick = model.score_options(adapters, &context(sample), opts)?;
    Ok(opts[pick] == sample.answer)
}

/// Tokens after the first answer delimiter, or `None` without one.
pub fn extract_answer(tokens: &[u32]) -> Option<&[u32]> {
    let at = tokens.iter().position(|&t| t == ANS)?;
    Some(&tokens[at + 1..])
}

/// Greedy generation judged by exact match of the span after the delimiter.
pub fn gen_correct(model: &BaseModel, adapters: Option<&AdapterState>, sample: &Sample) -> Result<bool> {
    let reference = extract_answer(&sample.answer).unwrap_or(&sample.answer);
    let ctx = context(sample);
    let budget = sample.answer.len() + 2;
    let out = model.greedy_decode(adapters, &ctx, budget, EOS)?;
    Ok(extract_answer(&out) == Some(reference))
}

fn accuracy<'a, I, F>(samples: I, mut judge: F) -> Result<f64>
where
    I: IntoIterator<Item = &'a Sample>,
    F: FnMut(&Sample) -> Result<bool>,
{
    let (mut hit, mut n) = (0usize, 0usize);
    for s in samples {
        n += 1;
        if judge(s)? {
            hit += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(hit as f64 / n as f64)
}

/// Multiple-choice accuracy by highest option log-likelihood.
pub fn eval_mc<'a, I>(model: &BaseModel, adapters: Option<&AdapterState>, samples: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Sample>,
{
    accuracy(samples, |s| mc_correct(model, adapters, s))
}

/// Exact-match accuracy of greedy generations.
pub fn eval_gen<'a, I>(model: &BaseModel, adapters: Option<&AdapterState>, samples: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Sample>,
{
    accuracy(samples, |s| gen_correct(model, adapters, s))
}

/// Scores each sample in the mode its format implies.
pub fn sample_correct(model: &BaseModel, adapters: Option<&AdapterState>, sample: &Sample) -> Result<bool> {
    if sample.is_multiple_choice() {
        mc_correct(model, adapters, sample)
    } else {
        gen_correct(model, adapters, sample)
    }
}

/// Per-discipline accuracy over `test`, in first-seen discipline order.
pub fn evaluate(model: &BaseModel, adapters: Option<&AdapterState>, test: &Corpus) -> Result<Accuracies> {
    let mut out = Vec::new();
    for d in test.disciplines() {
        let acc = accuracy(test.of(&d), |s| sample_correct(model, adapters, s))?;
        out.push((d, acc));
    }
    Ok(Accuracies(out))
}

/// `(100/T) · Σ (acc_t − base_t) / base_t`.
pub fn delta_m(accs: &[f64], baseline: &[f64]) -> Result<f64> {
    if accs.len() != baseline.len() {
        return Err(Error::LengthMismatch(accs.len(), baseline.len()));
    }
    if accs.is_empty() {
        return Err(Error::LengthMismatch(0, 0));
    }
    if let Some(i) = baseline.iter().position(|b| *b == 0.0) {
        return Err(Error::ZeroBaseline(i));
    }
    let sum: f64 = accs.iter().zip(baseline).map(|(a, b)| (a - b) / b).sum();
    Ok(100.0 * sum / accs.len() as f64)
}

/// Formats Δm the way the comparison tables print it, e.g. `+7.376`.
pub fn format_delta_m(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    if v >= 0.0 {
        format!("+{v:.3}")
    } else {
        format!("{v:.3}")
    }
}

/// Ordered `(discipline, accuracy)` pairs; serialized as a JSON object that
/// keeps this order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Accuracies(pub Vec<(String, f64)>);

impl Accuracies {
    pub fn get(&self, d: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == d).map(|(_, a)| *a)
    }

    pub fn names(&self) -> Vec<&str> {
        self.0.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.iter().map(|(_, a)| *a).collect()
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().map(|(_, a)| a).sum::<f64>() / self.0.len() as f64
    }

    /// Values reordered to `order`; missing names are an error.
    pub fn aligned(&self, order: &[&str]) -> Result<Vec<f64>> {
        if order.len() != self.0.len() {
            return Err(Error::DisciplineMismatch);
        }
        order
            .iter()
            .map(|d| self.get(d).ok_or(Error::DisciplineMismatch))
            .collect()
    }

    pub fn without(&self, d: &str) -> Accuracies {
        Accuracies(self.0.iter().filter(|(n, _)| n != d).cloned().collect())
    }
}

impl Serialize for Accuracies {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for Accuracies {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Accuracies;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of discipline to accuracy")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> core::result::Result<Accuracies, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, f64>()? {
                    out.push((k, v));
                }
                Ok(Accuracies(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// A named, immutable accuracy vector against which Δm is reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub name: String,
    pub accuracies: Accuracies,
}

impl Baseline {
    /// Stable content hash, hex.
    pub fn hash(&self) -> String {
        let mut text = self.name.clone();
        for (d, a) in &self.accuracies.0 {
            text.push_str(&format!(";{d}={:016x}", a.to_bits()));
        }
        format!("{:016x}", label_hash(&text))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineRegistry {
    entries: BTreeMap<String, Baseline>,
}

impl BaselineRegistry {
    /// Registers a baseline; re-registering the same name with different
    /// values is refused.
    pub fn register(&mut self, baseline: Baseline) -> Result<String> {
        if let Some(prev) = self.entries.get(&baseline.name) {
            if *prev != baseline {
                return Err(Error::InvalidDataSpec(format!(
                    "baseline `{}` is already registered with different values",
                    baseline.name
                )));
            }
        }
        let h = baseline.hash();
        self.entries.insert(baseline.name.clone(), baseline);
        Ok(h)
    }

    pub fn get(&self, name: &str) -> Option<&Baseline> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaM {
    pub baseline: String,
    pub hash: String,
    pub value: f64,
}

/// Δm of `accs` against a named baseline, aligned by discipline name.
pub fn delta_m_against(accs: &Accuracies, baseline: &Baseline) -> Result<DeltaM> {
    let order = baseline.accuracies.names();
    let a = accs.aligned(&order)?;
    Ok(DeltaM {
        baseline: baseline.name.clone(),
        hash: baseline.hash(),
        value: delta_m(&a, &baseline.accuracies.values())?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    /// Resolved configuration of the run, as a JSON document.
    pub config: String,
    pub per_discipline: Accuracies,
    pub average: f64,
    pub delta_m: Option<DeltaM>,
    pub param_fraction: f64,
    pub general_acc: Option<f64>,
    pub routing: Option<RoutingMatrix>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn new(run_id: &str, config: &str, per_discipline: Accuracies, param_fraction: f64) -> Self {
        Self {
            run_id: run_id.to_string(),
            config: config.to_string(),
            average: per_discipline.mean(),
            per_discipline,
            delta_m: None,
            param_fraction,
            general_acc: None,
            routing: None,
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub discipline: String,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

/// Per-discipline mean and sample standard deviation across runs.
pub fn seed_variance(runs: &[&Accuracies]) -> Result<Vec<Spread>> {
    if runs.len() < 2 {
        return Err(Error::TooFewReports(runs.len()));
    }
    let order = runs[0].names();
    let rows: Vec<Vec<f64>> = runs.iter().map(|r| r.aligned(&order)).collect::<Result<_>>()?;
    let n = runs.len() as f64;
    Ok(order
        .iter()
        .enumerate()
        .map(|(j, d)| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let ss = rows.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<f64>();
            Spread {
                discipline: d.to_string(),
                mean,
                std: libm::sqrt(ss / (n - 1.0)),
            }
        })
        .collect())
}

/// [`seed_variance`] over full reports.
pub fn report_variance(reports: &[EvalReport]) -> Result<Vec<Spread>> {
    let runs: Vec<&Accuracies> = reports.iter().map(|r| &r.per_discipline).collect();
    seed_variance(&runs)
}
