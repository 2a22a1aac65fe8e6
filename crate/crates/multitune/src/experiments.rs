//! Orchestration shared by the CLI and the acceptance suite: pretraining,
//! train-and-evaluate runs, the balancing recipe and the directional-law
//! measurements.

use std::collections::BTreeMap;
use std::path::Path;

use multitune_core::adapters::{AdapterState, MoeVariant, Strategy};
use multitune_core::data::{upsample_diverse, Corpus, Provenance, SyntheticData};
use multitune_core::eval::{
    delta_m_against, eval_gen, evaluate, seed_variance, Accuracies, Baseline, EvalReport,
};
use multitune_core::model::BaseModel;
use multitune_core::train::{strategy_label, train, train_discipline_loras, RunRecord, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{sha256_hex, write_json, write_vocab};
use crate::report::{self, ComparisonRow};

/// Pretrains the base model on the copy corpus from the configured weights.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<(BaseModel, RunRecord)> {
    let init = BaseModel::init(&cfg.model)?;
    let out = train(&init, &cfg.pretrain_corpus(), &cfg.pretrain_config())?;
    Ok((out.model, out.record))
}

/// Short content hash of config, training settings and data provenance.
pub fn run_id(config_hash: &str, train: &TrainConfig, provenance: &Provenance) -> String {
    let text = format!(
        "{config_hash}|{}|{}",
        serde_json::to_string(train).expect("serializable"),
        serde_json::to_string(provenance).expect("serializable")
    );
    sha256_hex(text.as_bytes())[..16].to_string()
}

/// Trainable share of the base parameter count.
pub fn param_fraction(base: &BaseModel, adapters: Option<&AdapterState>) -> f64 {
    let total = base.store().total_params() as f64;
    match adapters {
        Some(a) => a.store().trainable_params() as f64 / total,
        None => 1.0,
    }
}

/// One trained and evaluated configuration.
#[derive(Clone, Debug)]
pub struct Run {
    pub label: String,
    pub record: RunRecord,
    pub report: EvalReport,
    pub model: BaseModel,
    pub adapters: Option<AdapterState>,
}

pub fn evaluate_run(
    cfg: &ExperimentConfig,
    label: &str,
    model: &BaseModel,
    adapters: Option<&AdapterState>,
    base: &BaseModel,
    data: &SyntheticData,
    run_id: &str,
    train: &TrainConfig,
) -> Result<EvalReport> {
    let accs = evaluate(model, adapters, &data.test)?;
    let mut report = EvalReport::new(
        run_id,
        &serde_json::to_string(train).expect("serializable"),
        accs,
        param_fraction(base, adapters),
    );
    if cfg.eval.general && !data.general_test.is_empty() {
        report.general_acc = Some(eval_gen(model, adapters, data.general_test.samples.iter())?);
    }
    report.metadata.insert("label".into(), label.to_string());
    report.metadata.insert("config_hash".into(), cfg.hash());
    Ok(report)
}

/// Trains `train` on `corpus` from `base` and evaluates on `data`'s test splits.
pub fn train_and_evaluate(
    cfg: &ExperimentConfig,
    label: &str,
    base: &BaseModel,
    corpus: &Corpus,
    data: &SyntheticData,
    train_cfg: &TrainConfig,
) -> Result<Run> {
    let out = train(base, corpus, train_cfg)?;
    let id = run_id(&cfg.hash(), train_cfg, &corpus.provenance);
    let report = evaluate_run(cfg, label, &out.model, out.adapters.as_ref(), base, data, &id, train_cfg)?;
    Ok(Run {
        label: label.to_string(),
        record: out.record,
        report,
        model: out.model,
        adapters: out.adapters,
    })
}

/// Diverse-upsamples the two smallest disciplines to the median discipline size.
pub fn upsample_to_parity(corpus: &Corpus, seed: u64) -> Result<Corpus> {
    let mut sizes: Vec<(usize, String)> = corpus
        .disciplines()
        .into_iter()
        .map(|d| (corpus.count(&d), d))
        .collect();
    sizes.sort();
    if sizes.len() < 3 {
        return Ok(corpus.clone());
    }
    let target = sizes[sizes.len() / 2].0;
    let mut out = corpus.clone();
    for (n, d) in sizes.iter().take(2) {
        if *n < target {
            out = upsample_diverse(&out, d, target, seed)?;
        }
    }
    Ok(out)
}

/// The two smallest and the largest discipline of `corpus`.
pub fn size_extremes(corpus: &Corpus) -> ([String; 2], String) {
    let mut sizes: Vec<(usize, String)> = corpus
        .disciplines()
        .into_iter()
        .map(|d| (corpus.count(&d), d))
        .collect();
    sizes.sort();
    let largest = sizes.last().map(|s| s.1.clone()).unwrap_or_default();
    let small = [
        sizes.first().map(|s| s.1.clone()).unwrap_or_default(),
        sizes.get(1).map(|s| s.1.clone()).unwrap_or_default(),
    ];
    (small, largest)
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::stage(name, e))
}

fn save_run(dir: &Path, slug: &str, run: &Run, config_hash: &str) -> Result<()> {
    let mut record = run.record.clone();
    let ckpt = dir.join(format!("{slug}.ckpt"));
    match &run.adapters {
        Some(a) => checkpoint::save_adapters(&ckpt, a, None, Some(config_hash))?,
        None => checkpoint::save_base(&ckpt, &run.model, Some(config_hash))?,
    }
    record.checkpoint = Some(format!("{slug}.ckpt"));
    write_json(&dir.join(format!("{slug}.record.json")), &record)?;
    write_json(&dir.join(format!("{slug}.report.json")), &run.report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecipeOutcome {
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
    pub reports: Vec<EvalReport>,
}

impl RecipeOutcome {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

pub const BASELINE_LABEL: &str = "Discipline-LoRA";

/// Balancing recipe: upsample the two smallest disciplines to parity, mix
/// general data, then train full tuning and a shared-A mixture on both the
/// original and the tuned corpus against a per-discipline LoRA baseline.
/// Artifacts go to `out` as each stage completes.
pub fn recipe(cfg: &ExperimentConfig, seed: u64, base: &BaseModel, out: Option<&Path>) -> Result<RecipeOutcome> {
    let hash = cfg.hash();
    let data = stage("data", cfg.synthetic(seed))?;
    let tuned = stage(
        "data",
        upsample_to_parity(&data.train, seed).and_then(|c| {
            Ok(multitune_core::data::mix_general(&c, &data.general, cfg.recipe.mix_percent, seed)?)
        }),
    )?;
    if let Some(dir) = out {
        stage("data", write_json(&dir.join("config.json"), cfg))?;
        stage("data", write_vocab(&dir.join("vocab.json"), &data.vocab))?;
        stage(
            "data",
            crate::io::write_corpus(&dir.join("train_tuned.jsonl"), &tuned, &data.vocab, Some(&hash), &[]),
        )?;
    }

    let disciplines = data.train.disciplines();
    let lora_cfg = cfg.train_config(Strategy::Lora, seed);
    let experts = stage(
        "baseline",
        train_discipline_loras(base, &data.train, &disciplines, &lora_cfg).map_err(Error::from),
    )?;
    let mut base_accs = Vec::with_capacity(experts.len());
    let mut base_params = 0;
    for (d, state, _) in &experts {
        let own = data.test.filter(d);
        let acc = stage("baseline", evaluate(base, Some(state), &own).map_err(Error::from))?;
        base_accs.push((d.clone(), acc.get(d).unwrap_or(0.0)));
        base_params += state.store().trainable_params();
        if let Some(dir) = out {
            stage(
                "baseline",
                checkpoint::save_adapters(&dir.join(format!("lora_{d}.ckpt")), state, Some(d), Some(&hash)),
            )?;
        }
    }
    let baseline = Baseline {
        name: BASELINE_LABEL.to_string(),
        accuracies: Accuracies(base_accs),
    };
    let base_total = base.store().total_params() as f64;

    let moe = Strategy::Moe(cfg.recipe.variant);
    let plan: [(&str, &str, Strategy, &Corpus); 4] = [
        ("ft_ori", "ori.", Strategy::Full, &data.train),
        ("ft_tuned", "tuned", Strategy::Full, &tuned),
        ("moe_ori", "ori.", moe, &data.train),
        ("moe_tuned", "tuned", moe, &tuned),
    ];
    let mut rows = vec![ComparisonRow {
        label: BASELINE_LABEL.to_string(),
        strategy: "lora".into(),
        accuracies: baseline.accuracies.clone(),
        average: baseline.accuracies.mean(),
        delta_m: Some(0.0),
        param_pct: 100.0 * base_params as f64 / base_total,
        general_acc: None,
    }];
    let mut reports = Vec::new();
    for (slug, suffix, strategy, corpus) in plan {
        let label = format!("{} ({suffix})", strategy_label(strategy));
        let tc = cfg.train_config(strategy, seed);
        let mut run = stage(slug, train_and_evaluate(cfg, &label, base, corpus, &data, &tc))?;
        let dm = match delta_m_against(&run.report.per_discipline, &baseline) {
            Ok(d) => Some(d),
            Err(multitune_core::Error::ZeroBaseline(_)) => None,
            Err(e) => return Err(Error::stage(slug, e.into())),
        };
        run.report.delta_m = dm.clone();
        if let Some(dir) = out {
            stage(slug, save_run(dir, slug, &run, &hash))?;
        }
        rows.push(ComparisonRow {
            label: label.clone(),
            strategy: strategy.to_string(),
            accuracies: run.report.per_discipline.clone(),
            average: run.report.average,
            delta_m: dm.map(|d| d.value),
            param_pct: 100.0 * run.report.param_fraction,
            general_acc: run.report.general_acc,
        });
        reports.push(run.report);
    }
    let outcome = RecipeOutcome { seed, rows, reports };
    if let Some(dir) = out {
        stage("report", write_json(&dir.join("comparison.json"), &outcome.rows))?;
        stage("report", crate::io::write_file(&dir.join("comparison.csv"), report::comparison_csv(&outcome.rows).as_bytes()))?;
        stage("report", crate::io::write_file(&dir.join("comparison.txt"), report::comparison_table(&outcome.rows).as_bytes()))?;
    }
    Ok(outcome)
}

/// The runs behind the directional laws for one seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LawRuns {
    pub seed: u64,
    pub smallest: [String; 2],
    pub largest: String,
    pub imbalanced: EvalReport,
    pub upsampled: EvalReport,
    pub mixed: EvalReport,
    pub moe_vanilla: EvalReport,
    pub moe_shared_a: EvalReport,
}

pub fn law_runs(cfg: &ExperimentConfig, base: &BaseModel, seed: u64) -> Result<LawRuns> {
    let data = cfg.synthetic(seed)?;
    let lora = cfg.train_config(Strategy::Lora, seed);
    let (smallest, largest) = size_extremes(&data.train);
    let run = |label: &str, corpus: &Corpus, tc: &TrainConfig| -> Result<EvalReport> {
        Ok(train_and_evaluate(cfg, label, base, corpus, &data, tc)?.report)
    };
    let imbalanced = run("lora", &data.train, &lora)?;
    let upsampled = run("lora_upsampled", &upsample_to_parity(&data.train, seed)?, &lora)?;
    let mixed_corpus = multitune_core::data::mix_general(&data.train, &data.general, cfg.recipe.mix_percent, seed)?;
    let mixed = run("lora_mixed", &mixed_corpus, &lora)?;
    let moe_vanilla = run(
        "moe_vanilla",
        &data.train,
        &cfg.train_config(Strategy::Moe(MoeVariant::Vanilla), seed),
    )?;
    let moe_shared_a = run(
        "moe_shared_a",
        &data.train,
        &cfg.train_config(Strategy::Moe(MoeVariant::SharedA), seed),
    )?;
    Ok(LawRuns {
        seed,
        smallest,
        largest,
        imbalanced,
        upsampled,
        mixed,
        moe_vanilla,
        moe_shared_a,
    })
}

/// Per-seed (or per-resample) outcomes of each directional law.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LawVerdicts {
    /// Leave-one-seed-out resamples where both small disciplines vary more
    /// across seeds than the largest.
    pub balance: Vec<bool>,
    pub upsampling: Vec<bool>,
    pub mixing: Vec<bool>,
    pub shared_a: Vec<bool>,
    pub detail: BTreeMap<String, String>,
}

fn std_of(reports: &[&EvalReport], d: &str) -> Result<f64> {
    let accs: Vec<&Accuracies> = reports.iter().map(|r| &r.per_discipline).collect();
    let spread = seed_variance(&accs)?;
    spread
        .into_iter()
        .find(|s| s.discipline == d)
        .map(|s| s.std)
        .ok_or_else(|| Error::Usage(format!("no discipline `{d}` in reports")))
}

pub fn judge_laws(runs: &[LawRuns]) -> Result<LawVerdicts> {
    let mut v = LawVerdicts::default();
    let Some(first) = runs.first() else {
        return Ok(v);
    };
    let (small, large) = (&first.smallest, &first.largest);
    for skip in 0..runs.len() {
        let kept: Vec<&EvalReport> = runs
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != skip)
            .map(|(_, r)| &r.imbalanced)
            .collect();
        let s0 = std_of(&kept, &small[0])?;
        let s1 = std_of(&kept, &small[1])?;
        let sl = std_of(&kept, large)?;
        v.detail.insert(
            format!("balance_without_seed_{}", runs[skip].seed),
            format!("std {}={s0:.3} {}={s1:.3} {large}={sl:.3}", small[0], small[1]),
        );
        v.balance.push(s0 > sl && s1 > sl);
    }
    for r in runs {
        let g = |e: &EvalReport| e.general_acc.unwrap_or(0.0);
        v.upsampling.push(r.upsampled.average > r.imbalanced.average);
        v.mixing.push(g(&r.mixed) > g(&r.imbalanced));
        v.shared_a.push(r.moe_shared_a.average >= r.moe_vanilla.average);
        v.detail.insert(
            format!("seed_{}", r.seed),
            format!(
                "avg imbalanced={:.3} upsampled={:.3} | general 0%={:.3} mixed={:.3} | moe vanilla={:.3} shared_a={:.3}",
                r.imbalanced.average,
                r.upsampled.average,
                g(&r.imbalanced),
                g(&r.mixed),
                r.moe_vanilla.average,
                r.moe_shared_a.average
            ),
        );
    }
    Ok(v)
}
