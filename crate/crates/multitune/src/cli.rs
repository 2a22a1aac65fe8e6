//! Command-line entry point. Exit codes: 0 success, 2 configuration or
//! validation error, 3 missing dependency or data error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use multitune_core::adapters::{routing_probe, MoeVariant, Strategy};
use multitune_core::data::{
    corpus_stats, ngram_diversity, subset, upsample_diverse, upsample_unique, Corpus, SyntheticData,
    Vocab, BOS, DEFAULT_NGRAMS,
};
use multitune_core::eval::EvalReport;
use multitune_core::model::BaseModel;
use multitune_core::slot::{Role, Slot};
use multitune_core::train::{train_comp_gate, train_discipline_loras};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiments::{self, evaluate_run, pretrain, run_id, train_and_evaluate};
use crate::io::{self, read_corpus, read_json, vocab_for, write_corpus, write_file, write_json, Sidecar};
use crate::report::{self, ComparisonRow};
use crate::sweep::{run_sweep, sweep_csv, Axis};

#[derive(Parser, Debug)]
#[command(name = "multitune", version, about = "Desk-scale multi-discipline fine-tuning lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum UpsampleStrategy {
    Diverse,
    Unique,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpora as JSONL.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-discipline statistics of a JSONL corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Grow one discipline to a target size.
    Upsample {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        discipline: String,
        #[arg(long)]
        target: usize,
        #[arg(long, value_enum, default_value_t = UpsampleStrategy::Diverse)]
        strategy: UpsampleStrategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the base model and write its checkpoint.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path; defaults to `<results>/base.ckpt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one strategy, or one LoRA per discipline.
    Train(TrainArgs),
    /// Runs over one axis, merged into one CSV.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value = "lora_moe:shared_a")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Count parameters only; no training.
        #[arg(long)]
        count_only: bool,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean gate weights per discipline at one slot.
    RouteProbe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Defaults to the last layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value = "ffn_down")]
        role: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Balancing recipe end to end, with a comparison table.
    Recipe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate `*.report.json` files of a directory into one table.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        csv: bool,
    },
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// full, lora, lora_moe, lora_comp, or `lora_moe:<variant>`.
    #[arg(long, default_value = "lora")]
    pub strategy: String,
    /// vanilla, shared_a, shared_expert or rank_wise.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub data_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory with train/test JSONL and vocab.json; generated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Train one LoRA per discipline into `lora_<discipline>.ckpt`.
    #[arg(long)]
    pub per_discipline: bool,
    /// Where `--per-discipline` experts live, for `lora_comp`.
    #[arg(long)]
    pub experts_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out),
        Command::Stats { corpus } => stats(&corpus),
        Command::Upsample {
            corpus,
            discipline,
            target,
            strategy,
            seed,
            out,
        } => upsample(&corpus, &discipline, target, strategy, seed, &out),
        Command::Pretrain { config, out } => {
            let cfg = ExperimentConfig::load_or_default(config.as_deref())?;
            let path = out.unwrap_or_else(|| cfg.results_dir(None).join("base.ckpt"));
            let (base, record) = pretrain(&cfg)?;
            checkpoint::save_base(&path, &base, Some(&cfg.hash()))?;
            write_json(&path.with_extension("record.json"), &record)?;
            println!(
                "pretrained {} parameters, final loss {:.4} -> {}",
                base.store().total_params(),
                record.losses.last().copied().unwrap_or(f64::NAN),
                path.display()
            );
            Ok(())
        }
        Command::Train(args) => train_cmd(args),
        Command::Sweep {
            config,
            axis,
            values,
            strategy,
            seed,
            jobs,
            count_only,
            base,
            out,
        } => {
            let cfg = ExperimentConfig::load_or_default(config.as_deref())?;
            let axis: Axis = axis.parse()?;
            let strategy: Strategy = strategy.parse()?;
            let base = if count_only {
                None
            } else {
                Some(load_base(&cfg, base.as_deref())?)
            };
            let points = run_sweep(&cfg, base.as_ref(), axis, &values, strategy, seed, jobs)?;
            let csv = sweep_csv(&points);
            if let Some(dir) = out.or_else(|| (!count_only).then(|| cfg.results_dir(None).join("sweeps"))) {
                for p in &points {
                    if let (Some(id), Some(record)) = (&p.run_id, &p.record) {
                        write_json(&dir.join(format!("{}_{}_{id}.record.json", axis.as_str(), p.value)), record)?;
                    }
                }
                write_file(&dir.join(format!("sweep_{}.csv", axis.as_str())), csv.as_bytes())?;
            }
            print!("{csv}");
            Ok(())
        }
        Command::RouteProbe {
            checkpoint: ckpt,
            corpus,
            base,
            layer,
            role,
            out,
        } => route_probe(&ckpt, &corpus, base.as_deref(), layer, &role, out.as_deref()),
        Command::Recipe { config, seed, base, out } => {
            let cfg = ExperimentConfig::load_or_default(config.as_deref())?;
            let dir = out.unwrap_or_else(|| cfg.results_dir(None).join(format!("recipe_seed{seed}")));
            let base = match base {
                Some(p) => checkpoint::load_base(&p)?,
                None => {
                    let (b, record) = pretrain(&cfg).map_err(|e| Error::stage("pretrain", e))?;
                    checkpoint::save_base(&dir.join("base.ckpt"), &b, Some(&cfg.hash()))?;
                    write_json(&dir.join("base.record.json"), &record)?;
                    b
                }
            };
            let outcome = experiments::recipe(&cfg, seed, &base, Some(&dir))?;
            print!("{}", report::comparison_table(&outcome.rows));
            println!("artifacts in {}", dir.display());
            Ok(())
        }
        Command::Report { dir, csv } => aggregate(&dir, csv),
    }
}

fn gen_data(config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load_or_default(config)?;
    let data = cfg.synthetic(seed)?;
    let hash = cfg.hash();
    io::write_vocab(&out.join("vocab.json"), &data.vocab)?;
    let pretrain = cfg.pretrain_corpus();
    let heldout = multitune_core::data::generate_pretrain(cfg.data.test_size, cfg.model.seed ^ 0x7e57);
    let files: [(&str, &Corpus); 6] = [
        ("train", &data.train),
        ("test", &data.test),
        ("general", &data.general),
        ("general_test", &data.general_test),
        ("pretrain", &pretrain),
        ("pretrain_test", &heldout),
    ];
    for (name, corpus) in files {
        let path = out.join(format!("{name}.jsonl"));
        write_corpus(&path, corpus, &data.vocab, Some(&hash), &[])?;
        println!("{:>6} samples -> {}", corpus.len(), path.display());
    }
    Ok(())
}

fn read_with_vocab(path: &Path) -> Result<(Corpus, Vocab)> {
    let mut vocab = vocab_for(path)?;
    let corpus = read_corpus(path, &mut vocab)?;
    Ok((corpus, vocab))
}

fn stats(path: &Path) -> Result<()> {
    let (corpus, _) = read_with_vocab(path)?;
    if corpus.is_empty() {
        return Err(Error::Usage(format!("{}: corpus is empty", path.display())));
    }
    let s = corpus_stats(&corpus)?;
    print!("{}", report::stats_csv(&s));
    println!();
    print!("{}", report::stats_table(&s));
    Ok(())
}

fn upsample(
    path: &Path,
    discipline: &str,
    target: usize,
    strategy: UpsampleStrategy,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (corpus, vocab) = read_with_vocab(path)?;
    let before = ngram_diversity(&corpus.filter(discipline), &DEFAULT_NGRAMS)?;
    let grown = match strategy {
        UpsampleStrategy::Diverse => upsample_diverse(&corpus, discipline, target, seed)?,
        UpsampleStrategy::Unique => upsample_unique(&corpus, discipline, target, seed)?,
    };
    let after = ngram_diversity(&grown.filter(discipline), &DEFAULT_NGRAMS)?;
    eprintln!("{discipline}: {} -> {} samples, diversity {before:.4} -> {after:.4}", corpus.count(discipline), grown.count(discipline));
    write_corpus(out, &grown, &vocab, None, &[path])?;
    if out.with_file_name("vocab.json") != path.with_file_name("vocab.json") {
        io::write_vocab(&out.with_file_name("vocab.json"), &vocab)?;
    }
    Ok(())
}

fn load_base(cfg: &ExperimentConfig, explicit: Option<&Path>) -> Result<BaseModel> {
    let path = explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.results_dir(None).join("base.ckpt"));
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "no base checkpoint at {}; run `multitune pretrain` first or pass --base",
            path.display()
        )));
    }
    checkpoint::load_base(&path)
}

fn load_data(cfg: &ExperimentConfig, dir: Option<&Path>, seed: u64) -> Result<SyntheticData> {
    let Some(dir) = dir else {
        return cfg.synthetic(seed);
    };
    let mut vocab = io::read_vocab(&dir.join("vocab.json"))?;
    let mut read = |name: &str| -> Result<Corpus> {
        let p = dir.join(format!("{name}.jsonl"));
        if p.exists() {
            read_corpus(&p, &mut vocab)
        } else if name.starts_with("general") {
            Ok(Corpus::default())
        } else {
            Err(Error::Dependency(format!("missing {}", p.display())))
        }
    };
    let train = read("train")?;
    let test = read("test")?;
    let general = read("general")?;
    let general_test = read("general_test")?;
    Ok(SyntheticData {
        vocab,
        train,
        test,
        general,
        general_test,
    })
}

fn resolve_strategy(args: &TrainArgs) -> Result<Strategy> {
    let mut s: Strategy = args.strategy.parse()?;
    if let Some(v) = &args.variant {
        let variant = MoeVariant::parse(v).ok_or_else(|| Error::Usage(format!("unknown variant `{v}`")))?;
        match s {
            Strategy::Moe(_) => s = Strategy::Moe(variant),
            other => return Err(Error::Usage(format!("--variant applies to lora_moe, not {other}"))),
        }
    }
    Ok(s)
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load_or_default(args.config.as_deref())?;
    if let Some(r) = args.rank {
        cfg.adapter.alpha = cfg.adapter.alpha / cfg.adapter.rank as f64 * r as f64;
        cfg.adapter.rank = r;
    }
    if let Some(k) = args.experts {
        cfg.adapter.experts = k;
    }
    let strategy = if args.per_discipline { Strategy::Lora } else { resolve_strategy(&args)? };
    if strategy.is_peft() && strategy != Strategy::Comp {
        cfg.adapter_spec(strategy).validate(&cfg.model)?;
    }
    let out_root = cfg.results_dir(args.out.as_deref());
    let experts_dir = args.experts_dir.clone().unwrap_or_else(|| out_root.join("experts"));

    let mut data = load_data(&cfg, args.data.as_deref(), args.seed)?;
    if let Some(f) = args.data_fraction {
        data.train = subset(&data.train, f, args.seed)?;
    }
    let disciplines = data.train.disciplines();
    let expert_paths: Vec<PathBuf> = disciplines
        .iter()
        .map(|d| experts_dir.join(format!("lora_{d}.ckpt")))
        .collect();
    if strategy == Strategy::Comp {
        if let Some(missing) = expert_paths.iter().find(|p| !p.exists()) {
            return Err(Error::Dependency(format!(
                "lora_comp needs single-discipline experts; {} is missing. Run `multitune train --per-discipline` first",
                missing.display()
            )));
        }
    }
    let base = load_base(&cfg, args.base.as_deref())?;
    let hash = cfg.hash();
    let tc = cfg.train_config(strategy, args.seed);

    if args.per_discipline {
        let runs = train_discipline_loras(&base, &data.train, &disciplines, &tc)?;
        for ((d, state, record), path) in runs.iter().zip(&expert_paths) {
            checkpoint::save_adapters(path, state, Some(d), Some(&hash))?;
            let mut record = record.clone();
            record.checkpoint = Some(path.display().to_string());
            write_json(&path.with_extension("record.json"), &record)?;
            println!("{d}: {} updates -> {}", record.updates, path.display());
        }
        return Ok(());
    }

    let (model, adapters, record, report) = if strategy == Strategy::Comp {
        let experts = expert_paths
            .iter()
            .map(|p| checkpoint::load_adapters(p).map(|(s, _)| s))
            .collect::<Result<Vec<_>>>()?;
        let (state, record) = train_comp_gate(&base, &experts, &data.train, &tc)?;
        let id = run_id(&hash, &record.config, &data.train.provenance);
        let report = evaluate_run(&cfg, "lora_comp", &base, Some(&state), &base, &data, &id, &record.config)?;
        (base.clone(), Some(state), record, report)
    } else {
        let run = train_and_evaluate(&cfg, &strategy.to_string(), &base, &data.train, &data, &tc)?;
        (run.model, run.adapters, run.record, run.report)
    };
    let dir = out_root.join(format!("{}_{}", strategy.to_string().replace(':', "_"), report.run_id));
    let ckpt = dir.join("model.ckpt");
    match &adapters {
        Some(a) => checkpoint::save_adapters(&ckpt, a, None, Some(&hash))?,
        None => checkpoint::save_base(&ckpt, &model, Some(&hash))?,
    }
    let mut record = record;
    record.checkpoint = Some("model.ckpt".into());
    write_json(&dir.join("record.json"), &record)?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(
        &dir.join("provenance.json"),
        &Sidecar {
            seed: data.train.provenance.seed,
            log: data.train.provenance.log.clone(),
            config_hash: Some(hash),
            inputs: Default::default(),
            sha256: io::file_sha256(&ckpt)?,
        },
    )?;
    println!(
        "trainable parameters: {} of {} base ({:.4}%)",
        record.trainable_params,
        base.store().total_params(),
        100.0 * report.param_fraction
    );
    print!("{}", report::accuracy_csv(&report.per_discipline));
    println!("average,{:.4}", report.average);
    if let Some(g) = report.general_acc {
        println!("general,{g:.4}");
    }
    println!("run {} -> {}", report.run_id, dir.display());
    Ok(())
}

fn route_probe(
    ckpt: &Path,
    corpus: &Path,
    base: Option<&Path>,
    layer: Option<usize>,
    role: &str,
    out: Option<&Path>,
) -> Result<()> {
    let (state, header) = checkpoint::load_adapters(ckpt)?;
    let base = match base {
        Some(p) => checkpoint::load_base(p)?,
        None => BaseModel::init(&header.model)?,
    };
    let role = Role::parse(role).ok_or_else(|| Error::Usage(format!("unknown role `{role}`")))?;
    let slot = Slot::new(layer.unwrap_or(header.model.n_layers - 1), role);
    if !state.has_gate(slot) {
        return Err(Error::Dependency(format!(
            "{} has no gate at {slot} ({} adapters are not routed)",
            ckpt.display(),
            state.spec().strategy
        )));
    }
    let (corpus, _) = read_with_vocab(corpus)?;
    let seqs: Vec<(String, Vec<u32>)> = corpus
        .samples
        .iter()
        .map(|s| {
            let mut t = vec![BOS];
            t.extend(s.tokens());
            (s.discipline.clone(), t)
        })
        .collect();
    let m = routing_probe(&base, &state, seqs.iter().map(|(d, t)| (d.as_str(), t.as_slice())), slot)?;
    let csv = report::routing_csv(&m);
    if let Some(p) = out {
        write_file(p, csv.as_bytes())?;
    }
    print!("{csv}");
    Ok(())
}

fn aggregate(dir: &Path, csv: bool) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with("report.json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dependency(format!("no report files in {}", dir.display())));
    }
    let mut rows = Vec::new();
    for p in &paths {
        let r: EvalReport = read_json(p)?;
        rows.push(ComparisonRow {
            label: r.metadata.get("label").cloned().unwrap_or_else(|| r.run_id.clone()),
            strategy: serde_json::from_str::<serde_json::Value>(&r.config)
                .ok()
                .and_then(|v| v.get("strategy").and_then(|s| s.as_str()).map(str::to_string))
                .unwrap_or_default(),
            average: r.average,
            delta_m: r.delta_m.as_ref().map(|d| d.value),
            param_pct: 100.0 * r.param_fraction,
            general_acc: r.general_acc,
            accuracies: r.per_discipline,
        });
    }
    if csv {
        print!("{}", report::comparison_csv(&rows));
    } else {
        print!("{}", report::comparison_table(&rows));
    }
    Ok(())
}
