//! Experiment configuration: a TOML document with `model`, `data`,
//! `pretrain`, `full`, `peft`, `adapter`, `eval`, `recipe` and `output`
//! sections. Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use multitune_core::adapters::{AdapterSpec, GateMode, MoeVariant, Strategy};
use multitune_core::data::{default_disciplines, generate_pretrain, generate_synthetic, Corpus, DisciplineSpec, GeneralSpec, SyntheticData};
use multitune_core::model::ModelConfig;
use multitune_core::train::{LossScope, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::sha256_hex;

pub const RESULTS_ENV: &str = "MULTITUNE_RESULTS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training samples across all disciplines, split by the default shares.
    pub total: usize,
    pub test_size: usize,
    pub general_size: usize,
    pub general_test_size: usize,
    pub pretrain_size: usize,
    /// Replaces the default five disciplines when present.
    pub disciplines: Option<Vec<DisciplineSpec>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            total: 2500,
            test_size: 100,
            general_size: 1000,
            general_test_size: 200,
            pretrain_size: 3000,
            disciplines: None,
        }
    }
}

/// Optimizer settings of one training phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub clip: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPhase {
    lr: Option<f64>,
    weight_decay: Option<f64>,
    warmup_ratio: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    clip: Option<f64>,
}

impl RawPhase {
    fn over(self, d: Phase) -> Phase {
        Phase {
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            warmup_ratio: self.warmup_ratio.unwrap_or(d.warmup_ratio),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            clip: self.clip.or(d.clip),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub experts: usize,
    pub gate_mode: GateMode,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            experts: 5,
            gate_mode: GateMode::PerToken,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Also score the held-out general instruction split.
    pub general: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { general: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecipeConfig {
    /// General-data mixing percentage.
    pub mix_percent: u32,
    pub variant: MoeVariant,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        Self {
            mix_percent: 70,
            variant: MoeVariant::SharedA,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: Phase,
    pub full: Phase,
    pub peft: Phase,
    pub adapter: AdapterConfig,
    pub eval: EvalConfig,
    pub recipe: RecipeConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    model: ModelConfig,
    data: DataConfig,
    pretrain: RawPhase,
    full: RawPhase,
    peft: RawPhase,
    adapter: AdapterConfig,
    eval: EvalConfig,
    recipe: RecipeConfig,
    output: OutputConfig,
}

pub const PRETRAIN_PHASE: Phase = Phase {
    lr: 1e-3,
    weight_decay: 0.01,
    warmup_ratio: 0.05,
    epochs: 2,
    batch_size: 16,
    clip: None,
};

pub const FULL_PHASE: Phase = Phase {
    lr: 1e-3,
    weight_decay: 0.1,
    warmup_ratio: 0.05,
    epochs: 5,
    batch_size: 16,
    clip: None,
};

pub const PEFT_PHASE: Phase = Phase {
    lr: 1e-2,
    weight_decay: 0.01,
    warmup_ratio: 0.1,
    epochs: 5,
    batch_size: 16,
    clip: None,
};

impl Default for ExperimentConfig {
    fn default() -> Self {
        RawConfig::default().resolve()
    }
}

impl RawConfig {
    fn resolve(self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model,
            data: self.data,
            pretrain: self.pretrain.over(PRETRAIN_PHASE),
            full: self.full.over(FULL_PHASE),
            peft: self.peft.over(PEFT_PHASE),
            adapter: self.adapter,
            eval: self.eval,
            recipe: self.recipe,
            output: self.output,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending key path.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let err = |message: String| Error::Config {
            path: origin.to_path_buf(),
            message,
        };
        let de = toml::Deserializer::new(text);
        let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().message().trim().to_string();
            if path == "." {
                err(inner)
            } else {
                err(format!("{path}: {inner}"))
            }
        })?;
        let cfg = raw.resolve();
        cfg.validate().map_err(|e| match e {
            Error::Usage(m) => err(m),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// `path` when given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let at = |key: &str, e: multitune_core::Error| Error::Usage(format!("{key}: {e}"));
        self.model.validate().map_err(|e| at("model", e))?;
        for (key, s) in [
            ("full", Strategy::Full),
            ("peft", Strategy::Moe(self.recipe.variant)),
            ("pretrain", Strategy::Full),
        ] {
            let c = if key == "pretrain" {
                self.pretrain_config()
            } else {
                self.train_config(s, 0)
            };
            c.validate().map_err(|e| at(key, e))?;
        }
        for s in [Strategy::Lora, Strategy::Moe(self.recipe.variant)] {
            self.train_config(s, 0)
                .adapter_spec()
                .validate(&self.model)
                .map_err(|e| at("adapter", e))?;
        }
        if self.recipe.mix_percent > 100 {
            return Err(Error::Usage(format!(
                "recipe.mix_percent: {} outside 0..=100",
                self.recipe.mix_percent
            )));
        }
        if self.data.total == 0 {
            return Err(Error::Usage("data.total: must be positive".into()));
        }
        Ok(())
    }

    pub fn disciplines(&self) -> Vec<DisciplineSpec> {
        match &self.data.disciplines {
            Some(d) => d.clone(),
            None => default_disciplines(self.data.total, self.data.test_size),
        }
    }

    pub fn general(&self) -> GeneralSpec {
        GeneralSpec {
            size: self.data.general_size,
            test_size: self.data.general_test_size,
        }
    }

    pub fn synthetic(&self, seed: u64) -> Result<SyntheticData> {
        Ok(generate_synthetic(
            &self.disciplines(),
            &self.general(),
            seed,
            self.model.vocab_size,
        )?)
    }

    pub fn pretrain_corpus(&self) -> Corpus {
        generate_pretrain(self.data.pretrain_size, self.model.seed)
    }

    fn from_phase(p: Phase, strategy: Strategy, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: p.lr,
            weight_decay: p.weight_decay,
            warmup_ratio: p.warmup_ratio,
            epochs: p.epochs,
            batch_size: p.batch_size,
            clip: p.clip,
            ..TrainConfig::preset(strategy, seed)
        }
    }

    /// Training settings for `strategy` with this config's phase and adapter sizes.
    pub fn train_config(&self, strategy: Strategy, seed: u64) -> TrainConfig {
        let phase = if strategy == Strategy::Full { self.full } else { self.peft };
        let mut c = Self::from_phase(phase, strategy, seed);
        c.rank = self.adapter.rank;
        c.alpha = self.adapter.alpha;
        c.experts = if strategy == Strategy::Lora { 1 } else { self.adapter.experts };
        c.gate_mode = self.adapter.gate_mode;
        c
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        let mut c = Self::from_phase(self.pretrain, Strategy::Full, self.model.seed);
        c.loss = LossScope::All;
        c
    }

    pub fn adapter_spec(&self, strategy: Strategy) -> AdapterSpec {
        self.train_config(strategy, 0).adapter_spec()
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }

    /// Explicit directory, then `output.dir`, then the results environment
    /// variable, then `./results`.
    pub fn results_dir(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output.dir {
            return p.clone();
        }
        std::env::var_os(RESULTS_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("results"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(text, Path::new("c.toml"))
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_sections_keep_their_defaults() {
        let c = parse("[model]\nd_model = 16\n[peft]\nlr = 0.005\n").unwrap();
        assert_eq!(c.model.d_model, 16);
        assert_eq!(c.model.n_layers, 2);
        assert_eq!(c.peft.lr, 0.005);
        assert_eq!(c.peft.epochs, PEFT_PHASE.epochs);
        assert_eq!(c.full, FULL_PHASE);
    }

    #[test]
    fn unknown_and_mistyped_keys_name_the_path() {
        let e = parse("[model]\nd_modle = 3\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("d_modle"), "{e}");
        let e = parse("[peft]\nepochs = \"two\"\n").unwrap_err();
        assert!(e.to_string().contains("peft.epochs"), "{e}");
        let e = parse("[adapter]\nrank = 64\n").unwrap_err();
        assert!(e.to_string().contains("adapter"), "{e}");
        let e = parse("[model]\nd_model = 30\n").unwrap_err();
        assert!(e.to_string().contains("model"), "{e}");
    }

    #[test]
    fn train_configs_carry_sizes() {
        let c = ExperimentConfig::default();
        let t = c.train_config(Strategy::Moe(MoeVariant::SharedA), 3);
        assert_eq!((t.rank, t.experts, t.alpha, t.seed), (8, 5, 16.0, 3));
        assert_eq!(c.train_config(Strategy::Lora, 0).experts, 1);
        assert_eq!(c.pretrain_config().loss, LossScope::All);
        assert_eq!(c.hash(), ExperimentConfig::default().hash());
    }
}
