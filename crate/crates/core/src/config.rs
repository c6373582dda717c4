//! File-complete run configuration.
//!
//! A TOML document with sections `[encoder]`, `[meta]`, `[data]`, `[prompt]`,
//! `[train]` and `[study]`; `task` and `seed` live at the top level. Every
//! key has a default, some of which depend on the task. Unknown keys are
//! rejected. [`RunConfig::resolve`] fills the task-dependent defaults and
//! validates, and the resolved form is what runs write next to their outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dual_encoder::EncoderConfig;
use crate::episodic::{Task, TrainConfig};
use crate::error::{Error, Result};
use crate::meta_domain::{required_vocab, MetaDomainSpec};
use crate::objectives::DEFAULT_TEMPERATURE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Domains sampled per run. For domain generalization one of them is
    /// the target.
    pub domains: usize,
    /// Held-out domain; defaults to the last one.
    pub target_domain: Option<usize>,
    /// Per class (base-to-new) or per class and source domain.
    pub shots: Option<usize>,
    /// Generated training samples per (domain, class) cell.
    pub train_per_cell: usize,
    /// Generated test samples per (domain, class) cell.
    pub test_per_cell: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            domains: 5,
            target_domain: None,
            shots: None,
            train_per_cell: 20,
            test_per_cell: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub prompt_len: Option<usize>,
    pub prompt_layers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub meta_step: f64,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub temperature: f64,
    pub episodic: bool,
    pub mos: bool,
    pub ac: bool,
    pub mean_episodes: bool,
    pub episodic_uses_schedule: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            meta_step: t.meta_step,
            epochs: None,
            batch_size: None,
            warmup_lr: t.warmup_lr,
            warmup_epochs: t.warmup_epochs,
            temperature: DEFAULT_TEMPERATURE,
            episodic: t.episodic,
            mos: t.mos,
            ac: t.ac,
            mean_episodes: t.mean_episodes,
            episodic_uses_schedule: t.episodic_uses_schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Seeds for multi-seed comparisons, ablations and the bound study.
    pub seeds: Vec<u64>,
    /// Training-domain counts of the bound study.
    pub n_values: Vec<usize>,
    /// Domains held out for the bound study's error estimate.
    pub held_out_domains: usize,
    /// Shots per class and training domain in the bound study.
    pub bound_shots: usize,
    /// Ablation toggles: episodic, ac_loss, mos, prompt_len, prompt_layers.
    pub toggles: Vec<String>,
    pub prompt_len_values: Vec<usize>,
    pub prompt_layer_values: Vec<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            n_values: vec![2, 4, 8],
            held_out_domains: 4,
            bound_shots: 4,
            toggles: vec!["episodic".into(), "ac_loss".into(), "mos".into()],
            prompt_len_values: vec![1, 2, 4, 8],
            prompt_layer_values: vec![1, 3, 6, 9, 12],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub meta: MetaDomainSpec,
    pub data: DataConfig,
    pub prompt: PromptConfig,
    pub train: TrainSection,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::BaseToNew,
            seed: 0,
            encoder: EncoderConfig::default(),
            meta: MetaDomainSpec::default(),
            data: DataConfig::default(),
            prompt: PromptConfig::default(),
            train: TrainSection::default(),
            study: StudyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    /// Fills task-dependent defaults and checks every constraint.
    pub fn resolve(mut self) -> Result<Self> {
        let b2n = self.task == Task::BaseToNew;
        let (p, l) = if b2n { (2, 12) } else { (4, 10) };
        self.prompt.prompt_len.get_or_insert(p);
        self.prompt.prompt_layers.get_or_insert(l);
        let defaults = TrainConfig::for_task(self.task);
        self.train.epochs.get_or_insert(defaults.epochs);
        self.train.batch_size.get_or_insert(defaults.batch_size);
        self.data.shots.get_or_insert(if b2n { 16 } else { 5 });
        if !b2n {
            self.data.target_domain.get_or_insert(self.data.domains.saturating_sub(1));
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.meta.validate()?;
        self.train_config().validate()?;
        let (p, l) = (self.prompt_len(), self.prompt_layers());
        if p == 0 || l == 0 {
            return Err(Error::Config("prompt.prompt_len and prompt.prompt_layers must be positive".into()));
        }
        if l > self.encoder.depth {
            return Err(Error::Config(format!(
                "prompt.prompt_layers = {l} exceeds encoder.depth = {}",
                self.encoder.depth
            )));
        }
        if p + crate::meta_domain::NAME_TOKENS_PER_CLASS > self.encoder.seq_len_text {
            return Err(Error::Config(format!(
                "prompt.prompt_len = {p} leaves no room for class names in encoder.seq_len_text = {}",
                self.encoder.seq_len_text
            )));
        }
        if self.encoder.patches != self.meta.patches() || self.encoder.patch_dim != self.meta.patch_dim {
            return Err(Error::Config(format!(
                "encoder expects {}x{} patches but meta-domain renders {}x{}",
                self.encoder.patches,
                self.encoder.patch_dim,
                self.meta.patches(),
                self.meta.patch_dim
            )));
        }
        if self.encoder.vocab < required_vocab(self.meta.classes) {
            return Err(Error::Config(format!(
                "encoder.vocab = {} is below the {} tokens needed for {} classes",
                self.encoder.vocab,
                required_vocab(self.meta.classes),
                self.meta.classes
            )));
        }
        if self.data.domains == 0 {
            return Err(Error::Config("data.domains must be positive".into()));
        }
        if self.task == Task::DomainGeneralization {
            if self.data.domains < 2 {
                return Err(Error::Config("domain generalization needs data.domains >= 2".into()));
            }
            let target = self.target_domain();
            if target >= self.data.domains {
                return Err(Error::Config(format!(
                    "data.target_domain = {target} is not below data.domains = {}",
                    self.data.domains
                )));
            }
        }
        if self.shots() == 0 {
            return Err(Error::Config("data.shots must be positive".into()));
        }
        if self.data.test_per_cell == 0 {
            return Err(Error::Config("data.test_per_cell must be positive".into()));
        }
        if self.study.n_values.iter().any(|n| *n < 2) {
            return Err(Error::Config("study.n_values entries must be at least 2".into()));
        }
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt.prompt_len.unwrap_or(2)
    }

    pub fn prompt_layers(&self) -> usize {
        self.prompt.prompt_layers.unwrap_or(12)
    }

    pub fn shots(&self) -> usize {
        self.data.shots.unwrap_or(16)
    }

    pub fn target_domain(&self) -> usize {
        self.data.target_domain.unwrap_or(self.data.domains.saturating_sub(1))
    }

    pub fn train_config(&self) -> TrainConfig {
        let defaults = TrainConfig::for_task(self.task);
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            meta_step: t.meta_step,
            epochs: t.epochs.unwrap_or(defaults.epochs),
            batch_size: t.batch_size.unwrap_or(defaults.batch_size),
            warmup_lr: t.warmup_lr,
            warmup_epochs: t.warmup_epochs,
            task: self.task,
            seed: self.seed,
            temperature: t.temperature,
            episodic: t.episodic,
            mos: t.mos,
            ac: t.ac,
            mean_episodes: t.mean_episodes,
            episodic_uses_schedule: t.episodic_uses_schedule,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the resolved config (which includes the seed), first 16 chars.
    pub fn run_id(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
