//! Metrics, prediction, and the experiment drivers built on them.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dual_encoder::DualEncoder;
use crate::episodic::{self, PoolItem, StepRecord, Task};
use crate::error::{Error, Result};
use crate::meta_domain::{
    class_text_input, few_shot_pool, leave_one_domain_out, mix_seed, sample_domains, split_base_new, Dataset,
    DomainSpec, MetaDomain, PoolSpec, Sample,
};
pub use crate::objectives::argmax_lowest;
use crate::objectives::{BatchItem, ClassBank, Objective};
use crate::prompt_bank::PromptBank;

/// `2ab / (a + b)`, 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Which distribution predictions are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictHead {
    Overall,
    Symmetric,
}

/// Predicted global class ids for a batch.
pub fn predict(objective: &Objective<'_>, bank: &PromptBank, items: &[BatchItem<'_>], head: PredictHead) -> Result<Vec<usize>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let ids = objective.classes.class_ids();
    let probs = objective.probabilities(bank, items, head == PredictHead::Symmetric)?;
    let p = match head {
        PredictHead::Overall => &probs.p_o,
        PredictHead::Symmetric => probs.p_sym.as_ref().expect("requested"),
    };
    Ok(p.chunks(probs.classes).map(|row| ids[argmax_lowest(row)]).collect())
}

/// Percentage of items whose predicted class equals the label.
pub fn accuracy(objective: &Objective<'_>, bank: &PromptBank, items: &[BatchItem<'_>], head: PredictHead) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Data("empty evaluation split".into()));
    }
    const CHUNK: usize = 64;
    let mut correct = 0;
    for chunk in items.chunks(CHUNK) {
        let pred = predict(objective, bank, chunk, head)?;
        correct += pred.iter().zip(chunk).filter(|(p, it)| **p == it.class_id).count();
    }
    Ok(100.0 * correct as f64 / items.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub task: Task,
    pub seed: u64,
    pub base_acc: Option<f64>,
    pub new_acc: Option<f64>,
    pub harmonic_mean: Option<f64>,
    /// Held-out accuracy per domain id (domain generalization).
    pub per_domain_acc: BTreeMap<usize, f64>,
    /// Accuracy on the training pool.
    pub train_acc: f64,
    pub trace: Vec<StepRecord>,
    pub config: RunConfig,
}

impl RunMetrics {
    /// Base accuracy (base-to-new) or target-domain accuracy.
    pub fn headline(&self) -> f64 {
        match self.task {
            Task::BaseToNew => self.harmonic_mean.unwrap_or(0.0),
            Task::DomainGeneralization => self.per_domain_acc.values().copied().sum::<f64>() / self.per_domain_acc.len().max(1) as f64,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("metrics JSON: {e}")))
    }

    /// Flat `run_id,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut rows = vec!["run_id,metric,value".to_string()];
        let mut push = |name: String, v: f64| rows.push(format!("{},{name},{v:?}", self.run_id));
        if let Some(v) = self.base_acc {
            push("base_acc".into(), v);
        }
        if let Some(v) = self.new_acc {
            push("new_acc".into(), v);
        }
        if let Some(v) = self.harmonic_mean {
            push("harmonic_mean".into(), v);
        }
        for (d, v) in &self.per_domain_acc {
            push(format!("domain_{d}_acc"), *v);
        }
        push("train_acc".into(), self.train_acc);
        if let Some(last) = self.trace.last() {
            push("final_loss_ac".into(), last.loss.ac);
        }
        rows.join("\n") + "\n"
    }

    /// Parses [`RunMetrics::to_csv`] output into `metric -> value`.
    pub fn parse_csv(text: &str) -> Result<BTreeMap<String, f64>> {
        text.lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|line| {
                let mut parts = line.splitn(3, ',');
                let (_, metric, value) = (parts.next(), parts.next(), parts.next());
                let metric = metric.ok_or_else(|| Error::Format(format!("bad metrics row {line:?}")))?;
                let value = value
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad metrics row {line:?}")))?;
                Ok((metric.to_string(), value))
            })
            .collect()
    }
}

/// How the classes and domains of a run are divided.
#[derive(Debug, Clone, PartialEq)]
pub enum Protocol {
    BaseToNew { base: Vec<usize>, new: Vec<usize> },
    DomainGeneralization { sources: Vec<usize>, target: usize },
}

/// Everything one run needs: frozen encoders, generated data, the few-shot
/// pool and cached unprompted image features.
pub struct Experiment {
    pub config: RunConfig,
    pub encoders: DualEncoder,
    pub meta: MetaDomain,
    pub domains: Vec<DomainSpec>,
    pub train_set: Dataset,
    pub test_set: Dataset,
    pub protocol: Protocol,
    /// Indices into `train_set`.
    pub pool: Vec<usize>,
    train_classes: ClassBank,
    pool_features: Vec<Vec<f64>>,
    test_features: Vec<Vec<f64>>,
}

fn features(encoders: &DualEncoder, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| encoders.encode_image_unprompted(&s.patches))
        .collect()
}

fn items<'s>(samples: impl Iterator<Item = &'s Sample>, feats: &'s [Vec<f64>]) -> Vec<BatchItem<'s>> {
    samples
        .zip(feats)
        .map(|(s, f)| BatchItem {
            patches: &s.patches,
            class_id: s.class_id,
            unprompted: f,
        })
        .collect()
}

impl Experiment {
    /// Builds a run from a resolved config.
    pub fn build(config: &RunConfig) -> Result<Self> {
        let cfg = config.clone().resolve()?;
        let encoders = DualEncoder::new(&cfg.encoder)?;
        let meta = MetaDomain::new(&cfg.meta)?;
        let domains = sample_domains(&cfg.meta, cfg.data.domains, mix_seed(cfg.seed, &[1]))?;
        Self::with_domains(cfg, encoders, meta, domains)
    }

    /// Builds a run over explicit domains; used by the bound study.
    pub fn with_domains(cfg: RunConfig, encoders: DualEncoder, meta: MetaDomain, domains: Vec<DomainSpec>) -> Result<Self> {
        let all_classes: Vec<usize> = (0..cfg.meta.classes).collect();
        let domain_ids: Vec<usize> = domains.iter().map(|d| d.id).collect();
        let protocol = match cfg.task {
            Task::BaseToNew => {
                let (base, new) = split_base_new(cfg.meta.classes, mix_seed(cfg.seed, &[2]))?;
                Protocol::BaseToNew { base, new }
            }
            Task::DomainGeneralization => {
                let (sources, target) = leave_one_domain_out(&domain_ids, cfg.target_domain())?;
                Protocol::DomainGeneralization { sources, target }
            }
        };
        let (train_domains, train_classes): (Vec<&DomainSpec>, Vec<usize>) = match &protocol {
            Protocol::BaseToNew { base, .. } => (domains.iter().collect(), base.clone()),
            Protocol::DomainGeneralization { sources, .. } => {
                (domains.iter().filter(|d| sources.contains(&d.id)).collect(), all_classes.clone())
            }
        };
        let train_domains: Vec<DomainSpec> = train_domains.into_iter().cloned().collect();
        let train_set = meta.generate(&train_domains, &train_classes, cfg.data.train_per_cell, mix_seed(cfg.seed, &[3]))?;
        let test_domains: Vec<DomainSpec> = match &protocol {
            Protocol::BaseToNew { .. } => domains.clone(),
            Protocol::DomainGeneralization { target, .. } => domains.iter().filter(|d| d.id == *target).cloned().collect(),
        };
        let test_set = meta.generate(&test_domains, &all_classes, cfg.data.test_per_cell, mix_seed(cfg.seed, &[4]))?;
        let pool_spec = PoolSpec {
            classes: train_classes.clone(),
            domains: train_domains.iter().map(|d| d.id).collect(),
            shots: cfg.shots(),
            per_domain: cfg.task == Task::DomainGeneralization,
        };
        let pool = few_shot_pool(&train_set, &pool_spec, mix_seed(cfg.seed, &[5]))?;

        let pool_samples: Vec<Sample> = pool.iter().map(|&i| train_set.samples[i].clone()).collect();
        let pool_features = features(&encoders, &pool_samples)?;
        let test_features = features(&encoders, &test_set.samples)?;
        let train_classes = ClassBank::new(&encoders, train_classes.iter().map(|&c| class_text_input(c)).collect())?;

        let exp = Self {
            config: cfg,
            encoders,
            meta,
            domains,
            train_set,
            test_set,
            protocol,
            pool,
            train_classes,
            pool_features,
            test_features,
        };
        exp.check_leakage()?;
        Ok(exp)
    }

    /// No pool sample is evaluated, and no held-out class or domain is trained on.
    pub fn check_leakage(&self) -> Result<()> {
        let pool_ids: std::collections::BTreeSet<u64> = self.pool.iter().map(|&i| self.train_set.samples[i].id).collect();
        if let Some(s) = self.test_set.samples.iter().find(|s| pool_ids.contains(&s.id)) {
            return Err(Error::Leakage(format!("sample {} is in both the training pool and the test set", s.id)));
        }
        for &i in &self.pool {
            let s = &self.train_set.samples[i];
            match &self.protocol {
                Protocol::BaseToNew { new, .. } if new.contains(&s.class_id) => {
                    return Err(Error::Leakage(format!("new class {} in the training pool", s.class_id)));
                }
                Protocol::DomainGeneralization { target, .. } if s.domain_id == *target => {
                    return Err(Error::Leakage(format!("target domain {target} in the training pool")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn init_bank(&self) -> Result<PromptBank> {
        PromptBank::init_gaussian(
            mix_seed(self.config.seed, &[6]),
            self.config.prompt_len(),
            self.config.prompt_layers(),
            self.config.encoder.text_width,
            self.config.encoder.image_width,
        )
    }

    pub fn head(&self) -> PredictHead {
        if self.config.train.ac {
            PredictHead::Overall
        } else {
            PredictHead::Symmetric
        }
    }

    fn pool_items(&self) -> Vec<PoolItem<'_>> {
        let samples = self.pool.iter().map(|&i| &self.train_set.samples[i]);
        items(samples, &self.pool_features)
            .into_iter()
            .zip(&self.pool)
            .map(|(item, &i)| PoolItem {
                item,
                domain_id: self.train_set.samples[i].domain_id,
            })
            .collect()
    }

    pub fn train_objective(&self) -> Result<Objective<'_>> {
        Objective::new(&self.encoders, &self.train_classes, self.config.train.temperature)
    }

    pub fn train(&self, bank: &mut PromptBank) -> Result<Vec<StepRecord>> {
        let objective = self.train_objective()?;
        episodic::train(&self.config.train_config(), bank, &objective, &self.pool_items())
    }

    /// Accuracy on the training pool.
    pub fn train_accuracy(&self, bank: &PromptBank) -> Result<f64> {
        let objective = self.train_objective()?;
        let pool: Vec<BatchItem<'_>> = self.pool_items().into_iter().map(|p| p.item).collect();
        accuracy(&objective, bank, &pool, self.head())
    }

    fn test_items(&self, keep: impl Fn(&Sample) -> bool) -> Vec<BatchItem<'_>> {
        items(self.test_set.samples.iter(), &self.test_features)
            .into_iter()
            .zip(&self.test_set.samples)
            .filter(|(_, s)| keep(s))
            .map(|(it, _)| it)
            .collect()
    }

    /// Accuracy over `classes` on test samples of those classes from `domains`.
    pub fn accuracy_on(&self, bank: &PromptBank, classes: &[usize], domains: Option<&[usize]>) -> Result<f64> {
        let class_bank = ClassBank::new(&self.encoders, classes.iter().map(|&c| class_text_input(c)).collect())?;
        let objective = Objective::new(&self.encoders, &class_bank, self.config.train.temperature)?;
        let items = self.test_items(|s| classes.contains(&s.class_id) && domains.is_none_or(|d| d.contains(&s.domain_id)));
        accuracy(&objective, bank, &items, self.head())
    }

    /// Base and new accuracy, each against its own class set, and their H.
    pub fn evaluate_base_to_new(&self, bank: &PromptBank) -> Result<(f64, f64, f64)> {
        let Protocol::BaseToNew { base, new } = &self.protocol else {
            return Err(Error::Config("base-to-new evaluation on a domain generalization run".into()));
        };
        let b = self.accuracy_on(bank, base, None)?;
        let n = self.accuracy_on(bank, new, None)?;
        Ok((b, n, harmonic_mean(b, n)))
    }

    /// Target-domain accuracy over all classes.
    pub fn evaluate_domain_generalization(&self, bank: &PromptBank) -> Result<BTreeMap<usize, f64>> {
        let Protocol::DomainGeneralization { target, .. } = &self.protocol else {
            return Err(Error::Config("domain generalization evaluation on a base-to-new run".into()));
        };
        if self.pool.iter().any(|&i| self.train_set.samples[i].domain_id == *target) {
            return Err(Error::Leakage(format!("target domain {target} is in the training pool")));
        }
        let all: Vec<usize> = (0..self.config.meta.classes).collect();
        let acc = self.accuracy_on(bank, &all, Some(&[*target]))?;
        Ok(BTreeMap::from([(*target, acc)]))
    }

    pub fn evaluate(&self, bank: &PromptBank, trace: Vec<StepRecord>) -> Result<RunMetrics> {
        let mut m = RunMetrics {
            run_id: self.config.run_id(),
            task: self.config.task,
            seed: self.config.seed,
            base_acc: None,
            new_acc: None,
            harmonic_mean: None,
            per_domain_acc: BTreeMap::new(),
            train_acc: self.train_accuracy(bank)?,
            trace,
            config: self.config.clone(),
        };
        match self.config.task {
            Task::BaseToNew => {
                let (b, n, h) = self.evaluate_base_to_new(bank)?;
                m.base_acc = Some(b);
                m.new_acc = Some(n);
                m.harmonic_mean = Some(h);
            }
            Task::DomainGeneralization => m.per_domain_acc = self.evaluate_domain_generalization(bank)?,
        }
        Ok(m)
    }

    /// Initialize, train, evaluate.
    pub fn run(&self) -> Result<(PromptBank, RunMetrics)> {
        let mut bank = self.init_bank()?;
        let trace = self.train(&mut bank)?;
        let metrics = self.evaluate(&bank, trace)?;
        Ok((bank, metrics))
    }

    /// `sample_id,class_id,domain_id,f0,...` rows of prompted image features
    /// for every test sample.
    pub fn write_embeddings<W: Write>(&self, bank: &PromptBank, mut w: W) -> Result<()> {
        let feats: Vec<Vec<f64>> = self
            .test_set
            .samples
            .par_iter()
            .map(|s| self.encoders.encode_image_prompted(&s.patches, bank.image()))
            .collect::<Result<_>>()?;
        let d = self.config.encoder.d_joint;
        let header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
        writeln!(w, "sample_id,class_id,domain_id,{}", header.join(","))?;
        for (s, f) in self.test_set.samples.iter().zip(&feats) {
            let vals: Vec<String> = f.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{},{},{},{}", s.id, s.class_id, s.domain_id, vals.join(","))?;
        }
        Ok(())
    }
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub episodic: bool,
    pub ac_loss: bool,
    pub mos: bool,
    pub prompt_len: usize,
    pub prompt_layers: usize,
    pub seeds: Vec<u64>,
    /// Per-seed headline metric (H, or target accuracy).
    pub scores: Vec<f64>,
    pub mean: f64,
}

pub const ABLATION_TOGGLES: [&str; 5] = ["episodic", "ac_loss", "mos", "prompt_len", "prompt_layers"];

/// The component grid, one run per seed per row.
///
/// Component toggles (`episodic`, `ac_loss`, `mos`) expand to the
/// cumulative table: all off, each alone that is meaningful, pairs, all on.
/// MOS only affects episodic updates, so it is only paired with `episodic`.
/// `prompt_len` / `prompt_layers` sweep the configured values with the
/// components at their configured settings.
pub fn ablation_grid(cfg: &RunConfig) -> Result<Vec<RunConfig>> {
    for t in &cfg.study.toggles {
        if !ABLATION_TOGGLES.contains(&t.as_str()) {
            return Err(Error::Config(format!("unknown ablation toggle {t:?} (expected one of {ABLATION_TOGGLES:?})")));
        }
    }
    let has = |t: &str| cfg.study.toggles.iter().any(|x| x == t);
    let mut out = Vec::new();
    let with = |e: bool, a: bool, m: bool| {
        let mut c = cfg.clone();
        c.train.episodic = e;
        c.train.ac = a;
        c.train.mos = m;
        c
    };
    let (e_on, a_on, m_on) = (has("episodic"), has("ac_loss"), has("mos"));
    if e_on || a_on || m_on {
        let mut seen = Vec::new();
        let mut add = |e: bool, a: bool, m: bool| {
            let m = m && e;
            if !seen.contains(&(e, a, m)) {
                seen.push((e, a, m));
                out.push(with(e, a, m));
            }
        };
        add(false, false, false);
        if e_on {
            add(true, false, false);
        }
        if a_on {
            add(false, true, false);
        }
        if e_on && a_on {
            add(true, true, false);
        }
        if m_on {
            add(e_on, a_on, true);
        }
    }
    if has("prompt_len") {
        for &p in &cfg.study.prompt_len_values {
            let mut c = cfg.clone();
            c.prompt.prompt_len = Some(p);
            out.push(c);
        }
    }
    if has("prompt_layers") {
        for &l in &cfg.study.prompt_layer_values {
            let mut c = cfg.clone();
            c.prompt.prompt_layers = Some(l);
            out.push(c);
        }
    }
    if out.is_empty() {
        out.push(cfg.clone());
    }
    out.into_iter().map(RunConfig::resolve).collect()
}

/// Runs every grid row over the configured seeds; `jobs` rows run concurrently.
pub fn ablation_run(cfg: &RunConfig, jobs: usize) -> Result<Vec<AblationRow>> {
    let grid = ablation_grid(cfg)?;
    let seeds = cfg.study.seeds.clone();
    let run_row = |row: &RunConfig| -> Result<AblationRow> {
        let scores = seeds
            .iter()
            .map(|&s| {
                let c = RunConfig { seed: s, ..row.clone() };
                Ok(Experiment::build(&c)?.run()?.1.headline())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(AblationRow {
            episodic: row.train.episodic,
            ac_loss: row.train.ac,
            mos: row.train.mos && row.train.episodic,
            prompt_len: row.prompt_len(),
            prompt_layers: row.prompt_layers(),
            seeds: seeds.clone(),
            mean: scores.iter().sum::<f64>() / scores.len().max(1) as f64,
            scores,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| grid.par_iter().map(run_row).collect())
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("episodic\tac_loss\tmos\tprompt_len\tprompt_layers\tmean\tscores\n");
    for r in rows {
        let scores: Vec<String> = r.scores.iter().map(|s| format!("{s:.2}")).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.2}\t{}\n",
            r.episodic as u8,
            r.ac_loss as u8,
            r.mos as u8,
            r.prompt_len,
            r.prompt_layers,
            r.mean,
            scores.join(",")
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub n: usize,
    pub seed: u64,
    /// Query-set 0/1 error at the inner-updated prompts, final epoch.
    pub episodic_train_error: f64,
    /// Error on held-out domains.
    pub held_out_error: f64,
    pub gap: f64,
}

/// Per-N means over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub n: usize,
    pub mean_train_error: f64,
    pub mean_held_out_error: f64,
    pub mean_gap: f64,
}

/// Config of one bound-study cell: `n` training domains plus held-out ones.
fn bound_config(cfg: &RunConfig, n: usize, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.task = Task::DomainGeneralization;
    c.seed = seed;
    c.data.domains = n;
    c.data.shots = Some(cfg.study.bound_shots);
    c.data.train_per_cell = c.data.train_per_cell.max(cfg.study.bound_shots);
    c.train.episodic = true;
    c
}

/// Trains with `n` domains and measures the generalization gap.
pub fn bound_cell(cfg: &RunConfig, n: usize, seed: u64) -> Result<GapRecord> {
    if n < 2 {
        return Err(Error::Config(format!("bound study needs at least 2 training domains, got {n}")));
    }
    let c = bound_config(cfg, n, seed);
    let (train, held) = bound_domains(&c, n)?;
    let rc = c.clone().resolve().map(|mut r| {
        r.data.target_domain = None;
        r
    })?;
    let encoders = DualEncoder::new(&rc.encoder)?;
    let meta = MetaDomain::new(&rc.meta)?;
    let exp = BoundRun::build(rc, encoders, meta, train, held)?;
    exp.measure()
}

fn bound_domains(c: &RunConfig, n: usize) -> Result<(Vec<DomainSpec>, Vec<DomainSpec>)> {
    let h = c.study.held_out_domains.max(1);
    let all = sample_domains(&c.meta, n + h, mix_seed(c.seed, &[7]))?;
    let (train, held) = all.split_at(n);
    Ok((train.to_vec(), held.to_vec()))
}

/// Training on several domains, evaluation on disjoint held-out ones.
struct BoundRun {
    cfg: RunConfig,
    encoders: DualEncoder,
    classes: ClassBank,
    pool: Vec<Sample>,
    pool_features: Vec<Vec<f64>>,
    test: Vec<Sample>,
    test_features: Vec<Vec<f64>>,
}

impl BoundRun {
    fn build(cfg: RunConfig, encoders: DualEncoder, meta: MetaDomain, train: Vec<DomainSpec>, held: Vec<DomainSpec>) -> Result<Self> {
        let all: Vec<usize> = (0..cfg.meta.classes).collect();
        let held: Vec<DomainSpec> = held
            .into_iter()
            .enumerate()
            .map(|(i, d)| DomainSpec { id: train.len() + i, ..d })
            .collect();
        let train_set = meta.generate(&train, &all, cfg.data.train_per_cell, mix_seed(cfg.seed, &[3]))?;
        let pool_spec = PoolSpec {
            classes: all.clone(),
            domains: train.iter().map(|d| d.id).collect(),
            shots: cfg.shots(),
            per_domain: true,
        };
        let pool: Vec<Sample> = few_shot_pool(&train_set, &pool_spec, mix_seed(cfg.seed, &[5]))?
            .into_iter()
            .map(|i| train_set.samples[i].clone())
            .collect();
        let test = meta.generate(&held, &all, cfg.data.test_per_cell, mix_seed(cfg.seed, &[4]))?.samples;
        let pool_features = features(&encoders, &pool)?;
        let test_features = features(&encoders, &test)?;
        let classes = ClassBank::new(&encoders, all.iter().map(|&c| class_text_input(c)).collect())?;
        Ok(Self {
            cfg,
            encoders,
            classes,
            pool,
            pool_features,
            test,
            test_features,
        })
    }

    fn measure(&self) -> Result<GapRecord> {
        let objective = Objective::new(&self.encoders, &self.classes, self.cfg.train.temperature)?;
        let pool: Vec<PoolItem<'_>> = items(self.pool.iter(), &self.pool_features)
            .into_iter()
            .zip(&self.pool)
            .map(|(item, s)| PoolItem { item, domain_id: s.domain_id })
            .collect();
        let mut bank = PromptBank::init_gaussian(
            mix_seed(self.cfg.seed, &[6]),
            self.cfg.prompt_len(),
            self.cfg.prompt_layers(),
            self.cfg.encoder.text_width,
            self.cfg.encoder.image_width,
        )?;
        let tc = self.cfg.train_config();
        let trace = episodic::train(&tc, &mut bank, &objective, &pool)?;
        let spe = tc.steps_per_epoch(pool.len());
        let last_epoch = trace.len().saturating_sub(spe);
        let (wrong, total) = trace[last_epoch..]
            .iter()
            .fold((0, 0), |(w, t), r| (w + r.query_errors, t + r.query_total));
        if total == 0 {
            return Err(Error::Data("no episodes in the final epoch; every batch had a single domain".into()));
        }
        let train_error = wrong as f64 / total as f64;
        let test = items(self.test.iter(), &self.test_features);
        let held_out_error = 1.0 - accuracy(&objective, &bank, &test, PredictHead::Overall)? / 100.0;
        Ok(GapRecord {
            n: self.cfg.data.domains,
            seed: self.cfg.seed,
            episodic_train_error: train_error,
            held_out_error,
            gap: held_out_error - train_error,
        })
    }
}

/// One record per (N, seed).
pub fn bound_study(cfg: &RunConfig, jobs: usize) -> Result<Vec<GapRecord>> {
    if cfg.study.seeds.len() < 3 {
        return Err(Error::Config(format!("bound study needs at least 3 seeds, got {}", cfg.study.seeds.len())));
    }
    if let Some(n) = cfg.study.n_values.iter().find(|n| **n < 2) {
        return Err(Error::Config(format!("bound study needs at least 2 training domains, got {n}")));
    }
    let cells: Vec<(usize, u64)> = cfg
        .study
        .n_values
        .iter()
        .flat_map(|&n| cfg.study.seeds.iter().map(move |&s| (n, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(|&(n, s)| bound_cell(cfg, n, s)).collect())
}

pub fn summarize_gaps(records: &[GapRecord]) -> Vec<GapSummary> {
    let mut by_n: BTreeMap<usize, Vec<&GapRecord>> = BTreeMap::new();
    for r in records {
        by_n.entry(r.n).or_default().push(r);
    }
    by_n.into_iter()
        .map(|(n, rs)| {
            let m = |f: fn(&GapRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
            GapSummary {
                n,
                mean_train_error: m(|r| r.episodic_train_error),
                mean_held_out_error: m(|r| r.held_out_error),
                mean_gap: m(|r| r.gap),
            }
        })
        .collect()
}

/// Least-squares fit of `gap = a + b / √N`; returns `(a, b)`.
pub fn fit_inverse_sqrt(summary: &[GapSummary]) -> Option<(f64, f64)> {
    if summary.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = summary.iter().map(|s| 1.0 / (s.n as f64).sqrt()).collect();
    let ys: Vec<f64> = summary.iter().map(|s| s.mean_gap).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

/// One-sided sign test: `P(X >= wins)` for `X ~ Binomial(wins + losses, ½)`.
/// Ties are dropped before calling.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut p = 0.0;
    let mut c = 1.0_f64;
    for k in 0..=n {
        if k > 0 {
            c = c * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += c;
        }
    }
    p / 2f64.powi(n as i32)
}

/// Paired comparison of two per-seed score lists (higher is better for `a`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub mean_difference: f64,
    pub sign_test_p: f64,
}

pub fn paired_comparison(a: &[f64], b: &[f64]) -> PairedComparison {
    let (mut wins, mut ties, mut losses) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        if x > y {
            wins += 1;
        } else if x < y {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let n = a.len().min(b.len()).max(1) as f64;
    PairedComparison {
        a: a.to_vec(),
        b: b.to_vec(),
        wins,
        ties,
        losses,
        mean_difference: a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>() / n,
        sign_test_p: sign_test_p(wins, losses),
    }
}

/// Held-out accuracy of episodic versus conventional-only training, paired by seed.
pub fn episodic_vs_conventional(cfg: &RunConfig, jobs: usize) -> Result<PairedComparison> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    // Both runs of a seed share one build: only the training section differs.
    let pairs: Vec<(f64, f64)> = pool.install(|| {
        cfg.study
            .seeds
            .par_iter()
            .map(|&s| {
                let mut c = cfg.clone();
                c.seed = s;
                c.train.episodic = true;
                let mut exp = Experiment::build(&c)?;
                let episodic = exp.run()?.1.headline();
                exp.config.train.episodic = false;
                let conventional = exp.run()?.1.headline();
                Ok((episodic, conventional))
            })
            .collect::<Result<_>>()
    })?;
    let (episodic, conventional): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok(paired_comparison(&episodic, &conventional))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::prob_overall;
    use proptest::prelude::*;

    #[test]
    fn harmonic_mean_table_row() {
        assert!((harmonic_mean(77.52, 70.83) - 74.02).abs() < 0.01);
        assert_eq!(harmonic_mean(63.0, 63.0), 63.0);
        assert_eq!(harmonic_mean(100.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    proptest! {
        #[test]
        fn harmonic_mean_bounds(a in 0.01f64..100.0, b in 0.01f64..100.0) {
            let h = harmonic_mean(a, b);
            prop_assert_eq!(h, harmonic_mean(b, a));
            prop_assert!(h >= a.min(b) - 1e-9 && h <= (a + b) / 2.0 + 1e-9);
        }

        #[test]
        fn sign_test_is_a_tail_probability(w in 0usize..12, l in 0usize..12) {
            let p = sign_test_p(w, l);
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(sign_test_p(w + 1, l) <= p + 1e-15);
        }
    }

    #[test]
    fn overall_head_can_overrule_text_head() {
        let p_o = prob_overall(&[0.6, 0.4], &[0.1, 0.9]).unwrap();
        assert_eq!(argmax_lowest(&[0.6, 0.4]), 0);
        assert_eq!(argmax_lowest(&p_o), 1);
        assert_eq!(argmax_lowest(&[0.25; 4]), 0);
        assert_eq!(argmax_lowest(&[1.0]), 0);
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p(5, 0) - 1.0 / 32.0).abs() < 1e-15);
        assert!((sign_test_p(4, 0) - 1.0 / 16.0).abs() < 1e-15);
        assert!((sign_test_p(4, 1) - 6.0 / 32.0).abs() < 1e-15);
        assert_eq!(sign_test_p(0, 0), 1.0);
    }

    #[test]
    fn paired_counts() {
        let c = paired_comparison(&[1.0, 2.0, 3.0, 4.0], &[0.5, 2.0, 3.5, 1.0]);
        assert_eq!((c.wins, c.ties, c.losses), (2, 1, 1));
        assert!((c.mean_difference - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ablation_grid_shapes() {
        let mut cfg = RunConfig::default();
        cfg.study.toggles = vec![];
        assert_eq!(ablation_grid(&cfg).unwrap().len(), 1);
        cfg.study.toggles = vec!["episodic".into()];
        let g = ablation_grid(&cfg).unwrap();
        assert_eq!(g.iter().map(|c| c.train.episodic).collect::<Vec<_>>(), vec![false, true]);
        assert!(g.iter().all(|c| c.seed == cfg.seed));
        cfg.study.toggles = vec!["episodic".into(), "ac_loss".into(), "mos".into()];
        let rows: Vec<(bool, bool, bool)> = ablation_grid(&cfg)
            .unwrap()
            .iter()
            .map(|c| (c.train.episodic, c.train.ac, c.train.mos && c.train.episodic))
            .collect();
        assert_eq!(
            rows,
            vec![
                (false, false, false),
                (true, false, false),
                (false, true, false),
                (true, true, false),
                (true, true, true)
            ]
        );
        cfg.study.toggles = vec!["prompt_len".into()];
        assert_eq!(ablation_grid(&cfg).unwrap().len(), cfg.study.prompt_len_values.len());
        cfg.study.toggles = vec!["dropout".into()];
        assert!(matches!(ablation_grid(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn inverse_sqrt_fit_recovers_curve() {
        let summary: Vec<GapSummary> = [2usize, 4, 8]
            .iter()
            .map(|&n| GapSummary {
                n,
                mean_train_error: 0.0,
                mean_held_out_error: 0.0,
                mean_gap: 0.1 + 0.5 / (n as f64).sqrt(),
            })
            .collect();
        let (a, b) = fit_inverse_sqrt(&summary).unwrap();
        assert!((a - 0.1).abs() < 1e-12 && (b - 0.5).abs() < 1e-12);
    }
}
