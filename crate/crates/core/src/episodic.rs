//! Conventional plus batch-wise episodic prompt training.
//!
//! Each iteration samples a batch, takes an SGD step on the full loss for
//! both prompt sets, then splits the batch into groups (classes or domains)
//! and runs one first-order episode per group: an inner step on the other
//! groups, a query gradient at the inner-updated prompts, and a summed
//! update scaled by `α·η` applied to the original prompts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{argmax_lowest, BatchItem, LossKind, LossValues, Objective};
use crate::prompt_bank::{Modality, PromptBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    BaseToNew,
    DomainGeneralization,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base_to_new" => Ok(Task::BaseToNew),
            "domain_generalization" => Ok(Task::DomainGeneralization),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected base_to_new or domain_generalization)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::BaseToNew => "base_to_new",
            Task::DomainGeneralization => "domain_generalization",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Base learning rate `η` of the cosine schedule.
    pub learning_rate: f64,
    /// Meta-step size `α`: inner step and outer scale.
    pub meta_step: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub task: Task,
    pub seed: u64,
    pub temperature: f64,
    /// Run episodic updates after each conventional step.
    pub episodic: bool,
    /// Restrict episodic updates to one modality per task.
    pub mos: bool,
    /// Train on the asymmetric loss; otherwise a single prompted/prompted
    /// contrastive loss.
    pub ac: bool,
    /// Average episode gradients instead of summing them.
    pub mean_episodes: bool,
    /// Episodic updates use the scheduled `η_t`; otherwise the base `η`.
    pub episodic_uses_schedule: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_task(Task::BaseToNew)
    }
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        let (batch_size, epochs) = match task {
            Task::BaseToNew => (16, 10),
            Task::DomainGeneralization => (32, 5),
        };
        Self {
            learning_rate: 0.002,
            meta_step: 0.2,
            epochs,
            batch_size,
            warmup_lr: 1e-5,
            warmup_epochs: 1,
            task,
            seed: 0,
            temperature: crate::objectives::DEFAULT_TEMPERATURE,
            episodic: true,
            mos: true,
            ac: true,
            mean_episodes: false,
            episodic_uses_schedule: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.learning_rate) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !positive(self.meta_step) {
            return Err(Error::Config(format!("meta_step must be positive, got {}", self.meta_step)));
        }
        if !(self.warmup_lr >= 0.0) || !self.warmup_lr.is_finite() {
            return Err(Error::Config(format!("warmup_lr must be >= 0, got {}", self.warmup_lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !positive(self.temperature) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    /// Prompt set and loss the episodic step works on.
    pub fn episodic_target(&self) -> (Modality, LossKind) {
        let (modality, asym) = match (self.mos, self.task) {
            (true, Task::BaseToNew) => (Modality::Text, LossKind::Text),
            (true, Task::DomainGeneralization) => (Modality::Image, LossKind::Image),
            (false, _) => (Modality::Both, LossKind::TextImage),
        };
        (modality, if self.ac { asym } else { LossKind::Symmetric })
    }

    /// Loss of the conventional step.
    pub fn conventional_loss(&self) -> LossKind {
        if self.ac {
            LossKind::Ac
        } else {
            LossKind::Symmetric
        }
    }

    pub fn steps_per_epoch(&self, pool: usize) -> usize {
        pool.div_ceil(self.batch_size).max(1)
    }
}

/// Warm-up at a fixed rate, then cosine annealing from `η` to 0.
///
/// `progress = (step - w) / (total - w - 1)`, so the first post-warm-up step
/// is exactly `η` and the last is exactly 0.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, cfg: &TrainConfig) -> f64 {
    if step < warmup_steps {
        return cfg.warmup_lr;
    }
    let span = total_steps.saturating_sub(warmup_steps + 1);
    let progress = if span == 0 {
        0.0
    } else {
        ((step - warmup_steps) as f64 / span as f64).min(1.0)
    };
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Leave-one-group-out split of a batch, as positions into the batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeSplit {
    pub group_key: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Partitions batch positions by class id (base-to-new) or domain id.
pub fn group_batch(class_ids: &[usize], domain_ids: &[usize], task: Task) -> Vec<(usize, Vec<usize>)> {
    let keys = match task {
        Task::BaseToNew => class_ids,
        Task::DomainGeneralization => domain_ids,
    };
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, key) in keys.iter().enumerate() {
        groups.entry(*key).or_default().push(pos);
    }
    groups.into_iter().collect()
}

/// One split per group; empty when there are fewer than two groups.
pub fn make_episodes(groups: &[(usize, Vec<usize>)]) -> Vec<EpisodeSplit> {
    if groups.len() < 2 {
        return Vec::new();
    }
    groups
        .iter()
        .enumerate()
        .map(|(i, (key, query))| {
            let mut support: Vec<usize> = groups
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, (_, g))| g.iter().copied())
                .collect();
            support.sort_unstable();
            EpisodeSplit {
                group_key: *key,
                support,
                query: query.clone(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeSet {
    Support,
    Query,
}

/// First-order episodic step on a flat parameter vector.
///
/// `grad(i, set, θ)` returns the gradient of the episode loss on episode
/// `i`'s support or query set at `θ`. Each episode works on its own copy of
/// `θ`; the returned vector is `θ - α·η·Σ g_i` (or the mean when
/// `mean_episodes`).
pub fn first_order_step<F>(
    theta: &[f64],
    episodes: usize,
    alpha: f64,
    eta: f64,
    mean_episodes: bool,
    grad: F,
) -> Result<Vec<f64>>
where
    F: Fn(usize, EpisodeSet, &[f64]) -> Result<Vec<f64>> + Sync,
{
    let support: Vec<Vec<f64>> = (0..episodes)
        .into_par_iter()
        .map(|i| grad(i, EpisodeSet::Support, theta))
        .collect::<Result<_>>()?;
    first_order_step_from_support(theta, &support, alpha, eta, mean_episodes, |i, inner| {
        grad(i, EpisodeSet::Query, inner)
    })
}

/// [`first_order_step`] with the support gradients at `θ` already computed,
/// one per episode. `query(i, θ'_i)` returns the query gradient.
pub fn first_order_step_from_support<F>(
    theta: &[f64],
    support: &[Vec<f64>],
    alpha: f64,
    eta: f64,
    mean_episodes: bool,
    query: F,
) -> Result<Vec<f64>>
where
    F: Fn(usize, &[f64]) -> Result<Vec<f64>> + Sync,
{
    let episodes = support.len();
    if episodes == 0 {
        return Ok(theta.to_vec());
    }
    let per_episode: Vec<Vec<f64>> = support
        .par_iter()
        .enumerate()
        .map(|(i, g_support)| {
            if g_support.len() != theta.len() {
                return Err(Error::dim("support gradient", &[g_support.len()], &[theta.len()]));
            }
            let inner: Vec<f64> = theta.iter().zip(g_support).map(|(t, g)| t - alpha * g).collect();
            query(i, &inner)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; theta.len()];
    for g in &per_episode {
        if g.len() != theta.len() {
            return Err(Error::dim("episode gradient", &[g.len()], &[theta.len()]));
        }
        total.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let reduce = if mean_episodes { episodes as f64 } else { 1.0 };
    Ok(theta
        .iter()
        .zip(&total)
        .map(|(t, g)| t - alpha * eta * g / reduce)
        .collect())
}

fn flatten(bank: &PromptBank, modality: Modality) -> Vec<f64> {
    bank.view_modality(modality)
        .into_iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

fn unflatten(bank: &mut PromptBank, modality: Modality, flat: &[f64]) {
    let mut offset = 0;
    for t in bank.view_modality_mut(modality) {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
}

fn modality_grad(text: &[f64], image: &[f64], modality: Modality) -> Vec<f64> {
    match modality {
        Modality::Text => text.to_vec(),
        Modality::Image => image.to_vec(),
        Modality::Both => [text, image].concat(),
    }
}

/// `Θ ← Θ - η_t ∇_Θ L(Θ; batch)` on both prompt sets.
pub fn conventional_update(
    bank: &mut PromptBank,
    objective: &Objective<'_>,
    batch: &[BatchItem<'_>],
    kind: LossKind,
    lr: f64,
) -> Result<LossValues> {
    let out = objective.loss_and_grad(bank, batch, kind, false)?;
    for (t, g) in bank.view_modality_mut(Modality::Both).into_iter().zip([&out.grad_text, &out.grad_image]) {
        t.data_mut().iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
    }
    if !bank.is_finite() {
        return Err(Error::Numeric(format!("prompts became non-finite after a step of size {lr}")));
    }
    Ok(out.values)
}

/// Query-set 0/1 error counts gathered during an episodic update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryStats {
    pub errors: usize,
    pub total: usize,
}

/// First-order episodic update of one prompt set; the other is untouched.
/// With `record`, query predictions (overall head) at each episode's
/// inner-updated prompts are scored against the labels.
#[allow(clippy::too_many_arguments)]
pub fn episodic_update(
    bank: &mut PromptBank,
    objective: &Objective<'_>,
    batch: &[BatchItem<'_>],
    episodes: &[EpisodeSplit],
    modality: Modality,
    kind: LossKind,
    alpha: f64,
    eta: f64,
    mean_episodes: bool,
    record: bool,
) -> Result<QueryStats> {
    if episodes.is_empty() {
        return Ok(QueryStats::default());
    }
    let theta = flatten(bank, modality);
    let outer: &PromptBank = bank;
    let stats = Mutex::new(QueryStats::default());
    let class_ids = objective.classes.class_ids();
    let subsets: Vec<Vec<usize>> = episodes.iter().map(|e| e.support.clone()).collect();
    let support: Vec<Vec<f64>> = objective
        .subset_gradients(outer, batch, kind, &subsets)?
        .into_iter()
        .map(|g| modality_grad(&g.grad_text, &g.grad_image, modality))
        .collect();
    let updated = first_order_step_from_support(&theta, &support, alpha, eta, mean_episodes, |i, params| {
        let items: Vec<BatchItem<'_>> = episodes[i].query.iter().map(|&p| batch[p]).collect();
        let mut local = outer.clone();
        unflatten(&mut local, modality, params);
        let out = objective.loss_and_grad(&local, &items, kind, record)?;
        if record {
            let k = out.probs.classes;
            let wrong = out
                .probs
                .p_o
                .chunks(k)
                .zip(&items)
                .filter(|(row, it)| class_ids[argmax_lowest(row)] != it.class_id)
                .count();
            let mut s = stats.lock().expect("stats lock");
            s.errors += wrong;
            s.total += items.len();
        }
        Ok(modality_grad(&out.grad_text, &out.grad_image, modality))
    })?;
    unflatten(bank, modality, &updated);
    if !bank.is_finite() {
        return Err(Error::Numeric("prompts became non-finite after an episodic update".into()));
    }
    Ok(stats.into_inner().expect("stats lock"))
}

/// One training sample with its cached unprompted image feature.
#[derive(Debug, Clone, Copy)]
pub struct PoolItem<'s> {
    pub item: BatchItem<'s>,
    pub domain_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossValues,
    pub episodes: usize,
    /// Query samples misclassified at the inner-updated prompts (final epoch only).
    #[serde(default)]
    pub query_errors: usize,
    #[serde(default)]
    pub query_total: usize,
}

/// Uniform with replacement; if every draw lands in one group and the pool
/// has others, the last draw is replaced by a uniform draw from the rest.
pub fn sample_batch(pool: &[PoolItem<'_>], batch_size: usize, task: Task, rng: &mut impl Rng) -> Vec<usize> {
    let key = |p: &PoolItem<'_>| match task {
        Task::BaseToNew => p.item.class_id,
        Task::DomainGeneralization => p.domain_id,
    };
    let mut picks: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..pool.len())).collect();
    let first = key(&pool[picks[0]]);
    if picks.iter().all(|&i| key(&pool[i]) == first) {
        let others: Vec<usize> = (0..pool.len()).filter(|&i| key(&pool[i]) != first).collect();
        if !others.is_empty() {
            *picks.last_mut().expect("batch_size >= 2") = others[rng.random_range(0..others.len())];
        }
    }
    picks
}

/// Runs the full schedule and returns the per-step trace.
pub fn train(
    cfg: &TrainConfig,
    bank: &mut PromptBank,
    objective: &Objective<'_>,
    pool: &[PoolItem<'_>],
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Data("empty training pool".into()));
    }
    let spe = cfg.steps_per_epoch(pool.len());
    let total = spe * cfg.epochs;
    let warmup = spe * cfg.warmup_epochs;
    let (modality, episodic_kind) = cfg.episodic_target();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(total);
    for step in 0..total {
        let lr = lr_schedule(step, total, warmup, cfg);
        let picks = sample_batch(pool, cfg.batch_size, cfg.task, &mut rng);
        let batch: Vec<BatchItem<'_>> = picks.iter().map(|&i| pool[i].item).collect();
        let loss = conventional_update(bank, objective, &batch, cfg.conventional_loss(), lr)?;
        let mut n_episodes = 0;
        let mut query = QueryStats::default();
        if cfg.episodic {
            let classes: Vec<usize> = picks.iter().map(|&i| pool[i].item.class_id).collect();
            let domains: Vec<usize> = picks.iter().map(|&i| pool[i].domain_id).collect();
            let episodes = make_episodes(&group_batch(&classes, &domains, cfg.task));
            if episodes.is_empty() {
                warn!("step {step}: batch has a single group, skipping the episodic update");
            }
            let eta = if cfg.episodic_uses_schedule { lr } else { cfg.learning_rate };
            query = episodic_update(
                bank,
                objective,
                &batch,
                &episodes,
                modality,
                episodic_kind,
                cfg.meta_step,
                eta,
                cfg.mean_episodes,
                step / spe + 1 == cfg.epochs,
            )?;
            n_episodes = episodes.len();
        }
        trace.push(StepRecord {
            step,
            epoch: step / spe,
            lr,
            loss,
            episodes: n_episodes,
            query_errors: query.errors,
            query_total: query.total,
        });
    }
    Ok(trace)
}
