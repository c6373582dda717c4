mod common;

use common::{classes, encoders, grid_config, pool_items, rng, sample_features, synthetic_samples, unit_bank, Toy};
use episodic_prompt::episodic::{
    conventional_update, episodic_update, group_batch, make_episodes, train, Task, TrainConfig,
};
use episodic_prompt::eval::{accuracy, PredictHead};
use episodic_prompt::objectives::{BatchItem, ClassBank, LossKind, Objective, DEFAULT_TEMPERATURE};
use episodic_prompt::prompt_bank::PromptBank;

struct Fixture {
    toy: Toy,
    classes: ClassBank,
    unprompted: Vec<Vec<f64>>,
    domains: Vec<usize>,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        let mut toy = Toy::random(seed);
        let mut r = rng(seed + 77);
        while toy.patches.len() < 6 {
            toy.patches.push(common::random_patches(&toy.cfg, &mut r));
            toy.labels.push(toy.labels.len() % toy.inputs.len());
        }
        let classes = ClassBank::new(&toy.enc, toy.inputs.clone()).unwrap();
        let unprompted = toy.unprompted();
        let domains = (0..toy.patches.len()).map(|i| i % 3).collect();
        Self {
            toy,
            classes,
            unprompted,
            domains,
        }
    }

    fn batch(&self) -> Vec<BatchItem<'_>> {
        self.toy
            .patches
            .iter()
            .zip(&self.toy.labels)
            .zip(&self.unprompted)
            .map(|((p, &y), u)| BatchItem { patches: p, class_id: y, unprompted: u })
            .collect()
    }
}

fn step(f: &Fixture, bank: &mut PromptBank, task: Task, alpha: f64, eta: f64) {
    let obj = Objective::new(&f.toy.enc, &f.classes, DEFAULT_TEMPERATURE).unwrap();
    let batch = f.batch();
    let cfg = TrainConfig::for_task(task);
    let (modality, kind) = cfg.episodic_target();
    let episodes = make_episodes(&group_batch(&f.toy.labels, &f.domains, task));
    assert!(!episodes.is_empty());
    episodic_update(bank, &obj, &batch, &episodes, modality, kind, alpha, eta, false, true).unwrap();
}

fn bits(bank: &PromptBank) -> Vec<u64> {
    bank.text().data().iter().chain(bank.image().data()).map(|v| v.to_bits()).collect()
}

#[test]
fn zero_step_sizes_leave_prompts_unchanged() {
    let f = Fixture::new(3);
    for task in [Task::BaseToNew, Task::DomainGeneralization] {
        let mut bank = f.toy.bank.clone();
        step(&f, &mut bank, task, 0.2, 0.0);
        assert_eq!(bits(&bank), bits(&f.toy.bank));
        step(&f, &mut bank, task, 0.0, 0.1);
        assert_eq!(bits(&bank), bits(&f.toy.bank));
    }
}

#[test]
fn episodic_update_only_touches_its_modality() {
    for seed in 0..5 {
        let f = Fixture::new(40 + seed);
        let mut bank = f.toy.bank.clone();
        step(&f, &mut bank, Task::BaseToNew, 0.2, 0.5);
        assert_eq!(bank.image(), f.toy.bank.image());
        assert_ne!(bank.text(), f.toy.bank.text());

        let mut bank = f.toy.bank.clone();
        step(&f, &mut bank, Task::DomainGeneralization, 0.2, 0.5);
        assert_eq!(bank.text(), f.toy.bank.text());
        assert_ne!(bank.image(), f.toy.bank.image());
    }
}

#[test]
fn episodic_update_is_deterministic() {
    let f = Fixture::new(9);
    let mut a = f.toy.bank.clone();
    let mut b = f.toy.bank.clone();
    step(&f, &mut a, Task::DomainGeneralization, 0.2, 0.3);
    step(&f, &mut b, Task::DomainGeneralization, 0.2, 0.3);
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn cloned_bank_does_not_alias() {
    let f = Fixture::new(1);
    let original = f.toy.bank.clone();
    let mut copy = original.clone();
    copy.text_mut().data_mut()[0] += 1.0;
    copy.image_mut().data_mut()[0] += 1.0;
    assert_eq!(bits(&original), bits(&f.toy.bank));
}

#[test]
fn conventional_step_reduces_loss_in_most_trials() {
    let mut decreased = 0;
    for seed in 0..20 {
        let f = Fixture::new(200 + seed);
        let obj = Objective::new(&f.toy.enc, &f.classes, DEFAULT_TEMPERATURE).unwrap();
        let batch = f.batch();
        let mut bank = f.toy.bank.clone();
        let before = obj.loss(&bank, &batch, LossKind::Ac).unwrap().total;
        conventional_update(&mut bank, &obj, &batch, LossKind::Ac, 1e-3).unwrap();
        let after = obj.loss(&bank, &batch, LossKind::Ac).unwrap().total;
        if after < before {
            decreased += 1;
        }
    }
    assert!(decreased > 10, "loss decreased in {decreased}/20 trials");
}

#[test]
fn training_fits_a_small_task() {
    let mut fitted = 0;
    let mut scores = Vec::new();
    for seed in 0..5 {
        let cfg = grid_config(seed, 4, 4);
        let enc = encoders(&cfg);
        let samples = synthetic_samples(seed, 4, 2, 16);
        let feats = sample_features(&enc, &samples);
        let pool = pool_items(&samples, &feats);
        let bank_classes = ClassBank::new(&enc, classes(4)).unwrap();
        let obj = Objective::new(&enc, &bank_classes, DEFAULT_TEMPERATURE).unwrap();
        let mut bank = PromptBank::init_gaussian(seed, 4, 4, cfg.text_width, cfg.image_width).unwrap();
        let tc = TrainConfig {
            epochs: 10,
            seed,
            ..TrainConfig::for_task(Task::DomainGeneralization)
        };
        train(&tc, &mut bank, &obj, &pool).unwrap();
        let items: Vec<BatchItem<'_>> = pool.iter().map(|p| p.item).collect();
        let acc = accuracy(&obj, &bank, &items, PredictHead::Overall).unwrap();
        scores.push(acc);
        if acc > 90.0 {
            fitted += 1;
        }
    }
    assert!(fitted >= 3, "training accuracy per seed: {scores:?}");
}

#[test]
fn training_trace_has_one_record_per_step() {
    let cfg = grid_config(0, 1, 4);
    let enc = encoders(&cfg);
    let samples = synthetic_samples(0, 4, 2, 4);
    let feats = sample_features(&enc, &samples);
    let pool = pool_items(&samples, &feats);
    let bank_classes = ClassBank::new(&enc, classes(4)).unwrap();
    let obj = Objective::new(&enc, &bank_classes, DEFAULT_TEMPERATURE).unwrap();
    let mut bank = PromptBank::init_gaussian(0, 2, 1, cfg.text_width, cfg.image_width).unwrap();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::for_task(Task::DomainGeneralization)
    };
    let trace = train(&tc, &mut bank, &obj, &pool).unwrap();
    let spe = tc.steps_per_epoch(pool.len());
    assert_eq!(trace.len(), 3 * spe);
    assert!(trace.iter().take(spe).all(|r| r.lr == 1e-5));
    // Query errors are only gathered in the final epoch.
    assert!(trace[..2 * spe].iter().all(|r| r.query_total == 0));
    assert!(trace[2 * spe..].iter().any(|r| r.query_total > 0));
    assert!(trace.iter().all(|r| r.episodes == 2 || r.episodes == 0));
}

#[test]
fn empty_pool_is_a_data_error() {
    let cfg = grid_config(0, 1, 4);
    let enc = encoders(&cfg);
    let bank_classes = ClassBank::new(&enc, classes(4)).unwrap();
    let obj = Objective::new(&enc, &bank_classes, DEFAULT_TEMPERATURE).unwrap();
    let mut bank = unit_bank(&cfg, 1, 1, &mut rng(0));
    let err = train(&TrainConfig::default(), &mut bank, &obj, &[]).unwrap_err();
    assert!(matches!(err, episodic_prompt::Error::Data(_)));
}
