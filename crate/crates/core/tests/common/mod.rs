#![allow(dead_code)]

use episodic_prompt::autograd::{finite_difference_check, GradCheckReport, Tensor};
use episodic_prompt::dual_encoder::{ClassTextInput, DualEncoder, EncoderConfig};
use episodic_prompt::episodic::PoolItem;
use episodic_prompt::meta_domain::{class_text_input, sample_domains, MetaDomain, MetaDomainSpec, Sample};
use episodic_prompt::objectives::{BatchItem, ClassBank, LossKind, Objective};
use episodic_prompt::prompt_bank::PromptBank;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn tiny_config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        depth: 2,
        text_width: 8,
        image_width: 8,
        heads: 2,
        mlp_ratio: 2,
        seq_len_text: 8,
        patches: 4,
        patch_dim: 4,
        vocab: 16,
        d_joint: 8,
        seed,
    }
}

pub fn classes(k: usize) -> Vec<ClassTextInput> {
    (0..k).map(class_text_input).collect()
}

pub fn random_patches(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..cfg.patches * cfg.patch_dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::new(vec![cfg.patches, cfg.patch_dim], data).unwrap()
}

/// Prompts with unit-scale entries; see the finite-difference notes in the README.
pub fn unit_bank(cfg: &EncoderConfig, p: usize, l: usize, rng: &mut ChaCha8Rng) -> PromptBank {
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let text = draw(l * p * cfg.text_width);
    let image = draw(l * p * cfg.image_width);
    PromptBank::from_parts(p, l, cfg.text_width, cfg.image_width, text, image).unwrap()
}

pub fn encoders(cfg: &EncoderConfig) -> DualEncoder {
    DualEncoder::new(cfg).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn pick(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub struct Toy {
    pub cfg: EncoderConfig,
    pub enc: DualEncoder,
    pub inputs: Vec<ClassTextInput>,
    pub patches: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub bank: PromptBank,
}

impl Toy {
    /// Random small configuration: depth, widths, K, B, P and L all vary with the seed.
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let heads = pick(&mut r, 1, 2);
        let mut cfg = tiny_config(seed);
        cfg.depth = pick(&mut r, 1, 3);
        cfg.heads = heads;
        cfg.text_width = 8 * pick(&mut r, 1, 2);
        cfg.image_width = 8 * pick(&mut r, 1, 2);
        cfg.d_joint = pick(&mut r, 3, 6);
        let k = pick(&mut r, 2, 4);
        let b = pick(&mut r, 1, 3);
        let p = pick(&mut r, 1, 2);
        let l = pick(&mut r, 1, cfg.depth);
        let enc = encoders(&cfg);
        let patches = (0..b).map(|_| random_patches(&cfg, &mut r)).collect();
        let labels = (0..b).map(|_| r.random_range(0..k)).collect();
        let bank = unit_bank(&cfg, p, l, &mut r);
        Self {
            inputs: classes(k),
            cfg,
            enc,
            patches,
            labels,
            bank,
        }
    }

    pub fn batch<'a>(&'a self, unprompted: &'a [Vec<f64>]) -> Vec<BatchItem<'a>> {
        self.patches
            .iter()
            .zip(&self.labels)
            .zip(unprompted)
            .map(|((p, &y), u)| BatchItem { patches: p, class_id: y, unprompted: u })
            .collect()
    }

    pub fn unprompted(&self) -> Vec<Vec<f64>> {
        self.patches
            .iter()
            .map(|p| self.enc.encode_image_unprompted(p).unwrap())
            .collect()
    }
}

/// Encoder sized for the default meta-domain grid (16 patches of width 16).
pub fn grid_config(seed: u64, depth: usize, classes: usize) -> EncoderConfig {
    EncoderConfig {
        depth,
        vocab: episodic_prompt::meta_domain::required_vocab(classes).max(16),
        seed,
        ..EncoderConfig::default()
    }
}

/// Samples from `domains` random domains, `per_cell` per (class, domain).
pub fn synthetic_samples(seed: u64, classes: usize, domains: usize, per_cell: usize) -> Vec<Sample> {
    let spec = MetaDomainSpec {
        classes,
        seed,
        ..MetaDomainSpec::default()
    };
    let meta = MetaDomain::new(&spec).unwrap();
    let doms = sample_domains(&spec, domains, seed + 1).unwrap();
    let all: Vec<usize> = (0..classes).collect();
    meta.generate(&doms, &all, per_cell, seed + 2).unwrap().samples
}

pub fn sample_features(enc: &DualEncoder, samples: &[Sample]) -> Vec<Vec<f64>> {
    samples.iter().map(|s| enc.encode_image_unprompted(&s.patches).unwrap()).collect()
}

pub fn pool_items<'s>(samples: &'s [Sample], feats: &'s [Vec<f64>]) -> Vec<PoolItem<'s>> {
    samples
        .iter()
        .zip(feats)
        .map(|(s, f)| PoolItem {
            item: BatchItem {
                patches: &s.patches,
                class_id: s.class_id,
                unprompted: f,
            },
            domain_id: s.domain_id,
        })
        .collect()
}

/// Central-difference check of `kind` on a toy configuration.
pub fn fd_report(toy: &Toy, kind: LossKind, tau: f64, h: f64) -> GradCheckReport {
    let classes = ClassBank::new(&toy.enc, toy.inputs.clone()).unwrap();
    let obj = Objective::new(&toy.enc, &classes, tau).unwrap();
    let unprompted = toy.unprompted();
    let batch: Vec<BatchItem> = toy
        .patches
        .iter()
        .zip(&toy.labels)
        .zip(&unprompted)
        .map(|((p, &y), u)| BatchItem { patches: p, class_id: y, unprompted: u })
        .collect();
    let out = obj.loss_and_grad(&toy.bank, &batch, kind, false).unwrap();
    let bank = &toy.bank;
    let f = |params: &[Tensor]| {
        let b = PromptBank::from_parts(
            bank.prompt_len(),
            bank.prompt_layers(),
            bank.d_text(),
            bank.d_img(),
            params[0].data().to_vec(),
            params[1].data().to_vec(),
        )?;
        Ok(obj.loss(&b, &batch, kind)?.total)
    };
    finite_difference_check(
        f,
        &[bank.text().clone(), bank.image().clone()],
        &[out.grad_text, out.grad_image],
        h,
    )
    .unwrap()
}
