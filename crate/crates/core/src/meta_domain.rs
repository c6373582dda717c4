//! Synthetic attribute-composed data with per-domain attribute distributions.
//!
//! Every image is a grid of patches. Each patch is the sum of a shape
//! pattern and a texture pattern (both fixed by the class) and a color
//! vector drawn per patch from the domain's color distribution, plus
//! `Normal(0, σ²)` noise. Domains differ only in their color distribution.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::dual_encoder::ClassTextInput;
use crate::error::{Error, Result};

/// Template token ids shared by every class ("a photo of a").
pub const TEMPLATE_TOKENS: [usize; 3] = [0, 1, 2];
pub const NAME_TOKENS_PER_CLASS: usize = 2;
pub const BLACK: usize = 0;
pub const WHITE: usize = 1;

pub fn class_name_tokens(class_id: usize) -> Vec<usize> {
    let base = TEMPLATE_TOKENS.len() + NAME_TOKENS_PER_CLASS * class_id;
    (base..base + NAME_TOKENS_PER_CLASS).collect()
}

pub fn class_text_input(class_id: usize) -> ClassTextInput {
    ClassTextInput {
        class_id,
        name_tokens: class_name_tokens(class_id),
        template_tokens: TEMPLATE_TOKENS.to_vec(),
    }
}

/// Smallest vocabulary that holds the template and every class name.
pub fn required_vocab(classes: usize) -> usize {
    TEMPLATE_TOKENS.len() + NAME_TOKENS_PER_CLASS * classes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeRole {
    ClassDefining,
    DomainVarying,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub values: usize,
    pub role: AttributeRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaDomainSpec {
    /// Class count `K`; one shape per class.
    pub classes: usize,
    pub colors: usize,
    pub textures: usize,
    /// Side of the square patch grid.
    pub grid: usize,
    pub patch_dim: usize,
    /// Standard deviation of additive patch noise.
    pub noise: f64,
    /// Scale of the color vectors relative to shape/texture patterns.
    pub color_strength: f64,
    pub seed: u64,
}

impl Default for MetaDomainSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            colors: 8,
            textures: 4,
            grid: 4,
            patch_dim: 16,
            noise: 0.1,
            color_strength: 1.0,
            seed: 0,
        }
    }
}

impl MetaDomainSpec {
    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn attributes(&self) -> Vec<Attribute> {
        vec![
            Attribute {
                name: "color".into(),
                values: self.colors,
                role: AttributeRole::DomainVarying,
            },
            Attribute {
                name: "shape".into(),
                values: self.classes,
                role: AttributeRole::ClassDefining,
            },
            Attribute {
                name: "texture".into(),
                values: self.textures,
                role: AttributeRole::ClassDefining,
            },
        ]
    }

    /// `(shape, texture)` for a class. Shapes alone are distinct per class.
    pub fn class_attributes(&self, class_id: usize) -> (usize, usize) {
        (class_id, class_id % self.textures)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("data.classes must be at least 2, got {}", self.classes)));
        }
        if self.colors < 2 || self.textures == 0 || self.grid == 0 || self.patch_dim == 0 {
            return Err(Error::Config(
                "data.colors must be >= 2 and textures, grid, patch_dim positive".into(),
            ));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("data.noise must be >= 0, got {}", self.noise)));
        }
        if !(self.color_strength >= 0.0) || !self.color_strength.is_finite() {
            return Err(Error::Config("data.color_strength must be >= 0".into()));
        }
        Ok(())
    }
}

/// One data domain: a categorical distribution over colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    pub color: Vec<f64>,
}

impl DomainSpec {
    /// Two-valued color distribution on black and white.
    pub fn sketch(id: usize, colors: usize) -> Self {
        let mut color = vec![0.0; colors];
        color[BLACK] = 0.5;
        color[WHITE] = 0.5;
        Self { id, color }
    }

    /// Total-variation distance between color distributions.
    pub fn total_variation(&self, other: &DomainSpec) -> f64 {
        0.5 * self
            .color
            .iter()
            .zip(&other.color)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    fn draw_color(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.color.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // Rounding can leave acc a hair under 1; fall back to the last
        // value with mass.
        self.color.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

/// `N` domains whose color distributions are drawn from a symmetric Dirichlet(1).
pub fn sample_domains(spec: &MetaDomainSpec, n: usize, seed: u64) -> Result<Vec<DomainSpec>> {
    if n < 1 {
        return Err(Error::Config("need at least one domain".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|id| {
            let raw: Vec<f64> = (0..spec.colors).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = raw.iter().sum();
            DomainSpec {
                id,
                color: raw.iter().map(|v| v / total).collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub class_id: usize,
    pub domain_id: usize,
    /// `[patches, patch_dim]`
    pub patches: Tensor,
    pub tokens: Vec<usize>,
    /// Per-patch color index; empty when unknown (e.g. imported fixtures).
    pub colors: Vec<usize>,
}

/// Fixed pattern vectors derived from the meta-domain seed.
#[derive(Debug, Clone)]
pub struct MetaDomain {
    spec: MetaDomainSpec,
    /// `[classes][patches * patch_dim]`
    shape_basis: Vec<Vec<f64>>,
    /// `[textures][patches * patch_dim]`
    texture_basis: Vec<Vec<f64>>,
    /// `[colors][patch_dim]`
    color_basis: Vec<Vec<f64>>,
}

impl MetaDomain {
    pub fn new(spec: &MetaDomainSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let span = spec.patches() * spec.patch_dim;
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| scale * normal.sample(&mut rng)).collect()
        };
        let shape_basis = (0..spec.classes).map(|_| draw(span, 1.0)).collect();
        let texture_basis = (0..spec.textures).map(|_| draw(span, 1.0)).collect();
        let color_basis = (0..spec.colors)
            .map(|_| draw(spec.patch_dim, spec.color_strength))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            shape_basis,
            texture_basis,
            color_basis,
        })
    }

    pub fn spec(&self) -> &MetaDomainSpec {
        &self.spec
    }

    pub fn color_basis(&self, color: usize) -> &[f64] {
        &self.color_basis[color]
    }

    /// Renders one sample; fully determined by `(domain, class_id, seed)`.
    pub fn render_sample(&self, domain: &DomainSpec, class_id: usize, seed: u64) -> Result<Sample> {
        let spec = &self.spec;
        if class_id >= spec.classes {
            return Err(Error::Input(format!("class {class_id} outside 0..{}", spec.classes)));
        }
        if domain.color.len() != spec.colors {
            return Err(Error::Input(format!(
                "domain {} has {} color values, meta-domain has {}",
                domain.id,
                domain.color.len(),
                spec.colors
            )));
        }
        let (shape, texture) = spec.class_attributes(class_id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let d = spec.patch_dim;
        let mut data = Vec::with_capacity(spec.patches() * d);
        let mut colors = Vec::with_capacity(spec.patches());
        for p in 0..spec.patches() {
            let color = domain.draw_color(&mut rng);
            colors.push(color);
            for j in 0..d {
                let base = self.shape_basis[shape][p * d + j]
                    + self.texture_basis[texture][p * d + j]
                    + self.color_basis[color][j];
                let eps: f64 = noise.sample(&mut rng);
                data.push(base + spec.noise * eps);
            }
        }
        Ok(Sample {
            id: seed,
            class_id,
            domain_id: domain.id,
            patches: Tensor::new(vec![spec.patches(), d], data)?,
            tokens: class_name_tokens(class_id),
            colors,
        })
    }

    /// `per_cell` samples for every `(domain, class)` pair.
    pub fn generate(&self, domains: &[DomainSpec], classes: &[usize], per_cell: usize, seed: u64) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(domains.len() * classes.len() * per_cell);
        for domain in domains {
            for &class in classes {
                for j in 0..per_cell {
                    let s = mix_seed(seed, &[domain.id as u64, class as u64, j as u64]);
                    samples.push(self.render_sample(domain, class, s)?);
                }
            }
        }
        Ok(Dataset { samples })
    }

    /// Brute-force decoder: the class whose shape and texture patterns leave
    /// per-patch residuals closest to some color vector.
    pub fn decode_class(&self, patches: &Tensor) -> usize {
        let d = self.spec.patch_dim;
        let data = patches.data();
        let mut best = (f64::INFINITY, 0);
        for class in 0..self.spec.classes {
            let (shape, texture) = self.spec.class_attributes(class);
            let mut cost = 0.0;
            for p in 0..self.spec.patches() {
                let residual: Vec<f64> = (0..d)
                    .map(|j| {
                        data[p * d + j]
                            - self.shape_basis[shape][p * d + j]
                            - self.texture_basis[texture][p * d + j]
                    })
                    .collect();
                cost += self
                    .color_basis
                    .iter()
                    .map(|c| c.iter().zip(&residual).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
            }
            if cost < best.0 {
                best = (cost, class);
            }
        }
        best.1
    }

    /// Per-patch color recovered from a noise-free sample of known class.
    pub fn decode_colors(&self, patches: &Tensor, class_id: usize) -> Vec<usize> {
        let d = self.spec.patch_dim;
        let (shape, texture) = self.spec.class_attributes(class_id);
        let data = patches.data();
        (0..self.spec.patches())
            .map(|p| {
                let residual: Vec<f64> = (0..d)
                    .map(|j| {
                        data[p * d + j]
                            - self.shape_basis[shape][p * d + j]
                            - self.texture_basis[texture][p * d + j]
                    })
                    .collect();
                let dist = |c: &Vec<f64>| c.iter().zip(&residual).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                (0..self.spec.colors)
                    .min_by(|&a, &b| dist(&self.color_basis[a]).total_cmp(&dist(&self.color_basis[b])))
                    .expect("at least two colors")
            })
            .collect()
    }
}

/// SplitMix64 over a seed and a key path.
pub fn mix_seed(seed: u64, keys: &[u64]) -> u64 {
    let mut z = seed;
    for k in keys.iter().chain(std::iter::once(&0x5EED)) {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(k.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z = x ^ (x >> 31);
    }
    z
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

const FIXTURE_HEADER: &str = "# episodic-prompt dataset v1";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn filter(&self, keep: impl Fn(&Sample) -> bool) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Writes the plain-text fixture format:
    ///
    /// ```text
    /// # episodic-prompt dataset v1
    /// # patches=<n> patch_dim=<d>
    /// <id>\t<class>\t<domain>\t<v0,v1,...>\t<t0,t1,...>\t<c0,c1,...>
    /// ```
    ///
    /// Patch values use Rust's shortest round-trip float formatting, so
    /// import reproduces them bit-exactly. The color column may be empty.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let (patches, dim) = self
            .samples
            .first()
            .map(|s| (s.patches.shape()[0], s.patches.shape()[1]))
            .unwrap_or((0, 0));
        writeln!(w, "{FIXTURE_HEADER}")?;
        writeln!(w, "# patches={patches} patch_dim={dim}")?;
        let mut line = String::new();
        for s in &self.samples {
            line.clear();
            write!(line, "{}\t{}\t{}\t", s.id, s.class_id, s.domain_id).expect("string write");
            join(&mut line, s.patches.data().iter().map(|v| format!("{v:?}")));
            line.push('\t');
            join(&mut line, s.tokens.iter().map(usize::to_string));
            line.push('\t');
            join(&mut line, s.colors.iter().map(usize::to_string));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let bad = |n: usize, msg: &str| Error::Data(format!("fixture line {}: {msg}", n + 1));
        match lines.next() {
            Some((_, Ok(h))) if h == FIXTURE_HEADER => {}
            _ => return Err(bad(0, "missing header")),
        }
        let (n, dims) = lines.next().ok_or_else(|| bad(1, "missing dimensions"))?;
        let dims = dims?;
        let parse_dim = |key: &str| -> Result<usize> {
            dims.split_whitespace()
                .find_map(|kv| kv.strip_prefix(key))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(n, &format!("missing {key}")))
        };
        let patches = parse_dim("# patches=").or_else(|_| parse_dim("patches="))?;
        let dim = parse_dim("patch_dim=")?;
        let mut samples = Vec::new();
        for (n, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(bad(n, &format!("expected 6 tab-separated fields, got {}", fields.len())));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad(n, &format!("bad integer {s:?}")));
            let list = |s: &str| -> Result<Vec<usize>> {
                if s.is_empty() {
                    return Ok(Vec::new());
                }
                s.split(',')
                    .map(|v| v.parse().map_err(|_| bad(n, &format!("bad integer {v:?}"))))
                    .collect()
            };
            let values: Vec<f64> = fields[3]
                .split(',')
                .map(|v| v.parse().map_err(|_| bad(n, &format!("bad float {v:?}"))))
                .collect::<Result<_>>()?;
            if values.len() != patches * dim {
                return Err(bad(n, &format!("expected {} patch values, got {}", patches * dim, values.len())));
            }
            samples.push(Sample {
                id: num(fields[0])?,
                class_id: num(fields[1])? as usize,
                domain_id: num(fields[2])? as usize,
                patches: Tensor::new(vec![patches, dim], values)?,
                tokens: list(fields[4])?,
                colors: list(fields[5])?,
            });
        }
        Ok(Dataset { samples })
    }
}

fn join(out: &mut String, items: impl Iterator<Item = String>) {
    for (i, item) in items.enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&item);
    }
}

/// Shuffles the classes and splits them into base (`⌈K/2⌉`) and new (`⌊K/2⌋`).
pub fn split_base_new(classes: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes to split, got {classes}")));
    }
    let mut ids: Vec<usize> = (0..classes).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut base = ids[..classes.div_ceil(2)].to_vec();
    let mut new = ids[classes.div_ceil(2)..].to_vec();
    base.sort_unstable();
    new.sort_unstable();
    Ok((base, new))
}

/// How a few-shot pool is drawn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolSpec {
    pub classes: Vec<usize>,
    pub domains: Vec<usize>,
    pub shots: usize,
    /// `shots` per (class, domain) cell rather than per class.
    pub per_domain: bool,
}

/// Indices into `dataset` with exactly `shots` samples per cell.
pub fn few_shot_pool(dataset: &Dataset, spec: &PoolSpec, seed: u64) -> Result<Vec<usize>> {
    if spec.shots == 0 {
        return Err(Error::Data("few-shot pool with 0 shots is empty".into()));
    }
    let cells: Vec<(usize, Option<usize>)> = if spec.per_domain {
        spec.classes
            .iter()
            .flat_map(|&c| spec.domains.iter().map(move |&d| (c, Some(d))))
            .collect()
    } else {
        spec.classes.iter().map(|&c| (c, None)).collect()
    };
    let mut pool = Vec::with_capacity(cells.len() * spec.shots);
    for (class, domain) in cells {
        let mut candidates: Vec<usize> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                s.class_id == class
                    && spec.domains.contains(&s.domain_id)
                    && domain.is_none_or(|d| s.domain_id == d)
            })
            .map(|(i, _)| i)
            .collect();
        if candidates.len() < spec.shots {
            let cell = match domain {
                Some(d) => format!("class {class}, domain {d}"),
                None => format!("class {class}"),
            };
            return Err(Error::Data(format!(
                "cell ({cell}) has {} samples, {} shots requested",
                candidates.len(),
                spec.shots
            )));
        }
        let cell_seed = mix_seed(seed, &[class as u64, domain.map_or(u64::MAX, |d| d as u64)]);
        candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(cell_seed));
        candidates.truncate(spec.shots);
        candidates.sort_unstable();
        pool.extend(candidates);
    }
    Ok(pool)
}

/// Splits `domains` into sources and the held-out `target`.
pub fn leave_one_domain_out(domains: &[usize], target: usize) -> Result<(Vec<usize>, usize)> {
    if domains.len() < 2 {
        return Err(Error::Config(format!("need at least 2 domains, got {}", domains.len())));
    }
    if !domains.contains(&target) {
        return Err(Error::Config(format!("target domain {target} is not one of {domains:?}")));
    }
    Ok((domains.iter().copied().filter(|d| *d != target).collect(), target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn clean() -> MetaDomainSpec {
        MetaDomainSpec {
            noise: 0.0,
            ..MetaDomainSpec::default()
        }
    }

    #[test]
    fn single_domain_is_a_distribution() {
        let d = sample_domains(&MetaDomainSpec::default(), 1, 3).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d[0].color.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d[0].color.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn domains_are_seeded() {
        let spec = MetaDomainSpec::default();
        assert_eq!(sample_domains(&spec, 4, 9).unwrap(), sample_domains(&spec, 4, 9).unwrap());
        assert!(matches!(sample_domains(&spec, 0, 9), Err(Error::Config(_))));
    }

    #[test]
    fn four_domains_pairwise_distinct() {
        let d = sample_domains(&MetaDomainSpec::default(), 4, 0).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(d[i].total_variation(&d[j]) > 0.0);
            }
        }
    }

    #[test]
    fn noise_free_render_is_reproducible() {
        let meta = MetaDomain::new(&clean()).unwrap();
        let dom = &sample_domains(meta.spec(), 1, 0).unwrap()[0];
        let a = meta.render_sample(dom, 3, 42).unwrap();
        let b = meta.render_sample(dom, 3, 42).unwrap();
        assert_eq!(a, b);
        let c = meta.render_sample(dom, 4, 42).unwrap();
        assert_eq!(a.colors, c.colors);
        assert_ne!(a.patches, c.patches);
    }

    #[test]
    fn invalid_class_rejected() {
        let meta = MetaDomain::new(&clean()).unwrap();
        let dom = &sample_domains(meta.spec(), 1, 0).unwrap()[0];
        assert!(matches!(meta.render_sample(dom, 8, 0), Err(Error::Input(_))));
    }

    #[test]
    fn sketch_domain_uses_two_colors() {
        let meta = MetaDomain::new(&clean()).unwrap();
        let sketch = DomainSpec::sketch(0, meta.spec().colors);
        for seed in 0..20 {
            let s = meta.render_sample(&sketch, (seed % 8) as usize, seed).unwrap();
            let decoded: BTreeSet<usize> = meta.decode_colors(&s.patches, s.class_id).into_iter().collect();
            assert!(decoded.len() <= 2);
            assert!(decoded.iter().all(|c| *c == BLACK || *c == WHITE));
            assert_eq!(decoded, s.colors.iter().copied().collect());
        }
    }

    #[test]
    fn class_recoverable_regardless_of_domain() {
        let meta = MetaDomain::new(&clean()).unwrap();
        let domains = sample_domains(meta.spec(), 4, 1).unwrap();
        let classes: Vec<usize> = (0..8).collect();
        let data = meta.generate(&domains, &classes, 3, 5).unwrap();
        assert_eq!(data.len(), 4 * 8 * 3);
        for s in &data.samples {
            assert_eq!(meta.decode_class(&s.patches), s.class_id);
        }
    }

    #[test]
    fn base_new_splits() {
        let (b, n) = split_base_new(10, 0).unwrap();
        assert_eq!((b.len(), n.len()), (5, 5));
        let (b, n) = split_base_new(5, 0).unwrap();
        assert_eq!((b.len(), n.len()), (3, 2));
        let all: BTreeSet<usize> = b.iter().chain(&n).copied().collect();
        assert_eq!(all.len(), 5);
        assert!(b.iter().all(|c| !n.contains(c)));
        assert_eq!(split_base_new(5, 0).unwrap(), (b, n));
        assert!(matches!(split_base_new(1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn pool_sizes() {
        let meta = MetaDomain::new(&MetaDomainSpec::default()).unwrap();
        let domains = sample_domains(meta.spec(), 3, 0).unwrap();
        let all: Vec<usize> = (0..8).collect();
        let data = meta.generate(&domains, &all, 20, 1).unwrap();

        let base: Vec<usize> = (0..5).collect();
        let spec = PoolSpec {
            classes: base.clone(),
            domains: vec![0, 1, 2],
            shots: 16,
            per_domain: false,
        };
        let pool = few_shot_pool(&data, &spec, 0).unwrap();
        assert_eq!(pool.len(), 80);
        assert!(pool.iter().all(|&i| base.contains(&data.samples[i].class_id)));
        assert_eq!(pool, few_shot_pool(&data, &spec, 0).unwrap());

        let spec = PoolSpec {
            classes: (0..4).collect(),
            domains: vec![0, 1, 2],
            shots: 1,
            per_domain: true,
        };
        assert_eq!(few_shot_pool(&data, &spec, 0).unwrap().len(), 12);

        let zero = PoolSpec { shots: 0, ..spec.clone() };
        assert!(matches!(few_shot_pool(&data, &zero, 0), Err(Error::Data(_))));
        let greedy = PoolSpec { shots: 21, ..spec };
        let err = few_shot_pool(&data, &greedy, 0).unwrap_err().to_string();
        assert!(err.contains("class 0, domain 0"), "{err}");
    }

    #[test]
    fn leave_one_out() {
        assert_eq!(leave_one_domain_out(&[0, 1, 2, 3], 2).unwrap(), (vec![0, 1, 3], 2));
        assert_eq!(leave_one_domain_out(&[0, 1], 0).unwrap().0.len(), 1);
        assert!(matches!(leave_one_domain_out(&[0, 1], 5), Err(Error::Config(_))));
        let domains = [0, 1, 2, 3];
        let targets: BTreeSet<usize> = domains
            .iter()
            .map(|&t| leave_one_domain_out(&domains, t).unwrap().1)
            .collect();
        assert_eq!(targets.len(), 4);
    }

    #[test]
    fn fixture_round_trip_is_bit_exact() {
        let meta = MetaDomain::new(&MetaDomainSpec::default()).unwrap();
        let domains = sample_domains(meta.spec(), 2, 0).unwrap();
        let data = meta.generate(&domains, &[0, 1, 2], 2, 7).unwrap();
        let mut buf = Vec::new();
        data.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn fixture_errors_name_the_line() {
        let text = "# episodic-prompt dataset v1\n# patches=1 patch_dim=2\n1\t0\t0\t0.5\t3,4\t\n";
        let err = Dataset::read_from(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
