//! Prediction heads and the asymmetric contrastive loss.
//!
//! * `p_t`: unprompted image feature against prompted class-text features.
//! * `p_i`: prompted image feature against unprompted class-text features.
//! * `p_o`: the element-wise mean of the two.
//!
//! `L_AC = L_o + L_t + L_i`, each a batch-mean cross-entropy. The batch is
//! evaluated as one head tape fed by a shared text tape and one image tape
//! per sample; gradients flow back through them as vector-Jacobian products.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::dual_encoder::{ClassTextInput, DualEncoder, Prompted};
use crate::error::{Error, Result};
use crate::prompt_bank::PromptBank;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Which loss a gradient is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `L_o + L_t + L_i`
    Ac,
    /// `L_t`
    Text,
    /// `L_i`
    Image,
    /// `L_t + L_i`
    TextImage,
    /// Single contrastive loss between prompted image and prompted text.
    Symmetric,
}

impl LossKind {
    fn needs_text(self) -> bool {
        !matches!(self, LossKind::Image)
    }

    fn needs_image(self) -> bool {
        !matches!(self, LossKind::Text)
    }
}

/// Per-class text features. Unprompted features are computed once; prompted
/// ones depend on the textual prompts and are recomputed per pass.
#[derive(Debug, Clone)]
pub struct ClassBank {
    inputs: Vec<ClassTextInput>,
    unprompted: Vec<f64>,
    d_joint: usize,
}

impl ClassBank {
    pub fn new(encoders: &DualEncoder, inputs: Vec<ClassTextInput>) -> Result<Self> {
        if inputs.len() < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", inputs.len())));
        }
        let unprompted: Vec<Vec<f64>> = inputs
            .par_iter()
            .map(|c| encoders.encode_text_unprompted(c))
            .collect::<Result<_>>()?;
        Ok(Self {
            inputs,
            unprompted: unprompted.concat(),
            d_joint: encoders.config().d_joint,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.inputs.iter().map(|c| c.class_id).collect()
    }

    pub fn inputs(&self) -> &[ClassTextInput] {
        &self.inputs
    }

    /// Position of a global class id within this bank.
    pub fn local_index(&self, class_id: usize) -> Option<usize> {
        self.inputs.iter().position(|c| c.class_id == class_id)
    }

    /// Unprompted features `h_i`, `[K, d_joint]` row-major.
    pub fn unprompted(&self) -> &[f64] {
        &self.unprompted
    }

    pub fn d_joint(&self) -> usize {
        self.d_joint
    }

    /// Prompted features `g(t_i)` for every class, `[K, d_joint]`.
    pub fn prompted(&self, encoders: &DualEncoder, text_prompts: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (g, _) = self.prompted_on_tape(&mut tape, encoders, text_prompts)?;
        Ok(tape.value(g).to_vec())
    }

    fn prompted_on_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        encoders: &'a DualEncoder,
        text_prompts: &'a Tensor,
    ) -> Result<(Var, Var)> {
        let mut rows = Vec::with_capacity(self.len());
        let mut theta = None;
        for input in &self.inputs {
            let Prompted { prompts, feature } = match theta {
                None => encoders.text().encode_prompted(tape, input, text_prompts)?,
                Some((var, layers, len)) => Prompted {
                    prompts: var,
                    feature: encoders.text().encode_prompted_var(tape, input, var, layers, len)?,
                },
            };
            let shape = text_prompts.shape();
            theta = Some((prompts, shape[0], shape[1]));
            rows.push(feature);
        }
        let g = tape.concat_rows(&rows)?;
        Ok((g, theta.expect("at least two classes").0))
    }
}

/// Row-major `[B, K]` distributions from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProbs {
    pub classes: usize,
    pub p_t: Vec<f64>,
    pub p_i: Vec<f64>,
    pub p_o: Vec<f64>,
    /// Prompted-image vs prompted-text head, present when computed.
    pub p_sym: Option<Vec<f64>>,
    pub temperature: f64,
}

impl HeadProbs {
    pub fn rows(&self) -> usize {
        self.p_o.len() / self.classes
    }

    pub fn row(probs: &[f64], classes: usize, i: usize) -> &[f64] {
        &probs[i * classes..(i + 1) * classes]
    }
}

/// One labelled sample as seen by the loss.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'s> {
    pub patches: &'s Tensor,
    pub class_id: usize,
    /// Cached unprompted image feature `x`.
    pub unprompted: &'s [f64],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub ac: f64,
    pub o: f64,
    pub t: f64,
    pub i: f64,
    pub sym: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub values: LossValues,
    /// The loss the gradients are of.
    pub total: f64,
    /// `d total / d θ^T`, zeros when the loss does not reach the text prompts.
    pub grad_text: Vec<f64>,
    /// `d total / d θ^I`, zeros when the loss does not reach the image prompts.
    pub grad_image: Vec<f64>,
    pub probs: HeadProbs,
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn head<'a>(tape: &mut Tape<'a>, query: Var, keys: Var, tau: f64) -> Result<Var> {
    let sims = tape.matmul_t(query, keys)?;
    let logits = tape.scale(sims, 1.0 / tau);
    tape.softmax(logits)
}

fn overall<'a>(tape: &mut Tape<'a>, p_t: Var, p_i: Var) -> Result<Var> {
    let s = tape.add(p_t, p_i)?;
    Ok(tape.scale(s, 0.5))
}

fn single_head(query: &[f64], keys: &[f64], d: usize, tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if d == 0 || !keys.len().is_multiple_of(d) || query.len() != d {
        return Err(Error::dim("head", &[query.len()], &[keys.len(), d]));
    }
    let k = keys.len() / d;
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {k}")));
    }
    let mut tape = Tape::new();
    let q = tape.constant(vec![1, d], query)?;
    let c = tape.constant(vec![k, d], keys)?;
    let p = head(&mut tape, q, c, tau)?;
    Ok(tape.value(p).to_vec())
}

/// `p_t(y = i | x) = softmax_i(sim(x, g(t_i)) / τ)` for an unprompted image
/// feature `x` and prompted class features `[K, d]`.
pub fn prob_text_head(x_unprompted: &[f64], prompted_class_feats: &[f64], tau: f64) -> Result<Vec<f64>> {
    single_head(x_unprompted, prompted_class_feats, x_unprompted.len(), tau)
}

/// `p_i(y = i | x) = softmax_i(sim(x̃, h_i) / τ)` for a prompted image feature
/// and unprompted class features `[K, d]`.
pub fn prob_image_head(x_prompted: &[f64], unprompted_class_feats: &[f64], tau: f64) -> Result<Vec<f64>> {
    single_head(x_prompted, unprompted_class_feats, x_prompted.len(), tau)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// `p_o = (p_t + p_i) / 2`.
pub fn prob_overall(p_t: &[f64], p_i: &[f64]) -> Result<Vec<f64>> {
    if p_t.len() != p_i.len() {
        return Err(Error::dim("prob_overall", &[p_t.len()], &[p_i.len()]));
    }
    Ok(p_t.iter().zip(p_i).map(|(a, b)| 0.5 * (a + b)).collect())
}

/// Loss evaluation over a fixed encoder pair and class bank.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'e> {
    pub encoders: &'e DualEncoder,
    pub classes: &'e ClassBank,
    pub temperature: f64,
}

struct Heads {
    values: LossValues,
    p_t: Option<Var>,
    p_i: Option<Var>,
    p_o: Option<Var>,
    p_sym: Option<Var>,
    total: Var,
}

/// Per-subset gradients from [`Objective::subset_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetGrad {
    pub total: f64,
    pub grad_text: Vec<f64>,
    pub grad_image: Vec<f64>,
}

struct ImagePass<'a> {
    tape: Tape<'a>,
    out: Prompted,
}

impl<'e> Objective<'e> {
    pub fn new(encoders: &'e DualEncoder, classes: &'e ClassBank, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(Self {
            encoders,
            classes,
            temperature,
        })
    }

    fn labels(&self, batch: &[BatchItem<'_>]) -> Result<Vec<usize>> {
        batch
            .iter()
            .map(|item| {
                self.classes.local_index(item.class_id).ok_or_else(|| {
                    Error::Input(format!("class {} is not in the class bank", item.class_id))
                })
            })
            .collect()
    }

    /// Forward pass with gradients of `kind` with respect to both prompt sets.
    /// Streams a loss does not use are skipped unless `full_forward` is set.
    pub fn loss_and_grad(
        &self,
        bank: &PromptBank,
        batch: &[BatchItem<'_>],
        kind: LossKind,
        full_forward: bool,
    ) -> Result<LossOutput> {
        self.run(bank, batch, kind, full_forward, true)
    }

    /// Loss values only.
    pub fn loss(&self, bank: &PromptBank, batch: &[BatchItem<'_>], kind: LossKind) -> Result<LossOutput> {
        self.run(bank, batch, kind, false, false)
    }

    /// Head distributions for every item, no labels needed.
    pub fn probabilities(&self, bank: &PromptBank, batch: &[BatchItem<'_>], symmetric: bool) -> Result<HeadProbs> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let d = self.classes.d_joint();
        let k = self.classes.len();
        let prompted_classes = self.classes.prompted(self.encoders, bank.text())?;
        let x_tilde: Vec<Vec<f64>> = batch
            .par_iter()
            .map(|item| self.encoders.encode_image_prompted(item.patches, bank.image()))
            .collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let g = tape.constant(vec![k, d], &prompted_classes)?;
        let h = tape.constant(vec![k, d], self.classes.unprompted())?;
        let x_rows: Vec<f64> = batch.iter().flat_map(|b| b.unprompted.iter().copied()).collect();
        let xt_rows: Vec<f64> = x_tilde.concat();
        let x = tape.leaf(vec![batch.len(), d], x_rows, false)?;
        let xt = tape.leaf(vec![batch.len(), d], xt_rows, false)?;
        let p_t = head(&mut tape, x, g, self.temperature)?;
        let p_i = head(&mut tape, xt, h, self.temperature)?;
        let p_o = overall(&mut tape, p_t, p_i)?;
        let p_sym = if symmetric {
            let s = head(&mut tape, xt, g, self.temperature)?;
            Some(tape.value(s).to_vec())
        } else {
            None
        };
        Ok(HeadProbs {
            classes: k,
            p_t: tape.value(p_t).to_vec(),
            p_i: tape.value(p_i).to_vec(),
            p_o: tape.value(p_o).to_vec(),
            p_sym,
            temperature: self.temperature,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn heads(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        g: Option<Var>,
        xt: Option<Var>,
        h: Var,
        labels: &[usize],
        kind: LossKind,
        full_forward: bool,
    ) -> Result<Heads> {
        let mut values = LossValues::default();
        let mut p_t = None;
        let mut p_i = None;
        let mut l_t = None;
        let mut l_i = None;
        if let Some(g) = g {
            let p = head(tape, x, g, self.temperature)?;
            let l = tape.cross_entropy(p, labels)?;
            values.t = tape.item(l);
            p_t = Some(p);
            l_t = Some(l);
        }
        if let Some(xt) = xt {
            let p = head(tape, xt, h, self.temperature)?;
            let l = tape.cross_entropy(p, labels)?;
            values.i = tape.item(l);
            p_i = Some(p);
            l_i = Some(l);
        }
        let mut p_o = None;
        let mut l_o = None;
        if let (Some(pt), Some(pi)) = (p_t, p_i) {
            let p = overall(tape, pt, pi)?;
            let l = tape.cross_entropy(p, labels)?;
            values.o = tape.item(l);
            values.ac = values.o + values.t + values.i;
            p_o = Some(p);
            l_o = Some(l);
        }
        let mut p_sym = None;
        let mut l_sym = None;
        if let (Some(g), Some(xt)) = (g, xt) {
            if kind == LossKind::Symmetric || full_forward {
                let p = head(tape, xt, g, self.temperature)?;
                let l = tape.cross_entropy(p, labels)?;
                values.sym = Some(tape.item(l));
                p_sym = Some(p);
                l_sym = Some(l);
            }
        }

        let missing = || Error::Input(format!("{kind:?} loss needs a stream that was not computed"));
        let total = match kind {
            LossKind::Ac => {
                let (lo, lt, li) = (l_o.ok_or_else(missing)?, l_t.ok_or_else(missing)?, l_i.ok_or_else(missing)?);
                let s = tape.add(lo, lt)?;
                tape.add(s, li)?
            }
            LossKind::Text => l_t.ok_or_else(missing)?,
            LossKind::Image => l_i.ok_or_else(missing)?,
            LossKind::TextImage => {
                let (lt, li) = (l_t.ok_or_else(missing)?, l_i.ok_or_else(missing)?);
                tape.add(lt, li)?
            }
            LossKind::Symmetric => l_sym.ok_or_else(missing)?,
        };
        Ok(Heads {
            values,
            p_t,
            p_i,
            p_o,
            p_sym,
            total,
        })
    }

    /// Gradients of the mean `kind` loss over each subset of `batch`, all at
    /// the same prompts. Every encoder pass runs once per sample; only the
    /// heads and the text backward run per subset.
    pub fn subset_gradients(
        &self,
        bank: &PromptBank,
        batch: &[BatchItem<'_>],
        kind: LossKind,
        subsets: &[Vec<usize>],
    ) -> Result<Vec<SubsetGrad>> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for s in subsets {
            if s.is_empty() {
                return Err(Error::Input("empty subset".into()));
            }
            if let Some(&bad) = s.iter().find(|&&i| i >= batch.len()) {
                return Err(Error::Index {
                    index: bad,
                    len: batch.len(),
                });
            }
        }
        let labels = self.labels(batch)?;
        let d = self.classes.d_joint();
        let k = self.classes.len();
        let b = batch.len();

        let mut text_tape = Tape::new();
        let text_nodes = if kind.needs_text() {
            Some(self.classes.prompted_on_tape(&mut text_tape, self.encoders, bank.text())?)
        } else {
            None
        };
        let mut image_passes: Vec<ImagePass<'_>> = if kind.needs_image() {
            batch
                .par_iter()
                .map(|item| {
                    let mut tape = Tape::new();
                    let out = self.encoders.image().encode_prompted(&mut tape, item.patches, bank.image())?;
                    Ok(ImagePass { tape, out })
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let g_value: Option<Vec<f64>> = text_nodes.map(|(g, _)| text_tape.value(g).to_vec());
        let features: Vec<&[f64]> = image_passes.iter().map(|p| p.tape.value(p.out.feature)).collect();

        // Full-batch head: per-sample image seeds, each scaled by 1/B.
        let head_pass = |rows: &[usize]| -> Result<(f64, Option<Vec<f64>>, Option<Vec<f64>>)> {
            let n = rows.len();
            let mut tape = Tape::new();
            let h = tape.constant(vec![k, d], self.classes.unprompted())?;
            let x_rows: Vec<f64> = rows.iter().flat_map(|&r| batch[r].unprompted.iter().copied()).collect();
            if x_rows.len() != n * d {
                return Err(Error::dim("unprompted image features", &[x_rows.len()], &[n, d]));
            }
            let x = tape.leaf(vec![n, d], x_rows, false)?;
            let g = match &g_value {
                Some(v) => Some(tape.leaf(vec![k, d], v.clone(), true)?),
                None => None,
            };
            let xt = if features.is_empty() {
                None
            } else {
                let v: Vec<f64> = rows.iter().flat_map(|&r| features[r].iter().copied()).collect();
                Some(tape.leaf(vec![n, d], v, true)?)
            };
            let sub_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let heads = self.heads(&mut tape, x, g, xt, h, &sub_labels, kind, false)?;
            let total = tape.item(heads.total);
            if !total.is_finite() {
                return Err(Error::Numeric(format!("non-finite {kind:?} loss")));
            }
            tape.backward(heads.total)?;
            let dg = g.and_then(|g| tape.grad(g).map(<[f64]>::to_vec));
            let dxt = xt.and_then(|xt| tape.grad(xt).map(<[f64]>::to_vec));
            Ok((total, dg, dxt))
        };

        // Image prompt gradient of each sample's loss, scaled by 1/B.
        let all: Vec<usize> = (0..b).collect();
        let full_seed = if features.is_empty() { None } else { head_pass(&all)?.2 };
        let subset_heads: Vec<_> = subsets.iter().map(|rows| head_pass(rows)).collect::<Result<_>>()?;
        drop(features);
        let per_sample: Vec<Vec<f64>> = if image_passes.is_empty() {
            Vec::new()
        } else {
            let dxt = full_seed;
            let seed = dxt.unwrap_or_else(|| vec![0.0; b * d]);
            image_passes
                .par_iter_mut()
                .enumerate()
                .map(|(i, pass)| {
                    pass.tape.backward_with_seed(pass.out.feature, &seed[i * d..(i + 1) * d])?;
                    Ok(pass
                        .tape
                        .grad(pass.out.prompts)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; bank.image().numel()]))
                })
                .collect::<Result<_>>()?
        };

        subsets
            .iter()
            .zip(subset_heads)
            .map(|(rows, (total, dg, _))| {
                let mut grad_text = vec![0.0; bank.text().numel()];
                if let (Some(seed), Some((g_node, theta))) = (dg, text_nodes) {
                    text_tape.backward_with_seed(g_node, &seed)?;
                    if let Some(gt) = text_tape.grad(theta) {
                        grad_text.copy_from_slice(gt);
                    }
                }
                let mut grad_image = vec![0.0; bank.image().numel()];
                if !per_sample.is_empty() {
                    for &r in rows {
                        grad_image.iter_mut().zip(&per_sample[r]).for_each(|(a, v)| *a += v);
                    }
                    let scale = b as f64 / rows.len() as f64;
                    grad_image.iter_mut().for_each(|a| *a *= scale);
                }
                Ok(SubsetGrad {
                    total,
                    grad_text,
                    grad_image,
                })
            })
            .collect()
    }

    fn run(
        &self,
        bank: &PromptBank,
        batch: &[BatchItem<'_>],
        kind: LossKind,
        full_forward: bool,
        want_grad: bool,
    ) -> Result<LossOutput> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let labels = self.labels(batch)?;
        let d = self.classes.d_joint();
        let k = self.classes.len();
        let b = batch.len();
        let need_text = full_forward || kind.needs_text();
        let need_image = full_forward || kind.needs_image();

        // Text stream: one tape for all K class features.
        let mut text_tape = Tape::new();
        let text_nodes = if need_text {
            Some(self.classes.prompted_on_tape(&mut text_tape, self.encoders, bank.text())?)
        } else {
            None
        };

        // Image stream: one tape per sample.
        let mut image_passes: Vec<ImagePass<'_>> = if need_image {
            batch
                .par_iter()
                .map(|item| {
                    let mut tape = Tape::new();
                    let out = self.encoders.image().encode_prompted(&mut tape, item.patches, bank.image())?;
                    Ok(ImagePass { tape, out })
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        // Head tape.
        let mut tape = Tape::new();
        let h = tape.constant(vec![k, d], self.classes.unprompted())?;
        let x_rows: Vec<f64> = batch.iter().flat_map(|b| b.unprompted.iter().copied()).collect();
        if x_rows.len() != b * d {
            return Err(Error::dim("unprompted image features", &[x_rows.len()], &[b, d]));
        }
        let x = tape.leaf(vec![b, d], x_rows, false)?;
        let g = match text_nodes {
            Some((g, _)) => Some(tape.leaf(vec![k, d], text_tape.value(g).to_vec(), want_grad)?),
            None => None,
        };
        let xt = if need_image {
            let rows: Vec<f64> = image_passes
                .iter()
                .flat_map(|p| p.tape.value(p.out.feature).iter().copied())
                .collect();
            Some(tape.leaf(vec![b, d], rows, want_grad)?)
        } else {
            None
        };

        let Heads {
            values,
            p_t,
            p_i,
            p_o,
            p_sym,
            total: total_var,
        } = self.heads(&mut tape, x, g, xt, h, &labels, kind, full_forward)?;
        let total = tape.item(total_var);
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite {kind:?} loss")));
        }

        let probs = HeadProbs {
            classes: k,
            p_t: p_t.map(|p| tape.value(p).to_vec()).unwrap_or_default(),
            p_i: p_i.map(|p| tape.value(p).to_vec()).unwrap_or_default(),
            p_o: p_o.map(|p| tape.value(p).to_vec()).unwrap_or_default(),
            p_sym: p_sym.map(|p| tape.value(p).to_vec()),
            temperature: self.temperature,
        };

        let mut grad_text = vec![0.0; bank.text().numel()];
        let mut grad_image = vec![0.0; bank.image().numel()];
        if want_grad {
            tape.backward(total_var)?;
            if let (Some(g), Some((g_node, theta))) = (g, text_nodes) {
                if let Some(seed) = tape.grad(g) {
                    text_tape.backward_with_seed(g_node, seed)?;
                    if let Some(gt) = text_tape.grad(theta) {
                        grad_text.copy_from_slice(gt);
                    }
                }
            }
            if let Some(xt) = xt {
                if let Some(seed) = tape.grad(xt) {
                    let per_sample: Vec<Option<Vec<f64>>> = image_passes
                        .par_iter_mut()
                        .enumerate()
                        .map(|(i, pass)| {
                            pass.tape
                                .backward_with_seed(pass.out.feature, &seed[i * d..(i + 1) * d])?;
                            Ok(pass.tape.grad(pass.out.prompts).map(<[f64]>::to_vec))
                        })
                        .collect::<Result<_>>()?;
                    for g in per_sample.into_iter().flatten() {
                        grad_image.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }

        Ok(LossOutput {
            values,
            total,
            grad_text,
            grad_image,
            probs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_class_features_give_uniform() {
        let x = [0.6, 0.8];
        let feats = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let p = prob_text_head(&x, &feats, 0.07).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = prob_image_head(&x, &feats, 0.07).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn hand_softmax_at_unit_temperature() {
        // sims (1, 0)
        let x = [1.0, 0.0];
        let feats = [1.0, 0.0, 0.0, 1.0];
        let p = prob_text_head(&x, &feats, 1.0).unwrap();
        assert!((p[0] - 0.73106).abs() < 1e-5 && (p[1] - 0.26894).abs() < 1e-5);
        let q = prob_image_head(&x, &feats, 1.0).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn low_temperature_sharpens() {
        let x = [1.0, 0.0];
        let feats = [1.0, 0.0, 0.0, 1.0];
        let p = prob_text_head(&x, &feats, 0.01).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] > 0.0 && p[1] < 1e-40);
    }

    #[test]
    fn single_class_is_config_error() {
        assert!(matches!(prob_text_head(&[1.0], &[1.0], 1.0), Err(Error::Config(_))));
        assert!(matches!(prob_text_head(&[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn overall_head_cases() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(prob_overall(&p, &p).unwrap(), p.to_vec());
        assert_eq!(prob_overall(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        let o = prob_overall(&[0.7, 0.3], &[0.5, 0.5]).unwrap();
        assert!((o[0] - 0.6).abs() < 1e-15 && (o[1] - 0.4).abs() < 1e-15);
        assert!(matches!(prob_overall(&[1.0], &[0.5, 0.5]), Err(Error::Dimension { .. })));
    }
}
