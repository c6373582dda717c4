//! Frozen toy text and image transformers with deep prompt injection.
//!
//! Each encoder runs either unprompted or prompted. Prompted runs place `P`
//! prompt rows in the layer-1 input (text: before the class-name tokens, image:
//! after the patch tokens) and overwrite those rows with the layer's own
//! prompts before every layer `ℓ < L`. Both runs share the same weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    /// Text transformer width (`d_text`).
    pub text_width: usize,
    /// Image transformer width (`d_img`).
    pub image_width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Maximum text sequence length (positional table size).
    pub seq_len_text: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub vocab: usize,
    pub d_joint: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            text_width: 32,
            image_width: 32,
            heads: 4,
            mlp_ratio: 4,
            seq_len_text: 16,
            patches: 16,
            patch_dim: 16,
            vocab: 64,
            d_joint: 32,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("text_width", self.text_width),
            ("image_width", self.image_width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("seq_len_text", self.seq_len_text),
            ("patches", self.patches),
            ("patch_dim", self.patch_dim),
            ("vocab", self.vocab),
            ("d_joint", self.d_joint),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be positive")));
        }
        for (name, width) in [("text_width", self.text_width), ("image_width", self.image_width)] {
            if width % self.heads != 0 {
                return Err(Error::Config(format!(
                    "encoder.{name} = {width} is not divisible by heads = {}",
                    self.heads
                )));
            }
        }
        Ok(())
    }
}

/// Token ids for one class: the class name plus the fixed template prefix
/// used by the unprompted stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTextInput {
    pub class_id: usize,
    pub name_tokens: Vec<usize>,
    pub template_tokens: Vec<usize>,
}

#[derive(Debug)]
struct Block {
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn gaussian(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    fn constant(shape: Vec<usize>, value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("shape matches")
    }

    fn block(&mut self, width: usize, mlp_ratio: usize) -> Block {
        let hidden = width * mlp_ratio;
        let s = 1.0 / (width as f64).sqrt();
        Block {
            ln1_gain: Self::constant(vec![width], 1.0),
            ln1_bias: Self::constant(vec![width], 0.0),
            wq: self.gaussian(vec![width, width], s),
            wk: self.gaussian(vec![width, width], s),
            wv: self.gaussian(vec![width, width], s),
            wo: self.gaussian(vec![width, width], s),
            bo: Self::constant(vec![width], 0.0),
            ln2_gain: Self::constant(vec![width], 1.0),
            ln2_bias: Self::constant(vec![width], 0.0),
            w1: self.gaussian(vec![width, hidden], s),
            b1: Self::constant(vec![hidden], 0.0),
            w2: self.gaussian(vec![hidden, width], 1.0 / (hidden as f64).sqrt()),
            b2: Self::constant(vec![width], 0.0),
        }
    }
}

impl Block {
    fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, heads: usize) -> Result<Var> {
        let g = tape.input(&self.ln1_gain);
        let b = tape.input(&self.ln1_bias);
        let h = tape.layer_norm(x, g, b)?;
        let (wq, wk, wv) = (tape.input(&self.wq), tape.input(&self.wk), tape.input(&self.wv));
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let a = tape.attention(q, k, v, heads)?;
        let wo = tape.input(&self.wo);
        let a = tape.matmul(a, wo)?;
        let bo = tape.input(&self.bo);
        let a = tape.add_row(a, bo)?;
        let x = tape.add(x, a)?;

        let g = tape.input(&self.ln2_gain);
        let b = tape.input(&self.ln2_bias);
        let h = tape.layer_norm(x, g, b)?;
        let w1 = tape.input(&self.w1);
        let b1 = tape.input(&self.b1);
        let m = tape.matmul(h, w1)?;
        let m = tape.add_row(m, b1)?;
        let m = tape.gelu(m);
        let w2 = tape.input(&self.w2);
        let b2 = tape.input(&self.b2);
        let m = tape.matmul(m, w2)?;
        let m = tape.add_row(m, b2)?;
        tape.add(x, m)
    }
}

#[derive(Debug, Clone, Copy)]
enum PromptSlot {
    Front,
    Back,
}

/// Per-layer prompt rows, registered on the tape as `[L*P, width]`.
struct Injection {
    prompts: Var,
    len: usize,
    layers: usize,
    slot: PromptSlot,
}

#[derive(Debug)]
struct Trunk {
    blocks: Vec<Block>,
    ln_final_gain: Tensor,
    ln_final_bias: Tensor,
    projection: Tensor,
    heads: usize,
    width: usize,
}

impl Trunk {
    fn new(init: &mut Init, cfg: &EncoderConfig, width: usize) -> Self {
        Self {
            blocks: (0..cfg.depth).map(|_| init.block(width, cfg.mlp_ratio)).collect(),
            ln_final_gain: Init::constant(vec![width], 1.0),
            ln_final_bias: Init::constant(vec![width], 0.0),
            projection: init.gaussian(vec![width, cfg.d_joint], 1.0 / (width as f64).sqrt()),
            heads: cfg.heads,
            width,
        }
    }

    /// Runs every block, re-injecting prompts before layers `1..L`, then
    /// reads out row `readout` into the unit-norm joint space.
    fn run<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        mut x: Var,
        injection: Option<&Injection>,
        readout: usize,
    ) -> Result<Var> {
        for (layer, block) in self.blocks.iter().enumerate() {
            if let Some(inj) = injection {
                if layer > 0 && layer < inj.layers {
                    x = replace_prompt_rows(tape, x, inj, layer)?;
                }
            }
            x = block.forward(tape, x, self.heads)?;
        }
        let row = tape.slice_rows(x, readout, readout + 1)?;
        let g = tape.input(&self.ln_final_gain);
        let b = tape.input(&self.ln_final_bias);
        let row = tape.layer_norm(row, g, b)?;
        let proj = tape.input(&self.projection);
        let out = tape.matmul(row, proj)?;
        tape.normalize_rows(out)
    }

    fn check_prompts(&self, prompts: &Tensor) -> Result<(usize, usize)> {
        let [layers, len, width] = prompts.shape() else {
            return Err(Error::Config(format!("prompt tensor must be [L, P, width], got {:?}", prompts.shape())));
        };
        if *width != self.width {
            return Err(Error::Config(format!(
                "prompt width {width} does not match encoder width {}",
                self.width
            )));
        }
        if *layers == 0 || *layers > self.blocks.len() {
            return Err(Error::Config(format!(
                "prompt layers {layers} must be in 1..={}",
                self.blocks.len()
            )));
        }
        Ok((*layers, *len))
    }
}

fn replace_prompt_rows<'a>(tape: &mut Tape<'a>, x: Var, inj: &Injection, layer: usize) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let prompt = tape.slice_rows(inj.prompts, layer * inj.len, (layer + 1) * inj.len)?;
    match inj.slot {
        PromptSlot::Front => {
            let rest = tape.slice_rows(x, inj.len, rows)?;
            tape.concat_rows(&[prompt, rest])
        }
        PromptSlot::Back => {
            let head = tape.slice_rows(x, 0, rows - inj.len)?;
            tape.concat_rows(&[head, prompt])
        }
    }
}

/// Nodes produced by a prompted forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Prompted {
    /// The prompt tensor as registered on the tape, `[L*P, width]`.
    pub prompts: Var,
    /// Unit-norm joint-space feature, `[1, d_joint]`.
    pub feature: Var,
}

#[derive(Debug)]
pub struct TextEncoder {
    token_embedding: Tensor,
    positional: Tensor,
    trunk: Trunk,
    vocab: usize,
    seq_len: usize,
}

impl TextEncoder {
    fn new(init: &mut Init, cfg: &EncoderConfig) -> Self {
        let w = cfg.text_width;
        Self {
            token_embedding: init.gaussian(vec![cfg.vocab, w], 0.02),
            positional: init.gaussian(vec![cfg.seq_len_text, w], 0.01),
            trunk: Trunk::new(init, cfg, w),
            vocab: cfg.vocab,
            seq_len: cfg.seq_len_text,
        }
    }

    pub fn width(&self) -> usize {
        self.trunk.width
    }

    pub fn depth(&self) -> usize {
        self.trunk.blocks.len()
    }

    /// Embedding-table rows for `tokens`, as a flat `[len, width]` buffer.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let w = self.width();
        let mut out = Vec::with_capacity(tokens.len() * w);
        for &t in tokens {
            if t >= self.vocab {
                return Err(Error::Input(format!("token {t} outside vocabulary of {}", self.vocab)));
            }
            out.extend_from_slice(&self.token_embedding.data()[t * w..(t + 1) * w]);
        }
        Ok(out)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.seq_len {
            return Err(Error::Input(format!(
                "text sequence of {len} tokens exceeds seq_len_text {}",
                self.seq_len
            )));
        }
        Ok(())
    }

    /// Positional rows `0..len` as a constant.
    fn positions<'a>(&'a self, tape: &mut Tape<'a>, len: usize) -> Result<Var> {
        let w = self.width();
        tape.constant(vec![len, w], &self.positional.data()[..len * w])
    }

    /// `[template ; name]` tokens with no prompt vectors. Readout: last token.
    pub fn encode_unprompted<'a>(&'a self, tape: &mut Tape<'a>, input: &ClassTextInput) -> Result<Var> {
        let tokens: Vec<usize> = input.template_tokens.iter().chain(&input.name_tokens).copied().collect();
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        self.check_len(tokens.len())?;
        let emb = self.embed_tokens(&tokens)?;
        let x = tape.leaf(vec![tokens.len(), self.width()], emb, false)?;
        let pos = self.positions(tape, tokens.len())?;
        let x = tape.add(x, pos)?;
        self.trunk.run(tape, x, None, tokens.len() - 1)
    }

    /// `[θ[0] ; name]` tokens, with `θ[ℓ]` overwriting the prompt rows before
    /// each layer `ℓ < L`. Differentiable with respect to `prompts`.
    pub fn encode_prompted<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        input: &ClassTextInput,
        prompts: &'a Tensor,
    ) -> Result<Prompted> {
        let (layers, len) = self.trunk.check_prompts(prompts)?;
        let w = self.width();
        let theta = tape.input_as(prompts, vec![layers * len, w])?;
        let feature = self.encode_prompted_var(tape, input, theta, layers, len)?;
        Ok(Prompted { prompts: theta, feature })
    }

    /// As [`encode_prompted`](Self::encode_prompted) with the prompts already
    /// on the tape as a `[L*P, width]` node.
    pub fn encode_prompted_var<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        input: &ClassTextInput,
        theta: Var,
        layers: usize,
        len: usize,
    ) -> Result<Var> {
        if input.name_tokens.is_empty() {
            return Err(Error::Input("empty class-name token sequence".into()));
        }
        let total = len + input.name_tokens.len();
        self.check_len(total)?;
        let w = self.width();
        let emb = self.embed_tokens(&input.name_tokens)?;
        let name = tape.leaf(vec![input.name_tokens.len(), w], emb, false)?;
        let first = tape.slice_rows(theta, 0, len)?;
        let x = tape.concat_rows(&[first, name])?;
        let pos = self.positions(tape, total)?;
        let x = tape.add(x, pos)?;
        let inj = Injection {
            prompts: theta,
            len,
            layers,
            slot: PromptSlot::Front,
        };
        self.trunk.run(tape, x, Some(&inj), total - 1)
    }
}

#[derive(Debug)]
pub struct ImageEncoder {
    patch_projection: Tensor,
    patch_bias: Tensor,
    class_token: Tensor,
    positional: Tensor,
    trunk: Trunk,
    patches: usize,
    patch_dim: usize,
}

impl ImageEncoder {
    fn new(init: &mut Init, cfg: &EncoderConfig) -> Self {
        let w = cfg.image_width;
        Self {
            patch_projection: init.gaussian(vec![cfg.patch_dim, w], 1.0 / (cfg.patch_dim as f64).sqrt()),
            patch_bias: Init::constant(vec![w], 0.0),
            class_token: init.gaussian(vec![1, w], 0.02),
            positional: init.gaussian(vec![cfg.patches + 1, w], 0.01),
            trunk: Trunk::new(init, cfg, w),
            patches: cfg.patches,
            patch_dim: cfg.patch_dim,
        }
    }

    pub fn width(&self) -> usize {
        self.trunk.width
    }

    pub fn depth(&self) -> usize {
        self.trunk.blocks.len()
    }

    /// `[cls ; patch tokens] + positions`.
    fn embed<'a>(&'a self, tape: &mut Tape<'a>, patches: &'a Tensor) -> Result<Var> {
        if patches.shape() != [self.patches, self.patch_dim] {
            return Err(Error::dim("image patches", patches.shape(), &[self.patches, self.patch_dim]));
        }
        if !patches.is_finite() {
            return Err(Error::Input("non-finite patch values".into()));
        }
        let p = tape.input(patches);
        let proj = tape.input(&self.patch_projection);
        let tokens = tape.matmul(p, proj)?;
        let bias = tape.input(&self.patch_bias);
        let tokens = tape.add_row(tokens, bias)?;
        let cls = tape.input(&self.class_token);
        let x = tape.concat_rows(&[cls, tokens])?;
        let pos = tape.input(&self.positional);
        tape.add(x, pos)
    }

    /// Readout from the class-token position.
    pub fn encode_unprompted<'a>(&'a self, tape: &mut Tape<'a>, patches: &'a Tensor) -> Result<Var> {
        let x = self.embed(tape, patches)?;
        self.trunk.run(tape, x, None, 0)
    }

    /// Prompt rows appended after the patch tokens, overwritten per layer
    /// through layer `L`. Differentiable with respect to `prompts`.
    pub fn encode_prompted<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        patches: &'a Tensor,
        prompts: &'a Tensor,
    ) -> Result<Prompted> {
        let (layers, len) = self.trunk.check_prompts(prompts)?;
        let theta = tape.input_as(prompts, vec![layers * len, self.width()])?;
        let feature = self.encode_prompted_var(tape, patches, theta, layers, len)?;
        Ok(Prompted { prompts: theta, feature })
    }

    /// As [`encode_prompted`](Self::encode_prompted) with the prompts already
    /// on the tape as a `[L*P, width]` node.
    pub fn encode_prompted_var<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        patches: &'a Tensor,
        theta: Var,
        layers: usize,
        len: usize,
    ) -> Result<Var> {
        let x = self.embed(tape, patches)?;
        let first = tape.slice_rows(theta, 0, len)?;
        let x = tape.concat_rows(&[x, first])?;
        let inj = Injection {
            prompts: theta,
            len,
            layers,
            slot: PromptSlot::Back,
        };
        self.trunk.run(tape, x, Some(&inj), 0)
    }
}

/// The frozen text/image encoder pair. Weights are fixed at construction.
#[derive(Debug)]
pub struct DualEncoder {
    config: EncoderConfig,
    text: TextEncoder,
    image: ImageEncoder,
}

impl DualEncoder {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut text_init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        text_init.rng.set_stream(1);
        let mut image_init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        image_init.rng.set_stream(2);
        Ok(Self {
            text: TextEncoder::new(&mut text_init, config),
            image: ImageEncoder::new(&mut image_init, config),
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn text(&self) -> &TextEncoder {
        &self.text
    }

    pub fn image(&self) -> &ImageEncoder {
        &self.image
    }

    pub fn encode_text_unprompted(&self, input: &ClassTextInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.text.encode_unprompted(&mut tape, input)?;
        Ok(tape.value(out).to_vec())
    }

    pub fn encode_text_prompted(&self, input: &ClassTextInput, prompts: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.text.encode_prompted(&mut tape, input, prompts)?;
        Ok(tape.value(out.feature).to_vec())
    }

    pub fn encode_image_unprompted(&self, patches: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.image.encode_unprompted(&mut tape, patches)?;
        Ok(tape.value(out).to_vec())
    }

    pub fn encode_image_prompted(&self, patches: &Tensor, prompts: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.image.encode_prompted(&mut tape, patches, prompts)?;
        Ok(tape.value(out.feature).to_vec())
    }

    /// Every frozen weight, flattened in a fixed order. Used to assert that
    /// training never touches the backbone.
    pub fn weight_fingerprint(&self) -> Vec<u64> {
        let mut tensors: Vec<&Tensor> = vec![
            &self.text.token_embedding,
            &self.text.positional,
            &self.image.patch_projection,
            &self.image.patch_bias,
            &self.image.class_token,
            &self.image.positional,
        ];
        for trunk in [&self.text.trunk, &self.image.trunk] {
            for b in &trunk.blocks {
                tensors.extend([
                    &b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.bo, &b.ln2_gain,
                    &b.ln2_bias, &b.w1, &b.b1, &b.w2, &b.b2,
                ]);
            }
            tensors.extend([&trunk.ln_final_gain, &trunk.ln_final_bias, &trunk.projection]);
        }
        tensors
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    /// True when no weight tensor participates in gradient tracking.
    pub fn is_frozen(&self) -> bool {
        let mut all = vec![
            &self.text.token_embedding,
            &self.text.positional,
            &self.image.patch_projection,
            &self.image.class_token,
        ];
        for trunk in [&self.text.trunk, &self.image.trunk] {
            all.push(&trunk.projection);
            for b in &trunk.blocks {
                all.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2]);
            }
        }
        all.iter().all(|t| !t.requires_grad())
    }
}
