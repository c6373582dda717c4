//! The learnable prompt vectors: per-layer textual and visual prompts.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! b"MPRB" | version: u32 | P: u32 | L: u32 | d_text: u32 | d_img: u32
//! | text prompts: L*P*d_text f64 | image prompts: L*P*d_img f64
//! ```

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPRB";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const INIT_STD: f64 = 0.02;

/// Which prompt set an update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    Both,
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "both" => Ok(Modality::Both),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    prompt_len: usize,
    prompt_layers: usize,
    d_text: usize,
    d_img: usize,
    text: Tensor,
    image: Tensor,
}

impl PromptBank {
    /// Draws every entry i.i.d. from `Normal(0, 0.02²)`; text prompts first.
    pub fn init_gaussian(
        seed: u64,
        prompt_len: usize,
        prompt_layers: usize,
        d_text: usize,
        d_img: usize,
    ) -> Result<Self> {
        if prompt_len == 0 || prompt_layers == 0 || d_text == 0 || d_img == 0 {
            return Err(Error::Config(format!(
                "prompt dimensions must be positive (P={prompt_len}, L={prompt_layers}, d_text={d_text}, d_img={d_img})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |n: usize| (0..n).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>();
        let text = draw(prompt_layers * prompt_len * d_text);
        let image = draw(prompt_layers * prompt_len * d_img);
        Self::from_parts(prompt_len, prompt_layers, d_text, d_img, text, image)
    }

    pub fn from_parts(
        prompt_len: usize,
        prompt_layers: usize,
        d_text: usize,
        d_img: usize,
        text: Vec<f64>,
        image: Vec<f64>,
    ) -> Result<Self> {
        let text = Tensor::new(vec![prompt_layers, prompt_len, d_text], text)?.with_requires_grad(true);
        let image = Tensor::new(vec![prompt_layers, prompt_len, d_img], image)?.with_requires_grad(true);
        if !text.is_finite() || !image.is_finite() {
            return Err(Error::Numeric("prompt bank contains non-finite entries".into()));
        }
        Ok(Self {
            prompt_len,
            prompt_layers,
            d_text,
            d_img,
            text,
            image,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn prompt_layers(&self) -> usize {
        self.prompt_layers
    }

    pub fn d_text(&self) -> usize {
        self.d_text
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    /// Textual prompts, shape `[L, P, d_text]`.
    pub fn text(&self) -> &Tensor {
        &self.text
    }

    /// Visual prompts, shape `[L, P, d_img]`.
    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn text_mut(&mut self) -> &mut Tensor {
        &mut self.text
    }

    pub fn image_mut(&mut self) -> &mut Tensor {
        &mut self.image
    }

    /// The tensors an update restricted to `modality` may change.
    pub fn view_modality(&self, modality: Modality) -> Vec<&Tensor> {
        match modality {
            Modality::Text => vec![&self.text],
            Modality::Image => vec![&self.image],
            Modality::Both => vec![&self.text, &self.image],
        }
    }

    pub fn view_modality_mut(&mut self, modality: Modality) -> Vec<&mut Tensor> {
        match modality {
            Modality::Text => vec![&mut self.text],
            Modality::Image => vec![&mut self.image],
            Modality::Both => vec![&mut self.text, &mut self.image],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.text.is_finite() && self.image.is_finite()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            CHECKPOINT_VERSION,
            self.prompt_len as u32,
            self.prompt_layers as u32,
            self.d_text as u32,
            self.d_img as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.text.data().iter().chain(self.image.data()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let (p, l, dt, di) = (
            word()? as usize,
            word()? as usize,
            word()? as usize,
            word()? as usize,
        );
        let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let text = read_f64s(l * p * dt)?;
        let image = read_f64s(l * p * di)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        if p == 0 || l == 0 || dt == 0 || di == 0 {
            return Err(Error::Format("zero dimension in header".into()));
        }
        Self::from_parts(p, l, dt, di, text, image)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gaussian_moments() {
        // 10 * 50 * 100 = 50_000 entries per modality, 10^5 in total.
        let bank = PromptBank::init_gaussian(7, 10, 50, 100, 100).unwrap();
        let all: Vec<f64> = bank.text().data().iter().chain(bank.image().data()).copied().collect();
        assert_eq!(all.len(), 100_000);
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 0.002, "mean {mean}");
        assert!(std > 0.0195 && std < 0.0205, "std {std}");
    }

    #[test]
    fn same_seed_same_bank() {
        let a = PromptBank::init_gaussian(3, 2, 4, 8, 8).unwrap();
        let b = PromptBank::init_gaussian(3, 2, 4, 8, 8).unwrap();
        assert_eq!(a, b);
        let c = PromptBank::init_gaussian(4, 2, 4, 8, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn base_to_new_shape() {
        let bank = PromptBank::init_gaussian(0, 2, 12, 32, 32).unwrap();
        assert_eq!(bank.text().shape(), &[12, 2, 32]);
        assert_eq!(bank.image().shape(), &[12, 2, 32]);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(PromptBank::init_gaussian(0, 0, 1, 4, 4), Err(Error::Config(_))));
        assert!(matches!(PromptBank::init_gaussian(0, 1, 0, 4, 4), Err(Error::Config(_))));
        assert!(matches!(PromptBank::init_gaussian(0, 1, 1, 0, 4), Err(Error::Config(_))));
    }

    #[test]
    fn clone_is_deep() {
        let original = PromptBank::init_gaussian(1, 2, 3, 4, 4).unwrap();
        let snapshot = original.clone();
        let mut copy = original.clone();
        copy.text_mut().data_mut().iter_mut().for_each(|v| *v += 1.0);
        copy.image_mut().data_mut().iter_mut().for_each(|v| *v += 1.0);
        assert_eq!(original, snapshot);
        assert_eq!(original.clone().clone(), original);
        assert!(copy.text().requires_grad() && copy.image().requires_grad());
    }

    #[test]
    fn modality_views() {
        let bank = PromptBank::init_gaussian(1, 1, 1, 2, 3).unwrap();
        let text = bank.view_modality(Modality::Text);
        assert_eq!(text.len(), 1);
        assert_eq!(text[0].shape(), &[1, 1, 2]);
        let image = bank.view_modality(Modality::Image);
        assert_eq!(image[0].shape(), &[1, 1, 3]);
        assert_eq!(bank.view_modality(Modality::Both).len(), 2);
        assert!(matches!("audio".parse::<Modality>(), Err(Error::Config(_))));
        assert_eq!("both".parse::<Modality>().unwrap(), Modality::Both);
    }

    #[test]
    fn image_view_update_leaves_text_alone() {
        let mut bank = PromptBank::init_gaussian(1, 2, 2, 4, 4).unwrap();
        let text_before = bank.text().clone();
        for t in bank.view_modality_mut(Modality::Image) {
            t.data_mut().iter_mut().for_each(|v| *v -= 0.5);
        }
        assert_eq!(bank.text(), &text_before);
    }

    #[test]
    fn checkpoint_header_layout() {
        let bank = PromptBank::init_gaussian(1, 2, 3, 4, 5).unwrap();
        let mut buf = Vec::new();
        bank.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MPRB");
        let words: Vec<u32> = buf[4..24]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(words, vec![1, 2, 3, 4, 5]);
        assert_eq!(buf.len(), 24 + 8 * (3 * 2 * 4 + 3 * 2 * 5));
        assert_eq!(&buf[24..32], &bank.text().data()[0].to_le_bytes());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(matches!(PromptBank::read_from(&b"XXXX"[..]), Err(Error::Format(_))));
        let bank = PromptBank::init_gaussian(1, 1, 1, 2, 2).unwrap();
        let mut buf = Vec::new();
        bank.write_to(&mut buf).unwrap();
        buf.push(0);
        assert!(matches!(PromptBank::read_from(buf.as_slice()), Err(Error::Format(_))));
        buf.truncate(buf.len() - 9);
        assert!(matches!(PromptBank::read_from(buf.as_slice()), Err(Error::Io(_))));
    }

    proptest! {
        #[test]
        fn checkpoint_round_trips_bit_exactly(
            seed in any::<u64>(),
            p in 1usize..4,
            l in 1usize..4,
            dt in 1usize..6,
            di in 1usize..6,
        ) {
            let bank = PromptBank::init_gaussian(seed, p, l, dt, di).unwrap();
            let mut buf = Vec::new();
            bank.write_to(&mut buf).unwrap();
            let back = PromptBank::read_from(buf.as_slice()).unwrap();
            let bits = |b: &PromptBank| -> Vec<u64> {
                b.text().data().iter().chain(b.image().data()).map(|v| v.to_bits()).collect()
            };
            prop_assert_eq!(bits(&back), bits(&bank));
            prop_assert_eq!(back, bank);
        }
    }
}
