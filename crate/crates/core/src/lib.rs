//! Dual-modality prompt tuning over frozen toy encoders, trained with an
//! asymmetric contrastive loss and batch-wise first-order episodic updates.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod dual_encoder;
pub mod episodic;
pub mod error;
pub mod eval;
pub mod meta_domain;
pub mod objectives;
pub mod prompt_bank;

pub use error::{Error, Result};
