//! Decoupled motion tokenizer: one VQ autoencoder per body part.
//!
//! Each part tokenizer encodes a `T x d_p` motion with a stack of strided 1D
//! convolutions into `ceil(T / F)` latent rows, snaps every row to its
//! nearest codebook entry, and decodes the code sequence with a mirrored
//! upsampling stack.

mod quantize;
mod tokenizer;
mod train;

pub use quantize::{quantize, Codebook, TokenSeq};
pub use tokenizer::{
    straight_through_gradcheck, DecoupledTokenizer, DetoSidecar, FrozenQuantization, PartTokenizer, TokenizerArch,
    VqLoss, DETO_CHECKPOINT, DETO_SIDECAR,
};
pub use train::{
    thread_cap, train_part_tokenizer, train_tokenizer, DetoTrainConfig, EpochLog, PartTrainLog, StepLog, TrainLog,
};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SokeError};
use crate::motion::{Part, PartLayout};

/// Number of codes per part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSizes {
    #[serde(rename = "B")]
    pub body: usize,
    #[serde(rename = "LH")]
    pub left_hand: usize,
    #[serde(rename = "RH")]
    pub right_hand: usize,
}

impl Default for CodebookSizes {
    fn default() -> Self {
        Self {
            body: 96,
            left_hand: 192,
            right_hand: 192,
        }
    }
}

impl CodebookSizes {
    pub fn get(&self, part: Part) -> usize {
        match part {
            Part::Body => self.body,
            Part::LeftHand => self.left_hand,
            Part::RightHand => self.right_hand,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetoConfig {
    pub layout: PartLayout,
    pub codebook_sizes: CodebookSizes,
    /// Code dimension `C`.
    pub code_dim: usize,
    /// Hidden channel width of the convolution stacks.
    pub width: usize,
    /// Temporal downsampling factor `F` (a power of two).
    pub downsample: usize,
    pub w_emb: f64,
    pub w_com: f64,
    pub train: DetoTrainConfig,
}

impl Default for DetoConfig {
    fn default() -> Self {
        Self {
            layout: PartLayout::default(),
            codebook_sizes: CodebookSizes::default(),
            code_dim: 512,
            width: 64,
            downsample: 4,
            w_emb: 1.0,
            w_com: 0.25,
            train: DetoTrainConfig::default(),
        }
    }
}

impl DetoConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        for p in Part::ALL {
            if self.codebook_sizes.get(p) == 0 {
                return Err(SokeError::Config(format!("codebook for part {p} is empty")));
            }
        }
        if self.code_dim == 0 || self.width == 0 {
            return Err(SokeError::Config("code_dim and width must be positive".into()));
        }
        if !self.downsample.is_power_of_two() {
            return Err(SokeError::Config(format!(
                "downsample factor {} is not a power of two",
                self.downsample
            )));
        }
        if self.w_emb < 0.0 || self.w_com < 0.0 {
            return Err(SokeError::Config("loss weights must be non-negative".into()));
        }
        self.train.validate()
    }

    pub fn arch(&self) -> TokenizerArch {
        TokenizerArch {
            code_dim: self.code_dim,
            width: self.width,
            downsample: self.downsample,
            w_emb: self.w_emb,
            w_com: self.w_com,
        }
    }
}
