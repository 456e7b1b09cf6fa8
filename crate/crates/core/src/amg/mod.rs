//! Autoregressive motion generator: a unified text/motion vocabulary, a
//! small encoder-decoder transformer, and three decoding factorizations
//! (sequential, parallel, multi-head) with instrumented step counts.

mod decode;
mod model;
mod train;
mod vocab;

pub use decode::{DecodeOutput, Decoder};
pub use model::GeneratorModel;
pub use train::{train_generator, AmgStepLog, AmgTrainConfig, AmgTrainLog, TrainPair};
pub use vocab::{words, TokenId, Vocabulary, BOS, EOS, PAD, SEP, UNK};

use serde::{Deserialize, Serialize};

use crate::deto::TokenSeq;
use crate::error::{Result, SokeError};
use crate::motion::Part;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Sequential,
    Parallel,
    Multihead,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 3] = [DecodeMode::Sequential, DecodeMode::Parallel, DecodeMode::Multihead];

    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Sequential => "sequential",
            DecodeMode::Parallel => "parallel",
            DecodeMode::Multihead => "multihead",
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = SokeError;
    fn from_str(s: &str) -> Result<Self> {
        DecodeMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SokeError::Config(format!("unknown decoding mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub mode: DecodeMode,
    pub dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    /// Fusion weight of each hand embedding in multi-head mode.
    pub lambda: f64,
    /// Maximum number of output triples.
    pub k_max: usize,
    /// Prompts longer than this are truncated.
    pub max_prompt_len: usize,
    pub train: AmgTrainConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Multihead,
            dim: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ff_dim: 128,
            lambda: 1.0 / 3.0,
            k_max: 32,
            max_prompt_len: 128,
            train: AmgTrainConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(SokeError::Config(format!(
                "model dim {} must be a positive multiple of the head count {}",
                self.dim, self.heads
            )));
        }
        if self.ff_dim == 0 || self.max_prompt_len == 0 {
            return Err(SokeError::Config("ff_dim and max_prompt_len must be positive".into()));
        }
        check_lambda(self.lambda)?;
        self.train.validate()
    }

    /// Decoder positions needed for `k_max` triples in this mode.
    pub fn max_decoder_len(&self) -> usize {
        match self.mode {
            DecodeMode::Sequential => 3 * self.k_max + 1,
            _ => self.k_max + 1,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda < 0.5) {
        return Err(SokeError::Config(format!("fusion weight {lambda} outside (0, 0.5)")));
    }
    Ok(())
}

/// One motion token per part at one output step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartTokenTriple {
    pub body: TokenId,
    pub left_hand: TokenId,
    pub right_hand: TokenId,
}

impl PartTokenTriple {
    pub fn get(&self, part: Part) -> TokenId {
        match part {
            Part::Body => self.body,
            Part::LeftHand => self.left_hand,
            Part::RightHand => self.right_hand,
        }
    }

    pub fn as_array(&self) -> [TokenId; 3] {
        [self.body, self.left_hand, self.right_hand]
    }

    pub fn from_array(a: [TokenId; 3]) -> Self {
        Self {
            body: a[0],
            left_hand: a[1],
            right_hand: a[2],
        }
    }
}

/// `(y1_B, y1_LH, y1_RH, y2_B, ...)`.
pub fn flatten(triples: &[PartTokenTriple]) -> Vec<TokenId> {
    triples.iter().flat_map(PartTokenTriple::as_array).collect()
}

/// Inverse of [`flatten`]; every slot must hold a token of its part.
pub fn unflatten(tokens: &[TokenId], vocab: &Vocabulary) -> Result<Vec<PartTokenTriple>> {
    if tokens.len() % 3 != 0 {
        return Err(SokeError::Input(format!(
            "{} tokens do not form whole triples",
            tokens.len()
        )));
    }
    tokens
        .chunks_exact(3)
        .map(|c| {
            for (p, &t) in Part::ALL.iter().zip(c) {
                if !vocab.part_range(*p).contains(&t) {
                    return Err(SokeError::TokenRange(format!(
                        "token {t} in a {p} slot is not a {p} motion token"
                    )));
                }
            }
            Ok(PartTokenTriple::from_array([c[0], c[1], c[2]]))
        })
        .collect()
}

/// `(1 - 2 lambda) e_B + lambda e_LH + lambda e_RH`.
pub fn fuse_embeddings(e_b: &[f64], e_lh: &[f64], e_rh: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if e_b.len() != e_lh.len() || e_b.len() != e_rh.len() {
        return Err(SokeError::Input("embedding dimensions differ".into()));
    }
    let wb = 1.0 - 2.0 * lambda;
    Ok((0..e_b.len())
        .map(|i| wb * e_b[i] + lambda * e_lh[i] + lambda * e_rh[i])
        .collect())
}

/// Motion-token triples for per-part code sequences of equal length.
pub fn triples_from_tokens(vocab: &Vocabulary, tokens: &[TokenSeq; 3]) -> Result<Vec<PartTokenTriple>> {
    let k = tokens[0].len();
    if tokens.iter().any(|t| t.len() != k) {
        return Err(SokeError::Input("part token sequences differ in length".into()));
    }
    (0..k)
        .map(|i| {
            Ok(PartTokenTriple {
                body: vocab.motion_token(Part::Body, tokens[0].ids[i])?,
                left_hand: vocab.motion_token(Part::LeftHand, tokens[1].ids[i])?,
                right_hand: vocab.motion_token(Part::RightHand, tokens[2].ids[i])?,
            })
        })
        .collect()
}

/// Per-part code sequences of a triple list.
pub fn tokens_from_triples(vocab: &Vocabulary, triples: &[PartTokenTriple]) -> Result<[TokenSeq; 3]> {
    let mut out = Part::ALL.map(|part| TokenSeq { part, ids: Vec::new() });
    for t in triples {
        for (seq, p) in out.iter_mut().zip(Part::ALL) {
            match vocab.motion_code(t.get(p)) {
                Some((q, code)) if q == p => seq.ids.push(code),
                _ => {
                    return Err(SokeError::TokenRange(format!(
                        "token {} is not a {p} motion token",
                        t.get(p)
                    )))
                }
            }
        }
    }
    Ok(out)
}
