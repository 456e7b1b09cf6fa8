use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary, BOS, EOS};
use super::{DecodeMode, GeneratorConfig, PartTokenTriple};
use crate::error::{Result, SokeError};
use crate::grad::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor, Var};
use crate::motion::Part;

const MASKED: f64 = -1e9;

/// Encoder-decoder transformer with mode-specific output heads.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

/// Which projection produces logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Head {
    /// Sequential mode: all motion tokens plus EOS.
    Flat,
    /// One part's codes plus EOS.
    Part(Part),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSidecar {
    config: GeneratorConfig,
    vocab: Vocabulary,
}

pub const AMG_CHECKPOINT: &str = "amg.ckpt";
pub const AMG_SIDECAR: &str = "amg.json";

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
    }
}

/// Amplitude of the initial position tables.
const POSITION_SCALE: f64 = 0.5;

/// Sinusoidal table used to initialise the learned positions; a fixed
/// offset is then a fixed linear map, which eases attending to neighbours.
fn sinusoids(n: usize, d: usize, scale: f64) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = scale * angle.sin();
            data[pos * d + 2 * i + 1] = scale * angle.cos();
        }
    }
    Tensor {
        shape: vec![n, d],
        data,
    }
}

impl GeneratorModel {
    pub fn new(config: GeneratorConfig, vocab: Vocabulary, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let f = config.ff_dim;
        let mut p = ParamStore::default();
        let lin = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        p.add("tok_emb", uniform(rng, &[vocab.len(), d], (3.0 / d as f64).sqrt()));
        p.add("enc_pos", sinusoids(config.max_prompt_len, d, POSITION_SCALE));
        p.add("dec_pos", sinusoids(config.max_decoder_len(), d, POSITION_SCALE));
        let ln = |p: &mut ParamStore, name: String| {
            p.add(format!("{name}.g"), Tensor::vector(vec![1.0; d]));
            p.add(format!("{name}.b"), Tensor::zeros(&[d]));
        };
        let attn = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: String| {
            for w in ["q", "k", "v", "o"] {
                p.add(format!("{name}.{w}"), uniform(rng, &[d, d], lin(d)));
            }
        };
        let ff = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: String| {
            p.add(format!("{name}.w1"), uniform(rng, &[d, f], lin(d)));
            p.add(format!("{name}.b1"), Tensor::zeros(&[f]));
            p.add(format!("{name}.w2"), uniform(rng, &[f, d], lin(f)));
            p.add(format!("{name}.b2"), Tensor::zeros(&[d]));
        };
        for l in 0..config.enc_layers {
            ln(&mut p, format!("enc{l}.ln1"));
            attn(&mut p, rng, format!("enc{l}.attn"));
            ln(&mut p, format!("enc{l}.ln2"));
            ff(&mut p, rng, format!("enc{l}.ff"));
        }
        ln(&mut p, "enc.ln".into());
        for l in 0..config.dec_layers {
            ln(&mut p, format!("dec{l}.ln1"));
            attn(&mut p, rng, format!("dec{l}.self"));
            ln(&mut p, format!("dec{l}.ln2"));
            attn(&mut p, rng, format!("dec{l}.cross"));
            ln(&mut p, format!("dec{l}.ln3"));
            ff(&mut p, rng, format!("dec{l}.ff"));
        }
        ln(&mut p, "dec.ln".into());
        let sizes = vocab.codebook_sizes();
        let heads: Vec<(String, usize)> = match config.mode {
            DecodeMode::Sequential => vec![("head.flat".into(), sizes.body + sizes.left_hand + sizes.right_hand + 1)],
            _ => Part::ALL
                .iter()
                .map(|&pt| (format!("head.{}", pt.tag()), sizes.get(pt) + 1))
                .collect(),
        };
        for (name, classes) in heads {
            p.add(format!("{name}.w"), uniform(rng, &[d, classes], 0.01));
            p.add(format!("{name}.b"), Tensor::zeros(&[classes]));
        }
        Ok(Self {
            config,
            vocab,
            params: p,
        })
    }

    pub fn mode(&self) -> DecodeMode {
        self.config.mode
    }

    pub(crate) fn require_mode(&self, mode: DecodeMode) -> Result<()> {
        if self.config.mode != mode {
            return Err(SokeError::Mode(format!(
                "model was trained for {} decoding, not {mode}",
                self.config.mode
            )));
        }
        Ok(())
    }

    pub(crate) fn bind(&self, g: &mut Graph, train: bool) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (_, t))| {
                if train {
                    g.param(i, t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    fn v(&self, vars: &[Var], name: &str) -> Var {
        vars[self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("generator parameter {name} missing"))]
    }

    /// Truncates a prompt to the encoder capacity; reports whether it was cut.
    pub fn fit_prompt<'a>(&self, prompt: &'a [TokenId]) -> (&'a [TokenId], bool) {
        let n = prompt.len().min(self.config.max_prompt_len);
        (&prompt[..n], n < prompt.len())
    }

    fn layer_norm(&self, g: &mut Graph, vars: &[Var], name: &str, x: Var) -> Result<Var> {
        let gain = self.v(vars, &format!("{name}.g"));
        let bias = self.v(vars, &format!("{name}.b"));
        g.layer_norm(x, gain, bias)
    }

    fn attention(&self, g: &mut Graph, vars: &[Var], name: &str, xq: Var, xkv: Var, mask: Option<Var>) -> Result<Var> {
        let q = g.matmul(xq, self.v(vars, &format!("{name}.q")))?;
        let k = g.matmul(xkv, self.v(vars, &format!("{name}.k")))?;
        let val = g.matmul(xkv, self.v(vars, &format!("{name}.v")))?;
        let h = self.config.heads;
        let dh = self.config.dim / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(h);
        for i in 0..h {
            let qh = g.slice_cols(q, i * dh, dh)?;
            let kh = g.slice_cols(k, i * dh, dh)?;
            let vh = g.slice_cols(val, i * dh, dh)?;
            let s = g.matmul_t(qh, kh)?;
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let a = g.softmax_rows(s)?;
            outs.push(g.matmul(a, vh)?);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        g.matmul(o, self.v(vars, &format!("{name}.o")))
    }

    fn feed_forward(&self, g: &mut Graph, vars: &[Var], name: &str, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.v(vars, &format!("{name}.w1")))?;
        let h = g.add_row(h, self.v(vars, &format!("{name}.b1")))?;
        let h = g.relu(h);
        let h = g.matmul(h, self.v(vars, &format!("{name}.w2")))?;
        g.add_row(h, self.v(vars, &format!("{name}.b2")))
    }

    fn add_positions(&self, g: &mut Graph, vars: &[Var], table: &str, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let pos = g.slice_rows(self.v(vars, table), 0, n)?;
        g.add(x, pos)
    }

    pub(crate) fn embed(&self, g: &mut Graph, vars: &[Var], ids: &[TokenId]) -> Result<Var> {
        g.gather(self.v(vars, "tok_emb"), ids)
    }

    /// Encoder memory `[P, D]`; the prompt must already fit.
    pub(crate) fn encoder_graph(&self, g: &mut Graph, vars: &[Var], prompt: &[TokenId]) -> Result<Var> {
        if prompt.is_empty() || prompt.len() > self.config.max_prompt_len {
            return Err(SokeError::Input(format!(
                "prompt length {} outside 1..={}",
                prompt.len(),
                self.config.max_prompt_len
            )));
        }
        if let Some(&bad) = prompt.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(SokeError::TokenRange(format!(
                "prompt token {bad} outside the vocabulary"
            )));
        }
        let x = self.embed(g, vars, prompt)?;
        let mut x = self.add_positions(g, vars, "enc_pos", x)?;
        for l in 0..self.config.enc_layers {
            let h = self.layer_norm(g, vars, &format!("enc{l}.ln1"), x)?;
            let a = self.attention(g, vars, &format!("enc{l}.attn"), h, h, None)?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, vars, &format!("enc{l}.ln2"), x)?;
            let f = self.feed_forward(g, vars, &format!("enc{l}.ff"), h)?;
            x = g.add(x, f)?;
        }
        self.layer_norm(g, vars, "enc.ln", x)
    }

    /// Decoder hidden states `[L, D]` for embedded inputs `[L, D]`.
    pub(crate) fn decoder_graph(&self, g: &mut Graph, vars: &[Var], inputs: Var, memory: Var) -> Result<Var> {
        let n = g.shape(inputs)[0];
        if n == 0 || n > self.config.max_decoder_len() {
            return Err(SokeError::Input(format!(
                "decoder length {n} outside 1..={}",
                self.config.max_decoder_len()
            )));
        }
        let mut x = self.add_positions(g, vars, "dec_pos", inputs)?;
        let mut causal = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                causal[i * n + j] = MASKED;
            }
        }
        let mask = g.constant(Tensor::matrix(n, n, causal)?);
        for l in 0..self.config.dec_layers {
            let h = self.layer_norm(g, vars, &format!("dec{l}.ln1"), x)?;
            let a = self.attention(g, vars, &format!("dec{l}.self"), h, h, Some(mask))?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, vars, &format!("dec{l}.ln2"), x)?;
            let c = self.attention(g, vars, &format!("dec{l}.cross"), h, memory, None)?;
            x = g.add(x, c)?;
            let h = self.layer_norm(g, vars, &format!("dec{l}.ln3"), x)?;
            let f = self.feed_forward(g, vars, &format!("dec{l}.ff"), h)?;
            x = g.add(x, f)?;
        }
        self.layer_norm(g, vars, "dec.ln", x)
    }

    pub(crate) fn head_name(head: Head) -> String {
        match head {
            Head::Flat => "head.flat".into(),
            Head::Part(p) => format!("head.{}", p.tag()),
        }
    }

    pub(crate) fn head_logits(&self, g: &mut Graph, vars: &[Var], hidden: Var, head: Head) -> Result<Var> {
        let name = Self::head_name(head);
        let y = g.matmul(hidden, self.v(vars, &format!("{name}.w")))?;
        g.add_row(y, self.v(vars, &format!("{name}.b")))
    }

    pub(crate) fn num_classes(&self, head: Head) -> usize {
        let s = self.vocab.codebook_sizes();
        match head {
            Head::Flat => s.body + s.left_hand + s.right_hand + 1,
            Head::Part(p) => s.get(p) + 1,
        }
    }

    /// Token id of an output class.
    pub(crate) fn class_token(&self, head: Head, class: usize) -> TokenId {
        let eos = self.num_classes(head) - 1;
        if class == eos {
            return EOS;
        }
        match head {
            Head::Flat => self.vocab.part_range(Part::Body).start + class,
            Head::Part(p) => self.vocab.part_range(p).start + class,
        }
    }

    /// Output class of a target token.
    pub(crate) fn token_class(&self, head: Head, token: TokenId) -> Result<usize> {
        if token == EOS {
            return Ok(self.num_classes(head) - 1);
        }
        let range = match head {
            Head::Flat => self.vocab.part_range(Part::Body).start..self.vocab.part_range(Part::RightHand).end,
            Head::Part(p) => self.vocab.part_range(p),
        };
        if !range.contains(&token) {
            return Err(SokeError::TokenRange(format!(
                "token {token} cannot be predicted by this head"
            )));
        }
        Ok(token - range.start)
    }

    /// Additive logit mask for sequential mode: row `r` predicts flat
    /// position `r`, whose part is `r mod 3`. EOS is allowed only at
    /// triple boundaries.
    pub(crate) fn sequential_mask(&self, rows: usize) -> Tensor {
        let c = self.num_classes(Head::Flat);
        let base = self.vocab.part_range(Part::Body).start;
        let mut data = vec![MASKED; rows * c];
        for r in 0..rows {
            let part = Part::ALL[r % 3];
            let range = self.vocab.part_range(part);
            for k in range.start - base..range.end - base {
                data[r * c + k] = 0.0;
            }
            if r % 3 == 0 {
                data[r * c + c - 1] = 0.0;
            }
        }
        Tensor {
            shape: vec![rows, c],
            data,
        }
    }

    /// Decoder inputs for multi-head mode: BOS, then the fused embedding of
    /// each given triple.
    pub(crate) fn fused_inputs(&self, g: &mut Graph, vars: &[Var], triples: &[PartTokenTriple]) -> Result<Var> {
        let bos = self.embed(g, vars, &[BOS])?;
        if triples.is_empty() {
            return Ok(bos);
        }
        let lambda = self.config.lambda;
        let pick = |p: Part| triples.iter().map(|t| t.get(p)).collect::<Vec<_>>();
        let eb = self.embed(g, vars, &pick(Part::Body))?;
        let el = self.embed(g, vars, &pick(Part::LeftHand))?;
        let er = self.embed(g, vars, &pick(Part::RightHand))?;
        let eb = g.scale(eb, 1.0 - 2.0 * lambda);
        let el = g.scale(el, lambda);
        let er = g.scale(er, lambda);
        let s = g.add(eb, el)?;
        let fused = g.add(s, er)?;
        g.concat_rows(&[bos, fused])
    }

    /// Encoder memory for a prompt (truncated to capacity).
    pub fn encode_prompt(&self, prompt: &[TokenId]) -> Result<Tensor> {
        let (prompt, _) = self.fit_prompt(prompt);
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let m = self.encoder_graph(&mut g, &vars, prompt)?;
        Ok(g.value(m).clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join(AMG_CHECKPOINT), &self.params)?;
        let side = ModelSidecar {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        fs::write(dir.join(AMG_SIDECAR), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let side: ModelSidecar = serde_json::from_str(&fs::read_to_string(dir.join(AMG_SIDECAR))?)?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(side.config, side.vocab, &mut rng)?;
        model.params.load_from(&load_checkpoint(&dir.join(AMG_CHECKPOINT))?)?;
        Ok(model)
    }
}
