use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::quantize::{quantize, Codebook, TokenSeq};
use super::{CodebookSizes, DetoConfig};
use crate::error::{Result, SokeError};
use crate::grad::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor, Var};
use crate::motion::{merge_parts, split_parts, Language, MotionSequence, Part, PartLayout, PartMotion};

/// Architecture hyper-parameters shared by the three part tokenizers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenizerArch {
    pub code_dim: usize,
    pub width: usize,
    pub downsample: usize,
    pub w_emb: f64,
    pub w_com: f64,
}

impl TokenizerArch {
    pub fn levels(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }
}

/// Loss components of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VqLoss {
    pub total: f64,
    pub rec: f64,
    pub emb: f64,
    pub com: f64,
}

/// Encoder, decoder and codebook of one body part.
#[derive(Debug, Clone, PartialEq)]
pub struct PartTokenizer {
    pub part: Part,
    pub input_width: usize,
    pub n_codes: usize,
    pub arch: TokenizerArch,
    pub params: ParamStore,
}

pub(crate) struct LossVars {
    pub total: Var,
    pub rec: Var,
    pub emb: Var,
    pub com: Var,
    pub latent: Vec<f64>,
    pub ids: Vec<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
    }
}

impl PartTokenizer {
    pub fn new(part: Part, input_width: usize, n_codes: usize, arch: TokenizerArch, rng: &mut ChaCha8Rng) -> Self {
        let w = arch.width;
        let c = arch.code_dim;
        let mut p = ParamStore::default();
        let mut conv = |p: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize, gain: f64| {
            let bound = (gain / (k * cin) as f64).sqrt();
            p.add(format!("{name}.w"), uniform(rng, &[k, cin, cout], bound));
            p.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        };
        conv(&mut p, "enc.in", 3, input_width, w, 6.0);
        for i in 0..arch.levels() {
            conv(&mut p, &format!("enc.down{i}"), 4, w, w, 6.0);
        }
        conv(&mut p, "enc.out", 3, w, c, 3.0);
        conv(&mut p, "dec.in", 3, c, w, 6.0);
        for i in 0..arch.levels() {
            conv(&mut p, &format!("dec.up{i}"), 3, w, w, 6.0);
        }
        conv(&mut p, "dec.out", 3, w, input_width, 3.0);
        p.add("codebook", uniform(rng, &[n_codes, c], 1.0 / (c as f64).sqrt()));
        p.add("norm.mean", Tensor::zeros(&[input_width]));
        p.add("norm.std", Tensor::vector(vec![1.0; input_width]));
        Self {
            part,
            input_width,
            n_codes,
            arch,
            params: p,
        }
    }

    fn pid(&self, name: &str) -> usize {
        self.params
            .id(name)
            .unwrap_or_else(|| panic!("tokenizer parameter {name} missing"))
    }

    pub(crate) fn codebook_id(&self) -> usize {
        self.pid("codebook")
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            part: self.part,
            code_dim: self.arch.code_dim,
            codes: self.params.get(self.codebook_id()).data.clone(),
        }
    }

    /// Trainable parameter ids (normalisation statistics are fixed).
    pub(crate) fn trainable(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| !n.starts_with("norm."))
            .map(|(i, _)| i)
            .collect()
    }

    pub(crate) fn set_normalization(&mut self, mean: Vec<f64>, std: Vec<f64>) {
        let m = self.pid("norm.mean");
        let s = self.pid("norm.std");
        self.params.get_mut(m).data = mean;
        self.params.get_mut(s).data = std;
    }

    /// Binds every parameter into `g`; trainable ones as differentiable
    /// leaves when `train` is set.
    pub(crate) fn bind(&self, g: &mut Graph, train: bool) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (name, t))| {
                if train && !name.starts_with("norm.") {
                    g.param(i, t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    fn check_motion(&self, m: &PartMotion) -> Result<()> {
        if m.part != self.part || m.width() != self.input_width {
            return Err(SokeError::Layout(format!(
                "tokenizer for {} ({} wide) got {} motion ({} wide)",
                self.part,
                self.input_width,
                m.part,
                m.width()
            )));
        }
        if m.len() < self.arch.downsample {
            return Err(SokeError::Input(format!(
                "motion of {} frames is shorter than one downsample window ({})",
                m.len(),
                self.arch.downsample
            )));
        }
        Ok(())
    }

    /// Number of latent rows for a `t`-frame motion.
    pub fn latent_len(&self, t: usize) -> usize {
        t.div_ceil(self.arch.downsample)
    }

    /// Normalised input, padded with copies of the last frame to a whole
    /// number of downsample windows.
    fn prepare_input(&self, m: &PartMotion) -> Tensor {
        let d = self.input_width;
        let mean = &self.params.get(self.pid("norm.mean")).data;
        let std = &self.params.get(self.pid("norm.std")).data;
        let t = m.len();
        let padded = self.latent_len(t) * self.arch.downsample;
        let mut data = Vec::with_capacity(padded * d);
        for i in 0..padded {
            let f = m.frame(i.min(t - 1));
            data.extend(f.iter().enumerate().map(|(j, &v)| (v as f64 - mean[j]) / std[j]));
        }
        Tensor {
            shape: vec![padded, d],
            data,
        }
    }

    fn conv(&self, g: &mut Graph, vars: &[Var], name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = vars[self.pid(&format!("{name}.w"))];
        let b = vars[self.pid(&format!("{name}.b"))];
        g.conv1d(x, w, b, stride, pad)
    }

    pub(crate) fn encoder_graph(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = self.conv(g, vars, "enc.in", x, 1, 1)?;
        h = g.relu(h);
        for i in 0..self.arch.levels() {
            h = self.conv(g, vars, &format!("enc.down{i}"), h, 2, 1)?;
            h = g.relu(h);
        }
        self.conv(g, vars, "enc.out", h, 1, 1)
    }

    /// Decoder in parameter space: returns `[F * T_f, input_width]`.
    pub(crate) fn decoder_graph(&self, g: &mut Graph, vars: &[Var], z: Var) -> Result<Var> {
        let mut h = self.conv(g, vars, "dec.in", z, 1, 1)?;
        h = g.relu(h);
        for i in 0..self.arch.levels() {
            h = g.upsample(h, 2)?;
            h = self.conv(g, vars, &format!("dec.up{i}"), h, 1, 1)?;
            h = g.relu(h);
        }
        let y = self.conv(g, vars, "dec.out", h, 1, 1)?;
        let rows = g.shape(y)[0];
        let std = &self.params.get(self.pid("norm.std")).data;
        let scale: Vec<f64> = (0..rows).flat_map(|_| std.iter().copied()).collect();
        let scale = g.constant(Tensor::matrix(rows, self.input_width, scale)?);
        let y = g.mul(y, scale)?;
        g.add_row(y, vars[self.pid("norm.mean")])
    }

    /// Latent rows `[T_f, C]` of a motion.
    pub fn encode_latent(&self, m: &PartMotion) -> Result<Vec<f64>> {
        self.check_motion(m)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(self.prepare_input(m));
        let z = self.encoder_graph(&mut g, &vars, x)?;
        if let Some(op) = g.non_finite() {
            return Err(SokeError::NonFinite(op.to_string()));
        }
        Ok(g.value(z).data.clone())
    }

    pub fn encode(&self, m: &PartMotion) -> Result<TokenSeq> {
        let latent = self.encode_latent(m)?;
        quantize(&latent, &self.codebook())
    }

    /// Decodes tokens to `F * len` frames, trimmed or edge-padded to
    /// `n_frames` when given.
    pub fn decode(&self, tokens: &TokenSeq, n_frames: Option<usize>) -> Result<PartMotion> {
        if tokens.part != self.part {
            return Err(SokeError::Input(format!(
                "{} tokens given to the {} tokenizer",
                tokens.part, self.part
            )));
        }
        if tokens.ids.is_empty() {
            return Err(SokeError::Input("cannot decode an empty token sequence".into()));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&i| i >= self.n_codes) {
            return Err(SokeError::TokenRange(format!(
                "code {bad} out of range for the {}-entry {} codebook",
                self.n_codes, self.part
            )));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let z = g.gather(vars[self.codebook_id()], &tokens.ids)?;
        let y = self.decoder_graph(&mut g, &vars, z)?;
        if let Some(op) = g.non_finite() {
            return Err(SokeError::NonFinite(op.to_string()));
        }
        let d = self.input_width;
        let out = &g.value(y).data;
        let produced = out.len() / d;
        let t = n_frames.unwrap_or(produced);
        let mut frames = Vec::with_capacity(t * d);
        for i in 0..t {
            let src = i.min(produced - 1);
            frames.extend(out[src * d..(src + 1) * d].iter().map(|&v| v as f32));
        }
        PartMotion::new(self.part, d, frames)
    }

    /// Builds the full VQ objective for one motion into `g`.
    pub(crate) fn loss_graph(&self, g: &mut Graph, vars: &[Var], m: &PartMotion) -> Result<LossVars> {
        self.check_motion(m)?;
        let t = m.len();
        let x = g.constant(self.prepare_input(m));
        let z = self.encoder_graph(g, vars, x)?;
        let latent = g.value(z).data.clone();
        let ids = quantize(&latent, &self.codebook())?.ids;
        let q = g.gather(vars[self.codebook_id()], &ids)?;
        let st = g.straight_through(z, q)?;
        let y = self.decoder_graph(g, vars, st)?;
        let y = g.slice_rows(y, 0, t)?;
        let target = Tensor {
            shape: vec![t, self.input_width],
            data: m.as_flat().iter().map(|&v| v as f64).collect(),
        };
        let target = g.constant(target);
        let rec = g.mse(y, target)?;
        let z_sg = g.detach(z);
        let q_sg = g.detach(q);
        let emb = g.mse(q, z_sg)?;
        let emb = g.scale(emb, self.arch.w_emb);
        let com = g.mse(z, q_sg)?;
        let com = g.scale(com, self.arch.w_com);
        let total = g.add(rec, emb)?;
        let total = g.add(total, com)?;
        Ok(LossVars {
            total,
            rec,
            emb,
            com,
            latent,
            ids,
        })
    }

    pub fn vq_loss(&self, m: &PartMotion) -> Result<VqLoss> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let l = self.loss_graph(&mut g, &vars, m)?;
        Ok(VqLoss {
            total: g.value(l.total).item(),
            rec: g.value(l.rec).item(),
            emb: g.value(l.emb).item(),
            com: g.value(l.com).item(),
        })
    }

    /// Training gradients of the VQ loss for one motion, by parameter name.
    pub fn loss_gradients(&self, m: &PartMotion) -> Result<Vec<(String, Vec<f64>)>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, true);
        let l = self.loss_graph(&mut g, &vars, m)?;
        g.backward(l.total)?;
        let trainable = self.trainable();
        Ok(g.param_grads()
            .into_iter()
            .filter(|(id, _)| trainable.contains(id))
            .map(|(id, grad)| (self.params.name(id).to_string(), grad))
            .collect())
    }

    /// Records the quantizer outcome at the current parameters.
    pub fn freeze_quantization(&self, m: &PartMotion) -> Result<FrozenQuantization> {
        let latent = self.encode_latent(m)?;
        let ids = quantize(&latent, &self.codebook())?.ids;
        let book = self.codebook();
        let quantized = ids.iter().flat_map(|&i| book.row(i).iter().copied()).collect();
        Ok(FrozenQuantization { ids, latent, quantized })
    }

    /// The loss with quantization replaced by its straight-through
    /// linearisation around `frozen`: the residual `q - z` and both detached
    /// operands are held constant. Equals the VQ loss at the frozen point and
    /// is smooth in every parameter, so its numerical derivative is the
    /// reference for the straight-through gradient.
    pub fn surrogate_loss(&self, m: &PartMotion, frozen: &FrozenQuantization) -> Result<f64> {
        self.check_motion(m)?;
        let t = m.len();
        let rows = frozen.ids.len();
        let c = self.arch.code_dim;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(self.prepare_input(m));
        let z = self.encoder_graph(&mut g, &vars, x)?;
        let residual: Vec<f64> = frozen
            .quantized
            .iter()
            .zip(&frozen.latent)
            .map(|(q, z)| q - z)
            .collect();
        let residual = g.constant(Tensor::matrix(rows, c, residual)?);
        let st = g.add(z, residual)?;
        let y = self.decoder_graph(&mut g, &vars, st)?;
        let y = g.slice_rows(y, 0, t)?;
        let target = g.constant(Tensor {
            shape: vec![t, self.input_width],
            data: m.as_flat().iter().map(|&v| v as f64).collect(),
        });
        let rec = g.mse(y, target)?;
        let q = g.gather(vars[self.codebook_id()], &frozen.ids)?;
        let z0 = g.constant(Tensor::matrix(rows, c, frozen.latent.clone())?);
        let q0 = g.constant(Tensor::matrix(rows, c, frozen.quantized.clone())?);
        let emb = g.mse(q, z0)?;
        let com = g.mse(z, q0)?;
        Ok(g.value(rec).item() + self.arch.w_emb * g.value(emb).item() + self.arch.w_com * g.value(com).item())
    }
}

/// Quantizer outcome captured at one parameter setting.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenQuantization {
    pub ids: Vec<usize>,
    pub latent: Vec<f64>,
    pub quantized: Vec<f64>,
}

/// Largest `|analytic - central difference|` over all trainable entries,
/// relative to the largest gradient magnitude of the same parameter tensor.
pub fn straight_through_gradcheck(tok: &PartTokenizer, m: &PartMotion, eps: f64) -> Result<f64> {
    let analytic = tok.loss_gradients(m)?;
    let frozen = tok.freeze_quantization(m)?;
    let mut probe = tok.clone();
    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        let id = tok.params.id(name).expect("gradient of a known parameter");
        let mut numeric = vec![0.0; grad.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = tok.params.get(id).data[j];
            probe.params.get_mut(id).data[j] = orig + eps;
            let plus = probe.surrogate_loss(m, &frozen)?;
            probe.params.get_mut(id).data[j] = orig - eps;
            let minus = probe.surrogate_loss(m, &frozen)?;
            probe.params.get_mut(id).data[j] = orig;
            *n = (plus - minus) / (2.0 * eps);
        }
        let scale = grad
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |a, v| a.max(v.abs()))
            .max(1e-12);
        for (a, n) in grad.iter().zip(&numeric) {
            worst = worst.max((a - n).abs() / scale);
        }
    }
    Ok(worst)
}

/// Sidecar metadata written next to the tokenizer checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetoSidecar {
    pub part_widths: CodebookSizes,
    #[serde(rename = "F")]
    pub downsample: usize,
    pub n_codes: CodebookSizes,
    #[serde(rename = "C")]
    pub code_dim: usize,
    pub config: DetoConfig,
}

pub const DETO_CHECKPOINT: &str = "deto.ckpt";
pub const DETO_SIDECAR: &str = "deto.json";

/// The three part tokenizers bundled together.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledTokenizer {
    pub config: DetoConfig,
    pub parts: [PartTokenizer; 3],
}

impl DecoupledTokenizer {
    pub fn new(config: DetoConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let arch = config.arch();
        let layout = config.layout;
        let parts =
            Part::ALL.map(|p| PartTokenizer::new(p, layout.part_width(p), config.codebook_sizes.get(p), arch, rng));
        Ok(Self { config, parts })
    }

    pub fn layout(&self) -> PartLayout {
        self.config.layout
    }

    pub fn part(&self, p: Part) -> &PartTokenizer {
        &self.parts[p.index()]
    }

    pub fn encode(&self, seq: &MotionSequence) -> Result<[TokenSeq; 3]> {
        let parts = split_parts(seq)?;
        let [b, l, r] = &parts;
        Ok([
            self.parts[0].encode(b)?,
            self.parts[1].encode(l)?,
            self.parts[2].encode(r)?,
        ])
    }

    pub fn decode(
        &self,
        tokens: &[TokenSeq; 3],
        n_frames: Option<usize>,
        fps: f32,
        language: Language,
    ) -> Result<MotionSequence> {
        let len = tokens[0].len();
        if tokens.iter().any(|t| t.len() != len) {
            return Err(SokeError::Input("part token sequences differ in length".into()));
        }
        let t = n_frames.unwrap_or(len * self.config.downsample);
        let parts = [
            self.parts[0].decode(&tokens[0], Some(t))?,
            self.parts[1].decode(&tokens[1], Some(t))?,
            self.parts[2].decode(&tokens[2], Some(t))?,
        ];
        merge_parts(&parts, fps, self.config.layout, language)
    }

    /// Encode then decode, trimmed to the input length.
    pub fn round_trip(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        let tokens = self.encode(seq)?;
        self.decode(&tokens, Some(seq.len()), seq.fps, seq.language.clone())
    }

    fn merged_params(&self) -> ParamStore {
        let mut all = ParamStore::default();
        for pt in &self.parts {
            for (name, t) in pt.params.iter() {
                all.add(format!("{}.{name}", pt.part.tag()), t.clone());
            }
        }
        all
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join(DETO_CHECKPOINT), &self.merged_params())?;
        let sidecar = DetoSidecar {
            part_widths: CodebookSizes {
                body: self.config.layout.part_width(Part::Body),
                left_hand: self.config.layout.part_width(Part::LeftHand),
                right_hand: self.config.layout.part_width(Part::RightHand),
            },
            downsample: self.config.downsample,
            n_codes: self.config.codebook_sizes,
            code_dim: self.config.code_dim,
            config: self.config.clone(),
        };
        fs::write(dir.join(DETO_SIDECAR), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar: DetoSidecar = serde_json::from_str(&fs::read_to_string(dir.join(DETO_SIDECAR))?)?;
        let config = sidecar.config;
        config.validate()?;
        let stored = load_checkpoint(&dir.join(DETO_CHECKPOINT))?;
        let arch = config.arch();
        let layout = config.layout;
        let mut parts = Vec::with_capacity(3);
        for p in Part::ALL {
            let mut pt = PartTokenizer {
                part: p,
                input_width: layout.part_width(p),
                n_codes: config.codebook_sizes.get(p),
                arch,
                params: ParamStore::default(),
            };
            // Shapes come from a fresh skeleton; values from the checkpoint.
            let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
            pt.params = PartTokenizer::new(p, pt.input_width, pt.n_codes, arch, &mut rng).params;
            let mut sub = ParamStore::default();
            let prefix = format!("{}.", p.tag());
            for (name, t) in stored.iter() {
                if let Some(rest) = name.strip_prefix(&prefix) {
                    sub.add(rest, t.clone());
                }
            }
            pt.params.load_from(&sub)?;
            parts.push(pt);
        }
        let parts: [PartTokenizer; 3] = parts.try_into().expect("three parts");
        Ok(Self { config, parts })
    }
}
