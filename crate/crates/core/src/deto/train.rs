use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{DecoupledTokenizer, PartTokenizer};
use super::DetoConfig;
use crate::error::{Result, SokeError};
use crate::grad::{Adam, AdamConfig, CosineSchedule, Graph, Var};
use crate::motion::{split_parts, MotionSequence, Part, PartMotion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetoTrainConfig {
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: Option<f64>,
    /// Re-seed codes that went unused for a whole epoch.
    pub reseed_dead_codes: bool,
    /// Fraction of epochs after which re-seeding stops so the codebook can settle.
    pub reseed_stop_fraction: f64,
    /// Lower bound on the per-dimension normalisation scale.
    pub std_floor: f64,
    /// Record a step log every this many steps (the first and last are always kept).
    pub log_every: usize,
    /// Losses above this abort training as diverged.
    pub max_loss: f64,
}

impl Default for DetoTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 0,
            clip_norm: Some(1.0),
            reseed_dead_codes: true,
            reseed_stop_fraction: 0.5,
            std_floor: 1e-2,
            log_every: 10,
            max_loss: 1e6,
        }
    }
}

impl DetoTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(SokeError::Config(
                "epochs, batch_size and log_every must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(SokeError::Config(format!(
                "bad learning rates {} / {}",
                self.lr, self.min_lr
            )));
        }
        if !(0.0..=1.0).contains(&self.reseed_stop_fraction) || !(self.std_floor > 0.0) || !(self.max_loss > 0.0) {
            return Err(SokeError::Config(
                "reseed_stop_fraction must be in [0,1], std_floor > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub rec: f64,
    pub emb: f64,
    pub com: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub rec: f64,
    pub codes_used: usize,
    pub codes_reseeded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartTrainLog {
    pub part: Part,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl PartTrainLog {
    pub fn first_rec(&self) -> f64 {
        self.steps.first().map_or(f64::NAN, |s| s.rec)
    }

    pub fn last_rec(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.rec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub parts: Vec<PartTrainLog>,
}

/// Worker cap from `SOKE_THREADS`, defaulting to the available parallelism.
pub fn thread_cap() -> usize {
    std::env::var("SOKE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn normalization(data: &[PartMotion], floor: f64) -> (Vec<f64>, Vec<f64>) {
    let d = data[0].width();
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut n = 0usize;
    for m in data {
        for i in 0..m.len() {
            for (j, &v) in m.frame(i).iter().enumerate() {
                sum[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
            n += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(floor))
        .collect();
    (mean, std)
}

/// Initialises the codebook from encoder outputs over the whole corpus.
fn warm_start_codebook(tok: &mut PartTokenizer, data: &[PartMotion], rng: &mut ChaCha8Rng) -> Result<()> {
    let c = tok.arch.code_dim;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for m in data {
        let latent = tok.encode_latent(m)?;
        rows.extend(latent.chunks_exact(c).map(<[f64]>::to_vec));
    }
    rows.shuffle(rng);
    let scale = rows.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max).max(1e-6);
    let id = tok.codebook_id();
    let n = tok.n_codes;
    let book = &mut tok.params.get_mut(id).data;
    for k in 0..n {
        let src = &rows[k % rows.len()];
        let jitter = if k < rows.len() { 0.0 } else { 1e-2 * scale };
        for j in 0..c {
            book[k * c + j] = src[j] + jitter * rng.gen_range(-1.0..1.0);
        }
    }
    Ok(())
}

/// Trains one part tokenizer in place. Deterministic given `seed`.
pub fn train_part_tokenizer(
    tok: &mut PartTokenizer,
    data: &[PartMotion],
    config: &DetoTrainConfig,
    seed: u64,
) -> Result<PartTrainLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(SokeError::Input("empty training corpus".into()));
    }
    let part = tok.part;
    let diverged = |step: u64, what: String| SokeError::Divergence(format!("{part} tokenizer at step {step}: {what}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mean, std) = normalization(data, config.std_floor);
    tok.set_normalization(mean, std);
    warm_start_codebook(tok, data, &mut rng)?;

    let per_epoch = data.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * per_epoch) as u64;
    let adam_cfg = AdamConfig {
        clip_norm: config.clip_norm,
        schedule: CosineSchedule {
            base_lr: config.lr,
            min_lr: config.min_lr,
            warmup_steps: config.warmup_steps,
            total_steps,
        },
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, &tok.params);
    let trainable = tok.trainable();
    let reseed_until = (config.epochs as f64 * config.reseed_stop_fraction).ceil() as usize;
    let c = tok.arch.code_dim;

    let mut log = PartTrainLog {
        part,
        steps: Vec::new(),
        epochs: Vec::new(),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut used = vec![false; tok.n_codes];
        let mut latents: Vec<f64> = Vec::new();
        let (mut ep_total, mut ep_rec) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let step = adam.state.step;
            let mut g = Graph::new();
            let vars = tok.bind(&mut g, true);
            let mut terms: Vec<[Var; 4]> = Vec::with_capacity(batch.len());
            for &i in batch {
                let l = tok.loss_graph(&mut g, &vars, &data[i])?;
                for &id in &l.ids {
                    used[id] = true;
                }
                latents.extend_from_slice(&l.latent);
                terms.push([l.total, l.rec, l.emb, l.com]);
            }
            let mut acc = terms[0];
            for t in &terms[1..] {
                for k in 0..4 {
                    acc[k] = g.add(acc[k], t[k])?;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let acc = acc.map(|v| g.scale(v, inv));
            let vals = acc.map(|v| g.value(v).item());
            if vals.iter().any(|v| !v.is_finite()) || vals[0] > config.max_loss {
                return Err(diverged(step, format!("loss is {}", vals[0])));
            }
            g.backward(acc[0]).map_err(|e| diverged(step, e.to_string()))?;
            let grads: Vec<(usize, Vec<f64>)> = g
                .param_grads()
                .into_iter()
                .filter(|(id, _)| trainable.contains(id))
                .collect();
            let lr = adam.current_lr();
            adam.step(&mut tok.params, &grads)
                .map_err(|e| diverged(step, e.to_string()))?;
            ep_total += vals[0];
            ep_rec += vals[1];
            if step % config.log_every as u64 == 0 || step + 1 == total_steps {
                log.steps.push(StepLog {
                    step,
                    lr,
                    total: vals[0],
                    rec: vals[1],
                    emb: vals[2],
                    com: vals[3],
                });
            }
        }
        let codes_used = used.iter().filter(|&&u| u).count();
        let mut reseeded = 0;
        if config.reseed_dead_codes && epoch < reseed_until {
            let n_rows = latents.len() / c;
            let id = tok.codebook_id();
            let book = &mut tok.params.get_mut(id).data;
            for (k, _) in used.iter().enumerate().filter(|(_, &u)| !u) {
                let r = rng.gen_range(0..n_rows);
                book[k * c..(k + 1) * c].copy_from_slice(&latents[r * c..(r + 1) * c]);
                reseeded += 1;
            }
        }
        log.epochs.push(EpochLog {
            epoch,
            total: ep_total / per_epoch as f64,
            rec: ep_rec / per_epoch as f64,
            codes_used,
            codes_reseeded: reseeded,
        });
    }
    Ok(log)
}

/// Trains the three part tokenizers, on up to three threads (capped by
/// `SOKE_THREADS`). Results do not depend on the thread count.
pub fn train_tokenizer(
    corpus: &[MotionSequence],
    config: &DetoConfig,
    seed: u64,
) -> Result<(DecoupledTokenizer, TrainLog)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(SokeError::Input("empty training corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tok = DecoupledTokenizer::new(config.clone(), &mut rng)?;
    let mut per_part: [Vec<PartMotion>; 3] = Default::default();
    for seq in corpus {
        if seq.layout != config.layout {
            return Err(SokeError::Layout(
                "corpus layout differs from the tokenizer layout".into(),
            ));
        }
        if seq.len() < config.downsample {
            continue;
        }
        for (slot, pm) in per_part.iter_mut().zip(split_parts(seq)?) {
            slot.push(pm);
        }
    }
    if per_part[0].is_empty() {
        return Err(SokeError::Input(format!(
            "no sequence has at least {} frames",
            config.downsample
        )));
    }
    let seeds: Vec<u64> = (0..3).map(|_| rng.gen()).collect();
    let workers = thread_cap().min(3);
    let train = &config.train;
    let mut results: Vec<Option<Result<PartTrainLog>>> = vec![None, None, None];
    let jobs: Vec<(usize, &mut PartTokenizer)> = tok.parts.iter_mut().enumerate().collect();
    let mut jobs = jobs.into_iter();
    loop {
        let wave: Vec<_> = jobs.by_ref().take(workers).collect();
        if wave.is_empty() {
            break;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = wave
                .into_iter()
                .map(|(i, pt)| {
                    let data = &per_part[i];
                    let sd = seeds[i];
                    (i, s.spawn(move || train_part_tokenizer(pt, data, train, sd)))
                })
                .collect();
            for (i, h) in handles {
                results[i] = Some(h.join().expect("tokenizer training thread panicked"));
            }
        });
    }
    let parts = results
        .into_iter()
        .map(|r| r.expect("every part trained"))
        .collect::<Result<Vec<_>>>()?;
    Ok((tok, TrainLog { parts }))
}
