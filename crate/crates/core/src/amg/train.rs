use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{GeneratorModel, Head};
use super::vocab::{TokenId, BOS, EOS};
use super::{flatten, DecodeMode, PartTokenTriple};
use crate::error::{Result, SokeError};
use crate::grad::{Adam, AdamConfig, CosineSchedule, Graph, Var};
use crate::motion::{Language, Part};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmgTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: Option<f64>,
    pub log_every: usize,
}

impl Default for AmgTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 10,
            lr: 2e-3,
            min_lr: 1e-5,
            warmup_steps: 50,
            clip_norm: Some(1.0),
            log_every: 50,
        }
    }
}

impl AmgTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(SokeError::Config("batch_size and log_every must be positive".into()));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(SokeError::Config(format!(
                "bad learning rates {} / {}",
                self.lr, self.min_lr
            )));
        }
        Ok(())
    }
}

/// One training example: encoder prompt and target motion triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPair {
    pub prompt: Vec<TokenId>,
    pub target: Vec<PartTokenTriple>,
    pub language: Language,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmgStepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmgTrainLog {
    pub mode: DecodeMode,
    pub steps: Vec<AmgStepLog>,
    pub warnings: Vec<String>,
}

impl AmgTrainLog {
    pub fn first_loss(&self) -> f64 {
        self.steps.first().map_or(f64::NAN, |s| s.loss)
    }

    pub fn last_loss(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.loss)
    }
}

fn cross_entropy(model: &GeneratorModel, g: &mut Graph, logits: Var, head: Head, targets: &[TokenId]) -> Result<Var> {
    let classes = targets
        .iter()
        .map(|&t| model.token_class(head, t))
        .collect::<Result<Vec<_>>>()?;
    g.cross_entropy(logits, &classes)
}

impl GeneratorModel {
    /// Teacher-forced loss of one pair: summed over heads (multi-head) or
    /// streams (parallel), the flat sequence loss for sequential mode.
    pub(crate) fn pair_loss(&self, g: &mut Graph, vars: &[Var], pair: &TrainPair) -> Result<Var> {
        let (prompt, _) = self.fit_prompt(&pair.prompt);
        let target = &pair.target[..pair.target.len().min(self.config.k_max)];
        let memory = self.encoder_graph(g, vars, prompt)?;
        match self.config.mode {
            DecodeMode::Sequential => {
                let flat = flatten(target);
                let mut inputs = vec![BOS];
                inputs.extend_from_slice(&flat);
                let mut targets = flat;
                targets.push(EOS);
                let x = self.embed(g, vars, &inputs)?;
                let h = self.decoder_graph(g, vars, x, memory)?;
                let logits = self.head_logits(g, vars, h, Head::Flat)?;
                let mask = g.constant(self.sequential_mask(inputs.len()));
                let logits = g.add(logits, mask)?;
                cross_entropy(self, g, logits, Head::Flat, &targets)
            }
            DecodeMode::Multihead => {
                let x = self.fused_inputs(g, vars, target)?;
                let h = self.decoder_graph(g, vars, x, memory)?;
                let mut total: Option<Var> = None;
                for p in Part::ALL {
                    let mut targets: Vec<TokenId> = target.iter().map(|t| t.get(p)).collect();
                    targets.push(EOS);
                    let logits = self.head_logits(g, vars, h, Head::Part(p))?;
                    let ce = cross_entropy(self, g, logits, Head::Part(p), &targets)?;
                    total = Some(match total {
                        Some(t) => g.add(t, ce)?,
                        None => ce,
                    });
                }
                Ok(total.expect("three heads"))
            }
            DecodeMode::Parallel => {
                let mut total: Option<Var> = None;
                for p in Part::ALL {
                    let mut inputs = vec![self.vocab.start_token(&pair.language, p)?];
                    inputs.extend(target.iter().map(|t| t.get(p)));
                    let mut targets: Vec<TokenId> = inputs[1..].to_vec();
                    targets.push(EOS);
                    let x = self.embed(g, vars, &inputs)?;
                    let h = self.decoder_graph(g, vars, x, memory)?;
                    let logits = self.head_logits(g, vars, h, Head::Part(p))?;
                    let ce = cross_entropy(self, g, logits, Head::Part(p), &targets)?;
                    total = Some(match total {
                        Some(t) => g.add(t, ce)?,
                        None => ce,
                    });
                }
                Ok(total.expect("three streams"))
            }
        }
    }

    /// Mean teacher-forced loss over `pairs` at the current parameters.
    pub fn loss(&self, pairs: &[TrainPair]) -> Result<f64> {
        let mut sum = 0.0;
        for p in pairs {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false);
            let l = self.pair_loss(&mut g, &vars, p)?;
            sum += g.value(l).item();
        }
        Ok(sum / pairs.len().max(1) as f64)
    }
}

/// Trains `model` in place with teacher forcing. Deterministic given `seed`.
pub fn train_generator(model: &mut GeneratorModel, pairs: &[TrainPair], seed: u64) -> Result<AmgTrainLog> {
    let cfg = model.config.train.clone();
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(SokeError::Input("no training pairs".into()));
    }
    let mut log = AmgTrainLog {
        mode: model.config.mode,
        steps: Vec::new(),
        warnings: Vec::new(),
    };
    for (i, p) in pairs.iter().enumerate() {
        if model.fit_prompt(&p.prompt).1 {
            log.warnings.push(format!(
                "pair {i}: prompt of {} tokens truncated to {}",
                p.prompt.len(),
                model.config.max_prompt_len
            ));
        }
        if p.target.len() > model.config.k_max {
            log.warnings.push(format!(
                "pair {i}: target of {} triples truncated to {}",
                p.target.len(),
                model.config.k_max
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adam_cfg = AdamConfig {
        clip_norm: cfg.clip_norm,
        schedule: CosineSchedule {
            base_lr: cfg.lr,
            min_lr: cfg.min_lr,
            warmup_steps: cfg.warmup_steps,
            total_steps: cfg.steps as u64,
        },
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, &model.params);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(pairs.len()) {
            if cursor == order.len() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let mut total: Option<Var> = None;
        for &i in &batch {
            let l = model.pair_loss(&mut g, &vars, &pairs[i])?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let loss = g.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(SokeError::Divergence(format!("generator loss {value} at step {step}")));
        }
        g.backward(loss)
            .map_err(|e| SokeError::Divergence(format!("step {step}: {e}")))?;
        let lr = adam.current_lr();
        adam.step(&mut model.params, &g.param_grads())?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.steps.push(AmgStepLog { step, lr, loss: value });
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amg::{GeneratorConfig, Vocabulary};
    use crate::deto::CodebookSizes;
    use rand::Rng;

    fn setup(mode: DecodeMode, steps: usize) -> (GeneratorModel, Vec<TrainPair>) {
        let sizes = CodebookSizes {
            body: 6,
            left_hand: 7,
            right_hand: 8,
        };
        let texts = ["red ball", "blue ball", "red cup", "blue cup"];
        let vocab = Vocabulary::from_corpus(texts, &[], sizes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pairs = texts
            .iter()
            .map(|t| {
                let mut prompt = vec![vocab.language_token(&Language::Asl).unwrap()];
                prompt.extend(vocab.text_ids(t));
                let k = rng.gen_range(2..5);
                let target = (0..k)
                    .map(|_| PartTokenTriple {
                        body: vocab.motion_token(Part::Body, rng.gen_range(0..6)).unwrap(),
                        left_hand: vocab.motion_token(Part::LeftHand, rng.gen_range(0..7)).unwrap(),
                        right_hand: vocab.motion_token(Part::RightHand, rng.gen_range(0..8)).unwrap(),
                    })
                    .collect();
                TrainPair {
                    prompt,
                    target,
                    language: Language::Asl,
                }
            })
            .collect();
        let config = GeneratorConfig {
            mode,
            dim: 16,
            heads: 2,
            ff_dim: 32,
            enc_layers: 1,
            dec_layers: 1,
            k_max: 6,
            max_prompt_len: 8,
            train: AmgTrainConfig {
                steps,
                batch_size: 4,
                lr: 1e-2,
                warmup_steps: 5,
                log_every: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = GeneratorModel::new(config, vocab, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (model, pairs)
    }

    /// Mean loss of uniform logits over the classes each position may emit.
    fn uniform_loss(m: &GeneratorModel, pairs: &[TrainPair]) -> f64 {
        let s = m.vocab.codebook_sizes();
        let n = [s.body as f64, s.left_hand as f64, s.right_hand as f64];
        let per_pair = |k: usize| match m.config.mode {
            DecodeMode::Sequential => {
                let k = k as f64;
                ((k + 1.0) * (n[0] + 1.0).ln() + k * n[1].ln() + k * n[2].ln()) / (3.0 * k + 1.0)
            }
            _ => n.iter().map(|c| (c + 1.0).ln()).sum(),
        };
        pairs.iter().map(|p| per_pair(p.target.len())).sum::<f64>() / pairs.len() as f64
    }

    #[test]
    fn initial_loss_is_near_uniform_entropy() {
        for mode in DecodeMode::ALL {
            let (m, pairs) = setup(mode, 0);
            let l = m.loss(&pairs).unwrap();
            let u = uniform_loss(&m, &pairs);
            assert!((l - u).abs() < 0.02 * u, "{mode}: {l} vs {u}");
        }
    }

    #[test]
    fn every_mode_overfits_a_toy_set() {
        for mode in DecodeMode::ALL {
            let (mut m, pairs) = setup(mode, 200);
            let log = train_generator(&mut m, &pairs, 0).unwrap();
            assert!(
                log.last_loss() < 0.05 * log.first_loss(),
                "{mode}: {:?}",
                (log.first_loss(), log.last_loss())
            );
            for p in &pairs {
                let out = m.generate_tokens(&p.prompt, &p.language).unwrap();
                assert_eq!(out.triples, p.target, "{mode}");
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let (mut a, pairs) = setup(DecodeMode::Multihead, 5);
        let (mut b, _) = setup(DecodeMode::Multihead, 5);
        train_generator(&mut a, &pairs, 3).unwrap();
        train_generator(&mut b, &pairs, 3).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn long_prompts_are_truncated_with_a_warning() {
        let (mut m, mut pairs) = setup(DecodeMode::Multihead, 1);
        pairs[0].prompt = vec![pairs[0].prompt[0]; 20];
        let log = train_generator(&mut m, &pairs, 0).unwrap();
        assert_eq!(log.warnings.len(), 1);
        assert!(log.warnings[0].contains("truncated"));
    }

    #[test]
    fn save_load_round_trip() {
        let (mut m, pairs) = setup(DecodeMode::Parallel, 2);
        train_generator(&mut m, &pairs, 0).unwrap();
        m.params.round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(GeneratorModel::load(dir.path()).unwrap(), m);
    }
}
