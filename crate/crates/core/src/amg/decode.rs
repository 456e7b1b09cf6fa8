use serde::{Deserialize, Serialize};

use super::model::{GeneratorModel, Head};
use super::vocab::{TokenId, BOS, EOS};
use super::{unflatten, DecodeMode, PartTokenTriple};
use crate::error::Result;
use crate::grad::{log_softmax, Graph, Tensor, Var};
use crate::motion::{Language, Part};

/// Greedy decoding result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub triples: Vec<PartTokenTriple>,
    /// Decoder forward passes that emitted motion tokens.
    pub step_count: usize,
    /// All decoder forward passes, including the one that emitted EOS. For
    /// parallel decoding this is the per-stream maximum.
    pub forward_passes: usize,
}

/// How the three parallel streams are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    /// One stream after another on the calling thread.
    #[default]
    Serial,
    /// One thread per stream.
    Concurrent,
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Session<'a> {
    model: &'a GeneratorModel,
    g: Graph,
    vars: Vec<Var>,
    memory: Var,
}

impl<'a> Session<'a> {
    fn new(model: &'a GeneratorModel, memory: &Tensor) -> Self {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let memory = g.constant(memory.clone());
        Self { model, g, vars, memory }
    }

    /// Logits of the last decoder position for each requested head.
    fn last_logits(&mut self, inputs: Var, heads: &[Head]) -> Result<Vec<Vec<f64>>> {
        let hidden = self.model.decoder_graph(&mut self.g, &self.vars, inputs, self.memory)?;
        let n = self.g.shape(hidden)[0];
        let last = self.g.slice_rows(hidden, n - 1, 1)?;
        heads
            .iter()
            .map(|&h| {
                let l = self.model.head_logits(&mut self.g, &self.vars, last, h)?;
                Ok(self.g.value(l).data.clone())
            })
            .collect()
    }
}

impl GeneratorModel {
    /// Flat greedy decoding: one token per pass, parts interleaved B, LH, RH.
    pub fn decode_sequential(&self, memory: &Tensor, k_max: usize) -> Result<DecodeOutput> {
        self.require_mode(DecodeMode::Sequential)?;
        let k_max = k_max.min(self.config.k_max);
        let mut s = Session::new(self, memory);
        let mut tokens: Vec<TokenId> = vec![BOS];
        let mut passes = 0;
        while tokens.len() - 1 < 3 * k_max {
            let pos = tokens.len() - 1;
            let inputs = self.embed(&mut s.g, &s.vars, &tokens)?;
            let mut logits = s.last_logits(inputs, &[Head::Flat])?.remove(0);
            let mask = self.sequential_mask(pos + 1);
            let c = logits.len();
            for (l, m) in logits.iter_mut().zip(&mask.data[pos * c..]) {
                *l += m;
            }
            passes += 1;
            let tok = self.class_token(Head::Flat, argmax(&logits));
            if tok == EOS {
                break;
            }
            tokens.push(tok);
        }
        let emitted = &tokens[1..];
        let whole = emitted.len() - emitted.len() % 3;
        Ok(DecodeOutput {
            triples: unflatten(&emitted[..whole], &self.vocab)?,
            step_count: emitted.len(),
            forward_passes: passes,
        })
    }

    /// One triple per pass from three heads over a shared decoder state; the
    /// next input is the fused embedding of the emitted triple.
    pub fn decode_multihead(&self, memory: &Tensor, k_max: usize) -> Result<DecodeOutput> {
        self.require_mode(DecodeMode::Multihead)?;
        let k_max = k_max.min(self.config.k_max);
        let mut s = Session::new(self, memory);
        let heads = Part::ALL.map(Head::Part);
        let mut triples = Vec::new();
        let mut passes = 0;
        while triples.len() < k_max {
            let inputs = self.fused_inputs(&mut s.g, &s.vars, &triples)?;
            let logits = s.last_logits(inputs, &heads)?;
            passes += 1;
            let toks: Vec<TokenId> = heads
                .iter()
                .zip(&logits)
                .map(|(&h, l)| self.class_token(h, argmax(l)))
                .collect();
            if toks.contains(&EOS) {
                break;
            }
            triples.push(PartTokenTriple::from_array([toks[0], toks[1], toks[2]]));
        }
        Ok(DecodeOutput {
            step_count: triples.len(),
            triples,
            forward_passes: passes,
        })
    }

    /// Per-head logits of the next multi-head step (codes, then EOS).
    pub fn multihead_next_logits(&self, memory: &Tensor, prefix: &[PartTokenTriple]) -> Result<[Vec<f64>; 3]> {
        self.require_mode(DecodeMode::Multihead)?;
        let mut s = Session::new(self, memory);
        let inputs = self.fused_inputs(&mut s.g, &s.vars, prefix)?;
        let mut l = s.last_logits(inputs, &Part::ALL.map(Head::Part))?;
        let rh = l.pop().expect("three heads");
        let lh = l.pop().expect("three heads");
        let b = l.pop().expect("three heads");
        Ok([b, lh, rh])
    }

    /// Per-head log-probabilities of the next multi-head step.
    pub fn multihead_next_log_probs(&self, memory: &Tensor, prefix: &[PartTokenTriple]) -> Result<[Vec<f64>; 3]> {
        Ok(self.multihead_next_logits(memory, prefix)?.map(|l| log_softmax(&l)))
    }

    /// Greedy decoding of one parallel stream, at most `limit` tokens.
    fn decode_stream(
        &self,
        memory: &Tensor,
        start: TokenId,
        part: Part,
        limit: usize,
    ) -> Result<(Vec<TokenId>, usize)> {
        let mut s = Session::new(self, memory);
        let mut tokens = vec![start];
        let mut passes = 0;
        while tokens.len() - 1 < limit {
            let inputs = self.embed(&mut s.g, &s.vars, &tokens)?;
            let logits = s.last_logits(inputs, &[Head::Part(part)])?;
            passes += 1;
            let tok = self.class_token(Head::Part(part), argmax(&logits[0]));
            if tok == EOS {
                break;
            }
            tokens.push(tok);
        }
        tokens.remove(0);
        Ok((tokens, passes))
    }

    /// Three independent streams started by the language's part tokens, all
    /// truncated at the earliest EOS.
    pub fn decode_parallel(
        &self,
        memory: &Tensor,
        lang: &Language,
        k_max: usize,
        exec: Decoder,
    ) -> Result<DecodeOutput> {
        self.require_mode(DecodeMode::Parallel)?;
        let k_max = k_max.min(self.config.k_max);
        let starts: Vec<TokenId> = Part::ALL
            .iter()
            .map(|&p| self.vocab.start_token(lang, p))
            .collect::<Result<_>>()?;
        let streams: Vec<(Vec<TokenId>, usize)> = match exec {
            Decoder::Serial => {
                let mut out = Vec::with_capacity(3);
                let mut limit = k_max;
                for (i, p) in Part::ALL.into_iter().enumerate() {
                    let r = self.decode_stream(memory, starts[i], p, limit)?;
                    limit = limit.min(r.0.len());
                    out.push(r);
                }
                out
            }
            Decoder::Concurrent => std::thread::scope(|scope| {
                let handles: Vec<_> = Part::ALL
                    .into_iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let start = starts[i];
                        scope.spawn(move || self.decode_stream(memory, start, p, k_max))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("decode stream panicked"))
                    .collect::<Result<Vec<_>>>()
            })?,
        };
        let k = streams.iter().map(|(t, _)| t.len()).min().unwrap_or(0);
        let triples = (0..k)
            .map(|i| PartTokenTriple::from_array([streams[0].0[i], streams[1].0[i], streams[2].0[i]]))
            .collect();
        Ok(DecodeOutput {
            triples,
            step_count: k,
            forward_passes: streams.iter().map(|(_, p)| *p).max().unwrap_or(0),
        })
    }

    /// Encodes `prompt` and decodes greedily in the model's own mode.
    pub fn generate_tokens(&self, prompt: &[TokenId], lang: &Language) -> Result<DecodeOutput> {
        let memory = self.encode_prompt(prompt)?;
        let k = self.config.k_max;
        match self.config.mode {
            DecodeMode::Sequential => self.decode_sequential(&memory, k),
            DecodeMode::Parallel => self.decode_parallel(&memory, lang, k, Decoder::Serial),
            DecodeMode::Multihead => self.decode_multihead(&memory, k),
        }
    }
}
