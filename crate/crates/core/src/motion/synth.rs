use std::f64::consts::TAU;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SokeError};

use super::{Language, MotionSequence, Part, PartLayout};

/// Built-in lemma list. None of these end in a suffix the lemmatizer strips.
const WORDS: [&str; 40] = [
    "book", "house", "water", "friend", "school", "teacher", "family", "happy", "learn", "help", "work", "home",
    "dawn", "night", "mother", "father", "city", "train", "coffee", "music", "read", "write", "sign", "language",
    "walk", "drive", "cook", "rain", "table", "window", "green", "yellow", "small", "large", "thank", "please", "open",
    "close", "find", "start",
];

const SUFFIXES: [&str; 3] = ["s", "ing", "ed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub layout: PartLayout,
    pub lexicon_size: usize,
    pub n_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Candidate motif lengths in frames; one is drawn per word.
    pub motif_frames: Vec<usize>,
    pub noise_amplitude: f64,
    /// Half-width of the linear cross-fade at each motif junction.
    pub blend_frames: usize,
    pub fps: f32,
    pub language: Language,
    pub body_amplitude: f64,
    pub hand_amplitude: f64,
    pub expression_amplitude: f64,
    /// Probability that a word appears inflected in the sentence text.
    pub inflection_rate: f64,
    /// Zipf exponent of word frequencies by lexicon rank; 0 is uniform.
    pub word_zipf: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            layout: PartLayout::default(),
            lexicon_size: 20,
            n_sentences: 50,
            min_words: 1,
            max_words: 4,
            motif_frames: vec![8, 12],
            noise_amplitude: 0.01,
            blend_frames: 1,
            fps: 25.0,
            language: Language::Asl,
            body_amplitude: 0.35,
            hand_amplitude: 0.6,
            expression_amplitude: 0.3,
            inflection_rate: 0.0,
            word_zipf: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.lexicon_size == 0 {
            return Err(SokeError::Config("synthetic lexicon is empty".into()));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(SokeError::Config(format!(
                "invalid sentence length range {}..={}",
                self.min_words, self.max_words
            )));
        }
        if self.motif_frames.is_empty() || self.motif_frames.contains(&0) {
            return Err(SokeError::Config("motif lengths must be positive".into()));
        }
        if !(self.noise_amplitude >= 0.0) || !(0.0..=1.0).contains(&self.inflection_rate) || !(self.word_zipf >= 0.0) {
            return Err(SokeError::Config("noise and inflection rate out of range".into()));
        }
        Ok(())
    }
}

/// The canonical motion of one lexicon word.
#[derive(Debug, Clone, PartialEq)]
pub struct WordMotif {
    pub word: String,
    pub motion: MotionSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub words: Vec<WordMotif>,
}

impl Lexicon {
    pub fn generate(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let words = (0..config.lexicon_size)
            .map(|i| {
                let word = WORDS
                    .get(i)
                    .map(|w| w.to_string())
                    .unwrap_or_else(|| format!("word{i}"));
                let len = *config.motif_frames.choose(rng).expect("validated nonempty");
                let motion = random_motif(config, len, rng)?;
                Ok(WordMotif { word, motion })
            })
            .collect::<Result<_>>()?;
        Ok(Self { words })
    }

    pub fn get(&self, word: &str) -> Option<&WordMotif> {
        self.words.iter().find(|w| w.word == word)
    }
}

fn random_motif(config: &SynthConfig, len: usize, rng: &mut ChaCha8Rng) -> Result<MotionSequence> {
    let layout = config.layout;
    let d = layout.dim();
    let expr = layout.expression_range();
    let body = layout.part_range(Part::Body);

    // Arms bent forward at the elbows in the neutral pose of the toy skeleton.
    let mut neutral = vec![0.0f64; d];
    if layout.body_joints == 11 {
        for elbow in [5usize, 9] {
            neutral[layout.joint_param_offset(elbow)] = -0.9;
        }
    }

    let mut frames = vec![0.0f32; len * d];
    for i in 0..d {
        let amp = if expr.contains(&i) {
            config.expression_amplitude
        } else if body.contains(&i) {
            // Root orientation moves less than the limbs.
            if i < 3 {
                0.3 * config.body_amplitude
            } else {
                config.body_amplitude
            }
        } else {
            config.hand_amplitude
        };
        let base = rng.gen_range(-amp..=amp);
        let swing = rng.gen_range(0.0..=amp * 0.5);
        let freq = if rng.gen_bool(0.5) { 0.5 } else { 1.0 };
        let phase = rng.gen_range(0.0..TAU);
        for t in 0..len {
            let s = (TAU * freq * t as f64 / len as f64 + phase).sin();
            frames[t * d + i] = (neutral[i] + base + swing * s) as f32;
        }
    }
    MotionSequence::new(frames, config.fps, layout, config.language.clone())
}

/// A synthetic corpus together with the lexicon it was drawn from.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub lexicon: Lexicon,
    pub sentences: Vec<(String, MotionSequence)>,
}

impl SynthCorpus {
    pub fn generate(config: &SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lexicon = Lexicon::generate(config, &mut rng)?;
        let sentences = draw_sentences(config, &lexicon, config.n_sentences, config.word_zipf, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            lexicon,
            sentences,
        })
    }

    /// Draws `n` more sentences from the same lexicon with their own word
    /// frequency exponent.
    pub fn extra_sentences(&self, n: usize, word_zipf: f64, seed: u64) -> Result<Vec<(String, MotionSequence)>> {
        if !(word_zipf >= 0.0) {
            return Err(SokeError::Config(format!(
                "word_zipf must be nonnegative, got {word_zipf}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        draw_sentences(&self.config, &self.lexicon, n, word_zipf, &mut rng)
    }

    /// Isolated-sign instances (`per_word` noisy copies of every motif),
    /// used to build a sign dictionary.
    pub fn word_instances(&self, per_word: usize, noise: f64, seed: u64) -> Vec<(String, MotionSequence)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(per_word * self.lexicon.words.len());
        for w in &self.lexicon.words {
            for _ in 0..per_word {
                let mut m = w.motion.clone();
                add_noise(&mut m, noise, &mut rng);
                out.push((w.word.clone(), m));
            }
        }
        out
    }
}

fn draw_sentences(
    config: &SynthConfig,
    lexicon: &Lexicon,
    n: usize,
    word_zipf: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(String, MotionSequence)>> {
    let zipf = (word_zipf > 0.0).then(|| {
        let weights = (1..=lexicon.words.len()).map(|r| (r as f64).powf(-word_zipf));
        WeightedIndex::new(weights).expect("positive weights")
    });
    (0..n)
        .map(|_| {
            let len = rng.gen_range(config.min_words..=config.max_words);
            let picks: Vec<usize> = (0..len)
                .map(|_| match &zipf {
                    Some(z) => z.sample(rng),
                    None => rng.gen_range(0..lexicon.words.len()),
                })
                .collect();
            compose_sentence(config, lexicon, &picks, rng)
        })
        .collect()
}

/// Builds one sentence from lexicon indices: concatenated motifs, a linear
/// cross-fade around each junction, then uniform noise.
pub(crate) fn compose_sentence(
    config: &SynthConfig,
    lexicon: &Lexicon,
    picks: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(String, MotionSequence)> {
    let d = config.layout.dim();
    let mut frames: Vec<f32> = Vec::new();
    let mut junctions = Vec::new();
    let mut text = Vec::with_capacity(picks.len());
    for (k, &w) in picks.iter().enumerate() {
        let motif = &lexicon.words[w];
        if k > 0 {
            junctions.push(frames.len() / d);
        }
        frames.extend_from_slice(motif.motion.as_flat());
        if config.inflection_rate > 0.0 && rng.gen_bool(config.inflection_rate) {
            let suffix = SUFFIXES.choose(rng).expect("nonempty");
            text.push(format!("{}{}", motif.word, suffix));
        } else {
            text.push(motif.word.clone());
        }
    }
    let total = frames.len() / d;
    let b = config.blend_frames;
    if b > 0 {
        for &j in &junctions {
            if j < b + 1 || j + b >= total {
                continue;
            }
            let (lo, hi) = (j - b - 1, j + b);
            let span = (hi - lo) as f32;
            for t in lo + 1..hi {
                let a = (t - lo) as f32 / span;
                for i in 0..d {
                    frames[t * d + i] = (1.0 - a) * frames[lo * d + i] + a * frames[hi * d + i];
                }
            }
        }
    }
    let mut seq = MotionSequence::new(frames, config.fps, config.layout, config.language.clone())?;
    add_noise(&mut seq, config.noise_amplitude, rng);
    Ok((text.join(" "), seq))
}

fn add_noise(seq: &mut MotionSequence, amp: f64, rng: &mut ChaCha8Rng) {
    if amp <= 0.0 {
        return;
    }
    for t in 0..seq.len() {
        for v in seq.frame_mut(t) {
            *v += rng.gen_range(-amp..=amp) as f32;
        }
    }
}

/// Generates `(text, motion)` pairs from a seeded synthetic lexicon.
pub fn synthesize_dataset(config: &SynthConfig, seed: u64) -> Result<Vec<(String, MotionSequence)>> {
    Ok(SynthCorpus::generate(config, seed)?.sentences)
}
