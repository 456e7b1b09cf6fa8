use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amg::{
    tokens_from_triples, train_generator, triples_from_tokens, words, AmgTrainLog, DecodeOutput, GeneratorConfig,
    GeneratorModel, TrainPair, Vocabulary,
};
use crate::deto::DecoupledTokenizer;
use crate::error::{Result, SokeError};
use crate::metrics::{Generated, MotionGenerator};
use crate::motion::{Language, MotionSequence};
use crate::retrieval::{build_prompt, Lemmatizer, RetrievalConfig, SignDictionary, SuffixLemmatizer};

const BUNDLE_META: &str = "bundle.json";
const BUNDLE_DETO: &str = "deto";
const BUNDLE_DICT: &str = "dict.json";

/// Vocabulary over the training texts plus every dictionary lemma.
pub fn build_vocabulary(
    corpus: &[(String, MotionSequence)],
    dict: &SignDictionary,
    deto: &DecoupledTokenizer,
) -> Result<Vocabulary> {
    let mut languages: Vec<Language> = Vec::new();
    let mut all = Vec::new();
    for (text, seq) in corpus {
        if !languages.contains(&seq.language) {
            languages.push(seq.language.clone());
        }
        all.extend(words(text));
    }
    all.extend(dict.entries.values().flat_map(|w| w.keys().cloned()));
    Vocabulary::new(&languages, all, deto.config.codebook_sizes)
}

/// Teacher-forcing pairs: prompts from text (plus retrieved signs when
/// enabled), targets from the tokenizer codes of the reference motion.
pub fn training_pairs(
    corpus: &[(String, MotionSequence)],
    deto: &DecoupledTokenizer,
    vocab: &Vocabulary,
    dict: &SignDictionary,
    lemmatizer: &dyn Lemmatizer,
    retrieval: &RetrievalConfig,
) -> Result<Vec<TrainPair>> {
    corpus
        .iter()
        .map(|(text, seq)| {
            let target = triples_from_tokens(vocab, &deto.encode(seq)?)?;
            let prompt = build_prompt(text, &seq.language, dict, vocab, lemmatizer, retrieval)?;
            Ok(TrainPair {
                prompt,
                target,
                language: seq.language.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    retrieval: RetrievalConfig,
    fps: f32,
}

/// Everything needed to turn text into motion: generator, tokenizer,
/// dictionary and retrieval settings.
pub struct TextToSign {
    pub model: GeneratorModel,
    pub deto: DecoupledTokenizer,
    pub dict: SignDictionary,
    pub retrieval: RetrievalConfig,
    pub fps: f32,
    pub lemmatizer: Box<dyn Lemmatizer>,
}

/// Token-level and motion-level output for one sentence.
#[derive(Debug, Clone)]
pub struct Generation {
    pub decode: DecodeOutput,
    pub motion: MotionSequence,
}

impl TextToSign {
    /// Builds the vocabulary and trains a fresh generator on `corpus`.
    pub fn train(
        corpus: &[(String, MotionSequence)],
        deto: DecoupledTokenizer,
        dict: SignDictionary,
        config: GeneratorConfig,
        retrieval: RetrievalConfig,
        seed: u64,
    ) -> Result<(Self, AmgTrainLog)> {
        if corpus.is_empty() {
            return Err(SokeError::Input("empty training corpus".into()));
        }
        let lemmatizer = SuffixLemmatizer;
        let vocab = build_vocabulary(corpus, &dict, &deto)?;
        let pairs = training_pairs(corpus, &deto, &vocab, &dict, &lemmatizer, &retrieval)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = GeneratorModel::new(config, vocab, &mut rng)?;
        let log = train_generator(&mut model, &pairs, seed)?;
        let system = Self {
            model,
            deto,
            dict,
            retrieval,
            fps: corpus[0].1.fps,
            lemmatizer: Box::new(lemmatizer),
        };
        Ok((system, log))
    }

    pub fn prompt(&self, text: &str, lang: &Language) -> Result<Vec<usize>> {
        build_prompt(
            text,
            lang,
            &self.dict,
            &self.model.vocab,
            self.lemmatizer.as_ref(),
            &self.retrieval,
        )
    }

    /// Greedy generation. An empty token sequence yields a one-frame rest pose.
    pub fn generate_full(&self, text: &str, lang: &Language) -> Result<Generation> {
        let decode = self.model.generate_tokens(&self.prompt(text, lang)?, lang)?;
        let motion = if decode.triples.is_empty() {
            let mut m = MotionSequence::zeros(1, self.deto.layout())?;
            m.fps = self.fps;
            m.language = lang.clone();
            m
        } else {
            let tokens = tokens_from_triples(&self.model.vocab, &decode.triples)?;
            self.deto.decode(&tokens, None, self.fps, lang.clone())?
        };
        Ok(Generation { decode, motion })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.model.save(dir)?;
        self.deto.save(&dir.join(BUNDLE_DETO))?;
        self.dict.save(&dir.join(BUNDLE_DICT))?;
        let meta = BundleMeta {
            retrieval: self.retrieval.clone(),
            fps: self.fps,
        };
        fs::write(dir.join(BUNDLE_META), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: BundleMeta = serde_json::from_str(&fs::read_to_string(dir.join(BUNDLE_META))?)?;
        let model = GeneratorModel::load(dir)?;
        let deto = DecoupledTokenizer::load(&dir.join(BUNDLE_DETO))?;
        if model.vocab.codebook_sizes() != deto.config.codebook_sizes {
            return Err(SokeError::Checkpoint(
                "generator vocabulary does not match the tokenizer codebooks".into(),
            ));
        }
        Ok(Self {
            model,
            deto,
            dict: SignDictionary::load(&dir.join(BUNDLE_DICT))?,
            retrieval: meta.retrieval,
            fps: meta.fps,
            lemmatizer: Box::new(SuffixLemmatizer),
        })
    }
}

impl MotionGenerator for TextToSign {
    fn generate(&self, text: &str, language: &Language) -> Result<Generated> {
        let g = self.generate_full(text, language)?;
        Ok(Generated {
            motion: g.motion,
            step_count: g.decode.step_count,
        })
    }
}
