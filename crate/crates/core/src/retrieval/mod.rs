//! Word-level sign dictionary and retrieval-augmented prompts.
//!
//! The dictionary keeps, per language and lemma, the per-part token codes of
//! the isolated-sign instance that survives a tokenizer round trip best.
//! Prompts are `[lang] ++ text ++ blocks`, one `B ++ LH ++ RH` block per
//! matched word in sentence order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::amg::{words, TokenId, Vocabulary, SEP};
use crate::deto::DecoupledTokenizer;
use crate::error::{Result, SokeError};
use crate::metrics::pa_mpjpe;
use crate::motion::{KinematicChain, Language, MotionSequence, Part};

/// Maps a surface word to its dictionary key.
pub trait Lemmatizer: Send + Sync {
    fn lemma(&self, word: &str) -> String;
}

/// Lowercases and strips one of `-ing`, `-ed`, `-s`, keeping at least three
/// characters of stem. Words ending in `ss` keep their final `s`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SuffixLemmatizer;

impl Lemmatizer for SuffixLemmatizer {
    fn lemma(&self, word: &str) -> String {
        let w = word.to_lowercase();
        for suffix in ["ing", "ed", "s"] {
            if let Some(stem) = w.strip_suffix(suffix) {
                if stem.chars().count() < 3 || (suffix == "s" && stem.ends_with('s')) {
                    continue;
                }
                return stem.to_string();
            }
        }
        w
    }
}

/// Per-part codebook indices of one sign plus its round-trip error (mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryEntry {
    #[serde(rename = "B")]
    pub body: Vec<usize>,
    #[serde(rename = "LH")]
    pub left_hand: Vec<usize>,
    #[serde(rename = "RH")]
    pub right_hand: Vec<usize>,
    pub err: f32,
}

impl DictionaryEntry {
    pub fn codes(&self, part: Part) -> &[usize] {
        match part {
            Part::Body => &self.body,
            Part::LeftHand => &self.left_hand,
            Part::RightHand => &self.right_hand,
        }
    }

    /// Number of token triples.
    pub fn len(&self) -> usize {
        self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }

    fn validate(&self, word: &str) -> Result<()> {
        let k = self.body.len();
        if k == 0 || self.left_hand.len() != k || self.right_hand.len() != k {
            return Err(SokeError::Input(format!(
                "dictionary entry {word:?} needs equal nonempty part sequences"
            )));
        }
        if !(self.err >= 0.0) {
            return Err(SokeError::Input(format!(
                "dictionary entry {word:?} has error {}",
                self.err
            )));
        }
        Ok(())
    }
}

/// Language tag, then lemma, to entry. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SignDictionary {
    pub entries: BTreeMap<String, BTreeMap<String, DictionaryEntry>>,
}

impl SignDictionary {
    pub fn get(&self, lang: &Language, lemma: &str) -> Option<&DictionaryEntry> {
        self.entries.get(lang.as_str())?.get(lemma)
    }

    /// Total number of entries over all languages.
    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        for words in self.entries.values() {
            for (w, e) in words {
                e.validate(w)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let d: SignDictionary = serde_json::from_str(&fs::read_to_string(path)?)?;
        d.validate()?;
        Ok(d)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// When false prompts carry only the language tag and text.
    pub enabled: bool,
    /// Insert `<SEP>` before every retrieved block.
    pub separator: bool,
}

impl RetrievalConfig {
    pub fn on() -> Self {
        Self {
            enabled: true,
            separator: false,
        }
    }
}

/// Dictionary plus build warnings for skipped instances.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryBuild {
    pub dictionary: SignDictionary,
    pub warnings: Vec<String>,
}

/// Tokenizes every instance and keeps, per (language, lemma), the one with
/// the lowest round-trip PA-MPJPE. Ties keep the earliest instance.
/// Instances shorter than one downsample window are skipped.
pub fn build_dictionary(
    instances: &[(String, MotionSequence)],
    deto: &DecoupledTokenizer,
    lemmatizer: &dyn Lemmatizer,
) -> Result<DictionaryBuild> {
    let chain = KinematicChain::toy(deto.layout())?;
    let min_frames = deto.config.downsample;
    let mut dictionary = SignDictionary::default();
    let mut warnings = Vec::new();
    for (i, (word, seq)) in instances.iter().enumerate() {
        if seq.len() < min_frames {
            warnings.push(format!(
                "instance {i} ({word:?}): {} frames is shorter than the {min_frames}-frame token window; skipped",
                seq.len()
            ));
            continue;
        }
        let tokens = deto.encode(seq)?;
        let recon = deto.decode(&tokens, Some(seq.len()), seq.fps, seq.language.clone())?;
        let err = pa_mpjpe(&chain, &recon, seq)? as f32;
        let [b, l, r] = tokens;
        let entry = DictionaryEntry {
            body: b.ids,
            left_hand: l.ids,
            right_hand: r.ids,
            err,
        };
        let slot = dictionary
            .entries
            .entry(seq.language.as_str().to_string())
            .or_default()
            .entry(lemmatizer.lemma(word));
        use std::collections::btree_map::Entry;
        match slot {
            Entry::Vacant(v) => {
                v.insert(entry);
            }
            Entry::Occupied(mut o) => {
                if entry.err < o.get().err {
                    o.insert(entry);
                }
            }
        }
    }
    Ok(DictionaryBuild { dictionary, warnings })
}

/// Encoder prompt for `text`. Words are matched against the dictionary by
/// lemma; unmatched words only contribute their text token.
pub fn build_prompt(
    text: &str,
    lang: &Language,
    dict: &SignDictionary,
    vocab: &Vocabulary,
    lemmatizer: &dyn Lemmatizer,
    config: &RetrievalConfig,
) -> Result<Vec<TokenId>> {
    let mut prompt = vec![vocab.language_token(lang)?];
    prompt.extend(vocab.text_ids(text));
    if !config.enabled {
        return Ok(prompt);
    }
    for w in words(text) {
        let Some(entry) = dict.get(lang, &lemmatizer.lemma(&w)) else {
            continue;
        };
        if config.separator {
            prompt.push(SEP);
        }
        for p in Part::ALL {
            for &code in entry.codes(p) {
                prompt.push(vocab.motion_token(p, code)?);
            }
        }
    }
    Ok(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deto::{CodebookSizes, DetoConfig};
    use crate::motion::{PartLayout, SynthConfig, SynthCorpus};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokenizer() -> DecoupledTokenizer {
        let config = DetoConfig {
            codebook_sizes: CodebookSizes {
                body: 16,
                left_hand: 16,
                right_hand: 16,
            },
            code_dim: 8,
            width: 8,
            ..Default::default()
        };
        DecoupledTokenizer::new(config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn entry(k: usize, code: usize) -> DictionaryEntry {
        DictionaryEntry {
            body: vec![code; k],
            left_hand: vec![code; k],
            right_hand: vec![code; k],
            err: 1.0,
        }
    }

    fn dict(words: &[(&str, usize)]) -> SignDictionary {
        let mut d = SignDictionary::default();
        let asl = d.entries.entry("ASL".into()).or_default();
        for (i, (w, k)) in words.iter().enumerate() {
            asl.insert(w.to_string(), entry(*k, i));
        }
        d
    }

    fn vocab() -> Vocabulary {
        let sizes = CodebookSizes {
            body: 16,
            left_hand: 16,
            right_hand: 16,
        };
        Vocabulary::from_corpus(["the red book near house cups"], &[], sizes).unwrap()
    }

    #[test]
    fn lemmatizer_strips_known_suffixes() {
        let l = SuffixLemmatizer;
        for (w, e) in [
            ("Books", "book"),
            ("signing", "sign"),
            ("walked", "walk"),
            ("class", "class"),
            ("is", "is"),
            ("bed", "bed"),
            ("sing", "sing"),
            ("HOUSE", "house"),
        ] {
            assert_eq!(l.lemma(w), e, "{w}");
        }
    }

    #[test]
    fn keeps_the_lowest_error_instance() {
        let deto = tokenizer();
        let chain = KinematicChain::toy(deto.layout()).unwrap();
        let corpus = SynthCorpus::generate(&SynthConfig::default(), 3).unwrap();
        let instances = corpus.word_instances(3, 0.2, 9);
        let book: Vec<_> = instances.iter().filter(|(w, _)| w == "book").cloned().collect();
        let errs: Vec<f64> = book
            .iter()
            .map(|(_, m)| pa_mpjpe(&chain, &deto.round_trip(m).unwrap(), m).unwrap())
            .collect();
        let best = (0..errs.len()).fold(0, |b, i| if errs[i] < errs[b] { i } else { b });
        let built = build_dictionary(&book, &deto, &SuffixLemmatizer).unwrap();
        let e = built.dictionary.get(&Language::Asl, "book").unwrap();
        assert_eq!(e.err, errs[best] as f32);
        let tokens = deto.encode(&book[best].1).unwrap();
        assert_eq!(e.body, tokens[0].ids);
        assert_eq!(e.right_hand, tokens[2].ids);
        assert!(built.warnings.is_empty());
    }

    #[test]
    fn later_instances_replace_only_when_strictly_better() {
        let deto = tokenizer();
        let corpus = SynthCorpus::generate(&SynthConfig::default(), 3).unwrap();
        let m = corpus.lexicon.words[0].motion.clone();
        let other = corpus.lexicon.words[1].motion.clone();
        let instances = vec![
            ("a".to_string(), m.clone()),
            ("a".to_string(), m),
            ("a".to_string(), other),
        ];
        let one = build_dictionary(&instances[..1], &deto, &SuffixLemmatizer).unwrap();
        let all = build_dictionary(&instances, &deto, &SuffixLemmatizer).unwrap();
        let first = one.dictionary.get(&Language::Asl, "a").unwrap();
        let kept = all.dictionary.get(&Language::Asl, "a").unwrap();
        assert!(kept.err <= first.err);
        if kept.err == first.err {
            assert_eq!(kept, first);
        }
    }

    #[test]
    fn one_entry_per_word_and_empty_input() {
        let deto = tokenizer();
        let corpus = SynthCorpus::generate(&SynthConfig::default(), 3).unwrap();
        let instances = corpus.word_instances(1, 0.0, 1);
        let built = build_dictionary(&instances, &deto, &SuffixLemmatizer).unwrap();
        assert_eq!(built.dictionary.len(), corpus.lexicon.words.len());
        for w in &corpus.lexicon.words {
            assert!(built.dictionary.get(&Language::Asl, &w.word).is_some());
        }
        assert!(build_dictionary(&[], &deto, &SuffixLemmatizer)
            .unwrap()
            .dictionary
            .is_empty());
    }

    #[test]
    fn short_instances_are_skipped_with_a_warning() {
        let deto = tokenizer();
        let short = MotionSequence::zeros(2, PartLayout::default()).unwrap();
        let built = build_dictionary(&[("tiny".into(), short)], &deto, &SuffixLemmatizer).unwrap();
        assert!(built.dictionary.is_empty());
        assert_eq!(built.warnings.len(), 1);
    }

    #[test]
    fn rebuild_is_deterministic() {
        let deto = tokenizer();
        let corpus = SynthCorpus::generate(&SynthConfig::default(), 4).unwrap();
        let instances = corpus.word_instances(2, 0.1, 2);
        let a = build_dictionary(&instances, &deto, &SuffixLemmatizer).unwrap();
        let b = build_dictionary(&instances, &deto, &SuffixLemmatizer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dictionary_gives_text_prompt() {
        let v = vocab();
        let p = build_prompt(
            "the red book",
            &Language::Asl,
            &SignDictionary::default(),
            &v,
            &SuffixLemmatizer,
            &RetrievalConfig::on(),
        )
        .unwrap();
        let mut expect = vec![v.language_token(&Language::Asl).unwrap()];
        expect.extend(v.text_ids("the red book"));
        assert_eq!(p, expect);
    }

    #[test]
    fn matched_words_append_blocks_in_sentence_order() {
        let v = vocab();
        let d = dict(&[("house", 2), ("book", 3)]);
        let text = "the red book near house";
        let p = build_prompt(text, &Language::Asl, &d, &v, &SuffixLemmatizer, &RetrievalConfig::on()).unwrap();
        let tail = &p[1 + 5..];
        assert_eq!(tail.len(), 3 * 3 + 3 * 2);
        let book = d.get(&Language::Asl, "book").unwrap();
        let house = d.get(&Language::Asl, "house").unwrap();
        let block = |e: &DictionaryEntry| -> Vec<TokenId> {
            let mut out = Vec::new();
            for part in Part::ALL {
                out.extend(e.codes(part).iter().map(|&c| v.motion_token(part, c).unwrap()));
            }
            out
        };
        let mut expect = block(book);
        expect.extend(block(house));
        assert_eq!(tail, &expect[..]);

        let off = RetrievalConfig::default();
        assert_eq!(
            build_prompt(text, &Language::Asl, &d, &v, &SuffixLemmatizer, &off).unwrap(),
            p[..6].to_vec()
        );

        let sep = RetrievalConfig {
            enabled: true,
            separator: true,
        };
        let q = build_prompt(text, &Language::Asl, &d, &v, &SuffixLemmatizer, &sep).unwrap();
        assert_eq!(q.len(), p.len() + 2);
        assert_eq!(q[6], SEP);
    }

    #[test]
    fn inflected_words_match_their_lemma() {
        let v = vocab();
        let d = dict(&[("cup", 1)]);
        let p = build_prompt(
            "cups",
            &Language::Asl,
            &d,
            &v,
            &SuffixLemmatizer,
            &RetrievalConfig::on(),
        )
        .unwrap();
        assert_eq!(p.len(), 2 + 3);
        let other = build_prompt(
            "cups",
            &Language::Dgs,
            &d,
            &v,
            &SuffixLemmatizer,
            &RetrievalConfig::on(),
        )
        .unwrap();
        assert_eq!(other.len(), 2);
    }

    #[test]
    fn dictionary_file_round_trip() {
        let d = dict(&[("house", 2), ("book", 3)]);
        let json = serde_json::to_value(&d).unwrap();
        assert_eq!(json["ASL"]["book"]["B"], serde_json::json!([1, 1, 1]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dict.json");
        d.save(&path).unwrap();
        assert_eq!(SignDictionary::load(&path).unwrap(), d);
        fs::write(&path, r#"{"ASL": {"x": {"B": [1], "LH": [], "RH": [1], "err": 0.5}}}"#).unwrap();
        assert!(SignDictionary::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn prompt_length_accounting(
            text in prop::collection::vec(prop::sample::select(vec!["the", "red", "book", "near", "house", "cups", "zebra"]), 0..8),
            lens in prop::collection::vec(1usize..5, 3),
            separator in any::<bool>(),
        ) {
            let v = vocab();
            let d = dict(&[("book", lens[0]), ("house", lens[1]), ("cup", lens[2])]);
            let text = text.join(" ");
            let cfg = RetrievalConfig { enabled: true, separator };
            let p = build_prompt(&text, &Language::Asl, &d, &v, &SuffixLemmatizer, &cfg).unwrap();
            let words = words(&text);
            let matched: usize = words.iter().map(|w| match w.as_str() {
                "book" => 3 * lens[0] + separator as usize,
                "house" => 3 * lens[1] + separator as usize,
                "cups" => 3 * lens[2] + separator as usize,
                _ => 0,
            }).sum();
            prop_assert_eq!(p.len(), 1 + words.len() + matched);
            prop_assert_eq!(build_prompt(&text, &Language::Asl, &d, &v, &SuffixLemmatizer, &cfg).unwrap(), p);
        }
    }
}
