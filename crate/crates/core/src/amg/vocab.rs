use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::deto::CodebookSizes;
use crate::error::{Result, SokeError};
use crate::motion::{Language, Part};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
/// Optional separator between retrieved sign blocks.
pub const SEP: TokenId = 4;

/// Lowercased whitespace tokenization.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Unified token space: control tokens, language tokens, per-language part
/// start tokens, words, then the three motion sub-vocabularies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    languages: Vec<Language>,
    word_range: Range<TokenId>,
    motion_start: TokenId,
    codebook_sizes: CodebookSizes,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyFile {
    languages: Vec<Language>,
    words: Vec<String>,
    codebook_sizes: CodebookSizes,
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        Self {
            words: v.tokens[v.word_range.clone()].to_vec(),
            languages: v.languages,
            codebook_sizes: v.codebook_sizes,
        }
    }
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = SokeError;
    fn try_from(f: VocabularyFile) -> Result<Self> {
        Vocabulary::new(&f.languages, f.words, f.codebook_sizes)
    }
}

fn part_suffix(p: Part) -> &'static str {
    p.tag()
}

impl Vocabulary {
    /// Builds the vocabulary. Words are deduplicated and sorted; the three
    /// standard languages are always present.
    pub fn new(languages: &[Language], words: impl IntoIterator<Item = String>, sizes: CodebookSizes) -> Result<Self> {
        let mut langs = vec![Language::Asl, Language::Csl, Language::Dgs];
        for l in languages {
            if !langs.contains(l) {
                langs.push(l.clone());
            }
        }
        let mut tokens: Vec<String> = ["<PAD>", "<BOS>", "<EOS>", "<UNK>", "<SEP>"].map(String::from).to_vec();
        for l in &langs {
            tokens.push(format!("<{}>", l.as_str()));
        }
        for l in &langs {
            for p in Part::ALL {
                tokens.push(format!("<{}_{}>", l.as_str(), part_suffix(p)));
            }
        }
        let words: BTreeSet<String> = words.into_iter().map(|w| w.to_lowercase()).collect();
        let word_start = tokens.len();
        for w in words {
            if w.is_empty() || w.starts_with('<') || w.chars().any(char::is_whitespace) {
                return Err(SokeError::Vocabulary(format!("invalid word token {w:?}")));
            }
            tokens.push(w);
        }
        let word_range = word_start..tokens.len();
        let motion_start = tokens.len();
        for p in Part::ALL {
            for i in 0..sizes.get(p) {
                tokens.push(format!("<{}_{i}>", p.tag()));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(SokeError::Vocabulary(format!("duplicate token {t}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            languages: langs,
            word_range,
            motion_start,
            codebook_sizes: sizes,
        })
    }

    /// Vocabulary over every word of `texts`.
    pub fn from_corpus<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        languages: &[Language],
        sizes: CodebookSizes,
    ) -> Result<Self> {
        let all: Vec<String> = texts.into_iter().flat_map(words).collect();
        Self::new(languages, all, sizes)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn codebook_sizes(&self) -> CodebookSizes {
        self.codebook_sizes
    }

    pub fn languages(&self) -> &[Language] {
        &self.languages
    }

    pub fn word_range(&self) -> Range<TokenId> {
        self.word_range.clone()
    }

    pub fn language_token(&self, lang: &Language) -> Result<TokenId> {
        self.id(&format!("<{}>", lang.as_str()))
            .ok_or_else(|| SokeError::Vocabulary(format!("unknown language {lang}")))
    }

    /// Start token of the `part` stream for `lang` in parallel decoding.
    pub fn start_token(&self, lang: &Language, part: Part) -> Result<TokenId> {
        self.id(&format!("<{}_{}>", lang.as_str(), part_suffix(part)))
            .ok_or_else(|| SokeError::Vocabulary(format!("unknown language {lang}")))
    }

    /// Id range of one part's motion tokens.
    pub fn part_range(&self, part: Part) -> Range<TokenId> {
        let s = &self.codebook_sizes;
        let start = self.motion_start
            + match part {
                Part::Body => 0,
                Part::LeftHand => s.body,
                Part::RightHand => s.body + s.left_hand,
            };
        start..start + s.get(part)
    }

    pub fn motion_token(&self, part: Part, code: usize) -> Result<TokenId> {
        let r = self.part_range(part);
        if code >= r.len() {
            return Err(SokeError::TokenRange(format!(
                "code {code} outside the {part} codebook"
            )));
        }
        Ok(r.start + code)
    }

    /// Part and code index of a motion token.
    pub fn motion_code(&self, id: TokenId) -> Option<(Part, usize)> {
        Part::ALL.into_iter().find_map(|p| {
            let r = self.part_range(p);
            r.contains(&id).then(|| (p, id - r.start))
        })
    }

    /// Word ids of `text`; unknown words map to `<UNK>`.
    pub fn text_ids(&self, text: &str) -> Vec<TokenId> {
        words(text)
            .iter()
            .map(|w| {
                self.index
                    .get(w)
                    .copied()
                    .filter(|i| self.word_range.contains(i))
                    .unwrap_or(UNK)
            })
            .collect()
    }
}
