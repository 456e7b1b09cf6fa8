//! Builds a word-level sign dictionary from isolated instances and shows how
//! retrieval extends a text prompt with the matched words' motion tokens.

use soke::deto::{train_tokenizer, DetoConfig, DetoTrainConfig};
use soke::motion::{Part, SynthConfig, SynthCorpus};
use soke::pipeline::build_vocabulary;
use soke::retrieval::{build_dictionary, build_prompt, Lemmatizer, RetrievalConfig, SuffixLemmatizer};

fn main() -> anyhow::Result<()> {
    let synth = SynthConfig {
        n_sentences: 12,
        lexicon_size: 6,
        inflection_rate: 0.5,
        ..Default::default()
    };
    let corpus = SynthCorpus::generate(&synth, 3)?;
    let motions: Vec<_> = corpus.sentences.iter().map(|(_, m)| m.clone()).collect();
    let config = DetoConfig {
        code_dim: 16,
        width: 16,
        train: DetoTrainConfig {
            epochs: 40,
            ..Default::default()
        },
        ..Default::default()
    };
    let (deto, _) = train_tokenizer(&motions, &config, 0)?;

    let instances = corpus.word_instances(3, 0.02, 9);
    let build = build_dictionary(&instances, &deto, &SuffixLemmatizer)?;
    let dict = build.dictionary;
    let lang = &corpus.sentences[0].1.language;
    println!("dictionary holds {} lemmas", dict.len());
    for w in &corpus.lexicon.words {
        let e = dict.get(lang, &w.word).expect("every lexicon word has an instance");
        let codes: Vec<usize> = Part::ALL.iter().map(|&p| e.codes(p).len()).collect();
        println!(
            "  {:<10} tokens per part {codes:?} round-trip error {:.1} mm",
            w.word, e.err
        );
    }

    let vocab = build_vocabulary(&corpus.sentences, &dict, &deto)?;
    let (text, seq) = corpus
        .sentences
        .iter()
        .find(|(t, _)| t.split(' ').any(|w| SuffixLemmatizer.lemma(w) != w))
        .unwrap_or(&corpus.sentences[0]);
    let lemmas: Vec<String> = text.split(' ').map(|w| SuffixLemmatizer.lemma(w)).collect();
    println!("sentence {text:?} lemmatizes to {lemmas:?}");
    for retrieval in [RetrievalConfig::default(), RetrievalConfig::on()] {
        let prompt = build_prompt(text, &seq.language, &dict, &vocab, &SuffixLemmatizer, &retrieval)?;
        let shown: Vec<&str> = prompt.iter().map(|&t| vocab.token(t).unwrap_or("?")).collect();
        println!(
            "retrieval {:<5} {} tokens: {}",
            retrieval.enabled,
            prompt.len(),
            shown.join(" ")
        );
    }
    Ok(())
}
