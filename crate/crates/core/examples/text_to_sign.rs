//! Trains a retrieval-enhanced multi-head generator, saves the bundle,
//! reloads it and generates motion for a training sentence and a new one.

use soke::amg::GeneratorConfig;
use soke::deto::{train_tokenizer, DetoConfig, DetoTrainConfig};
use soke::motion::{SynthConfig, SynthCorpus};
use soke::pipeline::TextToSign;
use soke::retrieval::{build_dictionary, RetrievalConfig, SuffixLemmatizer};

fn main() -> anyhow::Result<()> {
    let corpus = SynthCorpus::generate(
        &SynthConfig {
            n_sentences: 16,
            lexicon_size: 6,
            ..Default::default()
        },
        11,
    )?;
    let motions: Vec<_> = corpus.sentences.iter().map(|(_, m)| m.clone()).collect();
    let (deto, _) = train_tokenizer(
        &motions,
        &DetoConfig {
            code_dim: 16,
            width: 16,
            train: DetoTrainConfig {
                epochs: 40,
                ..Default::default()
            },
            ..Default::default()
        },
        0,
    )?;
    let dict = build_dictionary(&corpus.word_instances(2, 0.02, 1), &deto, &SuffixLemmatizer)?.dictionary;

    let mut config = GeneratorConfig {
        dim: 32,
        heads: 4,
        ff_dim: 64,
        ..Default::default()
    };
    config.train.steps = 800;
    let (system, log) = TextToSign::train(&corpus.sentences, deto, dict, config, RetrievalConfig::on(), 2)?;
    println!("generator loss {:.3} -> {:.4}", log.first_loss(), log.last_loss());

    let dir = tempfile::tempdir()?;
    system.save(dir.path())?;
    let system = TextToSign::load(dir.path())?;

    let lang = corpus.sentences[0].1.language.clone();
    let words = &corpus.lexicon.words;
    let unseen = format!("{} {}", words[words.len() - 1].word, words[0].word);
    for text in [corpus.sentences[0].0.clone(), unseen] {
        let out = system.generate_full(&text, &lang)?;
        println!(
            "{text:?}: prompt {} tokens, {} decoder steps, {} frames",
            system.prompt(&text, &lang)?.len(),
            out.decode.step_count,
            out.motion.len()
        );
    }
    Ok(())
}
