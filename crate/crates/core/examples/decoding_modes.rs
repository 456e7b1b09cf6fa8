//! Trains the generator in each decoding mode on the same tiny corpus and
//! compares decoder step counts and wall time per sentence.

use std::time::Instant;

use soke::amg::{DecodeMode, GeneratorConfig};
use soke::deto::{train_tokenizer, DetoConfig, DetoTrainConfig};
use soke::motion::{synthesize_dataset, SynthConfig};
use soke::pipeline::TextToSign;
use soke::retrieval::{RetrievalConfig, SignDictionary};

fn main() -> anyhow::Result<()> {
    let corpus = synthesize_dataset(
        &SynthConfig {
            n_sentences: 10,
            lexicon_size: 6,
            ..Default::default()
        },
        5,
    )?;
    let motions: Vec<_> = corpus.iter().map(|(_, m)| m.clone()).collect();
    let deto_config = DetoConfig {
        code_dim: 16,
        width: 16,
        train: DetoTrainConfig {
            epochs: 40,
            ..Default::default()
        },
        ..Default::default()
    };
    let (deto, _) = train_tokenizer(&motions, &deto_config, 0)?;

    for mode in [DecodeMode::Sequential, DecodeMode::Parallel, DecodeMode::Multihead] {
        let mut config = GeneratorConfig {
            mode,
            dim: 32,
            heads: 4,
            ff_dim: 64,
            ..Default::default()
        };
        config.train.steps = 300;
        let (system, log) = TextToSign::train(
            &corpus,
            deto.clone(),
            SignDictionary::default(),
            config,
            RetrievalConfig::default(),
            1,
        )?;
        let (mut steps, mut ms, mut exact) = (0, 0.0, 0);
        for (text, seq) in &corpus {
            let start = Instant::now();
            let out = system.generate_full(text, &seq.language)?;
            ms += start.elapsed().as_secs_f64() * 1e3;
            steps += out.decode.step_count;
            exact += (out.decode.triples.len() == deto.encode(seq)?[0].len()) as usize;
        }
        let n = corpus.len() as f64;
        println!(
            "{:<10} loss {:.3} -> {:.4}  mean steps {:>5.1}  mean wall {:.2} ms  right length {exact}/{}",
            mode.as_str(),
            log.first_loss(),
            log.last_loss(),
            steps as f64 / n,
            ms / n,
            corpus.len()
        );
    }
    Ok(())
}
