//! Trains the decoupled tokenizer on a handful of sentences and reports the
//! per-part reconstruction loss drop and the round-trip joint error.
//!
//! Usage: `cargo run --release --example train_tokenizer [epochs]`

use soke::deto::{train_tokenizer, DetoConfig, DetoTrainConfig};
use soke::metrics::pa_mpjpe;
use soke::motion::{synthesize_dataset, KinematicChain, SynthConfig};

fn main() -> anyhow::Result<()> {
    let epochs = match std::env::args().nth(1) {
        Some(a) => a.parse()?,
        None => 400,
    };
    let synth = SynthConfig {
        n_sentences: 8,
        noise_amplitude: 0.0,
        ..Default::default()
    };
    let corpus: Vec<_> = synthesize_dataset(&synth, 1)?.into_iter().map(|(_, m)| m).collect();
    let config = DetoConfig {
        code_dim: 32,
        width: 48,
        train: DetoTrainConfig {
            epochs,
            batch_size: 8,
            log_every: 100,
            ..Default::default()
        },
        ..Default::default()
    };
    let start = std::time::Instant::now();
    let (tokenizer, log) = train_tokenizer(&corpus, &config, 0)?;
    println!("trained {epochs} epochs in {:.1}s", start.elapsed().as_secs_f64());
    for p in &log.parts {
        println!(
            "{:<2} reconstruction {:.3e} -> {:.3e} ({:.0}x lower)",
            p.part.tag(),
            p.first_rec(),
            p.last_rec(),
            p.first_rec() / p.last_rec()
        );
    }

    let chain = KinematicChain::toy(config.layout)?;
    let mut err = 0.0;
    for m in &corpus {
        err += pa_mpjpe(&chain, &tokenizer.round_trip(m)?, m)?;
    }
    let tokens = tokenizer.encode(&corpus[0])?;
    println!("first sequence body tokens {:?}", tokens[0].ids);
    println!(
        "round-trip PA-MPJPE {:.2} mm (mean bone {:.0} mm)",
        err / corpus.len() as f64,
        chain.mean_bone_length()
    );
    Ok(())
}
