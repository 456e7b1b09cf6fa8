//! Synthesizes a small corpus, splits a sequence into body parts, runs
//! forward kinematics and round-trips the corpus through the JSON-lines format.

use soke::motion::{merge_parts, read_motion_file, split_parts, synthesize_dataset, KinematicChain, Part, SynthConfig};

fn main() -> anyhow::Result<()> {
    let config = SynthConfig {
        n_sentences: 4,
        ..Default::default()
    };
    let corpus = synthesize_dataset(&config, 7)?;
    for (text, seq) in &corpus {
        println!("{text:<32} {} frames x {} dims", seq.len(), seq.dim());
    }

    let (_, seq) = &corpus[0];
    let parts = split_parts(seq)?;
    for (p, m) in Part::ALL.iter().zip(&parts) {
        println!("part {:<2} width {}", p.tag(), m.width());
    }
    // Merging drops the expression block, so only the parts round-trip.
    let merged = merge_parts(&parts, seq.fps, seq.layout, seq.language.clone())?;
    assert_eq!(split_parts(&merged)?, parts);

    let chain = KinematicChain::toy(config.layout)?;
    let joints = chain.forward_kinematics(seq.frame(0));
    println!(
        "{} joints, mean bone {:.1} mm, first wrist at {:.1?}",
        chain.n_joints(),
        chain.mean_bone_length(),
        joints[6]
    );

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("corpus.jsonl");
    soke::motion::write_motion_file(&path, &corpus)?;
    let back = read_motion_file(&path, config.layout)?;
    assert_eq!(back.len(), corpus.len());
    println!("wrote and re-read {} sequences", back.len());
    Ok(())
}
