//! Runs the staged pipeline twice in a scratch directory. The second run
//! reuses every stage; changing the generator config reruns only the stages
//! downstream of it.

use soke::pipeline::{run_pipeline, RunConfig, RunManifest};

fn main() -> anyhow::Result<()> {
    let overrides: Vec<String> = [
        "synth.n_sentences=8",
        "synth.lexicon_size=5",
        "data.heldout_sentences=4",
        "deto.code_dim=8",
        "deto.width=8",
        "deto.train.epochs=5",
        "amg.dim=16",
        "amg.heads=2",
        "amg.ff_dim=16",
        "amg.train.steps=20",
    ]
    .map(String::from)
    .to_vec();
    let config = RunConfig::from_toml("", &overrides)?;
    let dir = tempfile::tempdir()?;
    let run = run_pipeline(dir.path(), &config, true)?;
    for split in &run.report.splits {
        println!(
            "{:<8} mean DTW-PA-JPE {:.1} mm",
            split.name, split.aggregates.mean_dtw_pa_jpe
        );
    }
    println!("first run ran {:?}", run.ran());

    let again = run_pipeline(dir.path(), &config, true)?;
    println!("second run ran {:?}", again.ran());

    let mut changed = config.clone();
    changed.amg.train.steps = 30;
    let third = run_pipeline(dir.path(), &changed, true)?;
    println!("after changing amg.train.steps ran {:?}", third.ran());

    let manifest = RunManifest::load(dir.path())?;
    manifest.verify(dir.path())?;
    println!(
        "manifest lists {} artifacts, all hashes verified",
        manifest.artifacts.len()
    );
    Ok(())
}
