//! Drives every subcommand of the `soke` binary end to end at toy size.

use std::path::Path;
use std::process::{Command, Output};

use soke::motion::{read_motion_file, KinematicChain, PartLayout};
use soke::posefit::{observe, write_observations, CameraWeakPerspective};

const TINY: &[&str] = &[
    "synth.n_sentences=6",
    "synth.lexicon_size=4",
    "synth.max_words=2",
    "deto.code_dim=8",
    "deto.width=8",
    "deto.train.epochs=3",
    "amg.dim=16",
    "amg.heads=2",
    "amg.ff_dim=16",
    "amg.k_max=8",
    "amg.train.steps=5",
    "posefit.max_iters=5",
];

fn soke(args: &[&str], dir: &Path, tiny: bool) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_soke"));
    cmd.current_dir(dir).args(args);
    if tiny {
        for o in TINY {
            cmd.args(["--set", o]);
        }
    }
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "soke {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn every_subcommand_runs_on_a_toy_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    soke(
        &[
            "synth",
            "--seed",
            "4",
            "--out",
            "train.jsonl",
            "--heldout",
            "held.jsonl",
            "--instances",
            "inst.jsonl",
        ],
        d,
        true,
    );
    let layout = PartLayout::default();
    assert_eq!(read_motion_file(&d.join("train.jsonl"), layout).unwrap().len(), 6);

    soke(&["train-deto", "--data", "train.jsonl", "--out", "deto"], d, true);
    soke(
        &[
            "build-dict",
            "--deto",
            "deto",
            "--instances",
            "inst.jsonl",
            "--out",
            "dict.json",
        ],
        d,
        false,
    );
    soke(
        &[
            "train-amg",
            "--mode",
            "multihead",
            "--deto",
            "deto",
            "--data",
            "train.jsonl",
            "--dict",
            "dict.json",
            "--out",
            "model",
        ],
        d,
        true,
    );

    let train = read_motion_file(&d.join("train.jsonl"), layout).unwrap();
    let text = train[0].0.clone();
    soke(
        &["generate", "--model", "model", "--text", &text, "--out", "gen.jsonl"],
        d,
        false,
    );
    let generated = read_motion_file(&d.join("gen.jsonl"), layout).unwrap();
    assert_eq!(generated.len(), 1);
    assert_eq!(generated[0].0, text);

    soke(
        &[
            "eval",
            "--model",
            "model",
            "--data",
            "held.jsonl",
            "--report",
            "report.json",
        ],
        d,
        true,
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["splits"][0]["name"], "held");

    let bench = stdout_json(&soke(
        &["bench-decode", "--model", "model", "--data", "train.jsonl"],
        d,
        false,
    ));
    assert_eq!(bench["mode"], "multihead");
    assert!(bench["mean_step_count"].as_f64().is_some() && bench["mean_wall_ms"].as_f64().is_some());

    let chain = KinematicChain::toy(layout).unwrap();
    let obs = observe(
        &chain,
        &train[0].1,
        &CameraWeakPerspective {
            s: 0.9,
            tx: 5.0,
            ty: -3.0,
        },
    )
    .unwrap();
    write_observations(&d.join("obs.jsonl"), &obs).unwrap();
    soke::motion::write_motion_file(&d.join("init.jsonl"), &train[..1]).unwrap();
    let summary = stdout_json(&soke(
        &[
            "posefit",
            "--init",
            "init.jsonl",
            "--obs",
            "obs.jsonl",
            "--out",
            "fit.jsonl",
            "--log",
            "fit.log",
        ],
        d,
        true,
    ));
    assert_eq!(summary["monotone"], true);
    let log = std::fs::read_to_string(d.join("fit.log")).unwrap();
    assert!(log.lines().count() >= 2);
}

#[test]
fn bad_input_reports_the_command_and_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_soke"))
        .current_dir(tmp.path())
        .args(["train-deto", "--data", "missing.jsonl", "--out", "deto"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("soke train-deto: error:"), "{err}");
}
