//! Aligns two sequences with DTW, Procrustes-aligns a rotated copy of a pose,
//! and scores two simple generators on a small split.

use soke::metrics::{
    dtw, evaluate_split, frame_jpe, joint_track, procrustes_align, EvalSample, Generated, MetricsConfig,
};
use soke::motion::{rodrigues, synthesize_dataset, KinematicChain, Language, SynthConfig};

fn main() -> anyhow::Result<()> {
    let a = [0.0f64, 1.0, 2.0, 3.0, 2.0];
    let b = [0.0, 2.0, 3.0, 2.0];
    let r = dtw(a.len(), b.len(), |i, j| (a[i] - b[j]).abs())?;
    println!("dtw total {} normalized {:.3} path {:?}", r.total, r.normalized, r.path);

    let corpus = synthesize_dataset(&SynthConfig::default(), 4)?;
    let chain = KinematicChain::toy(SynthConfig::default().layout)?;
    let pose = chain.forward_kinematics(corpus[0].1.frame(0));
    let rot = rodrigues([0.3, -0.5, 0.2]);
    let moved: Vec<_> = pose
        .iter()
        .map(|p| {
            let mut q = [10.0; 3];
            for i in 0..3 {
                for k in 0..3 {
                    q[i] += 1.5 * rot[i][k] * p[k];
                }
            }
            q
        })
        .collect();
    let (aligned, sim) = procrustes_align(&moved, &pose)?;
    println!(
        "similarity scale {:.4} det {:.6}; JPE before {:.1} mm, after {:.2e} mm",
        sim.scale,
        sim.rotation_det(),
        frame_jpe(&moved, &pose)?,
        frame_jpe(&aligned, &pose)?
    );

    let samples: Vec<EvalSample> = corpus
        .iter()
        .enumerate()
        .map(|(i, (t, m))| EvalSample {
            id: i.to_string(),
            text: t.clone(),
            reference: m.clone(),
        })
        .collect();
    let oracle = |text: &str, _: &Language| -> soke::Result<Generated> {
        let (_, m) = corpus.iter().find(|(t, _)| t == text).expect("sample text");
        Ok(Generated {
            motion: m.clone(),
            step_count: 0,
        })
    };
    let constant = |_: &str, _: &Language| -> soke::Result<Generated> {
        Ok(Generated {
            motion: corpus[0].1.clone(),
            step_count: 0,
        })
    };
    let config = MetricsConfig::default();
    for (name, g) in [
        ("oracle", &oracle as &dyn soke::metrics::MotionGenerator),
        ("constant", &constant),
    ] {
        let report = evaluate_split(name, g, &samples, &chain, &config, 2)?;
        let a = &report.aggregates;
        println!(
            "{name:<8} DTW-JPE body {:.1} hand {:.1}  DTW-PA-JPE body {:.1} hand {:.1}  mean {:.1}",
            a.dtw_jpe_body, a.dtw_jpe_hand, a.dtw_pa_jpe_body, a.dtw_pa_jpe_hand, a.mean_dtw_pa_jpe
        );
    }
    println!(
        "{} frames tracked for the first sample",
        joint_track(&chain, &corpus[0].1).len()
    );
    Ok(())
}
