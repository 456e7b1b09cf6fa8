//! Joint-position error metrics, Procrustes alignment, DTW and evaluation
//! reports. All DTW values are normalised by warping-path length; distances
//! are in the skeleton's units (millimetres for the toy chain).

mod dtw;
mod procrustes;

pub use dtw::{dtw, DtwResult};
pub use procrustes::{fit_similarity, procrustes_align, residual, Similarity};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SokeError};
use crate::motion::{JointSubset, KinematicChain, Language, MotionSequence, Vec3};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Where Procrustes alignment is solved for PA metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaScope {
    /// One similarity per aligned frame pair.
    #[default]
    Frame,
    /// One similarity for the whole sequence, fitted over the frame pairs of
    /// the unaligned DTW path.
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub pa_scope: PaScope,
}

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean Euclidean distance between corresponding joints.
pub fn frame_jpe(gen: &[Vec3], reference: &[Vec3]) -> Result<f64> {
    if gen.len() != reference.len() || gen.is_empty() {
        return Err(SokeError::Input(format!(
            "joint sets differ: {} vs {}",
            gen.len(),
            reference.len()
        )));
    }
    Ok(gen.iter().zip(reference).map(|(a, b)| dist(a, b)).sum::<f64>() / gen.len() as f64)
}

/// JPE after Procrustes-aligning `gen` onto `reference`.
pub fn frame_pa_jpe(gen: &[Vec3], reference: &[Vec3]) -> Result<f64> {
    let (aligned, _) = procrustes_align(gen, reference)?;
    frame_jpe(&aligned, reference)
}

/// Joint positions of every frame.
pub fn joint_track(chain: &KinematicChain, seq: &MotionSequence) -> Vec<Vec<Vec3>> {
    seq.frames().map(|f| chain.forward_kinematics(f)).collect()
}

/// Reconstruction PA-MPJPE of two equal-length sequences, all joints.
pub fn pa_mpjpe(chain: &KinematicChain, gen: &MotionSequence, reference: &MotionSequence) -> Result<f64> {
    if gen.len() != reference.len() {
        return Err(SokeError::Input(format!(
            "sequence lengths differ: {} vs {}",
            gen.len(),
            reference.len()
        )));
    }
    let (g, r) = (joint_track(chain, gen), joint_track(chain, reference));
    let mut sum = 0.0;
    for (a, b) in g.iter().zip(&r) {
        sum += frame_pa_jpe(a, b)?;
    }
    Ok(sum / g.len() as f64)
}

/// DTW scores of one generated sequence against its reference.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SequenceScores {
    pub dtw_jpe_body: f64,
    pub dtw_jpe_hand: f64,
    pub dtw_pa_jpe_body: f64,
    pub dtw_pa_jpe_hand: f64,
}

impl SequenceScores {
    /// Average of the body and hand DTW-PA-JPE.
    pub fn mean_dtw_pa_jpe(&self) -> f64 {
        0.5 * (self.dtw_pa_jpe_body + self.dtw_pa_jpe_hand)
    }
}

/// Scores a generated joint track against a reference track.
pub fn score_tracks(
    chain: &KinematicChain,
    gen: &[Vec<Vec3>],
    reference: &[Vec<Vec3>],
    scope: PaScope,
) -> Result<SequenceScores> {
    let (n, m) = (gen.len(), reference.len());
    if n == 0 || m == 0 {
        return Err(SokeError::Input("cannot score an empty track".into()));
    }
    let body = chain.subset(JointSubset::Body);
    let hands = chain.subset(JointSubset::Hands);
    let mut raw = vec![[0.0; 2]; n * m];
    let mut pa = vec![[0.0; 2]; n * m];
    for i in 0..n {
        for j in 0..m {
            raw[i * m + j] = [
                frame_jpe(&gen[i][body.clone()], &reference[j][body.clone()])?,
                frame_jpe(&gen[i][hands.clone()], &reference[j][hands.clone()])?,
            ];
        }
    }
    let sequence_sim = match scope {
        PaScope::Frame => None,
        PaScope::Sequence => {
            let path = dtw(n, m, |i, j| frame_jpe(&gen[i], &reference[j]).unwrap_or(f64::INFINITY))?.path;
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for &(i, j) in &path {
                a.extend_from_slice(&gen[i]);
                b.extend_from_slice(&reference[j]);
            }
            Some(fit_similarity(&a, &b)?)
        }
    };
    for i in 0..n {
        let aligned: Vec<Vec<Vec3>> = match &sequence_sim {
            Some(sim) => vec![gen[i].iter().map(|p| sim.apply(p)).collect()],
            None => Vec::new(),
        };
        for j in 0..m {
            let al = match &sequence_sim {
                Some(_) => aligned[0].clone(),
                None => procrustes_align(&gen[i], &reference[j])?.0,
            };
            pa[i * m + j] = [
                frame_jpe(&al[body.clone()], &reference[j][body.clone()])?,
                frame_jpe(&al[hands.clone()], &reference[j][hands.clone()])?,
            ];
        }
    }
    let run = |costs: &[[f64; 2]], k: usize| dtw(n, m, |i, j| costs[i * m + j][k]).map(|r| r.normalized);
    Ok(SequenceScores {
        dtw_jpe_body: run(&raw, 0)?,
        dtw_jpe_hand: run(&raw, 1)?,
        dtw_pa_jpe_body: run(&pa, 0)?,
        dtw_pa_jpe_hand: run(&pa, 1)?,
    })
}

/// One generation request of an evaluation split.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub id: String,
    pub text: String,
    pub reference: MotionSequence,
}

/// Output of a text-to-motion system for one sample.
#[derive(Debug, Clone)]
pub struct Generated {
    pub motion: MotionSequence,
    pub step_count: usize,
}

/// Anything that turns text into motion.
pub trait MotionGenerator: Sync {
    fn generate(&self, text: &str, language: &Language) -> Result<Generated>;
}

impl<F> MotionGenerator for F
where
    F: Fn(&str, &Language) -> Result<Generated> + Sync,
{
    fn generate(&self, text: &str, language: &Language) -> Result<Generated> {
        self(text, language)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub text: String,
    pub generated_frames: usize,
    pub reference_frames: usize,
    pub step_count: usize,
    pub scores: SequenceScores,
    pub wall_ms: f64,
}

/// Deterministic summary of a split (no timing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_samples: usize,
    pub dtw_jpe_body: f64,
    pub dtw_jpe_hand: f64,
    pub dtw_pa_jpe_body: f64,
    pub dtw_pa_jpe_hand: f64,
    pub mean_dtw_pa_jpe: f64,
    pub mean_step_count: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pa_mpjpe: Option<f64>,
}

impl Aggregates {
    pub fn from_records(records: &[SampleRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mean = |f: &dyn Fn(&SampleRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        Self {
            n_samples: records.len(),
            dtw_jpe_body: mean(&|r| r.scores.dtw_jpe_body),
            dtw_jpe_hand: mean(&|r| r.scores.dtw_jpe_hand),
            dtw_pa_jpe_body: mean(&|r| r.scores.dtw_pa_jpe_body),
            dtw_pa_jpe_hand: mean(&|r| r.scores.dtw_pa_jpe_hand),
            mean_dtw_pa_jpe: mean(&|r| r.scores.mean_dtw_pa_jpe()),
            mean_step_count: mean(&|r| r.step_count as f64),
            pa_mpjpe: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_wall_ms: f64,
    pub total_wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub name: String,
    pub aggregates: Aggregates,
    pub timing: Timing,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub normalization: String,
    pub pa_scope: PaScope,
    pub units: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub header: ReportHeader,
    pub config: serde_json::Value,
    pub splits: Vec<SplitReport>,
}

impl EvalReport {
    pub fn new(config: serde_json::Value, metrics: &MetricsConfig, splits: Vec<SplitReport>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            header: ReportHeader {
                normalization: "path_length".into(),
                pa_scope: metrics.pa_scope,
                units: "mm".into(),
            },
            config,
            splits,
        }
    }

    /// Aggregates only, serialised: the deterministic part of a report.
    pub fn aggregates_json(&self) -> Result<String> {
        let v: Vec<(&str, &Aggregates)> = self.splits.iter().map(|s| (s.name.as_str(), &s.aggregates)).collect();
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Runs `generator` on every sample and scores the outputs. Work is spread
/// over `threads` workers; records and aggregates are in sample order and do
/// not depend on the thread count.
pub fn evaluate_split(
    name: &str,
    generator: &dyn MotionGenerator,
    samples: &[EvalSample],
    chain: &KinematicChain,
    config: &MetricsConfig,
    threads: usize,
) -> Result<SplitReport> {
    let score_one = |s: &EvalSample| -> Result<SampleRecord> {
        let start = Instant::now();
        let out = generator.generate(&s.text, &s.reference.language)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        if out.motion.is_empty() {
            return Err(SokeError::Input(format!(
                "sample {}: generator produced no frames",
                s.id
            )));
        }
        let scores = score_tracks(
            chain,
            &joint_track(chain, &out.motion),
            &joint_track(chain, &s.reference),
            config.pa_scope,
        )?;
        Ok(SampleRecord {
            id: s.id.clone(),
            text: s.text.clone(),
            generated_frames: out.motion.len(),
            reference_frames: s.reference.len(),
            step_count: out.step_count,
            scores,
            wall_ms,
        })
    };
    let threads = threads.max(1).min(samples.len().max(1));
    let chunk = samples.len().div_ceil(threads).max(1);
    let mut records: Vec<SampleRecord> = Vec::with_capacity(samples.len());
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(score_one).collect::<Result<Vec<_>>>()))
            .collect();
        for h in handles {
            records.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(())
    })?;
    let total_wall_ms: f64 = records.iter().map(|r| r.wall_ms).sum();
    Ok(SplitReport {
        name: name.to_string(),
        aggregates: Aggregates::from_records(&records),
        timing: Timing {
            mean_wall_ms: total_wall_ms / records.len().max(1) as f64,
            total_wall_ms,
        },
        samples: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{synthesize_dataset, PartLayout, SynthConfig};

    fn chain() -> KinematicChain {
        KinematicChain::toy(PartLayout::default()).unwrap()
    }

    fn samples(n: usize) -> Vec<EvalSample> {
        let cfg = SynthConfig {
            n_sentences: n,
            ..Default::default()
        };
        synthesize_dataset(&cfg, 4)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, (text, reference))| EvalSample {
                id: format!("s{i}"),
                text,
                reference,
            })
            .collect()
    }

    #[test]
    fn frame_jpe_examples() {
        let a = vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
        assert_eq!(frame_jpe(&a, &a).unwrap(), 0.0);
        assert_eq!(frame_jpe(&[[3.0, 4.0, 0.0]], &[[0.0, 0.0, 0.0]]).unwrap(), 5.0);
        assert!(frame_jpe(&a, &a[..1]).is_err());
    }

    #[test]
    fn pa_jpe_of_similarity_copy_vanishes() {
        let c = chain();
        let s = samples(1);
        let j = c.forward_kinematics(s[0].reference.frame(0));
        let sim = Similarity {
            scale: 1.7,
            rotation: crate::motion::rodrigues([0.2, 0.9, -0.4]),
            translation: [30.0, -5.0, 12.0],
        };
        let moved: Vec<Vec3> = j.iter().map(|p| sim.apply(p)).collect();
        assert!(frame_pa_jpe(&moved, &j).unwrap() < 1e-8);
    }

    fn oracle_eval(samples: &[EvalSample], threads: usize) -> SplitReport {
        let by_text: std::collections::HashMap<String, MotionSequence> =
            samples.iter().map(|s| (s.text.clone(), s.reference.clone())).collect();
        let c = chain();
        let generator = move |text: &str, _: &Language| -> Result<Generated> {
            Ok(Generated {
                motion: by_text[text].clone(),
                step_count: 3,
            })
        };
        evaluate_split("test", &generator, samples, &c, &MetricsConfig::default(), threads).unwrap()
    }

    #[test]
    fn reference_pipeline_scores_zero() {
        let s = samples(4);
        let r = oracle_eval(&s, 2);
        let a = &r.aggregates;
        assert_eq!(a.n_samples, 4);
        assert!(a.dtw_jpe_body.abs() < 1e-9 && a.dtw_jpe_hand.abs() < 1e-9);
        assert!(a.dtw_pa_jpe_body.abs() < 1e-6 && a.dtw_pa_jpe_hand.abs() < 1e-6);
        assert_eq!(a.mean_step_count, 3.0);
    }

    #[test]
    fn translation_is_removed_by_alignment_only() {
        let c = chain();
        let s = samples(1);
        let reference = joint_track(&c, &s[0].reference);
        let shift = [10.0, -20.0, 5.0];
        let moved: Vec<Vec<Vec3>> = reference
            .iter()
            .map(|f| {
                f.iter()
                    .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
                    .collect()
            })
            .collect();
        let base = score_tracks(&c, &reference, &reference, PaScope::Frame).unwrap();
        let sc = score_tracks(&c, &moved, &reference, PaScope::Frame).unwrap();
        assert!((sc.dtw_pa_jpe_body - base.dtw_pa_jpe_body).abs() < 1e-8);
        assert!((sc.dtw_pa_jpe_hand - base.dtw_pa_jpe_hand).abs() < 1e-8);
        let offset = (shift.iter().map(|v| v * v).sum::<f64>()).sqrt();
        assert!(
            (sc.dtw_jpe_body - offset).abs() < 1e-8,
            "{} vs {offset}",
            sc.dtw_jpe_body
        );
        assert!((sc.dtw_jpe_hand - offset).abs() < 1e-8);
        let seq = score_tracks(&c, &moved, &reference, PaScope::Sequence).unwrap();
        assert!(seq.dtw_pa_jpe_body < 1e-6);
    }

    #[test]
    fn aggregates_match_records_and_ignore_thread_count() {
        let s = samples(5);
        let c = chain();
        let generator = |text: &str, lang: &Language| -> Result<Generated> {
            let n = 4 + text.len() % 7;
            let mut m = MotionSequence::zeros(n, PartLayout::default())?;
            m.language = lang.clone();
            for t in 0..n {
                m.frame_mut(t)[3] = 0.1 * t as f32;
            }
            Ok(Generated {
                motion: m,
                step_count: n,
            })
        };
        let r1 = evaluate_split("x", &generator, &s, &c, &MetricsConfig::default(), 1).unwrap();
        let r3 = evaluate_split("x", &generator, &s, &c, &MetricsConfig::default(), 3).unwrap();
        assert_eq!(r1.aggregates, r3.aggregates);
        let recomputed = Aggregates::from_records(&r1.samples);
        assert_eq!(recomputed, r1.aggregates);
        let manual: f64 = r1.samples.iter().map(|x| x.scores.dtw_jpe_body).sum::<f64>() / 5.0;
        assert_eq!(manual, r1.aggregates.dtw_jpe_body);
    }

    #[test]
    fn report_serializes_with_header() {
        let s = samples(2);
        let r = oracle_eval(&s, 1);
        let report = EvalReport::new(serde_json::json!({"seed": 1}), &MetricsConfig::default(), vec![r]);
        let text = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
        assert!(text.contains("\"normalization\":\"path_length\""));
        assert!(report.aggregates_json().unwrap().contains("mean_dtw_pa_jpe"));
    }
}
