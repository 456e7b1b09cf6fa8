use super::*;
use crate::motion::PartLayout;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn chain() -> KinematicChain {
    KinematicChain::toy(PartLayout::default()).unwrap()
}

fn cam() -> CameraWeakPerspective {
    CameraWeakPerspective {
        s: 0.8,
        tx: 320.0,
        ty: 240.0,
    }
}

fn random_motion(rng: &mut ChaCha8Rng, frames: usize, amp: f32) -> MotionSequence {
    let layout = PartLayout::default();
    let mut m = MotionSequence::zeros(frames, layout).unwrap();
    for f in 0..frames {
        for v in m.frame_mut(f) {
            *v = rng.gen_range(-amp..=amp);
        }
    }
    m
}

fn set_rotation(m: &mut MotionSequence, f: usize, joint: usize, r: [f32; 3]) {
    let o = m.layout.joint_param_offset(joint);
    m.frame_mut(f)[o..o + 3].copy_from_slice(&r);
}

fn joint(c: &KinematicChain, name: &str) -> usize {
    c.names.iter().position(|n| n == name).unwrap()
}

#[test]
fn projection_examples() {
    let p = [[1.0, 2.0, 5.0]];
    assert_eq!(project_weak(&p, &CameraWeakPerspective::default()), vec![[1.0, 2.0]]);
    let c = CameraWeakPerspective {
        s: 2.0,
        tx: 1.0,
        ty: 0.0,
    };
    assert_eq!(project_weak(&p, &c), vec![[3.0, 4.0]]);
    assert_eq!(project_weak(&[[1.0, 2.0, -40.0]], &c), vec![[3.0, 4.0]]);
}

#[test]
fn reprojection_loss_examples() {
    let c = chain();
    let m = MotionSequence::zeros(1, PartLayout::default()).unwrap();
    let mut obs = observe(&c, &m, &cam()).unwrap();
    assert_eq!(loss_rec(m.frame(0), &obs[0], &cam(), &c).unwrap(), 0.0);
    obs[0].joints[2][0] += 1.0;
    obs[0].joints[2][1] -= 2.0;
    assert!((loss_rec(m.frame(0), &obs[0], &cam(), &c).unwrap() - 3.0).abs() < 1e-9);
    obs[0].joints[2][2] = 0.0;
    assert!(loss_rec(m.frame(0), &obs[0], &cam(), &c).unwrap().abs() < 1e-9);
}

#[test]
fn temporal_loss_examples() {
    let c = chain();
    let idx = observed_indices(&c).unwrap();
    let still = MotionSequence::zeros(4, PartLayout::default()).unwrap();
    assert_eq!(loss_temp(&still, &c).unwrap(), 0.0);
    let one = random_motion(&mut ChaCha8Rng::seed_from_u64(1), 1, 0.5);
    assert_eq!(loss_temp(&one, &c).unwrap(), 0.0);

    let rest = c.forward_kinematics(still.frame(0));
    let mut moved = rest.clone();
    moved[idx[1]][1] += 2.0;
    assert!((loss_temp_tracks(&[rest.clone(), moved], &idx) - 4.0).abs() < 1e-12);
    let mut hand = rest.clone();
    hand[c.n_joints() - 1][0] -= 2.0;
    assert!((loss_temp_tracks(&[rest, hand], &idx) - 2.0).abs() < 1e-12);
}

#[test]
fn regularizer_examples() {
    assert_eq!(loss_reg(&[0.0; 9]), 0.0);
    assert_eq!(loss_reg(&[3.0, 4.0]), 5.0);
}

#[test]
fn hand_parameters_are_not_optimised() {
    let c = chain();
    let refined = refined_joints(&c);
    assert_eq!(refined.len(), 9);
    assert!(!refined.contains(&c.left_wrist) && !refined.contains(&c.right_wrist));
    assert!(refined.iter().all(|&j| j < c.layout.body_joints));
    let m = MotionSequence::zeros(3, PartLayout::default()).unwrap();
    assert_eq!(pack_refined(&m, &c).len(), 3 * 9 * 3);
}

#[test]
fn graph_objective_matches_numeric_terms() {
    let c = chain();
    let cfg = FitConfig {
        w_rec: 1.3,
        w_temp: 0.7,
        w_reg: 0.2,
        ..Default::default()
    };
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_motion(&mut rng, 3, 0.6);
        let mut obs = observe(&c, &random_motion(&mut rng, 3, 0.6), &cam()).unwrap();
        for o in &mut obs {
            for j in &mut o.joints {
                j[2] = rng.gen_range(0.0..=1.0);
            }
        }
        let objective = Objective::new(&c, &m, &obs, &cfg).unwrap();
        let theta = pack_refined(&m, &c);
        let t = objective.terms(&theta, &cam()).unwrap();
        let rec: f64 = (0..3).map(|f| loss_rec(m.frame(f), &obs[f], &cam(), &c).unwrap()).sum();
        let temp = loss_temp(&m, &c).unwrap();
        let reg = loss_reg(&theta);
        assert!((t.rec - rec).abs() < 1e-9 * rec.max(1.0), "{} vs {rec}", t.rec);
        assert!((t.temp - temp).abs() < 1e-9 * temp.max(1.0));
        assert!((t.reg - reg).abs() < 1e-12);
        assert!((t.total - (1.3 * rec + 0.7 * temp + 0.2 * reg)).abs() < 1e-8 * t.total);
    }
}

/// Max relative error between reverse-mode and central-difference gradients.
fn gradient_error(objective: &Objective, theta: &[f64], c: &CameraWeakPerspective, eps: f64) -> f64 {
    let (_, gt, gc) = objective.gradient(theta, c).unwrap();
    let mut ad: Vec<f64> = gt;
    ad.extend_from_slice(&gc);
    let mut fd = Vec::with_capacity(ad.len());
    let eval = |th: &[f64], cam: &CameraWeakPerspective| objective.terms(th, cam).unwrap().total;
    for i in 0..theta.len() {
        let mut p = theta.to_vec();
        let mut q = theta.to_vec();
        p[i] += eps;
        q[i] -= eps;
        fd.push((eval(&p, c) - eval(&q, c)) / (2.0 * eps));
    }
    for k in 0..3 {
        let shift = |d: f64| {
            let mut x = *c;
            match k {
                0 => x.s += d,
                1 => x.tx += d,
                _ => x.ty += d,
            }
            x
        };
        fd.push((eval(theta, &shift(eps)) - eval(theta, &shift(-eps))) / (2.0 * eps));
    }
    let diff: f64 = ad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = ad
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

#[test]
fn gradient_matches_finite_differences() {
    let c = chain();
    let cfg = FitConfig {
        w_temp: 0.5,
        w_reg: 0.3,
        ..Default::default()
    };
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let m = random_motion(&mut rng, 2, 0.8);
        let mut obs = observe(&c, &random_motion(&mut rng, 2, 0.8), &cam()).unwrap();
        for o in &mut obs {
            for j in &mut o.joints {
                j[2] = rng.gen_range(0.1..=1.0);
            }
        }
        let objective = Objective::new(&c, &m, &obs, &cfg).unwrap();
        let err = gradient_error(&objective, &pack_refined(&m, &c), &cam(), 1e-6);
        assert!(err < 1e-3, "seed {seed}: relative error {err}");
    }
}

#[test]
fn exact_observations_leave_the_pose_unchanged() {
    let c = chain();
    let m = random_motion(&mut ChaCha8Rng::seed_from_u64(4), 1, 0.4);
    let obs = observe(&c, &m, &cam()).unwrap();
    let cfg = FitConfig {
        w_reg: 0.0,
        ..Default::default()
    };
    let (out, log) = fit_sequence(&c, &m, &obs, cam(), &cfg).unwrap();
    assert_eq!(out, m);
    assert_eq!(log.iterations.len(), 1);
    assert_eq!(log.stop_reason, "zero gradient");
}

/// Total loss at a pose that rotates `joint` by `angle` about z.
fn single_joint_loss(c: &KinematicChain, obs: &[Observation2D], joint: usize, angle: f64, cfg: &FitConfig) -> f64 {
    let mut m = MotionSequence::zeros(1, PartLayout::default()).unwrap();
    set_rotation(&mut m, 0, joint, [0.0, 0.0, angle as f32]);
    let objective = Objective::new(c, &m, obs, cfg).unwrap();
    objective.terms(&pack_refined(&m, c), &cam()).unwrap().total
}

#[test]
fn single_joint_rotation_matches_grid_search() {
    let c = chain();
    let elbow = joint(&c, "l_elbow");
    let mut truth = MotionSequence::zeros(1, PartLayout::default()).unwrap();
    set_rotation(&mut truth, 0, elbow, [0.0, 0.0, 0.5]);
    let obs = observe(&c, &truth, &cam()).unwrap();
    let cfg = FitConfig::default();

    let steps = (2.0 * PI / 1e-3).round() as i64;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=steps {
        let a = -PI + i as f64 * 1e-3;
        let l = single_joint_loss(&c, &obs, elbow, a, &cfg);
        if l < best.0 {
            best = (l, a);
        }
    }

    let init = MotionSequence::zeros(1, PartLayout::default()).unwrap();
    let (out, log) = fit_sequence(&c, &init, &obs, cam(), &cfg).unwrap();
    let r = c.joint_rotation(out.frame(0), elbow);
    assert!((r[2] - best.1).abs() < 1e-2, "fit {r:?} vs grid {}", best.1);
    assert!(log.is_monotone());
}

#[test]
fn noiseless_reachable_pose_is_recovered_from_nearby_init() {
    // The 2D to 3D lift is non-convex, so recovery is only expected inside
    // the basin of the true pose.
    let c = chain();
    let cfg = FitConfig {
        w_temp: 0.0,
        w_reg: 0.0,
        max_iters: 500,
        ..Default::default()
    };
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth = MotionSequence::zeros(2, PartLayout::default()).unwrap();
        let mut init = truth.clone();
        for f in 0..2 {
            for j in refined_joints(&c) {
                let r = [
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                ];
                set_rotation(&mut truth, f, j, r);
                let p = r.map(|x| x + rng.gen_range(-0.03..0.03));
                set_rotation(&mut init, f, j, p);
            }
        }
        let obs = observe(&c, &truth, &cam()).unwrap();
        let (_, log) = fit_sequence(&c, &init, &obs, cam(), &cfg).unwrap();
        let last = log.iterations.last().unwrap().terms;
        assert!(
            last.rec / (2.0 * 6.0) < 1e-4,
            "seed {seed}: rec {} after {} iterations ({})",
            last.rec,
            log.iterations.len(),
            log.stop_reason
        );
        assert!(log.is_monotone());
    }
}

#[test]
fn hands_are_bit_identical_and_loss_is_monotone() {
    let c = chain();
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = random_motion(&mut rng, 3, 0.3);
        let target = random_motion(&mut rng, 3, 0.3);
        let mut obs = observe(&c, &target, &cam()).unwrap();
        for o in &mut obs {
            for j in &mut o.joints {
                j[0] += rng.gen_range(-3.0..3.0);
                j[1] += rng.gen_range(-3.0..3.0);
            }
        }
        let cfg = FitConfig {
            max_iters: 200,
            ..Default::default()
        };
        let (out, log) = fit_sequence(&c, &init, &obs, cam(), &cfg).unwrap();
        let layout = init.layout;
        for f in 0..3 {
            for part in [crate::motion::Part::LeftHand, crate::motion::Part::RightHand] {
                let r = layout.part_range(part);
                assert_eq!(out.frame(f)[r.clone()], init.frame(f)[r]);
            }
            let e = layout.expression_range();
            assert_eq!(out.frame(f)[e.clone()], init.frame(f)[e]);
            for w in [c.left_wrist, c.right_wrist] {
                assert_eq!(c.joint_rotation(out.frame(f), w), c.joint_rotation(init.frame(f), w));
            }
        }
        assert!(log.is_monotone());
        assert!(log.iterations.last().unwrap().terms.total < log.iterations[0].terms.total);
    }
}

#[test]
fn frozen_camera_stays_put() {
    let c = chain();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let init = random_motion(&mut rng, 1, 0.2);
    let obs = observe(&c, &random_motion(&mut rng, 1, 0.2), &cam()).unwrap();
    let cfg = FitConfig {
        freeze_camera: true,
        max_iters: 50,
        ..Default::default()
    };
    let (_, log) = fit_sequence(&c, &init, &obs, cam(), &cfg).unwrap();
    assert_eq!(log.camera, cam());
}

#[test]
fn misaligned_inputs_are_rejected() {
    let c = chain();
    let m = MotionSequence::zeros(3, PartLayout::default()).unwrap();
    let obs = observe(&c, &m, &cam()).unwrap();
    let cfg = FitConfig::default();
    assert!(matches!(
        fit_sequence(&c, &m, &obs[..2], cam(), &cfg),
        Err(SokeError::Input(_))
    ));
    let mut dup = obs.clone();
    dup[2].frame_idx = 0;
    assert!(matches!(
        fit_sequence(&c, &m, &dup, cam(), &cfg),
        Err(SokeError::Input(_))
    ));
    let mut short = obs.clone();
    short[1].joints.pop();
    assert!(fit_sequence(&c, &m, &short, cam(), &cfg).is_err());
    let bad = CameraWeakPerspective { s: 0.0, ..cam() };
    assert!(fit_sequence(&c, &m, &obs, bad, &cfg).is_err());
}

#[test]
fn observation_file_round_trip() {
    let c = chain();
    let m = random_motion(&mut ChaCha8Rng::seed_from_u64(3), 2, 0.3);
    let obs = observe(&c, &m, &cam()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("obs.jsonl");
    write_observations(&path, &obs).unwrap();
    assert_eq!(read_observations(&path).unwrap(), obs);
}

#[test]
fn initial_camera_recovers_the_projection_of_the_init_pose() {
    let c = chain();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seq = random_motion(&mut rng, 3, 0.3);
    let truth = CameraWeakPerspective {
        s: 0.6,
        tx: 310.0,
        ty: 250.0,
    };
    let est = initial_camera(&c, &seq, &observe(&c, &seq, &truth).unwrap()).unwrap();
    assert!((est.s - truth.s).abs() < 1e-9);
    assert!((est.tx - truth.tx).abs() < 1e-6 && (est.ty - truth.ty).abs() < 1e-6);
}
