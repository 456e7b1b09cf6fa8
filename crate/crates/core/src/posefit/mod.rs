//! Upper-body pose refinement from 2D keypoints.
//!
//! Minimises `w_rec * L_rec + w_temp * L_temp + w_reg * L_reg` over the
//! upper-body joint rotations (wrists excluded) and, unless frozen, a
//! weak-perspective camera. Hand and expression parameters are copied
//! through untouched. Search directions come from a damped reweighted
//! least-squares model of the L1 term; every step is accepted only after a
//! backtracking test on the true objective, so the logged total loss never
//! increases.

mod solve;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SokeError};
use crate::grad::{Graph, Tensor, Var};
use crate::motion::{rodrigues, KinematicChain, MotionSequence, Vec3};

/// Joints with 2D observations, in observation order.
pub const OBSERVED_JOINTS: [&str; 6] = ["l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraWeakPerspective {
    pub s: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for CameraWeakPerspective {
    fn default() -> Self {
        Self {
            s: 1.0,
            tx: 0.0,
            ty: 0.0,
        }
    }
}

impl CameraWeakPerspective {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !self.tx.is_finite() || !self.ty.is_finite() || !self.s.is_finite() {
            return Err(SokeError::Input(format!("invalid camera {self:?}")));
        }
        Ok(())
    }
}

/// One frame of 2D keypoints: `[x, y, confidence]` per observed joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation2D {
    pub frame_idx: usize,
    pub joints: Vec<[f64; 3]>,
}

impl Observation2D {
    pub fn validate(&self, n_joints: usize) -> Result<()> {
        if self.joints.len() != n_joints {
            return Err(SokeError::Input(format!(
                "frame {}: {} observed joints, expected {n_joints}",
                self.frame_idx,
                self.joints.len()
            )));
        }
        for j in &self.joints {
            if !j[0].is_finite() || !j[1].is_finite() || !(0.0..=1.0).contains(&j[2]) {
                return Err(SokeError::Input(format!(
                    "frame {}: bad keypoint {j:?}",
                    self.frame_idx
                )));
            }
        }
        Ok(())
    }
}

pub fn read_observations(path: &Path) -> Result<Vec<Observation2D>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| SokeError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_observations(path: &Path, obs: &[Observation2D]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for o in obs {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub w_rec: f64,
    pub w_temp: f64,
    pub w_reg: f64,
    pub max_iters: usize,
    /// Stop once an accepted step improves the total by less than this
    /// fraction.
    pub tolerance: f64,
    /// Initial Levenberg-style damping of the direction model.
    pub damping: f64,
    /// Residual magnitude below which L1 reweighting saturates.
    pub irls_floor: f64,
    /// Step halvings tried along one direction.
    pub max_backtracks: usize,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    pub freeze_camera: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            w_rec: 1.0,
            w_temp: 0.1,
            w_reg: 1e-3,
            max_iters: 200,
            tolerance: 1e-10,
            damping: 1e-3,
            irls_floor: 1e-6,
            max_backtracks: 30,
            armijo: 1e-4,
            freeze_camera: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_rec > 0.0) || !(self.w_temp >= 0.0) || !(self.w_reg >= 0.0) {
            return Err(SokeError::Config("posefit weights must be >= 0 with w_rec > 0".into()));
        }
        if !(self.damping > 0.0) || !(self.irls_floor > 0.0) || !(self.tolerance >= 0.0) {
            return Err(SokeError::Config("posefit step controls out of range".into()));
        }
        if !(0.0..1.0).contains(&self.armijo) {
            return Err(SokeError::Config("posefit armijo constant must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `s * (X, Y) + (tx, ty)`; depth is dropped.
pub fn project_weak(joints: &[Vec3], cam: &CameraWeakPerspective) -> Vec<[f64; 2]> {
    joints
        .iter()
        .map(|p| [cam.s * p[0] + cam.tx, cam.s * p[1] + cam.ty])
        .collect()
}

/// Indices of [`OBSERVED_JOINTS`] in `chain`.
pub fn observed_indices(chain: &KinematicChain) -> Result<Vec<usize>> {
    OBSERVED_JOINTS
        .iter()
        .map(|name| {
            chain
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| SokeError::Layout(format!("chain has no joint {name}")))
        })
        .collect()
}

/// Body joints whose rotations are refined: every body joint but the wrists.
pub fn refined_joints(chain: &KinematicChain) -> Vec<usize> {
    (0..chain.layout.body_joints)
        .filter(|&j| j != chain.left_wrist && j != chain.right_wrist)
        .collect()
}

/// Confidence-weighted L1 reprojection error of one frame.
pub fn loss_rec(
    frame: &[f32],
    obs: &Observation2D,
    cam: &CameraWeakPerspective,
    chain: &KinematicChain,
) -> Result<f64> {
    let idx = observed_indices(chain)?;
    obs.validate(idx.len())?;
    let joints = chain.forward_kinematics(frame);
    let picked: Vec<Vec3> = idx.iter().map(|&j| joints[j]).collect();
    Ok(project_weak(&picked, cam)
        .iter()
        .zip(&obs.joints)
        .map(|(p, o)| o[2] * ((o[0] - p[0]).abs() + (o[1] - p[1]).abs()))
        .sum())
}

fn diff_norm(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// `Σ_f ‖X_f − X_{f−1}‖ + ‖J_f − J_{f−1}‖` over per-frame joint tracks,
/// with `X` every joint (the surface proxy) and `J` the `observed` subset.
/// Zero for fewer than two frames.
pub fn loss_temp_tracks(tracks: &[Vec<Vec3>], observed: &[usize]) -> f64 {
    let mut total = 0.0;
    for f in 1..tracks.len() {
        total += diff_norm(&tracks[f], &tracks[f - 1]);
        let a: Vec<Vec3> = observed.iter().map(|&j| tracks[f][j]).collect();
        let b: Vec<Vec3> = observed.iter().map(|&j| tracks[f - 1][j]).collect();
        total += diff_norm(&a, &b);
    }
    total
}

/// Temporal term of a motion under forward kinematics.
pub fn loss_temp(seq: &MotionSequence, chain: &KinematicChain) -> Result<f64> {
    let idx = observed_indices(chain)?;
    let tracks: Vec<Vec<Vec3>> = seq.frames().map(|f| chain.forward_kinematics(f)).collect();
    Ok(loss_temp_tracks(&tracks, &idx))
}

/// Euclidean norm of the packed refined rotations.
pub fn loss_reg(theta: &[f64]) -> f64 {
    theta.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Refined rotations of `seq`, packed frame-major.
pub fn pack_refined(seq: &MotionSequence, chain: &KinematicChain) -> Vec<f64> {
    let refined = refined_joints(chain);
    seq.frames()
        .flat_map(|f| {
            refined
                .iter()
                .flat_map(|&j| chain.joint_rotation(f, j))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Weighted loss terms at one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec: f64,
    pub temp: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub terms: LossTerms,
    /// Fraction of the model step taken (0 for the initial point).
    pub alpha: f64,
    pub damping: f64,
    pub backtracks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub iterations: Vec<IterationLog>,
    pub camera: CameraWeakPerspective,
    pub stop_reason: String,
}

impl FitLog {
    pub fn is_monotone(&self) -> bool {
        self.iterations.windows(2).all(|w| w[1].terms.total <= w[0].terms.total)
    }
}

/// Differentiable objective over `(theta, camera)` for a fixed sequence.
pub struct Objective<'a> {
    chain: &'a KinematicChain,
    init: &'a MotionSequence,
    obs: Vec<&'a Observation2D>,
    config: &'a FitConfig,
    observed: Vec<usize>,
    refined: Vec<usize>,
}

impl<'a> Objective<'a> {
    /// Checks frame alignment and observation shapes.
    pub fn new(
        chain: &'a KinematicChain,
        init: &'a MotionSequence,
        obs: &'a [Observation2D],
        config: &'a FitConfig,
    ) -> Result<Self> {
        config.validate()?;
        if init.layout != chain.layout {
            return Err(SokeError::Layout("motion and chain layouts differ".into()));
        }
        let observed = observed_indices(chain)?;
        if obs.len() != init.len() {
            return Err(SokeError::Input(format!(
                "{} observation frames for a {}-frame sequence",
                obs.len(),
                init.len()
            )));
        }
        let mut ordered: Vec<Option<&Observation2D>> = vec![None; init.len()];
        for o in obs {
            o.validate(observed.len())?;
            match ordered.get_mut(o.frame_idx) {
                Some(slot @ None) => *slot = Some(o),
                _ => {
                    return Err(SokeError::Input(format!(
                        "observation frame index {} is duplicated or out of range",
                        o.frame_idx
                    )))
                }
            }
        }
        Ok(Self {
            chain,
            init,
            obs: ordered.into_iter().map(|o| o.expect("every slot filled")).collect(),
            config,
            observed,
            refined: refined_joints(chain),
        })
    }

    pub fn n_params(&self) -> usize {
        self.init.len() * self.refined.len() * 3
    }

    fn build(&self, g: &mut Graph, theta: &[f64], cam: &CameraWeakPerspective) -> Result<(Var, Var, Var, [Var; 3])> {
        let chain = self.chain;
        let nr = self.refined.len();
        let th = g.input(Tensor::matrix(self.init.len() * nr, 3, theta.to_vec())?);
        let cam_t = Tensor::matrix(1, 3, vec![cam.s, cam.tx, cam.ty])?;
        let cam_v = if self.config.freeze_camera {
            g.constant(cam_t)
        } else {
            g.input(cam_t)
        };
        let s = g.slice_cols(cam_v, 0, 1)?;
        let t = g.slice_cols(cam_v, 1, 2)?;
        let mut slot = vec![None; chain.n_joints()];
        for (k, &j) in self.refined.iter().enumerate() {
            slot[j] = Some(k);
        }
        let mut rec_terms = Vec::new();
        let mut temp_terms = Vec::new();
        let mut prev: Option<(Var, Var)> = None;
        for (f, frame) in self.init.frames().enumerate() {
            let mut glob: Vec<Var> = Vec::with_capacity(chain.n_joints());
            let mut pos: Vec<Var> = Vec::with_capacity(chain.n_joints());
            for j in 0..chain.n_joints() {
                let local = match slot[j] {
                    Some(k) => {
                        let r = g.slice_rows(th, f * nr + k, 1)?;
                        g.axis_angle(r)?
                    }
                    None => {
                        let m = rodrigues(chain.joint_rotation(frame, j));
                        g.constant(Tensor::matrix(3, 3, m.iter().flatten().copied().collect())?)
                    }
                };
                let off = g.constant(Tensor::matrix(3, 1, chain.offsets[j].to_vec())?);
                match chain.parents[j] {
                    None => {
                        let r = chain.root;
                        let o = chain.offsets[j];
                        pos.push(g.constant(Tensor::matrix(3, 1, vec![r[0] + o[0], r[1] + o[1], r[2] + o[2]])?));
                        glob.push(local);
                    }
                    Some(p) => {
                        let step = g.matmul(glob[p], off)?;
                        pos.push(g.add(pos[p], step)?);
                        glob.push(g.matmul(glob[p], local)?);
                    }
                }
            }
            let cols = g.concat_cols(&pos)?;
            let all = g.transpose(cols)?;
            let picked = g.gather(all, &self.observed)?;
            let xy = g.slice_cols(picked, 0, 2)?;
            let scaled = g.mul_scalar(xy, s)?;
            let proj = g.add_row(scaled, t)?;
            let o = self.obs[f];
            let target = g.constant(Tensor::matrix(
                o.joints.len(),
                2,
                o.joints.iter().flat_map(|j| [j[0], j[1]]).collect(),
            )?);
            let diff = g.sub(proj, target)?;
            let weights: Vec<f64> = o.joints.iter().flat_map(|j| [j[2], j[2]]).collect();
            rec_terms.push(g.weighted_abs_sum(diff, &weights)?);
            if let Some((pa, pp)) = prev {
                let dx = g.sub(all, pa)?;
                let dj = g.sub(picked, pp)?;
                temp_terms.push(g.norm2(dx));
                temp_terms.push(g.norm2(dj));
            }
            prev = Some((all, picked));
        }
        let sum = |g: &mut Graph, terms: &[Var]| -> Result<Var> {
            if terms.is_empty() {
                return Ok(g.constant(Tensor::scalar(0.0)));
            }
            let c = g.concat_rows(terms)?;
            Ok(g.sum(c))
        };
        let rec = sum(g, &rec_terms)?;
        let temp = sum(g, &temp_terms)?;
        let reg = g.norm2(th);
        let a = g.scale(rec, self.config.w_rec);
        let b = g.scale(temp, self.config.w_temp);
        let c = g.scale(reg, self.config.w_reg);
        let ab = g.add(a, b)?;
        let total = g.add(ab, c)?;
        Ok((total, th, cam_v, [rec, temp, reg]))
    }

    /// Loss terms at `(theta, cam)`.
    pub fn terms(&self, theta: &[f64], cam: &CameraWeakPerspective) -> Result<LossTerms> {
        let mut g = Graph::new();
        let (total, _, _, [rec, temp, reg]) = self.build(&mut g, theta, cam)?;
        Ok(LossTerms {
            rec: g.value(rec).item(),
            temp: g.value(temp).item(),
            reg: g.value(reg).item(),
            total: g.value(total).item(),
        })
    }

    /// Loss terms plus gradients with respect to `theta` and the camera
    /// (zeros when frozen).
    pub fn gradient(&self, theta: &[f64], cam: &CameraWeakPerspective) -> Result<(LossTerms, Vec<f64>, [f64; 3])> {
        let mut g = Graph::new();
        let (total, th, cam_v, [rec, temp, reg]) = self.build(&mut g, theta, cam)?;
        let terms = LossTerms {
            rec: g.value(rec).item(),
            temp: g.value(temp).item(),
            reg: g.value(reg).item(),
            total: g.value(total).item(),
        };
        if !terms.total.is_finite() {
            return Err(SokeError::NonFinite(format!("posefit loss {terms:?}")));
        }
        g.backward(total)?;
        let gt = g.grad(th).map_or_else(|| vec![0.0; theta.len()], <[f64]>::to_vec);
        let gc = match g.grad(cam_v) {
            Some(c) => [c[0], c[1], c[2]],
            None => [0.0; 3],
        };
        Ok((terms, gt, gc))
    }

    /// Model step for `(theta, cam)` given the exact gradient there.
    fn direction(
        &self,
        theta: &[f64],
        cam: &CameraWeakPerspective,
        grad: &[f64],
        gcam: &[f64; 3],
        mu: f64,
    ) -> Result<(Vec<f64>, [f64; 3])> {
        let nr = self.refined.len();
        let frames: Vec<solve::FrameModel> = self
            .init
            .frames()
            .enumerate()
            .map(|(f, frame)| {
                let mut rots: Vec<Vec3> = (0..self.chain.n_joints())
                    .map(|j| self.chain.joint_rotation(frame, j))
                    .collect();
                for (k, &j) in self.refined.iter().enumerate() {
                    let o = (f * nr + k) * 3;
                    rots[j] = [theta[o], theta[o + 1], theta[o + 2]];
                }
                let o = self.obs[f];
                solve::FrameModel {
                    jacobian: solve::frame_jacobian(self.chain, &rots, &self.refined, &self.observed, o, cam),
                    weights: o
                        .joints
                        .iter()
                        .flat_map(|j| [j[2], j[2]])
                        .map(|c| c * self.config.w_rec)
                        .collect(),
                    gradient: grad[f * nr * 3..(f + 1) * nr * 3].to_vec(),
                }
            })
            .collect();
        let cam_grad = (!self.config.freeze_camera).then_some(*gcam);
        let (dt, dc) = solve::damped_direction(&frames, cam_grad, mu, self.config.irls_floor)?;
        Ok((dt.into_iter().flatten().collect(), dc))
    }

    /// `init` with the refined rotations replaced by `theta`.
    pub fn apply(&self, theta: &[f64]) -> MotionSequence {
        let mut out = self.init.clone();
        let nr = self.refined.len();
        let layout = self.chain.layout;
        for f in 0..out.len() {
            let frame = out.frame_mut(f);
            for (k, &j) in self.refined.iter().enumerate() {
                let o = layout.joint_param_offset(j);
                for a in 0..3 {
                    frame[o + a] = theta[(f * nr + k) * 3 + a] as f32;
                }
            }
        }
        out
    }
}

const MAX_DAMPING: f64 = 1e12;

/// Refines the upper body of `init` against `obs`.
pub fn fit_sequence(
    chain: &KinematicChain,
    init: &MotionSequence,
    obs: &[Observation2D],
    cam: CameraWeakPerspective,
    config: &FitConfig,
) -> Result<(MotionSequence, FitLog)> {
    cam.validate()?;
    let objective = Objective::new(chain, init, obs, config)?;
    let mut theta = pack_refined(init, chain);
    let mut cam = cam;
    let (mut terms, mut grad, mut gcam) = objective.gradient(&theta, &cam)?;
    let mut mu = config.damping;
    let mut log = vec![IterationLog {
        iter: 0,
        terms,
        alpha: 0.0,
        damping: mu,
        backtracks: 0,
    }];
    let mut stop = format!("iteration budget {} reached", config.max_iters);
    let mut iter = 0;
    while iter < config.max_iters {
        let gsq: f64 = grad.iter().chain(&gcam).map(|v| v * v).sum();
        if gsq == 0.0 {
            stop = "zero gradient".into();
            break;
        }
        let (dt, dc) = objective.direction(&theta, &cam, &grad, &gcam, mu)?;
        let slope: f64 = dt
            .iter()
            .zip(&grad)
            .chain(dc.iter().zip(&gcam))
            .map(|(d, g)| d * g)
            .sum();
        let mut accepted = None;
        if slope < 0.0 {
            let mut alpha = 1.0;
            for bt in 0..=config.max_backtracks {
                let cand: Vec<f64> = theta.iter().zip(&dt).map(|(x, d)| x + alpha * d).collect();
                let cand_cam = CameraWeakPerspective {
                    s: cam.s + alpha * dc[0],
                    tx: cam.tx + alpha * dc[1],
                    ty: cam.ty + alpha * dc[2],
                };
                if cand_cam.s > 0.0 {
                    let t = objective.terms(&cand, &cand_cam)?;
                    if !t.total.is_finite() {
                        return Err(SokeError::NonFinite(format!(
                            "posefit loss at iteration {}: {t:?}",
                            iter + 1
                        )));
                    }
                    if t.total <= terms.total + config.armijo * alpha * slope {
                        accepted = Some((cand, cand_cam, alpha, bt));
                        break;
                    }
                }
                alpha *= 0.5;
            }
        }
        let Some((cand, cand_cam, alpha, backtracks)) = accepted else {
            mu *= 100.0;
            if mu > MAX_DAMPING {
                stop = "no decrease along any damped direction".into();
                break;
            }
            continue;
        };
        iter += 1;
        let (t, g, gc) = objective.gradient(&cand, &cand_cam)?;
        let improvement = (terms.total - t.total) / terms.total.abs().max(f64::MIN_POSITIVE);
        theta = cand;
        cam = cand_cam;
        terms = t;
        grad = g;
        gcam = gc;
        log.push(IterationLog {
            iter,
            terms,
            alpha,
            damping: mu,
            backtracks,
        });
        mu = if backtracks == 0 {
            (mu / 3.0).max(1e-12)
        } else {
            mu * 2.0
        };
        if improvement < config.tolerance {
            stop = format!("relative improvement {improvement:.3e} below tolerance");
            break;
        }
    }
    Ok((
        objective.apply(&theta),
        FitLog {
            iterations: log,
            camera: cam,
            stop_reason: stop,
        },
    ))
}

/// Confidence-weighted least-squares camera mapping the projected joints
/// of `init` onto `obs`. Falls back to the default camera when the fit
/// gives a non-positive scale.
pub fn initial_camera(
    chain: &KinematicChain,
    init: &MotionSequence,
    obs: &[Observation2D],
) -> Result<CameraWeakPerspective> {
    let idx = observed_indices(chain)?;
    let mut pairs: Vec<([f64; 2], [f64; 2], f64)> = Vec::new();
    for o in obs {
        o.validate(idx.len())?;
        if o.frame_idx >= init.len() {
            return Err(SokeError::Input(format!(
                "observation frame {} beyond {} frames",
                o.frame_idx,
                init.len()
            )));
        }
        let joints = chain.forward_kinematics(init.frame(o.frame_idx));
        for (k, &j) in idx.iter().enumerate() {
            let [x, y, c] = o.joints[k];
            pairs.push(([joints[j][0], joints[j][1]], [x, y], c));
        }
    }
    let w: f64 = pairs.iter().map(|p| p.2).sum();
    if w <= 0.0 {
        return Ok(CameraWeakPerspective::default());
    }
    let mean = |f: &dyn Fn(&([f64; 2], [f64; 2], f64)) -> [f64; 2]| {
        let mut m = [0.0; 2];
        for p in &pairs {
            let v = f(p);
            m[0] += p.2 * v[0] / w;
            m[1] += p.2 * v[1] / w;
        }
        m
    };
    let pm = mean(&|p| p.0);
    let om = mean(&|p| p.1);
    let (mut num, mut den) = (0.0, 0.0);
    for (pj, oj, c) in &pairs {
        for a in 0..2 {
            num += c * (pj[a] - pm[a]) * (oj[a] - om[a]);
            den += c * (pj[a] - pm[a]).powi(2);
        }
    }
    if !(den > 0.0) || !(num > 0.0) {
        return Ok(CameraWeakPerspective::default());
    }
    let s = num / den;
    Ok(CameraWeakPerspective {
        s,
        tx: om[0] - s * pm[0],
        ty: om[1] - s * pm[1],
    })
}

/// Noise-free, full-confidence observations of `seq`.
pub fn observe(
    chain: &KinematicChain,
    seq: &MotionSequence,
    cam: &CameraWeakPerspective,
) -> Result<Vec<Observation2D>> {
    let idx = observed_indices(chain)?;
    Ok(seq
        .frames()
        .enumerate()
        .map(|(f, frame)| {
            let joints = chain.forward_kinematics(frame);
            let picked: Vec<Vec3> = idx.iter().map(|&j| joints[j]).collect();
            Observation2D {
                frame_idx: f,
                joints: project_weak(&picked, cam)
                    .into_iter()
                    .map(|p| [p[0], p[1], 1.0])
                    .collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests;
