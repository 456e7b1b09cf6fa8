//! Search directions for the pose fit: a damped, reweighted least-squares
//! model of the L1 reprojection term plus the exact gradient of the rest.
//! The model only proposes directions; acceptance is decided on the true
//! objective by the caller.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{CameraWeakPerspective, Observation2D};
use crate::error::{Result, SokeError};
use crate::motion::fk::{mat_mul, mat_vec};
use crate::motion::{rodrigues_with_jacobian, KinematicChain, Mat3, Vec3};

/// Reprojection residuals of one frame and their derivatives.
pub(crate) struct FrameJacobian {
    /// `[x0, y0, x1, y1, ...]`, projected minus observed.
    pub residuals: Vec<f64>,
    /// Row per residual, column per refined parameter.
    pub d_theta: DMatrix<f64>,
    /// Row per residual, columns `(s, tx, ty)`.
    pub d_cam: DMatrix<f64>,
}

fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// `rots` holds every joint's local rotation for this frame.
pub(crate) fn frame_jacobian(
    chain: &KinematicChain,
    rots: &[Vec3],
    refined: &[usize],
    observed: &[usize],
    obs: &Observation2D,
    cam: &CameraWeakPerspective,
) -> FrameJacobian {
    let (pos, glob) = chain.forward_kinematics_full(rots);
    let n_res = 2 * observed.len();
    let mut d_theta = DMatrix::zeros(n_res, 3 * refined.len());
    let mut d_cam = DMatrix::zeros(n_res, 3);
    let mut residuals = Vec::with_capacity(n_res);
    for (o, &j) in observed.iter().enumerate() {
        let p = pos[j];
        residuals.push(cam.s * p[0] + cam.tx - obs.joints[o][0]);
        residuals.push(cam.s * p[1] + cam.ty - obs.joints[o][1]);
        d_cam[(2 * o, 0)] = p[0];
        d_cam[(2 * o, 1)] = 1.0;
        d_cam[(2 * o + 1, 0)] = p[1];
        d_cam[(2 * o + 1, 2)] = 1.0;
        // Walk the strict ancestors of j; only their rotations move p_j.
        let mut anc = chain.parents[j];
        while let Some(k) = anc {
            if let Some(col) = refined.iter().position(|&r| r == k) {
                let parent_glob = match chain.parents[k] {
                    Some(pk) => glob[pk],
                    None => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                };
                let w = mat_vec(&transpose(&glob[k]), &sub(&p, &pos[k]));
                let (_, jac) = rodrigues_with_jacobian(rots[k]);
                for (a, dr) in jac.iter().enumerate() {
                    let dp = mat_vec(&mat_mul(&parent_glob, dr), &w);
                    d_theta[(2 * o, 3 * col + a)] = cam.s * dp[0];
                    d_theta[(2 * o + 1, 3 * col + a)] = cam.s * dp[1];
                }
            }
            anc = chain.parents[k];
        }
    }
    FrameJacobian {
        residuals,
        d_theta,
        d_cam,
    }
}

/// Per-frame pieces of the model system.
pub(crate) struct FrameModel {
    pub jacobian: FrameJacobian,
    /// Confidence times `w_rec` per residual.
    pub weights: Vec<f64>,
    /// Exact gradient of the total loss for this frame's parameters.
    pub gradient: Vec<f64>,
}

/// Solves `(H + mu * (diag H + eps)) d = -g` for the block system in which
/// frames couple only through the camera. `floor` bounds the reweighting
/// `w / max(|r|, floor)`.
pub(crate) fn damped_direction(
    frames: &[FrameModel],
    cam_gradient: Option<[f64; 3]>,
    mu: f64,
    floor: f64,
) -> Result<(Vec<Vec<f64>>, [f64; 3])> {
    let mut blocks = Vec::with_capacity(frames.len());
    let mut hc = Matrix3::<f64>::zeros();
    for fm in frames {
        let jac = &fm.jacobian;
        let w = DVector::from_iterator(
            jac.residuals.len(),
            jac.residuals
                .iter()
                .zip(&fm.weights)
                .map(|(r, c)| c / r.abs().max(floor)),
        );
        let wt = DMatrix::from_diagonal(&w);
        let h = jac.d_theta.transpose() * &wt * &jac.d_theta;
        let c = jac.d_theta.transpose() * &wt * &jac.d_cam;
        let hcf = jac.d_cam.transpose() * &wt * &jac.d_cam;
        hc += Matrix3::from_iterator(hcf.iter().copied());
        blocks.push((h, c));
    }
    let damp = |h: &mut DMatrix<f64>| {
        let scale = (0..h.nrows()).map(|i| h[(i, i)]).fold(1.0f64, f64::max);
        for i in 0..h.nrows() {
            h[(i, i)] += mu * (h[(i, i)] + 1e-6 * scale);
        }
    };
    let mut solved = Vec::with_capacity(frames.len());
    let mut schur = hc;
    let mut rhs = Vector3::zeros();
    let singular = || SokeError::NonFinite("posefit model system is singular".into());
    for ((h, c), fm) in blocks.iter_mut().zip(frames) {
        damp(h);
        let chol = h.clone().cholesky().ok_or_else(singular)?;
        let g = DVector::from_column_slice(&fm.gradient);
        let y = chol.solve(&g);
        let x = chol.solve(c);
        if cam_gradient.is_some() {
            let ctx = c.transpose() * &x;
            let cty = c.transpose() * &y;
            schur -= Matrix3::from_iterator(ctx.iter().copied());
            rhs += Vector3::from_iterator(cty.iter().copied());
        }
        solved.push((y, x));
    }
    let d_cam = match cam_gradient {
        Some(gc) => {
            let mut s = DMatrix::from_iterator(3, 3, schur.iter().copied());
            damp(&mut s);
            let rhs = DVector::from_column_slice(&[rhs[0] - gc[0], rhs[1] - gc[1], rhs[2] - gc[2]]);
            let d = s.cholesky().ok_or_else(singular)?.solve(&rhs);
            [d[0], d[1], d[2]]
        }
        None => [0.0; 3],
    };
    let dc = DVector::from_column_slice(&d_cam);
    let d_theta = solved
        .into_iter()
        .map(|(y, x)| {
            let d = -(y + x * &dc);
            d.iter().copied().collect()
        })
        .collect();
    Ok((d_theta, d_cam))
}
