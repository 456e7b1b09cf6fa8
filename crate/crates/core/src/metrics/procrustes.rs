use nalgebra::{Matrix3, Vector3};

use crate::error::{Result, SokeError};
use crate::motion::Vec3;

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let r = &self.rotation;
        let mut out = self.translation;
        for i in 0..3 {
            out[i] += self.scale * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]);
        }
        out
    }

    pub fn rotation_det(&self) -> f64 {
        mat(&self.rotation).determinant()
    }
}

fn mat(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

fn v(p: &Vec3) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

fn centroid(pts: &[Vec3]) -> Vector3<f64> {
    pts.iter().map(v).sum::<Vector3<f64>>() / pts.len() as f64
}

/// Least-squares similarity mapping `a` onto `b` (rotations only, no
/// reflections).
pub fn fit_similarity(a: &[Vec3], b: &[Vec3]) -> Result<Similarity> {
    if a.len() != b.len() {
        return Err(SokeError::Input(format!(
            "point sets differ in size: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(SokeError::AlignmentDegenerate(format!("{} points", a.len())));
    }
    let (ma, mb) = (centroid(a), centroid(b));
    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    let mut var_a = 0.0;
    for (p, q) in a.iter().zip(b) {
        let (pa, qb) = (v(p) - ma, v(q) - mb);
        cov += qb * pa.transpose();
        scatter += pa * pa.transpose();
        var_a += pa.norm_squared();
    }
    let sv = scatter.symmetric_eigen().eigenvalues;
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(SokeError::AlignmentDegenerate(
            "source points are coincident or collinear".into(),
        ));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let d = (u * vt).determinant().signum();
    let s_mat = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = u * s_mat * vt;
    let sigma = svd.singular_values;
    let scale = (sigma[0] + sigma[1] + d * sigma[2]) / var_a;
    let t = mb - scale * r * ma;
    Ok(Similarity {
        scale,
        rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
        translation: [t[0], t[1], t[2]],
    })
}

/// Aligns `a` to `b`, returning the aligned points and the transform.
pub fn procrustes_align(a: &[Vec3], b: &[Vec3]) -> Result<(Vec<Vec3>, Similarity)> {
    let sim = fit_similarity(a, b)?;
    Ok((a.iter().map(|p| sim.apply(p)).collect(), sim))
}

/// Sum of squared distances between corresponding points.
pub fn residual(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>())
        .sum()
}
