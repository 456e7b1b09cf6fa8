use crate::error::{Result, SokeError};

use super::{PartLayout, ROTATION_DIMS};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

// Below this angle the trigonometric coefficients use their Taylor series.
const SMALL_ANGLE: f64 = 1e-3;

fn skew(r: Vec3) -> Mat3 {
    [[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]]
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub(crate) fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// `(sin t / t, (1 - cos t) / t^2)` and their derivatives divided by `t`.
fn rodrigues_coeffs(theta2: f64) -> (f64, f64, f64, f64) {
    let theta = theta2.sqrt();
    if theta < SMALL_ANGLE {
        let a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0;
        let b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0;
        let da = -1.0 / 3.0 + theta2 / 30.0;
        let db = -1.0 / 12.0 + theta2 / 180.0;
        (a, b, da, db)
    } else {
        let (s, c) = theta.sin_cos();
        let a = s / theta;
        let b = (1.0 - c) / theta2;
        let da = (theta * c - s) / (theta2 * theta);
        let db = (theta * s - 2.0 * (1.0 - c)) / (theta2 * theta2);
        (a, b, da, db)
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn rodrigues(r: Vec3) -> Mat3 {
    let theta2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let (a, b, _, _) = rodrigues_coeffs(theta2);
    let k = skew(r);
    let k2 = mat_mul(&k, &k);
    let mut out = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    out
}

/// Rotation matrix together with its partial derivatives with respect to
/// each axis-angle component.
pub fn rodrigues_with_jacobian(r: Vec3) -> (Mat3, [Mat3; 3]) {
    let theta2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let (a, b, da, db) = rodrigues_coeffs(theta2);
    let k = skew(r);
    let k2 = mat_mul(&k, &k);
    let mut rot = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            rot[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    let mut jac = [[[0.0; 3]; 3]; 3];
    for (c, dr) in jac.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[c] = 1.0;
        let dk = skew(e);
        let dkk = mat_mul(&dk, &k);
        let kdk = mat_mul(&k, &dk);
        for i in 0..3 {
            for j in 0..3 {
                dr[i][j] = a * dk[i][j] + b * (dkk[i][j] + kdk[i][j]) + da * r[c] * k[i][j] + db * r[c] * k2[i][j];
            }
        }
    }
    (rot, jac)
}

/// Joint subsets used by the position metrics. Expression parameters never
/// contribute to joint positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointSubset {
    Body,
    Hands,
    All,
}

/// A toy articulated skeleton: an upper body with two arms plus two
/// five-fingered hands attached at the wrists. Joints are topologically
/// ordered (every parent index is smaller than its child's).
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub layout: PartLayout,
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<Vec3>,
    pub root: Vec3,
    pub names: Vec<String>,
    pub left_wrist: usize,
    pub right_wrist: usize,
}

// Upper body: (name, parent, offset in raw units before rescaling).
const BODY: [(&str, Option<usize>, Vec3); 11] = [
    ("spine", None, [0.0, 0.0, 0.0]),
    ("neck", Some(0), [0.0, 250.0, 0.0]),
    ("head", Some(1), [0.0, 120.0, 10.0]),
    ("l_collar", Some(1), [80.0, -20.0, 0.0]),
    ("l_shoulder", Some(3), [100.0, -10.0, 0.0]),
    ("l_elbow", Some(4), [0.0, -280.0, 0.0]),
    ("l_wrist", Some(5), [0.0, -250.0, 0.0]),
    ("r_collar", Some(1), [-80.0, -20.0, 0.0]),
    ("r_shoulder", Some(7), [-100.0, -10.0, 0.0]),
    ("r_elbow", Some(8), [0.0, -280.0, 0.0]),
    ("r_wrist", Some(9), [0.0, -250.0, 0.0]),
];

/// Mean bone length of the rescaled toy skeleton, in millimetres.
pub const MEAN_BONE_LENGTH_MM: f64 = 100.0;

impl KinematicChain {
    /// Builds the toy skeleton for `layout` and rescales it so the mean bone
    /// length is [`MEAN_BONE_LENGTH_MM`].
    pub fn toy(layout: PartLayout) -> Result<Self> {
        layout.validate()?;
        if layout.body_joints != BODY.len() {
            return Err(SokeError::Layout(format!(
                "toy skeleton has {} body joints, layout asks for {}",
                BODY.len(),
                layout.body_joints
            )));
        }
        let h = layout.hand_joints_per_hand;
        if h % 5 != 0 {
            return Err(SokeError::Layout(format!(
                "hand joints per hand ({h}) must be a multiple of 5 fingers"
            )));
        }
        let per_finger = h / 5;

        let mut parents = Vec::with_capacity(layout.total_joints());
        let mut offsets = Vec::with_capacity(layout.total_joints());
        let mut names = Vec::with_capacity(layout.total_joints());
        for (name, parent, off) in BODY {
            names.push(name.to_string());
            parents.push(parent);
            offsets.push(off);
        }
        let (left_wrist, right_wrist) = (6, 10);
        for (side, wrist, mirror) in [("l", left_wrist, 1.0), ("r", right_wrist, -1.0)] {
            for finger in 0..5 {
                let spread = (finger as f64 - 2.0) * 18.0 * mirror;
                let mut parent = wrist;
                for seg in 0..per_finger {
                    let off = if seg == 0 {
                        [spread, -85.0, 5.0]
                    } else {
                        [0.0, -40.0 / (seg as f64), 0.0]
                    };
                    names.push(format!("{side}_f{finger}_{seg}"));
                    parents.push(Some(parent));
                    offsets.push(off);
                    parent = parents.len() - 1;
                }
            }
        }

        let bones: Vec<f64> = parents
            .iter()
            .zip(&offsets)
            .filter(|(p, _)| p.is_some())
            .map(|(_, o)| norm(o))
            .collect();
        let scale = MEAN_BONE_LENGTH_MM / (bones.iter().sum::<f64>() / bones.len() as f64);
        for o in &mut offsets {
            for v in o.iter_mut() {
                *v *= scale;
            }
        }

        Ok(Self {
            layout,
            parents,
            offsets,
            root: [0.0; 3],
            names,
            left_wrist,
            right_wrist,
        })
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn mean_bone_length(&self) -> f64 {
        let bones: Vec<f64> = self
            .parents
            .iter()
            .zip(&self.offsets)
            .filter(|(p, _)| p.is_some())
            .map(|(_, o)| norm(o))
            .collect();
        bones.iter().sum::<f64>() / bones.len() as f64
    }

    /// Joint indices of a subset.
    pub fn subset(&self, subset: JointSubset) -> std::ops::Range<usize> {
        let b = self.layout.body_joints;
        match subset {
            JointSubset::Body => 0..b,
            JointSubset::Hands => b..self.n_joints(),
            JointSubset::All => 0..self.n_joints(),
        }
    }

    /// Joint positions of one frame of parameters.
    pub fn forward_kinematics(&self, frame: &[f32]) -> Vec<Vec3> {
        let rots: Vec<Vec3> = (0..self.n_joints())
            .map(|j| {
                let o = self.layout.joint_param_offset(j);
                [frame[o] as f64, frame[o + 1] as f64, frame[o + 2] as f64]
            })
            .collect();
        self.forward_kinematics_rotations(&rots)
    }

    /// Joint positions and global orientations from per-joint axis-angle
    /// rotations (indexed like the joints).
    pub fn forward_kinematics_rotations(&self, rots: &[Vec3]) -> Vec<Vec3> {
        self.forward_kinematics_full(rots).0
    }

    pub(crate) fn forward_kinematics_full(&self, rots: &[Vec3]) -> (Vec<Vec3>, Vec<Mat3>) {
        let n = self.n_joints();
        let mut pos = Vec::with_capacity(n);
        let mut glob: Vec<Mat3> = Vec::with_capacity(n);
        for j in 0..n {
            let local = rodrigues(rots[j]);
            match self.parents[j] {
                None => {
                    pos.push(add(&self.root, &self.offsets[j]));
                    glob.push(local);
                }
                Some(p) => {
                    let step = mat_vec(&glob[p], &self.offsets[j]);
                    pos.push(add(&pos[p], &step));
                    glob.push(mat_mul(&glob[p], &local));
                }
            }
        }
        (pos, glob)
    }

    /// Parameter-space rotation of joint `j` in `frame`.
    pub fn joint_rotation(&self, frame: &[f32], j: usize) -> Vec3 {
        let o = self.layout.joint_param_offset(j);
        debug_assert!(o + ROTATION_DIMS <= frame.len());
        [frame[o] as f64, frame[o + 1] as f64, frame[o + 2] as f64]
    }
}

fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Rotation3, Vector3};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn chain() -> KinematicChain {
        KinematicChain::toy(PartLayout::default()).unwrap()
    }

    #[test]
    fn topology_is_ordered_and_hands_attach_to_wrists() {
        let c = chain();
        assert_eq!(c.n_joints(), 41);
        for (j, p) in c.parents.iter().enumerate() {
            if let Some(p) = p {
                assert!(*p < j);
            }
        }
        let b = c.layout.body_joints;
        let h = c.layout.hand_joints_per_hand;
        let first_fingers: Vec<usize> = (0..5).map(|f| b + f * 3).collect();
        for f in first_fingers {
            assert_eq!(c.parents[f], Some(c.left_wrist));
            assert_eq!(c.parents[f + h], Some(c.right_wrist));
        }
        assert!((c.mean_bone_length() - MEAN_BONE_LENGTH_MM).abs() < 1e-9);
    }

    #[test]
    fn rest_pose_is_cumulative_offsets() {
        let c = chain();
        let pos = c.forward_kinematics(&vec![0.0; 133]);
        for j in 0..c.n_joints() {
            let mut expect = [0.0; 3];
            let mut k = Some(j);
            while let Some(i) = k {
                for a in 0..3 {
                    expect[a] += c.offsets[i][a];
                }
                k = c.parents[i];
            }
            for a in 0..3 {
                assert!((pos[j][a] - expect[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn half_turn_about_z_flips_child() {
        let layout = PartLayout::default();
        let c = KinematicChain {
            layout,
            parents: vec![None, Some(0)],
            offsets: vec![[0.0; 3], [1.0, 0.0, 0.0]],
            root: [0.0; 3],
            names: vec!["a".into(), "b".into()],
            left_wrist: 0,
            right_wrist: 0,
        };
        let pos = c.forward_kinematics_rotations(&[[0.0, 0.0, PI], [0.0; 3]]);
        assert!((pos[1][0] + 1.0).abs() < 1e-12);
        assert!(pos[1][1].abs() < 1e-12 && pos[1][2].abs() < 1e-12);
    }

    #[test]
    fn wrist_rotation_leaves_body_joints_unchanged() {
        let c = chain();
        let mut frame = vec![0.1f32; 133];
        let base = c.forward_kinematics(&frame);
        let o = c.layout.joint_param_offset(c.left_wrist);
        frame[o] += 0.7;
        frame[o + 2] -= 0.4;
        let moved = c.forward_kinematics(&frame);
        for j in c.subset(JointSubset::Body) {
            assert_eq!(base[j], moved[j]);
        }
        assert!(c.subset(JointSubset::Hands).any(|j| base[j] != moved[j]));
    }

    #[test]
    fn expression_does_not_move_joints() {
        let c = chain();
        let mut frame = vec![0.2f32; 133];
        let base = c.forward_kinematics(&frame);
        for v in &mut frame[c.layout.expression_range()] {
            *v = -3.0;
        }
        assert_eq!(base, c.forward_kinematics(&frame));
    }

    #[test]
    fn rodrigues_matches_nalgebra() {
        for r in [[0.3, -0.2, 0.9], [1e-5, 2e-5, -1e-5], [0.0, 0.0, 0.0], [2.0, 1.0, -2.5]] {
            let ours = rodrigues(r);
            let theirs = Rotation3::new(Vector3::new(r[0], r[1], r[2]));
            for i in 0..3 {
                for j in 0..3 {
                    assert!((ours[i][j] - theirs[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rodrigues_jacobian_matches_finite_differences() {
        for r in [[0.3, -0.2, 0.9], [2e-4, -1e-4, 3e-4], [0.0, 0.0, 0.0], [1.5, 2.0, 0.1]] {
            let (_, jac) = rodrigues_with_jacobian(r);
            let h = 1e-6;
            for c in 0..3 {
                let mut rp = r;
                let mut rm = r;
                rp[c] += h;
                rm[c] -= h;
                let (p, m) = (rodrigues(rp), rodrigues(rm));
                for i in 0..3 {
                    for j in 0..3 {
                        let fd = (p[i][j] - m[i][j]) / (2.0 * h);
                        assert!((fd - jac[c][i][j]).abs() < 1e-7, "{r:?} {c} {i}{j}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn global_root_rotation_is_equivariant(
            g in prop::array::uniform3(-2.0f64..2.0),
            root in prop::array::uniform3(-1.0f64..1.0),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let c = chain();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rots: Vec<Vec3> = (0..c.n_joints())
                .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
                .collect();
            rots[0] = root;
            let base = c.forward_kinematics_rotations(&rots);

            let rg = Rotation3::new(Vector3::from(g));
            let composed = rg * Rotation3::new(Vector3::from(root));
            let axis = composed.scaled_axis();
            rots[0] = [axis.x, axis.y, axis.z];
            let turned = c.forward_kinematics_rotations(&rots);

            let m: Matrix3<f64> = *rg.matrix();
            let origin = Vector3::from(base[0]);
            for (a, b) in base.iter().zip(&turned) {
                let expect = origin + m * (Vector3::from(*a) - origin);
                prop_assert!((expect - Vector3::from(*b)).norm() < 1e-8);
            }
        }
    }
}
