use serde::{Deserialize, Serialize};

use crate::error::{Result, SokeError};
use crate::motion::Part;

/// A part's code matrix, `n_codes x code_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub part: Part,
    pub code_dim: usize,
    pub codes: Vec<f64>,
}

impl Codebook {
    pub fn new(part: Part, code_dim: usize, codes: Vec<f64>) -> Result<Self> {
        if code_dim == 0 || codes.is_empty() || codes.len() % code_dim != 0 {
            return Err(SokeError::Config(format!(
                "{} values do not form a nonempty codebook of {code_dim}-dim rows",
                codes.len()
            )));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(SokeError::NonFinite("codebook".into()));
        }
        Ok(Self { part, code_dim, codes })
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.code_dim
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.codes[i * self.code_dim..(i + 1) * self.code_dim]
    }

    /// Index of the code nearest to `v`; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, code) in self.codes.chunks_exact(self.code_dim).enumerate() {
            let d: f64 = code.iter().zip(v).map(|(c, x)| (c - x) * (c - x)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Code indices of one part.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub part: Part,
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Nearest-neighbour quantization of `latent` (rows of `codebook.code_dim`
/// values) against the codebook.
pub fn quantize(latent: &[f64], codebook: &Codebook) -> Result<TokenSeq> {
    let c = codebook.code_dim;
    if latent.is_empty() || latent.len() % c != 0 {
        return Err(SokeError::Input(format!(
            "latent of {} values is not a nonempty set of {c}-dim rows",
            latent.len()
        )));
    }
    if latent.iter().any(|v| !v.is_finite()) {
        return Err(SokeError::NonFinite("latent".into()));
    }
    let ids = latent.chunks_exact(c).map(|row| codebook.nearest(row)).collect();
    Ok(TokenSeq {
        part: codebook.part,
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle(latent: &[f64], codes: &[Vec<f64>]) -> Vec<usize> {
        let dim = codes[0].len();
        latent
            .chunks(dim)
            .map(|row| {
                let dists: Vec<f64> = codes
                    .iter()
                    .map(|c| c.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                    .collect();
                let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
                dists.iter().position(|&d| d == min).unwrap()
            })
            .collect()
    }

    #[test]
    fn exact_code_maps_to_itself() {
        let cb = Codebook::new(Part::Body, 2, (0..20).map(|i| i as f64 * 0.3).collect()).unwrap();
        let q = quantize(cb.row(5), &cb).unwrap();
        assert_eq!(q.ids, vec![5]);
    }

    #[test]
    fn two_code_example() {
        let cb = Codebook::new(Part::LeftHand, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let q = quantize(&[0.9, 0.1], &cb).unwrap();
        assert_eq!(q.ids, vec![1]);
        let d0 = (0.9f64.powi(2) + 0.1f64.powi(2)).sqrt();
        let d1 = (0.1f64.powi(2) + 0.1f64.powi(2)).sqrt();
        assert!((d0 - 0.906).abs() < 1e-3 && (d1 - 0.141).abs() < 1e-3);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let cb = Codebook::new(Part::RightHand, 1, vec![-1.0, 1.0, 1.0]).unwrap();
        assert_eq!(quantize(&[0.0], &cb).unwrap().ids, vec![0]);
        assert_eq!(quantize(&[1.0], &cb).unwrap().ids, vec![1]);
    }

    #[test]
    fn empty_latent_is_an_error() {
        let cb = Codebook::new(Part::Body, 2, vec![0.0, 0.0]).unwrap();
        assert!(quantize(&[], &cb).is_err());
        assert!(quantize(&[1.0], &cb).is_err());
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(
            n in 1usize..12, dim in 1usize..6, rows in 1usize..8, seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let codes: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let latent: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let cb = Codebook::new(Part::Body, dim, codes.concat()).unwrap();
            prop_assert_eq!(quantize(&latent, &cb).unwrap().ids, oracle(&latent, &codes));
        }

        #[test]
        fn codebook_rows_are_fixed_points(n in 1usize..20, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let codes: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cb = Codebook::new(Part::Body, 3, codes).unwrap();
            for i in 0..n {
                prop_assert_eq!(quantize(cb.row(i), &cb).unwrap().ids, vec![i]);
            }
        }
    }
}
