use serde::{Deserialize, Serialize};

use crate::error::{Result, SokeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtwResult {
    pub total: f64,
    /// Aligned `(generated, reference)` index pairs from start to end.
    pub path: Vec<(usize, usize)>,
    /// `total / path.len()`.
    pub normalized: f64,
}

/// Dynamic time warping over an `n x m` cost, steps (1,0), (0,1), (1,1).
/// Backtracking prefers the diagonal, then the vertical step (advancing the
/// first sequence only).
pub fn dtw(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Result<DtwResult> {
    if n == 0 || m == 0 {
        return Err(SokeError::Input(format!("cannot align empty tracks ({n} x {m})")));
    }
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = cost(i, j);
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut best = f64::INFINITY;
                if i > 0 && j > 0 {
                    best = acc[(i - 1) * m + j - 1];
                }
                if i > 0 {
                    best = best.min(acc[(i - 1) * m + j]);
                }
                if j > 0 {
                    best = best.min(acc[i * m + j - 1]);
                }
                best
            };
            acc[i * m + j] = prev + c;
        }
    }
    let total = acc[n * m - 1];
    if !total.is_finite() {
        return Err(SokeError::NonFinite("dtw cost".into()));
    }
    let (mut i, mut j) = (n - 1, m - 1);
    let mut path = vec![(i, j)];
    while i > 0 || j > 0 {
        let cands = [
            (i > 0 && j > 0).then(|| (i - 1, j - 1)),
            (i > 0).then(|| (i - 1, j)),
            (j > 0).then(|| (i, j - 1)),
        ];
        let mut best: Option<(usize, usize)> = None;
        for (a, b) in cands.into_iter().flatten() {
            if best.map_or(true, |(x, y)| acc[a * m + b] < acc[x * m + y]) {
                best = Some((a, b));
            }
        }
        (i, j) = best.expect("a predecessor exists off the origin");
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwResult {
        total,
        normalized: total / path.len() as f64,
        path,
    })
}
