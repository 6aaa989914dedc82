//! Tall-thin matrices whose rows are nearly orthonormal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_C0: f64 = 8.0;
pub const RETRY_BUDGET: u64 = 16;
/// Largest `N` for which the exact identity fallback is materialized.
pub const MAX_EXACT_FALLBACK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Construction {
    /// `K = 1` shortcut (single row, or a vacuous bound).
    Trivial,
    /// Random sign rows scaled by `1/sqrt(K)`.
    RandomSigns,
    /// `K = N`: Gaussian rows orthonormalized.
    RandomOrthogonal,
    /// Retries exhausted; exact identity.
    IdentityFallback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedIdentity {
    pub n: usize,
    pub k: usize,
    /// Row-major `n x k`.
    pub v: Vec<f64>,
    pub mu: f64,
    pub seed: u64,
    pub construction: Construction,
    pub attempts: u64,
    pub max_off_diagonal: f64,
    pub max_diagonal_error: f64,
}

impl PerturbedIdentity {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.k..(i + 1) * self.k]
    }

    pub fn gram(&self, i: usize, j: usize) -> f64 {
        dot(self.row(i), self.row(j))
    }
}

pub fn target_columns(n: usize, mu: f64, c0: f64) -> usize {
    if mu >= 1.0 || n <= 1 {
        return 1;
    }
    let wanted = (c0 * (n.max(2) as f64).ln() / (mu * mu)).ceil();
    if wanted >= n as f64 {
        n
    } else {
        wanted as usize
    }
}

pub fn perturbed_identity(n: usize, mu: f64, seed: u64) -> Result<PerturbedIdentity> {
    perturbed_identity_with(n, mu, seed, DEFAULT_C0)
}

pub fn perturbed_identity_with(n: usize, mu: f64, seed: u64, c0: f64) -> Result<PerturbedIdentity> {
    if n == 0 {
        return Err(Error::Parameter("perturbed identity needs N >= 1".into()));
    }
    if !(mu > 0.0) {
        return Err(Error::Parameter(format!("mu = {mu} must be positive")));
    }
    let k = target_columns(n, mu, c0);
    if k == 1 {
        let v = vec![1.0; n];
        return Ok(verified(n, 1, v, mu, seed, Construction::Trivial, 1));
    }
    for attempt in 0..RETRY_BUDGET {
        let attempt_seed = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed);
        let (v, construction) = if k == n {
            (random_orthogonal(n, &mut rng), Construction::RandomOrthogonal)
        } else {
            (random_signs(n, k, &mut rng), Construction::RandomSigns)
        };
        let candidate = verified(n, k, v, mu, seed, construction, attempt + 1);
        if candidate.max_off_diagonal <= mu && candidate.max_diagonal_error <= 1e-12 {
            return Ok(candidate);
        }
    }
    if n > MAX_EXACT_FALLBACK {
        return Err(Error::Budget { size: n, budget: MAX_EXACT_FALLBACK });
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    Ok(verified(n, n, v, mu, seed, Construction::IdentityFallback, RETRY_BUDGET))
}

fn random_signs(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = 1.0 / (k as f64).sqrt();
    (0..n * k).map(|_| if rng.gen::<bool>() { scale } else { -scale }).collect()
}

/// Modified Gram-Schmidt over Gaussian rows, run twice for a clean Gram matrix.
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for i in 0..n {
        for _pass in 0..2 {
            for j in 0..i {
                let (done, rest) = v.split_at_mut(i * n);
                let prev = &done[j * n..(j + 1) * n];
                let row = &mut rest[..n];
                let proj = dot(prev, row);
                for (r, p) in row.iter_mut().zip(prev) {
                    *r -= proj * p;
                }
            }
        }
        let row = &mut v[i * n..(i + 1) * n];
        let norm = dot(row, row).sqrt();
        for r in row.iter_mut() {
            *r /= norm;
        }
    }
    v
}

fn verified(
    n: usize,
    k: usize,
    v: Vec<f64>,
    mu: f64,
    seed: u64,
    construction: Construction,
    attempts: u64,
) -> PerturbedIdentity {
    let mut max_off_diagonal: f64 = 0.0;
    let mut max_diagonal_error: f64 = 0.0;
    for i in 0..n {
        let ri = &v[i * k..(i + 1) * k];
        max_diagonal_error = max_diagonal_error.max((dot(ri, ri) - 1.0).abs());
        for j in 0..i {
            let rj = &v[j * k..(j + 1) * k];
            max_off_diagonal = max_off_diagonal.max(dot(ri, rj).abs());
        }
    }
    PerturbedIdentity { n, k, v, mu, seed, construction, attempts, max_off_diagonal, max_diagonal_error }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_row_is_one() {
        let pi = perturbed_identity(1, 0.3, 5).unwrap();
        assert_eq!((pi.k, pi.v.clone()), (1, vec![1.0]));
        assert_eq!(pi.gram(0, 0), 1.0);
    }

    #[test]
    fn vacuous_bound_gives_ones_column() {
        let pi = perturbed_identity(10, 1.0, 5).unwrap();
        assert_eq!(pi.k, 1);
        assert!(pi.v.iter().all(|&x| x == 1.0));
        assert!(pi.max_off_diagonal <= 1.0);
    }

    #[test]
    fn n64_mu_03_verifies() {
        let pi = perturbed_identity(64, 0.3, 7).unwrap();
        assert_ne!(pi.construction, Construction::IdentityFallback);
        for i in 0..64 {
            assert!((pi.gram(i, i) - 1.0).abs() <= 1e-12);
            for j in 0..i {
                assert!(pi.gram(i, j).abs() <= 0.3);
            }
        }
    }

    #[test]
    fn sign_rows_used_when_k_below_n() {
        let pi = perturbed_identity(1024, 0.5, 3).unwrap();
        assert_eq!(pi.construction, Construction::RandomSigns);
        assert!(pi.k < 1024);
        assert!(pi.max_off_diagonal <= 0.5);
        assert!(pi.max_diagonal_error <= 1e-12);
    }
}
