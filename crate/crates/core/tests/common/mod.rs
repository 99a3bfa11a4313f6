//! Independent reference implementations used as oracles.
//!
//! Everything here deliberately avoids the library's incremental-QR path:
//! least squares goes through dense normal equations with Gaussian
//! elimination, and the reference QR is a plain from-scratch Gram-Schmidt.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tokensurgeon::{Dictionary, SelectionMode};

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random atoms with entries N(0, 1/d), so norms hover around one.
pub fn random_atoms(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let scale = 1.0 / (d as f64).sqrt();
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect())
        .collect()
}

/// From-scratch modified Gram-Schmidt of the given columns. Returns the
/// orthonormal columns and the dense upper-triangular factor.
pub fn gram_schmidt(cols: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = cols.len();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut r = vec![vec![0.0f64; n]; n];
    for (j, col) in cols.iter().enumerate() {
        let mut v = col.clone();
        for (i, qi) in q.iter().enumerate() {
            let rij = dot(qi, &v);
            for (vk, qk) in v.iter_mut().zip(qi) {
                *vk -= rij * qk;
            }
            r[i][j] = rij;
        }
        let norm = l2(&v);
        r[j][j] = norm;
        for x in &mut v {
            *x /= norm;
        }
        q.push(v);
    }
    (q, r)
}

/// `n` orthonormal atoms in dimension `d >= n`, from Gram-Schmidt of a
/// Gaussian draw.
pub fn random_orthonormal_atoms(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let cols: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(rng, d)).collect();
    gram_schmidt(&cols).0
}

/// Dense solve of a square system by Gaussian elimination with partial
/// pivoting. None when a pivot collapses.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot_row = (col..n).max_by(|&x, &y| {
            a[x][col].abs().partial_cmp(&a[y][col].abs()).expect("finite")
        })?;
        if a[pivot_row][col].abs() < 1e-13 {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in (i + 1)..n {
            acc -= a[i][j] * x[j];
        }
        x[i] = acc / a[i][i];
    }
    Some(x)
}

/// Least squares on a support via dense normal equations.
pub fn ls_on_support(atoms: &[Vec<f64>], support: &[usize], target: &[f64]) -> Option<Vec<f64>> {
    let t = support.len();
    let mut gram = vec![vec![0.0f64; t]; t];
    let mut rhs = vec![0.0f64; t];
    for (i, &si) in support.iter().enumerate() {
        for (j, &sj) in support.iter().enumerate() {
            gram[i][j] = dot(&atoms[si], &atoms[sj]);
        }
        rhs[i] = dot(&atoms[si], target);
    }
    solve_dense(gram, rhs)
}

/// target - sum coeffs[i] * atoms[support[i]].
pub fn residual_after(
    atoms: &[Vec<f64>],
    support: &[usize],
    coeffs: &[f64],
    target: &[f64],
) -> Vec<f64> {
    let mut r = target.to_vec();
    for (&j, &c) in support.iter().zip(coeffs) {
        for (rk, &ak) in r.iter_mut().zip(&atoms[j]) {
            *rk -= c * ak;
        }
    }
    r
}

pub struct OracleCode {
    pub support: Vec<usize>,
    pub coeffs: Vec<f64>,
    pub residual_norm: f64,
    pub target_norm: f64,
    /// Residual norm after each iteration.
    pub residual_history: Vec<f64>,
}

/// Reference greedy pursuit: identical selection, tie-break and stopping
/// rules to the library, but every iteration re-solves the least-squares
/// problem from scratch on the dense normal equations.
pub fn oracle_omp(
    atoms: &[Vec<f64>],
    target: &[f64],
    k: usize,
    mode: SelectionMode,
    early_stop_tol: f64,
) -> OracleCode {
    let n = atoms.len();
    let d = target.len();
    let norms: Vec<f64> = atoms.iter().map(|a| l2(a)).collect();
    let target_norm = l2(target);
    let k_max = k.min(n).min(d);

    let mut unavailable = vec![false; n];
    let mut support: Vec<usize> = Vec::new();
    let mut coeffs: Vec<f64> = Vec::new();
    let mut residual = target.to_vec();
    let mut residual_norm = target_norm;
    let mut history = Vec::new();

    while support.len() < k_max && residual_norm > early_stop_tol * target_norm {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if unavailable[j] || norms[j] == 0.0 {
                continue;
            }
            let c = dot(&atoms[j], &residual).abs();
            let metric = match mode {
                SelectionMode::Raw => c,
                SelectionMode::Normalized => c / norms[j],
            };
            if best.map_or(true, |(_, m)| metric > m) {
                best = Some((j, metric));
            }
        }
        let Some((j, metric)) = best else { break };
        if metric == 0.0 {
            break;
        }
        unavailable[j] = true;
        let mut candidate = support.clone();
        candidate.push(j);
        match ls_on_support(atoms, &candidate, target) {
            Some(x) => {
                support = candidate;
                coeffs = x;
            }
            None => continue, // numerically dependent atom: skip it
        }
        residual = residual_after(atoms, &support, &coeffs, target);
        residual_norm = l2(&residual);
        history.push(residual_norm);
    }

    OracleCode {
        support,
        coeffs,
        residual_norm,
        target_norm,
        residual_history: history,
    }
}

pub fn dict_from_f64(atoms: &[Vec<f64>]) -> Dictionary<f64> {
    Dictionary::from_atoms(atoms).expect("non-degenerate atoms")
}

pub fn dict_from_f32(atoms: &[Vec<f64>]) -> Dictionary<f32> {
    let narrowed: Vec<Vec<f32>> = atoms
        .iter()
        .map(|a| a.iter().map(|&x| x as f32).collect())
        .collect();
    Dictionary::from_atoms(&narrowed).expect("non-degenerate atoms")
}

/// Relative gap between coefficient vectors, normwise.
pub fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = l2(a).max(l2(b)).max(1e-300);
    diff / scale
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
