//! Greedy sparse approximation: minimize ||v - Phi x||_2 subject to
//! ||x||_0 <= k by Orthogonal Matching Pursuit.
//!
//! Each iteration selects the dictionary atom most correlated with the
//! current residual, then re-fits coefficients by least squares on the
//! selected support. The least-squares system is maintained through an
//! incremental QR factorization of the selected columns: appending column
//! phi projects out the span of Q, normalizes the remainder into a new
//! orthonormal column, and extends R, so each iteration costs O(t d) instead
//! of a from-scratch refactorization. Q is periodically rebuilt from the
//! stored atom columns to bound orthogonality drift.
//!
//! All arithmetic runs in `f64` regardless of the dictionary's storage type,
//! and every floating-point operation happens in a fixed order, so a batch
//! solve is bitwise identical to solving its targets one at a time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use thiserror::Error;

use crate::scalar::{axpy_f64, dot_f64, dot_widened, norm_f64, Scalar};
use crate::vocab_align::Dictionary;

/// An appended atom whose orthogonal remainder falls below this fraction of
/// its own norm is numerically inside the span of the selected set.
pub const RANK_TOLERANCE: f64 = 1e-6;

/// Default number of appends between full re-orthogonalization passes.
pub const DEFAULT_REORTH_INTERVAL: usize = 16;

/// Targets per cache block in the batch path. Each dictionary atom is
/// streamed once per block instead of once per target; results do not
/// depend on the block size.
const BATCH_BLOCK: usize = 16;

/// Atoms per scan tile inside a block, keeping one tile of atoms and one
/// residual resident in L1 at a time. Purely a locality knob; the visit
/// order over atoms stays ascending per target.
const SCAN_TILE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OmpError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("dictionary has no atoms")]
    EmptyDictionary,
    #[error("target vector contains a non-finite value")]
    NonFiniteTarget,
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("atom is numerically in the span of the selected set")]
    AtomInSpan,
    #[error("triangular system is singular at diagonal {index}")]
    SingularSystem { index: usize },
}

/// How the argmax-correlation selection treats atom norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// argmax |<r, phi_j>| / ||phi_j||. Default; embedding matrices have
    /// heterogeneous row norms that would otherwise bias selection toward
    /// high-norm tokens.
    Normalized,
    /// argmax |<r, phi_j>|, the literal textbook selection rule.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Sparsity budget: maximum number of selected atoms.
    pub k: usize,
    pub selection_mode: SelectionMode,
    /// Appends between full re-orthogonalization passes of the Q factor.
    pub reorthogonalization_interval: usize,
    /// Stop once residual_norm <= early_stop_tol * target_norm. Zero keeps
    /// the full k-iteration loop.
    pub early_stop_tol: f64,
}

impl SolverConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            selection_mode: SelectionMode::Normalized,
            reorthogonalization_interval: DEFAULT_REORTH_INTERVAL,
            early_stop_tol: 0.0,
        }
    }

    pub fn with_selection_mode(mut self, mode: SelectionMode) -> Self {
        self.selection_mode = mode;
        self
    }

    pub fn with_reorth_interval(mut self, interval: usize) -> Self {
        self.reorthogonalization_interval = interval;
        self
    }

    pub fn with_early_stop_tol(mut self, tol: f64) -> Self {
        self.early_stop_tol = tol;
        self
    }

    pub fn validate(&self) -> Result<(), OmpError> {
        if self.k < 1 {
            return Err(OmpError::InvalidConfig("k must be at least 1".into()));
        }
        if self.reorthogonalization_interval < 1 {
            return Err(OmpError::InvalidConfig(
                "reorthogonalization interval must be at least 1".into(),
            ));
        }
        if !(self.early_stop_tol >= 0.0) {
            return Err(OmpError::InvalidConfig(
                "early_stop_tol must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Result of one sparse solve: the selected support in selection order, the
/// least-squares coefficients on that support, and the final residual norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCode {
    pub support: Vec<usize>,
    pub coeffs: Vec<f64>,
    pub residual_norm: f64,
    pub target_norm: f64,
}

impl SparseCode {
    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    /// residual_norm / target_norm, zero for a zero target.
    pub fn relative_residual(&self) -> f64 {
        if self.target_norm == 0.0 {
            0.0
        } else {
            self.residual_norm / self.target_norm
        }
    }
}

/// Square upper-triangular matrix in packed column-major storage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpperTriangular {
    n: usize,
    data: Vec<f64>, // column j occupies j+1 entries starting at j*(j+1)/2
}

impl UpperTriangular {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Entry (i, j); zero below the diagonal.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.n && j < self.n);
        if i > j {
            0.0
        } else {
            self.data[j * (j + 1) / 2 + i]
        }
    }

    /// Build from dense rows, ignoring the strictly-lower part.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, OmpError> {
        let n = rows.len();
        for row in rows {
            if row.len() != n {
                return Err(OmpError::DimensionMismatch {
                    expected: n,
                    found: row.len(),
                });
            }
        }
        let mut tri = UpperTriangular::default();
        for j in 0..n {
            let col: Vec<f64> = (0..=j).map(|i| rows[i][j]).collect();
            tri.push_column(col);
        }
        Ok(tri)
    }

    fn push_column(&mut self, col: Vec<f64>) {
        debug_assert_eq!(col.len(), self.n + 1);
        self.data.extend_from_slice(&col);
        self.n += 1;
    }

    fn column(&self, j: usize) -> &[f64] {
        let off = j * (j + 1) / 2;
        &self.data[off..off + j + 1]
    }

    /// Solve R x = rhs by back substitution.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, OmpError> {
        if rhs.len() != self.n {
            return Err(OmpError::DimensionMismatch {
                expected: self.n,
                found: rhs.len(),
            });
        }
        if self.n == 0 {
            return Ok(Vec::new());
        }
        let max_diag = (0..self.n)
            .map(|j| self.column(j)[j].abs())
            .fold(0.0f64, f64::max);
        let tol = f64::EPSILON * self.n as f64 * max_diag;
        let mut x = rhs.to_vec();
        for j in (0..self.n).rev() {
            let col = self.column(j);
            let d = col[j];
            if d.abs() <= tol {
                return Err(OmpError::SingularSystem { index: j });
            }
            x[j] /= d;
            let xj = x[j];
            for i in 0..j {
                x[i] -= col[i] * xj;
            }
        }
        Ok(x)
    }
}

/// Solve an upper-triangular system R x = rhs.
pub fn solve_triangular(r: &UpperTriangular, rhs: &[f64]) -> Result<Vec<f64>, OmpError> {
    r.solve(rhs)
}

/// Incrementally maintained QR factorization of the selected atom columns.
///
/// `Q` is dim x t with orthonormal columns, `R` is t x t upper-triangular,
/// and `Q R` reconstructs the appended columns in append order. The original
/// columns are retained so periodic re-orthogonalization can rebuild the
/// factors from scratch.
#[derive(Debug, Clone)]
pub struct QrState {
    dim: usize,
    reorth_interval: usize,
    appends_since_reorth: usize,
    q: Vec<f64>,     // dim * t, column-major
    r: UpperTriangular,
    atoms: Vec<f64>, // dim * t, column-major
}

impl QrState {
    pub fn new(dim: usize, reorth_interval: usize) -> Self {
        Self {
            dim,
            reorth_interval: reorth_interval.max(1),
            appends_since_reorth: 0,
            q: Vec::new(),
            r: UpperTriangular::default(),
            atoms: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Current number of factored columns (the iteration count t).
    pub fn cols(&self) -> usize {
        self.r.n()
    }

    pub fn q_column(&self, j: usize) -> &[f64] {
        let start = j * self.dim;
        &self.q[start..start + self.dim]
    }

    pub fn r(&self) -> &UpperTriangular {
        &self.r
    }

    /// Append one atom column. Fails with [`OmpError::AtomInSpan`] when the
    /// component orthogonal to the current Q falls below
    /// [`RANK_TOLERANCE`] times the atom norm; the state is unchanged in
    /// that case.
    pub fn append(&mut self, atom: &[f64]) -> Result<(), OmpError> {
        if atom.len() != self.dim {
            return Err(OmpError::DimensionMismatch {
                expected: self.dim,
                found: atom.len(),
            });
        }
        let atom_norm = norm_f64(atom);
        let t = self.cols();
        let mut v = atom.to_vec();
        let mut rcol = Vec::with_capacity(t + 1);
        for i in 0..t {
            let qi = self.q_column(i);
            let rij = dot_f64(qi, &v);
            axpy_f64(-rij, qi, &mut v);
            rcol.push(rij);
        }
        let vnorm = norm_f64(&v);
        if vnorm <= RANK_TOLERANCE * atom_norm {
            return Err(OmpError::AtomInSpan);
        }
        let inv = 1.0 / vnorm;
        for x in &mut v {
            *x *= inv;
        }
        rcol.push(vnorm);
        self.q.extend_from_slice(&v);
        self.r.push_column(rcol);
        self.atoms.extend_from_slice(atom);
        self.appends_since_reorth += 1;
        if self.appends_since_reorth >= self.reorth_interval {
            self.reorthogonalize();
            self.appends_since_reorth = 0;
        }
        Ok(())
    }

    /// Rebuild Q and R from the stored atom columns by modified
    /// Gram-Schmidt, restoring orthogonality lost to rounding.
    fn reorthogonalize(&mut self) {
        let t = self.cols();
        let dim = self.dim;
        let mut q = vec![0.0f64; t * dim];
        let mut r = UpperTriangular::default();
        for j in 0..t {
            let mut v = self.atoms[j * dim..(j + 1) * dim].to_vec();
            let mut rcol = Vec::with_capacity(j + 1);
            for i in 0..j {
                let qi = &q[i * dim..(i + 1) * dim];
                let rij = dot_f64(qi, &v);
                axpy_f64(-rij, qi, &mut v);
                rcol.push(rij);
            }
            let vnorm = norm_f64(&v);
            debug_assert!(vnorm > 0.0, "re-orthogonalization hit a dependent column");
            if vnorm > 0.0 {
                let inv = 1.0 / vnorm;
                for x in &mut v {
                    *x *= inv;
                }
            }
            rcol.push(vnorm);
            q[j * dim..(j + 1) * dim].copy_from_slice(&v);
            r.push_column(rcol);
        }
        self.q = q;
        self.r = r;
    }

    /// Q^T v.
    pub fn qt_apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.cols()).map(|j| dot_f64(self.q_column(j), v)).collect()
    }

    /// Q c.
    pub fn q_apply(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0f64; self.dim];
        for (j, &c) in coeffs.iter().enumerate() {
            axpy_f64(c, self.q_column(j), &mut out);
        }
        out
    }

    /// Coefficients of the least-squares fit on the appended columns:
    /// solves R x = Q^T v.
    pub fn solve(&self, qtv: &[f64]) -> Result<Vec<f64>, OmpError> {
        self.r.solve(qtv)
    }

    /// Column j of Q R, which should reproduce the j-th appended atom.
    pub fn reconstruct_column(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; self.dim];
        for i in 0..=j {
            axpy_f64(self.r.get(i, j), self.q_column(i), &mut out);
        }
        out
    }

    /// The j-th appended atom, as stored.
    pub fn stored_atom(&self, j: usize) -> &[f64] {
        &self.atoms[j * self.dim..(j + 1) * self.dim]
    }
}

#[inline]
fn selection_metric(correlation: f64, norm: f64, mode: SelectionMode) -> f64 {
    match mode {
        SelectionMode::Raw => correlation.abs(),
        SelectionMode::Normalized => correlation.abs() / norm,
    }
}

/// Scan all atoms for the best selection candidate. Ties break toward the
/// lowest column index (ascending scan, strict improvement only).
fn best_candidate<T: Scalar>(
    dict: &Dictionary<T>,
    residual: &[f64],
    unavailable: &[bool],
    mode: SelectionMode,
) -> Option<(usize, f64)> {
    let norms = dict.norms();
    let mut best: Option<(usize, f64)> = None;
    for (j, atom) in dict.atoms().enumerate() {
        if unavailable[j] {
            continue;
        }
        let metric = selection_metric(dot_widened(atom, residual), norms[j], mode);
        if best.map_or(true, |(_, m)| metric > m) {
            best = Some((j, metric));
        }
    }
    best
}

/// Per-target solver state shared by the serial and batch paths.
struct SolveState {
    v: Vec<f64>,
    target_norm: f64,
    residual: Vec<f64>,
    residual_norm: f64,
    qr: QrState,
    qtv: Vec<f64>,
    support: Vec<usize>,
    unavailable: Vec<bool>,
    k_max: usize,
    finished: bool,
    pending: Option<(usize, f64)>,
    scratch: Vec<f64>,
}

impl SolveState {
    fn new<T: Scalar>(
        dict: &Dictionary<T>,
        target: &[T],
        config: &SolverConfig,
    ) -> Result<Self, OmpError> {
        config.validate()?;
        if dict.is_empty() {
            return Err(OmpError::EmptyDictionary);
        }
        if target.len() != dict.dim() {
            return Err(OmpError::DimensionMismatch {
                expected: dict.dim(),
                found: target.len(),
            });
        }
        let v: Vec<f64> = target.iter().map(|x| x.widen()).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(OmpError::NonFiniteTarget);
        }
        let target_norm = norm_f64(&v);
        let k_max = config.k.min(dict.len()).min(dict.dim());
        Ok(Self {
            residual: v.clone(),
            residual_norm: target_norm,
            v,
            target_norm,
            qr: QrState::new(dict.dim(), config.reorthogonalization_interval),
            qtv: Vec::new(),
            support: Vec::new(),
            unavailable: vec![false; dict.len()],
            k_max,
            finished: false,
            pending: None,
            scratch: Vec::new(),
        })
    }

    fn should_stop(&self, config: &SolverConfig) -> bool {
        self.support.len() >= self.k_max
            || self.residual_norm <= config.early_stop_tol * self.target_norm
    }

    /// Recompute Q^T v, the residual v - Q Q^T v, and its norm. Rebuilding
    /// from v keeps the state exact after re-orthogonalization passes.
    fn refresh_projection(&mut self) {
        self.qtv = self.qr.qt_apply(&self.v);
        self.residual.copy_from_slice(&self.v);
        for t in 0..self.qtv.len() {
            axpy_f64(-self.qtv[t], self.qr.q_column(t), &mut self.residual);
        }
        self.residual_norm = norm_f64(&self.residual);
    }

    /// Append the chosen atom; on a rank-deficient pick, mark it
    /// unavailable and fall back to the next-best candidate. Finishes the
    /// solve when no usable candidate remains.
    fn select_and_advance<T: Scalar>(
        &mut self,
        dict: &Dictionary<T>,
        config: &SolverConfig,
        first_choice: usize,
    ) {
        let mut choice = first_choice;
        loop {
            self.scratch.clear();
            self.scratch.extend(dict.atom(choice).iter().map(|x| x.widen()));
            let atom = std::mem::take(&mut self.scratch);
            let appended = self.qr.append(&atom);
            self.scratch = atom;
            match appended {
                Ok(()) => {
                    self.unavailable[choice] = true;
                    self.support.push(choice);
                    self.refresh_projection();
                    return;
                }
                Err(OmpError::AtomInSpan) => {
                    self.unavailable[choice] = true;
                    match best_candidate(dict, &self.residual, &self.unavailable, config.selection_mode)
                    {
                        Some((j, metric)) if metric > 0.0 => choice = j,
                        _ => {
                            self.finished = true;
                            return;
                        }
                    }
                }
                Err(_) => unreachable!("append dimension is fixed by construction"),
            }
        }
    }

    fn take_pending<T: Scalar>(&mut self, dict: &Dictionary<T>, config: &SolverConfig) {
        match self.pending.take() {
            Some((j, metric)) if metric > 0.0 => self.select_and_advance(dict, config, j),
            // No candidate correlates with the residual: nothing further
            // can reduce it.
            _ => self.finished = true,
        }
    }

    fn finalize(mut self) -> Result<SparseCode, OmpError> {
        let coeffs = if self.support.is_empty() {
            Vec::new()
        } else {
            self.qtv = self.qr.qt_apply(&self.v);
            self.qr.solve(&self.qtv)?
        };
        Ok(SparseCode {
            support: std::mem::take(&mut self.support),
            coeffs,
            residual_norm: self.residual_norm,
            target_norm: self.target_norm,
        })
    }
}

/// Solve one sparse approximation. The support is built greedily by argmax
/// correlation; coefficients are the exact least-squares solution on the
/// selected support; the loop stops after min(k, atoms, d) selections, when
/// the relative residual reaches `early_stop_tol`, or when no remaining atom
/// has nonzero correlation with the residual.
pub fn omp_solve<T: Scalar>(
    dict: &Dictionary<T>,
    target: &[T],
    config: &SolverConfig,
) -> Result<SparseCode, OmpError> {
    let mut state = SolveState::new(dict, target, config)?;
    while !state.finished && !state.should_stop(config) {
        state.pending = best_candidate(dict, &state.residual, &state.unavailable, config.selection_mode);
        state.take_pending(dict, config);
    }
    state.finalize()
}

/// Solve many targets over one shared dictionary.
///
/// Element `i` equals `omp_solve(dict, targets[i], config)` exactly; output
/// order matches input order and is independent of thread count and
/// scheduling. Per-target failures are reported in place without aborting
/// the rest of the batch.
pub fn omp_solve_batch<T: Scalar>(
    dict: &Dictionary<T>,
    targets: &[&[T]],
    config: &SolverConfig,
) -> Vec<Result<SparseCode, OmpError>> {
    omp_solve_batch_with_progress(dict, targets, config, |_, _| {})
}

/// [`omp_solve_batch`] with a completion callback `(done, total)`, invoked
/// from worker threads as blocks finish.
pub fn omp_solve_batch_with_progress<T: Scalar>(
    dict: &Dictionary<T>,
    targets: &[&[T]],
    config: &SolverConfig,
    progress: impl Fn(usize, usize) + Sync,
) -> Vec<Result<SparseCode, OmpError>> {
    let total = targets.len();
    let done = AtomicUsize::new(0);
    let blocks: Vec<Vec<Result<SparseCode, OmpError>>> = targets
        .par_chunks(BATCH_BLOCK)
        .map(|chunk| {
            let out = solve_block(dict, chunk, config);
            let so_far = done.fetch_add(chunk.len(), Ordering::Relaxed) + chunk.len();
            progress(so_far, total);
            out
        })
        .collect();
    blocks.into_iter().flatten().collect()
}

/// Solve a block of targets in lockstep so each dictionary atom is read once
/// per iteration for the whole block. Every per-target floating-point
/// operation is identical to the serial path.
fn solve_block<T: Scalar>(
    dict: &Dictionary<T>,
    targets: &[&[T]],
    config: &SolverConfig,
) -> Vec<Result<SparseCode, OmpError>> {
    let mut states: Vec<Result<SolveState, OmpError>> = targets
        .iter()
        .map(|t| SolveState::new(dict, t, config))
        .collect();
    let norms = dict.norms();
    loop {
        let mut active: Vec<usize> = Vec::with_capacity(states.len());
        for (i, slot) in states.iter_mut().enumerate() {
            if let Ok(state) = slot {
                if !state.finished && !state.should_stop(config) {
                    state.pending = None;
                    active.push(i);
                }
            }
        }
        if active.is_empty() {
            break;
        }
        let mut tile_start = 0;
        while tile_start < dict.len() {
            let tile_end = (tile_start + SCAN_TILE).min(dict.len());
            for &i in &active {
                let state = states[i].as_mut().expect("active implies ok");
                for j in tile_start..tile_end {
                    if state.unavailable[j] {
                        continue;
                    }
                    let metric = selection_metric(
                        dot_widened(dict.atom(j), &state.residual),
                        norms[j],
                        config.selection_mode,
                    );
                    if state.pending.map_or(true, |(_, m)| metric > m) {
                        state.pending = Some((j, metric));
                    }
                }
            }
            tile_start = tile_end;
        }
        for &i in &active {
            let state = states[i].as_mut().expect("active implies ok");
            state.take_pending(dict, config);
        }
    }
    states
        .into_iter()
        .map(|slot| slot.and_then(SolveState::finalize))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab_align::Dictionary;

    fn dict_f64(atoms: &[&[f64]]) -> Dictionary<f64> {
        Dictionary::from_atoms(&atoms.iter().map(|a| a.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn target_equal_to_an_atom() {
        let dict = dict_f64(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let code = omp_solve(&dict, &[0.0, 1.0], &SolverConfig::new(1)).unwrap();
        assert_eq!(code.support, vec![1]);
        assert!((code.coeffs[0] - 1.0).abs() < 1e-12);
        assert!(code.residual_norm < 1e-12);
    }

    #[test]
    fn orthonormal_dictionary_exact_solution() {
        let dict = dict_f64(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let code = omp_solve(&dict, &[2.0, 3.0], &SolverConfig::new(2)).unwrap();
        // |3| > |2| selects atom 1 first.
        assert_eq!(code.support, vec![1, 0]);
        let coeff_of = |j: usize| {
            code.support
                .iter()
                .position(|&s| s == j)
                .map(|p| code.coeffs[p])
                .unwrap()
        };
        assert!((coeff_of(0) - 2.0).abs() < 1e-12);
        assert!((coeff_of(1) - 3.0).abs() < 1e-12);
        assert!(code.residual_norm < 1e-12);
    }

    #[test]
    fn two_step_solve_matches_hand_computation() {
        // atoms (1,0) and (0.8,0.6), target (1,0.3): selects atom 0
        // (correlation 1.0 vs 0.98), then atom 1; the 2x2 triangular solve
        // gives coefficients (0.6, 0.5) and zero residual.
        let dict = dict_f64(&[&[1.0, 0.0], &[0.8, 0.6]]);
        let code = omp_solve(&dict, &[1.0, 0.3], &SolverConfig::new(2)).unwrap();
        assert_eq!(code.support, vec![0, 1]);
        assert!((code.coeffs[0] - 0.6).abs() < 1e-12, "{:?}", code.coeffs);
        assert!((code.coeffs[1] - 0.5).abs() < 1e-12);
        assert!(code.residual_norm < 1e-12);
    }

    #[test]
    fn rank_deficient_atom_is_skipped_for_next_best() {
        // Atom 1 duplicates atom 0; after selecting 0, the duplicate is in
        // span and the solver must fall through to atom 2.
        let dict = dict_f64(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let code = omp_solve(&dict, &[1.0, 0.4], &SolverConfig::new(2)).unwrap();
        assert_eq!(code.support, vec![0, 2]);
        assert!(code.residual_norm < 1e-12);
    }

    #[test]
    fn solver_terminates_when_dictionary_span_is_exhausted() {
        // Two copies of one atom: only one selection is possible.
        let dict = dict_f64(&[&[1.0, 0.0], &[2.0, 0.0]]);
        let code = omp_solve(&dict, &[1.0, 1.0], &SolverConfig::new(2)).unwrap();
        assert_eq!(code.support.len(), 1);
        assert!((code.residual_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_target_yields_empty_code() {
        let dict = dict_f64(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let code = omp_solve(&dict, &[0.0, 0.0], &SolverConfig::new(2)).unwrap();
        assert!(code.is_empty());
        assert_eq!(code.residual_norm, 0.0);
        assert_eq!(code.relative_residual(), 0.0);
    }

    #[test]
    fn early_stop_truncates_the_loop() {
        let dict = dict_f64(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let config = SolverConfig::new(2).with_early_stop_tol(1e-9);
        let code = omp_solve(&dict, &[5.0, 0.0], &config).unwrap();
        assert_eq!(code.support, vec![0]);
    }

    #[test]
    fn raw_and_normalized_selection_differ_on_heterogeneous_norms() {
        // Atom 0 has a huge norm but poor direction; raw selection takes it
        // first, normalized selection prefers the aligned unit atom.
        let dict = dict_f64(&[&[10.0, 10.0], &[0.0, 1.0]]);
        let raw = omp_solve(
            &dict,
            &[0.1, 1.0],
            &SolverConfig::new(1).with_selection_mode(SelectionMode::Raw),
        )
        .unwrap();
        let norm = omp_solve(&dict, &[0.1, 1.0], &SolverConfig::new(1)).unwrap();
        assert_eq!(raw.support, vec![0]);
        assert_eq!(norm.support, vec![1]);
    }

    #[test]
    fn input_validation() {
        let dict = dict_f64(&[&[1.0, 0.0]]);
        assert!(matches!(
            omp_solve(&dict, &[1.0], &SolverConfig::new(1)),
            Err(OmpError::DimensionMismatch { expected: 2, found: 1 })
        ));
        assert!(matches!(
            omp_solve(&dict, &[f64::NAN, 0.0], &SolverConfig::new(1)),
            Err(OmpError::NonFiniteTarget)
        ));
        assert!(matches!(
            omp_solve(&dict, &[1.0, 0.0], &SolverConfig::new(0)),
            Err(OmpError::InvalidConfig(_))
        ));
    }

    #[test]
    fn qr_append_first_column_normalizes() {
        let mut qr = QrState::new(3, DEFAULT_REORTH_INTERVAL);
        qr.append(&[3.0, 0.0, 0.0]).unwrap();
        assert_eq!(qr.q_column(0), &[1.0, 0.0, 0.0]);
        assert_eq!(qr.r().get(0, 0), 3.0);
    }

    #[test]
    fn qr_append_orthogonal_column_keeps_identity_structure() {
        let mut qr = QrState::new(3, DEFAULT_REORTH_INTERVAL);
        qr.append(&[1.0, 0.0, 0.0]).unwrap();
        qr.append(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(qr.q_column(0), &[1.0, 0.0, 0.0]);
        assert_eq!(qr.q_column(1), &[0.0, 1.0, 0.0]);
        assert_eq!(qr.r().get(0, 1), 0.0);
        assert_eq!(qr.r().get(1, 1), 1.0);
    }

    #[test]
    fn qr_rejects_dependent_column_without_mutation() {
        let mut qr = QrState::new(2, DEFAULT_REORTH_INTERVAL);
        qr.append(&[1.0, 0.0]).unwrap();
        let before_cols = qr.cols();
        assert!(matches!(qr.append(&[2.0, 0.0]), Err(OmpError::AtomInSpan)));
        assert_eq!(qr.cols(), before_cols);
        assert!(matches!(qr.append(&[0.0, 0.0]), Err(OmpError::AtomInSpan)));
    }

    #[test]
    fn triangular_solve_examples() {
        let r = UpperTriangular::from_rows(&[vec![2.0]]).unwrap();
        assert_eq!(r.solve(&[4.0]).unwrap(), vec![2.0]);

        let eye = UpperTriangular::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(eye.solve(&[7.0, -1.0, 0.5]).unwrap(), vec![7.0, -1.0, 0.5]);
    }

    #[test]
    fn triangular_solve_random_system_verifies_by_multiplication() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 6;
        let mut rows = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            for j in i..n {
                rows[i][j] = rng.gen_range(-2.0..2.0);
            }
            rows[i][i] += 4.0_f64.copysign(rows[i][i]);
        }
        let r = UpperTriangular::from_rows(&rows).unwrap();
        let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = r.solve(&rhs).unwrap();
        for i in 0..n {
            let mut acc = 0.0;
            for j in i..n {
                acc += rows[i][j] * x[j];
            }
            assert!((acc - rhs[i]).abs() < 1e-6 * rhs[i].abs().max(1.0));
        }
    }

    #[test]
    fn triangular_solve_rejects_singular_system() {
        let r = UpperTriangular::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            r.solve(&[1.0, 1.0]),
            Err(OmpError::SingularSystem { index: 1 })
        ));
    }

    #[test]
    fn batch_of_one_equals_single_solve() {
        let dict = dict_f64(&[&[1.0, 0.2], &[0.1, 1.0], &[0.5, 0.5]]);
        let target = [0.9f64, -0.4];
        let single = omp_solve(&dict, &target, &SolverConfig::new(2)).unwrap();
        let batch = omp_solve_batch(&dict, &[&target], &SolverConfig::new(2));
        assert_eq!(batch.len(), 1);
        assert_eq!(batch[0].as_ref().unwrap(), &single);
    }

    #[test]
    fn repeated_target_gets_identical_codes() {
        let dict = dict_f64(&[&[1.0, 0.2, 0.1], &[0.1, 1.0, 0.3], &[0.5, 0.5, 1.0]]);
        let target = [0.9f64, -0.4, 0.25];
        let targets: Vec<&[f64]> = (0..5).map(|_| &target[..]).collect();
        let codes = omp_solve_batch(&dict, &targets, &SolverConfig::new(2));
        let first = codes[0].as_ref().unwrap();
        for code in &codes[1..] {
            let code = code.as_ref().unwrap();
            assert_eq!(code, first);
            assert_eq!(code.residual_norm.to_bits(), first.residual_norm.to_bits());
        }
    }

    #[test]
    fn batch_reports_per_target_errors_and_completes_the_rest() {
        let dict = dict_f64(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let good = [1.0f64, 2.0];
        let bad = [f64::NAN, 0.0];
        let out = omp_solve_batch(&dict, &[&good, &bad, &good], &SolverConfig::new(1));
        assert!(out[0].is_ok());
        assert!(matches!(out[1], Err(OmpError::NonFiniteTarget)));
        assert!(out[2].is_ok());
        assert_eq!(out[0], out[2]);
    }

    #[test]
    fn progress_callback_reaches_total() {
        let dict = dict_f64(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let rows: Vec<Vec<f64>> = (0..37).map(|i| vec![i as f64, 1.0]).collect();
        let targets: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let max_done = AtomicUsize::new(0);
        omp_solve_batch_with_progress(&dict, &targets, &SolverConfig::new(1), |done, total| {
            assert_eq!(total, 37);
            max_done.fetch_max(done, Ordering::Relaxed);
        });
        assert_eq!(max_done.load(Ordering::Relaxed), 37);
    }
}
