//! Assembly of the new base-space embedding matrix for a donor vocabulary.
//!
//! Shared tokens copy their base embedding bit-for-bit. Unseen tokens are
//! reconstructed by solving a sparse code in donor space and applying the
//! same coefficients to the base-space anchor rows; the coefficient vector
//! is unit-agnostic, so base and donor dimensionality may differ. Zero and
//! mean initializations are provided as baselines.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::omp::{omp_solve_batch_with_progress, OmpError, SolverConfig, SparseCode};
use crate::scalar::{norm_widened, Scalar};
use crate::tensorio::{EmbeddingMatrix, TensorIoError, Vocabulary};
use crate::vocab_align::{build_dictionary, overlap_pairs, AlignError, AnchorSet};

#[derive(Debug, Error)]
pub enum TransplantError {
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("{which} vocabulary does not fit its matrix: {source}")]
    Pairing {
        which: &'static str,
        #[source]
        source: TensorIoError,
    },
    #[error("donor vocabulary ids must cover 0..{len} exactly; found max id {max_id}")]
    NonContiguousDonorIds { len: usize, max_id: usize },
    #[error("solve failed for donor row {donor_row} ({token:?}): {source}")]
    Solve {
        donor_row: usize,
        token: String,
        #[source]
        source: OmpError,
    },
    #[error("sparse code references anchor {index}, but only {len} anchors exist")]
    SupportOutOfRange { index: usize, len: usize },
    #[error("anchor base row {row} out of range for a matrix with {rows} rows")]
    BaseRowOutOfRange { row: usize, rows: usize },
    #[error("mean initialization requires a non-empty base vocabulary")]
    EmptyBaseVocab,
}

/// Initialization strategy for unseen tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Sparse reconstruction from shared anchors.
    Omp,
    /// Zero vector for every unseen token.
    Zero,
    /// Mean of all base vocabulary embeddings for every unseen token.
    Mean,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Omp => "omp",
            Method::Zero => "zero",
            Method::Mean => "mean",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "omp" => Ok(Method::Omp),
            "zero" => Ok(Method::Zero),
            "mean" => Ok(Method::Mean),
            other => Err(format!("unknown method {other:?} (expected omp, zero or mean)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransplantOptions {
    pub method: Method,
    /// Solver configuration; consulted only when `method` is [`Method::Omp`].
    pub solver: SolverConfig,
    /// Cap the dictionary to a random subsample of this many anchors.
    pub max_atoms: Option<usize>,
    /// Seed for the subsampling draw.
    pub seed: u64,
    /// Retain each unseen token's sparse code in the report.
    pub record_codes: bool,
}

impl TransplantOptions {
    pub fn omp(solver: SolverConfig) -> Self {
        Self {
            method: Method::Omp,
            solver,
            max_atoms: None,
            seed: 0,
            record_codes: false,
        }
    }

    pub fn zero() -> Self {
        Self {
            method: Method::Zero,
            ..Self::omp(SolverConfig::new(1))
        }
    }

    pub fn mean() -> Self {
        Self {
            method: Method::Mean,
            ..Self::omp(SolverConfig::new(1))
        }
    }
}

/// The resolved work list for one transplant: which donor rows copy, which
/// solve, and over which anchors.
#[derive(Debug, Clone)]
pub struct TransplantPlan {
    /// Shared-token correspondence, sorted by donor id.
    pub anchors: AnchorSet,
    /// (donor row, base row) copy assignments for shared tokens.
    pub shared: Vec<(usize, usize)>,
    /// Donor rows requiring reconstruction, ascending.
    pub unseen: Vec<usize>,
    pub method: Method,
    pub solver: SolverConfig,
}

impl TransplantPlan {
    /// Partition the donor vocabulary against the base vocabulary. Requires
    /// contiguous donor ids (the output matrix is laid out by donor id) and,
    /// for the OMP method, a non-empty overlap.
    pub fn build(
        base_vocab: &Vocabulary,
        donor_vocab: &Vocabulary,
        options: &TransplantOptions,
    ) -> Result<Self, TransplantError> {
        let len = donor_vocab.len();
        if !donor_vocab.ids_contiguous() {
            return Err(TransplantError::NonContiguousDonorIds {
                len,
                max_id: donor_vocab.max_id().unwrap_or(0),
            });
        }
        let anchors = AnchorSet::from_pairs(overlap_pairs(base_vocab, donor_vocab));
        if options.method == Method::Omp && anchors.is_empty() {
            return Err(AlignError::EmptyOverlap.into());
        }
        let mut is_shared = vec![false; len];
        let shared: Vec<(usize, usize)> = anchors
            .pairs()
            .iter()
            .map(|p| {
                is_shared[p.donor_row] = true;
                (p.donor_row, p.base_row)
            })
            .collect();
        let unseen: Vec<usize> = (0..len).filter(|&r| !is_shared[r]).collect();
        Ok(Self {
            anchors,
            shared,
            unseen,
            method: options.method,
            solver: options.solver.clone(),
        })
    }
}

/// Relative-residual statistics over the solved tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

pub(crate) fn residual_stats(mut values: Vec<f64>) -> Option<ResidualStats> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    };
    let p95 = values[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
    Some(ResidualStats {
        count: n,
        mean,
        median,
        p95,
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub plan_ms: f64,
    pub dictionary_ms: f64,
    pub solve_ms: f64,
    pub assemble_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenCode {
    pub donor_row: usize,
    pub token: String,
    pub code: SparseCode,
}

/// Summary of one transplant run, serializable as a JSON report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransplantReport {
    pub method: Method,
    pub donor_tokens: usize,
    pub shared: usize,
    pub unseen: usize,
    /// Unseen donor tokens whose donor embedding has exactly zero norm;
    /// under the OMP method these take the mean row instead of a solve.
    pub zero_norm_targets: usize,
    /// Anchors excluded from the dictionary for having zero-norm donor rows.
    pub dropped_zero_norm_atoms: usize,
    pub dictionary_atoms: usize,
    pub residuals: Option<ResidualStats>,
    pub timings_ms: PhaseTimings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_codes: Option<Vec<TokenCode>>,
}

/// Apply a donor-space sparse code in base space: the weighted sum of the
/// base-embedding rows of the supporting anchors. Only the coefficients
/// cross spaces, so the output dimensionality is `base_emb.dims()` no
/// matter where the code was solved.
///
/// `anchors` must be the anchor set of the dictionary that produced the
/// code; support indices address its pairs.
pub fn apply_code<T: Scalar>(
    code: &SparseCode,
    anchors: &AnchorSet,
    base_emb: &EmbeddingMatrix<T>,
) -> Result<Vec<T>, TransplantError> {
    let mut acc = vec![0.0f64; base_emb.dims()];
    apply_code_into(code, anchors, base_emb, &mut acc)?;
    Ok(acc.iter().map(|&x| T::narrow(x)).collect())
}

fn apply_code_into<T: Scalar>(
    code: &SparseCode,
    anchors: &AnchorSet,
    base_emb: &EmbeddingMatrix<T>,
    acc: &mut [f64],
) -> Result<(), TransplantError> {
    acc.fill(0.0);
    for (&index, &coeff) in code.support.iter().zip(&code.coeffs) {
        let pair = anchors
            .pairs()
            .get(index)
            .ok_or(TransplantError::SupportOutOfRange {
                index,
                len: anchors.len(),
            })?;
        if pair.base_row >= base_emb.rows() {
            return Err(TransplantError::BaseRowOutOfRange {
                row: pair.base_row,
                rows: base_emb.rows(),
            });
        }
        let row = base_emb.row(pair.base_row);
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += coeff * x.widen();
        }
    }
    Ok(())
}

enum RowAction {
    CopyBase(usize),
    Zero,
    Mean,
    Code(usize),
}

/// Build the new embedding matrix for the donor vocabulary.
///
/// The output has one row per donor id and `base_emb.dims()` columns.
/// Shared tokens are bit-identical copies of their base rows for every
/// method.
pub fn transplant<T: Scalar>(
    base_emb: &EmbeddingMatrix<T>,
    base_vocab: &Vocabulary,
    donor_emb: &EmbeddingMatrix<T>,
    donor_vocab: &Vocabulary,
    options: &TransplantOptions,
) -> Result<(EmbeddingMatrix<T>, TransplantReport), TransplantError> {
    transplant_with_progress(base_emb, base_vocab, donor_emb, donor_vocab, options, |_, _| {})
}

/// [`transplant`] with a solve-progress callback `(done, total)`.
pub fn transplant_with_progress<T: Scalar>(
    base_emb: &EmbeddingMatrix<T>,
    base_vocab: &Vocabulary,
    donor_emb: &EmbeddingMatrix<T>,
    donor_vocab: &Vocabulary,
    options: &TransplantOptions,
    progress: impl Fn(usize, usize) + Sync,
) -> Result<(EmbeddingMatrix<T>, TransplantReport), TransplantError> {
    let (mut outputs, report) = run(
        &[base_emb],
        base_vocab,
        donor_emb,
        donor_vocab,
        options,
        progress,
    )?;
    Ok((outputs.pop().expect("one output per base"), report))
}

/// Transplant an untied input-embedding / output-projection pair.
///
/// The sparse codes are solved once in donor space and the same coefficients
/// are applied to both base matrices, so each new token's input and output
/// rows are built from identical mixtures.
pub fn transplant_tied_pair<T: Scalar>(
    input_emb: &EmbeddingMatrix<T>,
    output_emb: &EmbeddingMatrix<T>,
    base_vocab: &Vocabulary,
    donor_emb: &EmbeddingMatrix<T>,
    donor_vocab: &Vocabulary,
    options: &TransplantOptions,
) -> Result<(EmbeddingMatrix<T>, EmbeddingMatrix<T>, TransplantReport), TransplantError> {
    let (mut outputs, report) = run(
        &[input_emb, output_emb],
        base_vocab,
        donor_emb,
        donor_vocab,
        options,
        |_, _| {},
    )?;
    let second = outputs.pop().expect("two outputs");
    let first = outputs.pop().expect("two outputs");
    Ok((first, second, report))
}

fn run<T: Scalar>(
    bases: &[&EmbeddingMatrix<T>],
    base_vocab: &Vocabulary,
    donor_emb: &EmbeddingMatrix<T>,
    donor_vocab: &Vocabulary,
    options: &TransplantOptions,
    progress: impl Fn(usize, usize) + Sync,
) -> Result<(Vec<EmbeddingMatrix<T>>, TransplantReport), TransplantError> {
    let plan_start = Instant::now();
    donor_vocab
        .check_rows(donor_emb.rows())
        .map_err(|source| TransplantError::Pairing {
            which: "donor",
            source,
        })?;
    for base in bases {
        base_vocab
            .check_rows(base.rows())
            .map_err(|source| TransplantError::Pairing {
                which: "base",
                source,
            })?;
    }
    let plan = TransplantPlan::build(base_vocab, donor_vocab, options)?;
    let donor_tokens = donor_vocab.len();
    let plan_ms = ms_since(plan_start);

    // Donor id -> token surface, for error reporting and recorded codes.
    let token_of: Vec<&str> = {
        let mut v = vec![""; donor_tokens];
        for (token, id) in donor_vocab.iter() {
            v[id] = token;
        }
        v
    };

    let dict_start = Instant::now();
    let dictionary = if options.method == Method::Omp && !plan.unseen.is_empty() {
        Some(build_dictionary(
            &plan.anchors,
            donor_emb,
            options.max_atoms,
            options.seed,
        )?)
    } else {
        None
    };
    let dictionary_ms = ms_since(dict_start);

    // Unseen rows with exactly zero donor norm cannot be meaningfully
    // solved; under OMP they fall back to the mean row.
    let solve_start = Instant::now();
    let (solve_rows, zero_norm_rows): (Vec<usize>, Vec<usize>) = if options.method == Method::Omp {
        plan.unseen
            .iter()
            .partition(|&&r| norm_widened(donor_emb.row(r)) != 0.0)
    } else {
        (plan.unseen.clone(), Vec::new())
    };

    let codes: Vec<SparseCode> = match &dictionary {
        Some(dict) if !solve_rows.is_empty() => {
            let targets: Vec<&[T]> = solve_rows.iter().map(|&r| donor_emb.row(r)).collect();
            let results = omp_solve_batch_with_progress(dict, &targets, &options.solver, progress);
            let mut codes = Vec::with_capacity(results.len());
            for (i, result) in results.into_iter().enumerate() {
                let donor_row = solve_rows[i];
                codes.push(result.map_err(|source| TransplantError::Solve {
                    donor_row,
                    token: token_of[donor_row].to_owned(),
                    source,
                })?);
            }
            codes
        }
        _ => Vec::new(),
    };
    let solve_ms = ms_since(solve_start);

    let assemble_start = Instant::now();
    let need_mean = (options.method == Method::Mean && !plan.unseen.is_empty())
        || !zero_norm_rows.is_empty();
    if need_mean && base_vocab.is_empty() {
        return Err(TransplantError::EmptyBaseVocab);
    }

    let mut actions: Vec<RowAction> = (0..donor_tokens).map(|_| RowAction::Zero).collect();
    for &(donor_row, base_row) in &plan.shared {
        actions[donor_row] = RowAction::CopyBase(base_row);
    }
    match options.method {
        Method::Zero => {}
        Method::Mean => {
            for &row in &plan.unseen {
                actions[row] = RowAction::Mean;
            }
        }
        Method::Omp => {
            for (i, &row) in solve_rows.iter().enumerate() {
                actions[row] = RowAction::Code(i);
            }
            for &row in &zero_norm_rows {
                actions[row] = RowAction::Mean;
            }
        }
    }

    let anchors_for_codes = dictionary
        .as_ref()
        .map(|d| d.anchors().clone())
        .unwrap_or_default();

    let mut outputs = Vec::with_capacity(bases.len());
    for base in bases {
        let dims = base.dims();
        let mean_row: Vec<f64> = if need_mean {
            mean_of_vocab_rows(base, base_vocab)
        } else {
            vec![0.0; dims]
        };
        let mut data = vec![T::zero(); donor_tokens * dims];
        let errors: Vec<TransplantError> = data
            .par_chunks_mut(dims.max(1))
            .enumerate()
            .filter_map(|(row, out)| {
                match &actions[row] {
                    RowAction::Zero => None,
                    RowAction::CopyBase(base_row) => {
                        out.copy_from_slice(base.row(*base_row));
                        None
                    }
                    RowAction::Mean => {
                        for (o, &m) in out.iter_mut().zip(&mean_row) {
                            *o = T::narrow(m);
                        }
                        None
                    }
                    RowAction::Code(i) => {
                        let mut acc = vec![0.0f64; dims];
                        match apply_code_into(&codes[*i], &anchors_for_codes, base, &mut acc) {
                            Ok(()) => {
                                for (o, &a) in out.iter_mut().zip(&acc) {
                                    *o = T::narrow(a);
                                }
                                None
                            }
                            Err(e) => Some(e),
                        }
                    }
                }
            })
            .collect();
        if let Some(err) = errors.into_iter().next() {
            return Err(err);
        }
        outputs.push(
            EmbeddingMatrix::from_vec(donor_tokens, dims, data).expect("sized by construction"),
        );
    }
    let assemble_ms = ms_since(assemble_start);

    let residuals = residual_stats(codes.iter().map(SparseCode::relative_residual).collect());
    let token_codes = options.record_codes.then(|| {
        solve_rows
            .iter()
            .zip(&codes)
            .map(|(&donor_row, code)| TokenCode {
                donor_row,
                token: token_of[donor_row].to_owned(),
                code: code.clone(),
            })
            .collect()
    });

    let report = TransplantReport {
        method: options.method,
        donor_tokens,
        shared: plan.shared.len(),
        unseen: plan.unseen.len(),
        zero_norm_targets: zero_norm_rows.len(),
        dropped_zero_norm_atoms: dictionary.as_ref().map_or(0, |d| d.dropped_zero_norm()),
        dictionary_atoms: dictionary.as_ref().map_or(0, |d| d.len()),
        residuals,
        timings_ms: PhaseTimings {
            plan_ms,
            dictionary_ms,
            solve_ms,
            assemble_ms,
        },
        token_codes,
    };
    Ok((outputs, report))
}

fn mean_of_vocab_rows<T: Scalar>(base: &EmbeddingMatrix<T>, vocab: &Vocabulary) -> Vec<f64> {
    let mut acc = vec![0.0f64; base.dims()];
    let mut ids: Vec<usize> = vocab.iter().map(|(_, id)| id).collect();
    ids.sort_unstable();
    for id in &ids {
        for (a, &x) in acc.iter_mut().zip(base.row(*id)) {
            *a += x.widen();
        }
    }
    let n = ids.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    acc
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}
