//! Ways to judge a transplant without running a language model:
//! per-token decomposition explanations, dictionary coherence, numeric
//! tokenization scheme detection, and a synthetic benchmark with a known
//! ground-truth orthogonal map between the two embedding spaces.

use std::collections::HashSet;
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::omp::{omp_solve, OmpError, QrState, SolverConfig};
use crate::scalar::{dot_stored, norm_f64, Scalar};
use crate::tensorio::{EmbeddingMatrix, Vocabulary};
use crate::transplant::{transplant, Method, TransplantError, TransplantOptions};
use crate::vocab_align::{AlignError, Dictionary};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("token {token:?} is not in the donor vocabulary")]
    TokenNotInDonor { token: String },
    #[error("donor row {row} out of range for a matrix with {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("coherence requires at least 2 atoms, found {found}")]
    TooFewAtoms { found: usize },
    #[error("invalid synthetic benchmark spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Omp(#[from] OmpError),
    #[error(transparent)]
    Transplant(#[from] TransplantError),
    #[error(transparent)]
    Align(#[from] AlignError),
}

/// One anchor contribution to a reconstructed token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionTerm {
    pub token: String,
    pub coefficient: f64,
}

/// Sparse linear decomposition of one donor token over anchor tokens,
/// terms sorted by descending coefficient magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub token: String,
    pub terms: Vec<DecompositionTerm>,
    pub relative_residual: f64,
}

impl fmt::Display for Decomposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "'{}' \u{2248} ", self.token)?;
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, term) in self.terms.iter().enumerate() {
            if i == 0 {
                if term.coefficient < 0.0 {
                    write!(f, "-")?;
                }
            } else if term.coefficient < 0.0 {
                write!(f, " - ")?;
            } else {
                write!(f, " + ")?;
            }
            write!(f, "{:.3}\u{b7}'{}'", term.coefficient.abs(), term.token)?;
        }
        Ok(())
    }
}

/// Explain one donor token as a weighted sum of anchor tokens.
///
/// Shared tokens are copied during transplant, so they decompose as
/// themselves with coefficient 1. Unseen tokens are solved against the
/// dictionary with the given configuration, which makes the coefficients
/// here exactly the ones a transplant with that configuration applies.
/// A zero-norm donor embedding yields an empty decomposition.
pub fn explain_token<T: Scalar>(
    token: &str,
    dict: &Dictionary<T>,
    donor_emb: &EmbeddingMatrix<T>,
    donor_vocab: &Vocabulary,
    base_vocab: &Vocabulary,
    config: &SolverConfig,
) -> Result<Decomposition, DiagnosticsError> {
    let donor_row = donor_vocab
        .id_of(token)
        .ok_or_else(|| DiagnosticsError::TokenNotInDonor {
            token: token.to_owned(),
        })?;
    if base_vocab.contains(token) {
        return Ok(Decomposition {
            token: token.to_owned(),
            terms: vec![DecompositionTerm {
                token: token.to_owned(),
                coefficient: 1.0,
            }],
            relative_residual: 0.0,
        });
    }
    if donor_row >= donor_emb.rows() {
        return Err(DiagnosticsError::RowOutOfRange {
            row: donor_row,
            rows: donor_emb.rows(),
        });
    }
    let code = omp_solve(dict, donor_emb.row(donor_row), config)?;
    let pairs = dict.anchors().pairs();
    let mut terms: Vec<DecompositionTerm> = code
        .support
        .iter()
        .zip(&code.coeffs)
        .map(|(&j, &coefficient)| DecompositionTerm {
            token: pairs[j].token.clone(),
            coefficient,
        })
        .collect();
    terms.sort_by(|a, b| {
        b.coefficient
            .abs()
            .partial_cmp(&a.coefficient.abs())
            .expect("finite coefficients")
    });
    Ok(Decomposition {
        token: token.to_owned(),
        terms,
        relative_residual: code.relative_residual(),
    })
}

/// Estimate the mutual coherence of a dictionary: the maximum absolute
/// normalized inner product over distinct atom pairs.
///
/// `sample = None` scans all pairs; `Some(s)` draws `s` random pairs
/// (deterministic under `seed`) unless `s` already covers every pair.
pub fn dictionary_coherence<T: Scalar>(
    dict: &Dictionary<T>,
    sample: Option<usize>,
    seed: u64,
) -> Result<f64, DiagnosticsError> {
    let n = dict.len();
    if n < 2 {
        return Err(DiagnosticsError::TooFewAtoms { found: n });
    }
    let total_pairs = n as u128 * (n as u128 - 1) / 2;
    let norms = dict.norms();
    let coherence_of = |i: usize, j: usize| -> f64 {
        (dot_stored(dict.atom(i), dict.atom(j)) / (norms[i] * norms[j])).abs()
    };
    let mut mu = 0.0f64;
    match sample {
        Some(s) if (s as u128) < total_pairs => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..s {
                let i = rng.gen_range(0..n);
                let mut j = rng.gen_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                mu = mu.max(coherence_of(i, j));
            }
        }
        _ => {
            for i in 0..n {
                for j in (i + 1)..n {
                    mu = mu.max(coherence_of(i, j));
                }
            }
        }
    }
    Ok(mu.min(1.0))
}

/// How a tokenizer segments digit strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NumericScheme {
    /// Exactly the ten single-digit tokens and nothing longer.
    SingleDigit,
    /// All ten single digits plus longer pure-digit tokens.
    MultiDigitChunking,
    /// Anything else (incomplete or irregular digit coverage).
    Mixed,
}

impl fmt::Display for NumericScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NumericScheme::SingleDigit => "single-digit",
            NumericScheme::MultiDigitChunking => "multi-digit-chunking",
            NumericScheme::Mixed => "mixed",
        })
    }
}

/// Pure-digit token counts for one vocabulary, grouped by digit length.
/// Counts are of distinct digit strings after stripping one leading space
/// marker (" ", "\u{0120}" or "\u{2581}"), so a token and its leading-space
/// variant count once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigitProfile {
    pub len1: usize,
    pub len2: usize,
    pub len3: usize,
    pub len4_plus: usize,
    pub scheme: NumericScheme,
}

impl DigitProfile {
    pub fn total(&self) -> usize {
        self.len1 + self.len2 + self.len3 + self.len4_plus
    }
}

/// Digit-token analysis of a vocabulary, optionally compared against a peer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumericSchemeReport {
    pub primary: DigitProfile,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peer: Option<DigitProfile>,
    /// Set iff a peer was given: true when the inferred schemes differ.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mismatch: Option<bool>,
}

impl fmt::Display for NumericSchemeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let line = |f: &mut fmt::Formatter<'_>, label: &str, p: &DigitProfile| {
            writeln!(
                f,
                "{label}: scheme={} digits(len1={}, len2={}, len3={}, len4+={}, total={})",
                p.scheme, p.len1, p.len2, p.len3, p.len4_plus,
                p.total(),
            )
        };
        line(f, "vocabulary", &self.primary)?;
        if let Some(peer) = &self.peer {
            line(f, "peer", peer)?;
            writeln!(
                f,
                "mismatch: {}",
                if self.mismatch == Some(true) { "yes" } else { "no" }
            )?;
        }
        Ok(())
    }
}

const SPACE_MARKERS: [char; 3] = [' ', '\u{0120}', '\u{2581}'];

fn strip_one_marker(token: &str) -> &str {
    for marker in SPACE_MARKERS {
        if let Some(rest) = token.strip_prefix(marker) {
            return rest;
        }
    }
    token
}

fn digit_profile(vocab: &Vocabulary) -> DigitProfile {
    let mut seen: HashSet<&str> = HashSet::new();
    let mut counts = [0usize; 4];
    for (token, _) in vocab.iter() {
        let stripped = strip_one_marker(token);
        if stripped.is_empty() || !stripped.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        if !seen.insert(stripped) {
            continue;
        }
        let class = stripped.len().min(4) - 1;
        counts[class] += 1;
    }
    let [len1, len2, len3, len4_plus] = counts;
    let longer = len2 + len3 + len4_plus;
    let scheme = if len1 == 10 && longer == 0 {
        NumericScheme::SingleDigit
    } else if len1 == 10 && longer > 0 {
        NumericScheme::MultiDigitChunking
    } else {
        NumericScheme::Mixed
    };
    DigitProfile {
        len1,
        len2,
        len3,
        len4_plus,
        scheme,
    }
}

/// Classify a vocabulary's pure-digit tokens and infer its numeric
/// tokenization scheme. With a peer vocabulary, flag whether the two
/// schemes differ; mismatched schemes are the known failure mode for
/// arithmetic after transplantation.
pub fn numeric_scheme_report(
    vocab: &Vocabulary,
    peer: Option<&Vocabulary>,
) -> NumericSchemeReport {
    let primary = digit_profile(vocab);
    let peer_profile = peer.map(digit_profile);
    let mismatch = peer_profile
        .as_ref()
        .map(|p| p.scheme != primary.scheme);
    NumericSchemeReport {
        primary,
        peer: peer_profile,
        mismatch,
    }
}

/// Configuration of the synthetic ground-truth benchmark.
///
/// Two embedding spaces are generated: a donor space of random unit-scale
/// anchors plus `target_count` exactly `sparsity`-sparse unseen tokens, and
/// a base space that is the image of the donor anchors under a random
/// orthogonal map, plus Gaussian noise of scale `noise`. Because the map is
/// known, transplanted rows can be scored against the true image of each
/// unseen donor embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    pub anchor_count: usize,
    pub target_count: usize,
    pub sparsity: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        if self.dim == 0 {
            return Err(DiagnosticsError::InvalidSpec("dim must be positive".into()));
        }
        if self.anchor_count == 0 {
            return Err(DiagnosticsError::InvalidSpec(
                "anchor_count must be positive".into(),
            ));
        }
        if self.sparsity == 0 || self.sparsity > self.anchor_count {
            return Err(DiagnosticsError::InvalidSpec(format!(
                "sparsity must be in 1..={}",
                self.anchor_count
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(DiagnosticsError::InvalidSpec(
                "noise must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Generated benchmark data with its ground-truth map.
pub struct SynthData {
    pub spec: SynthSpec,
    /// Row-major dim x dim orthogonal map from donor space to base space.
    pub u: Vec<f64>,
    pub base_emb: EmbeddingMatrix<f64>,
    pub donor_emb: EmbeddingMatrix<f64>,
    pub base_vocab: Vocabulary,
    pub donor_vocab: Vocabulary,
    /// Ground truth U * e_donor for each unseen target, in donor-row order.
    pub truths: Vec<Vec<f64>>,
}

/// Random d x d orthogonal matrix (row-major) from Gram-Schmidt of a
/// Gaussian draw.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut qr = QrState::new(d, 8);
    while qr.cols() < d {
        let col: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        // A dependent Gaussian draw has probability zero; retry regardless.
        let _ = qr.append(&col);
    }
    let mut u = vec![0.0f64; d * d];
    for j in 0..d {
        let col = qr.q_column(j);
        for i in 0..d {
            u[i * d + j] = col[i];
        }
    }
    u
}

fn matvec(u: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            x.iter()
                .zip(&u[i * d..(i + 1) * d])
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect()
}

/// Generate the synthetic spaces for a spec. Deterministic under the seed.
pub fn generate_synth(spec: &SynthSpec) -> Result<SynthData, DiagnosticsError> {
    spec.validate()?;
    let d = spec.dim;
    let a = spec.anchor_count;

    let mut rng_u = ChaCha8Rng::seed_from_u64(spec.seed);
    rng_u.set_stream(0);
    let u = random_orthogonal(&mut rng_u, d);

    let mut rng_anchor = ChaCha8Rng::seed_from_u64(spec.seed);
    rng_anchor.set_stream(1);
    let scale = 1.0 / (d as f64).sqrt();
    let anchors: Vec<Vec<f64>> = (0..a)
        .map(|_| {
            (0..d)
                .map(|_| rng_anchor.sample::<f64, _>(StandardNormal) * scale)
                .collect()
        })
        .collect();

    let mut rng_target = ChaCha8Rng::seed_from_u64(spec.seed);
    rng_target.set_stream(2);
    let mut donor_rows = anchors.clone();
    let mut truths = Vec::with_capacity(spec.target_count);
    for _ in 0..spec.target_count {
        let support = rand::seq::index::sample(&mut rng_target, a, spec.sparsity);
        let mut row = vec![0.0f64; d];
        for j in support.iter() {
            let c: f64 = rng_target.sample(StandardNormal);
            for (r, &x) in row.iter_mut().zip(&anchors[j]) {
                *r += c * x;
            }
        }
        truths.push(matvec(&u, &row, d));
        donor_rows.push(row);
    }

    let mut rng_noise = ChaCha8Rng::seed_from_u64(spec.seed);
    rng_noise.set_stream(3);
    let base_rows: Vec<Vec<f64>> = anchors
        .iter()
        .map(|anchor| {
            let mut row = matvec(&u, anchor, d);
            if spec.noise > 0.0 {
                for x in &mut row {
                    *x += spec.noise * rng_noise.sample::<f64, _>(StandardNormal);
                }
            }
            row
        })
        .collect();

    let base_vocab = Vocabulary::from_entries((0..a).map(|i| (format!("a{i}"), i)))
        .expect("generated ids are unique");
    let donor_vocab = Vocabulary::from_entries(
        (0..a)
            .map(|i| (format!("a{i}"), i))
            .chain((0..spec.target_count).map(|i| (format!("u{i}"), a + i))),
    )
    .expect("generated ids are unique");

    Ok(SynthData {
        spec: spec.clone(),
        u,
        base_emb: EmbeddingMatrix::from_rows(&base_rows).expect("uniform rows"),
        donor_emb: EmbeddingMatrix::from_rows(&donor_rows).expect("uniform rows"),
        base_vocab,
        donor_vocab,
        truths,
    })
}

/// One (method, k) cell of the benchmark table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthCell {
    pub method: Method,
    pub k: usize,
    pub mean_rel_err: f64,
    pub p95_rel_err: f64,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthReport {
    pub spec: SynthSpec,
    pub cells: Vec<SynthCell>,
}

impl SynthReport {
    /// CSV table, one row per (method, k) cell. The runtime column is wall
    /// time and varies run to run; every other column is deterministic
    /// under the spec seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,k,mean_rel_err,p95_rel_err,runtime_ms\n");
        for cell in &self.cells {
            out.push_str(&format!(
                "{},{},{:.9e},{:.9e},{:.3}\n",
                cell.method, cell.k, cell.mean_rel_err, cell.p95_rel_err, cell.runtime_ms
            ));
        }
        out
    }
}

impl fmt::Display for SynthReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "synthetic benchmark: d={} anchors={} targets={} sparsity={} noise={} seed={}",
            self.spec.dim,
            self.spec.anchor_count,
            self.spec.target_count,
            self.spec.sparsity,
            self.spec.noise,
            self.spec.seed
        )?;
        writeln!(f, "{:<6} {:>5} {:>14} {:>14} {:>12}", "method", "k", "mean_rel_err", "p95_rel_err", "runtime_ms")?;
        for c in &self.cells {
            writeln!(
                f,
                "{:<6} {:>5} {:>14.6e} {:>14.6e} {:>12.3}",
                c.method.to_string(),
                c.k,
                c.mean_rel_err,
                c.p95_rel_err,
                c.runtime_ms
            )?;
        }
        Ok(())
    }
}

/// Run the synthetic benchmark over a method and sparsity grid.
///
/// Each cell transplants the generated pair and scores unseen rows as
/// `||e_new - U e_donor|| / ||U e_donor||`. Under-budget configurations
/// (`sparsity > k`) are measured like any other cell.
pub fn synth_benchmark(
    spec: &SynthSpec,
    methods: &[Method],
    ks: &[usize],
) -> Result<SynthReport, DiagnosticsError> {
    let data = generate_synth(spec)?;
    let mut cells = Vec::with_capacity(methods.len() * ks.len());
    for &method in methods {
        for &k in ks {
            let options = TransplantOptions {
                method,
                solver: SolverConfig::new(k),
                max_atoms: None,
                seed: spec.seed,
                record_codes: false,
            };
            let start = Instant::now();
            let (out, _) = transplant(
                &data.base_emb,
                &data.base_vocab,
                &data.donor_emb,
                &data.donor_vocab,
                &options,
            )?;
            let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
            let errors = score_against_truth(&data, &out);
            let mean_rel_err = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
            let p95_rel_err = p95(&errors);
            cells.push(SynthCell {
                method,
                k,
                mean_rel_err,
                p95_rel_err,
                runtime_ms,
            });
        }
    }
    Ok(SynthReport {
        spec: spec.clone(),
        cells,
    })
}

/// Per-target relative reconstruction errors of a transplanted matrix
/// against the ground-truth map, in donor-row order.
pub fn score_against_truth(data: &SynthData, out: &EmbeddingMatrix<f64>) -> Vec<f64> {
    let a = data.spec.anchor_count;
    data.truths
        .iter()
        .enumerate()
        .map(|(i, truth)| {
            let got = out.row(a + i);
            let mut diff_sq = 0.0f64;
            for (&g, &t) in got.iter().zip(truth) {
                let d = g - t;
                diff_sq += d * d;
            }
            diff_sq.sqrt() / norm_f64(truth)
        })
        .collect()
}

fn p95(sorted_or_not: &[f64]) -> f64 {
    if sorted_or_not.is_empty() {
        return 0.0;
    }
    let mut v = sorted_or_not.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let n = v.len();
    v[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1]
}
