//! Training-free tokenizer transplantation.
//!
//! Given a base model's token embeddings and a donor tokenizer's embeddings,
//! this crate rebuilds every out-of-vocabulary token's base-space embedding
//! as a sparse linear combination of shared anchor tokens. The combination
//! is found by Orthogonal Matching Pursuit in the donor's embedding space;
//! only the coefficient vector crosses spaces, so the two models' embedding
//! dimensionalities are free to differ. Shared tokens are copied unchanged.
//!
//! Pipeline:
//!
//! 1. [`tensorio`] loads embedding matrices (EMBD files) and vocabularies
//!    (JSON token -> id maps).
//! 2. [`vocab_align`] intersects the vocabularies into an anchor set and
//!    builds the donor-side dictionary.
//! 3. [`omp`] solves the sparse approximations with an incrementally
//!    maintained QR factorization.
//! 4. [`transplant`] assembles the new embedding matrix (with zero and mean
//!    baselines for comparison).
//! 5. [`diagnostics`] explains per-token decompositions, measures dictionary
//!    coherence, detects numeric-tokenization-scheme mismatches, and scores
//!    the whole pipeline on synthetic spaces with a known ground-truth map.
//!
//! Core types are generic over the stored scalar ([`Scalar`]: `f32` or
//! `f64`); solver arithmetic always accumulates in `f64`.

pub mod diagnostics;
pub mod omp;
pub mod scalar;
pub mod tensorio;
pub mod transplant;
pub mod vocab_align;

pub use omp::{
    omp_solve, omp_solve_batch, omp_solve_batch_with_progress, solve_triangular, OmpError,
    QrState, SelectionMode, SolverConfig, SparseCode, UpperTriangular,
};
pub use scalar::Scalar;
pub use tensorio::{
    load_embeddings, load_vocabulary, save_embeddings, save_vocabulary, EmbeddingMatrix,
    TensorIoError, Vocabulary,
};
pub use transplant::{
    apply_code, transplant, transplant_tied_pair, transplant_with_progress, Method,
    TransplantError, TransplantOptions, TransplantPlan, TransplantReport,
};
pub use vocab_align::{
    build_dictionary, compute_overlap, partition_tokens, AlignError, AnchorPair, AnchorSet,
    Dictionary,
};

/// Embedding matrix at on-disk precision.
pub type EmbeddingMatrixF32 = EmbeddingMatrix<f32>;
/// Embedding matrix at accumulator precision, used by the synthetic
/// ground-truth harness.
pub type EmbeddingMatrixF64 = EmbeddingMatrix<f64>;
/// Dictionary over `f32` atoms.
pub type DictionaryF32 = Dictionary<f32>;
/// Dictionary over `f64` atoms.
pub type DictionaryF64 = Dictionary<f64>;
