//! Shared-token correspondence between two vocabularies and the donor-side
//! dictionary view consumed by the solver.
//!
//! Token strings are compared byte-exact; a token is "shared" iff its surface
//! form appears in both vocabularies, regardless of the ids involved.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::{norm_widened, Scalar};
use crate::tensorio::{EmbeddingMatrix, Vocabulary};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("{side} vocabulary is empty")]
    EmptyVocabulary { side: &'static str },
    #[error("empty token overlap: the transplant method requires at least one shared token")]
    EmptyOverlap,
    #[error("anchor {token:?} has donor row {row}, out of range for {rows} rows")]
    AnchorOutOfRange {
        token: String,
        row: usize,
        rows: usize,
    },
    #[error("every dictionary atom has zero norm")]
    AllAtomsZeroNorm,
    #[error("max_atoms must be at least 1")]
    InvalidMaxAtoms,
}

/// One shared token with its row index in each embedding space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorPair {
    pub token: String,
    pub base_row: usize,
    pub donor_row: usize,
}

/// The shared-token correspondence, ordered by donor id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnchorSet {
    pairs: Vec<AnchorPair>,
}

impl AnchorSet {
    pub fn from_pairs(mut pairs: Vec<AnchorPair>) -> Self {
        pairs.sort_by_key(|p| p.donor_row);
        Self { pairs }
    }

    pub fn pairs(&self) -> &[AnchorPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub(crate) fn overlap_pairs(base: &Vocabulary, donor: &Vocabulary) -> Vec<AnchorPair> {
    // Iterate the smaller side for the lookups.
    let mut pairs: Vec<AnchorPair> = if base.len() <= donor.len() {
        base.iter()
            .filter_map(|(token, base_row)| {
                donor.id_of(token).map(|donor_row| AnchorPair {
                    token: token.to_owned(),
                    base_row,
                    donor_row,
                })
            })
            .collect()
    } else {
        donor
            .iter()
            .filter_map(|(token, donor_row)| {
                base.id_of(token).map(|base_row| AnchorPair {
                    token: token.to_owned(),
                    base_row,
                    donor_row,
                })
            })
            .collect()
    };
    pairs.sort_by_key(|p| p.donor_row);
    pairs
}

/// Compute the shared-token set V-cap between two vocabularies.
///
/// The result is sorted by donor id. An empty intersection is an error: the
/// transplant method is inapplicable without at least one shared token.
pub fn compute_overlap(base: &Vocabulary, donor: &Vocabulary) -> Result<AnchorSet, AlignError> {
    if base.is_empty() {
        return Err(AlignError::EmptyVocabulary { side: "base" });
    }
    if donor.is_empty() {
        return Err(AlignError::EmptyVocabulary { side: "donor" });
    }
    let pairs = overlap_pairs(base, donor);
    if pairs.is_empty() {
        return Err(AlignError::EmptyOverlap);
    }
    Ok(AnchorSet { pairs })
}

/// Split the donor vocabulary into tokens shared with the base vocabulary
/// and tokens unseen by it. Both lists are sorted by donor id and together
/// partition the donor vocabulary.
pub fn partition_tokens(base: &Vocabulary, donor: &Vocabulary) -> (Vec<String>, Vec<String>) {
    let mut shared: Vec<(usize, String)> = Vec::new();
    let mut unseen: Vec<(usize, String)> = Vec::new();
    for (token, donor_row) in donor.iter() {
        if base.contains(token) {
            shared.push((donor_row, token.to_owned()));
        } else {
            unseen.push((donor_row, token.to_owned()));
        }
    }
    shared.sort_by_key(|&(row, _)| row);
    unseen.sort_by_key(|&(row, _)| row);
    (
        shared.into_iter().map(|(_, t)| t).collect(),
        unseen.into_iter().map(|(_, t)| t).collect(),
    )
}

/// Donor-space atom matrix over the anchor set.
///
/// Atom `j` is the donor embedding row of the `j`-th retained anchor pair;
/// the retained pairs travel with the dictionary so sparse-code support
/// indices can be resolved back to tokens and base rows. Zero-norm atoms
/// (padding rows, never-trained slots) are excluded at construction.
#[derive(Debug, Clone)]
pub struct Dictionary<T> {
    dim: usize,
    data: Vec<T>,
    norms: Vec<f64>,
    anchors: AnchorSet,
    dropped_zero_norm: usize,
}

impl<T: Scalar> Dictionary<T> {
    /// Number of atoms.
    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    /// Atom dimensionality (d_donor).
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Atom `j` as a contiguous slice.
    pub fn atom(&self, j: usize) -> &[T] {
        let start = j * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Iterate atoms in column order.
    pub fn atoms(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Cached Euclidean norms, one per atom.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Anchor pairs aligned with the atom columns.
    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    /// Atoms dropped at construction because their norm was exactly zero.
    pub fn dropped_zero_norm(&self) -> usize {
        self.dropped_zero_norm
    }

    /// Build a synthetic dictionary from raw atom vectors. Anchor pair `j`
    /// gets token `atom{j}` with base and donor row both `j`, matching the
    /// layout of generated benchmark spaces.
    pub fn from_atoms(atoms: &[Vec<T>]) -> Result<Self, AlignError> {
        let dim = atoms.first().map_or(0, Vec::len);
        let pairs: Vec<AnchorPair> = (0..atoms.len())
            .map(|j| AnchorPair {
                token: format!("atom{j}"),
                base_row: j,
                donor_row: j,
            })
            .collect();
        let rows: Vec<&[T]> = atoms.iter().map(Vec::as_slice).collect();
        Self::from_anchor_rows(dim, &pairs, |j| rows[j])
    }

    fn from_anchor_rows<'a>(
        dim: usize,
        pairs: &[AnchorPair],
        row: impl Fn(usize) -> &'a [T],
    ) -> Result<Self, AlignError>
    where
        T: 'a,
    {
        let mut data = Vec::with_capacity(pairs.len() * dim);
        let mut norms = Vec::with_capacity(pairs.len());
        let mut kept = Vec::with_capacity(pairs.len());
        let mut dropped = 0usize;
        for (j, pair) in pairs.iter().enumerate() {
            let atom = row(j);
            let norm = norm_widened(atom);
            if norm == 0.0 {
                dropped += 1;
                continue;
            }
            data.extend_from_slice(atom);
            norms.push(norm);
            kept.push(pair.clone());
        }
        if norms.is_empty() {
            return Err(AlignError::AllAtomsZeroNorm);
        }
        Ok(Self {
            dim,
            data,
            norms,
            anchors: AnchorSet { pairs: kept },
            dropped_zero_norm: dropped,
        })
    }
}

/// Build the donor-side dictionary over an anchor set.
///
/// With `max_atoms` set, a uniform random subsample of that many anchors is
/// taken first (deterministic under `seed`); atom order stays sorted by
/// donor id either way. Zero-norm atoms are then dropped and counted.
pub fn build_dictionary<T: Scalar>(
    anchors: &AnchorSet,
    donor_emb: &EmbeddingMatrix<T>,
    max_atoms: Option<usize>,
    seed: u64,
) -> Result<Dictionary<T>, AlignError> {
    for pair in anchors.pairs() {
        if pair.donor_row >= donor_emb.rows() {
            return Err(AlignError::AnchorOutOfRange {
                token: pair.token.clone(),
                row: pair.donor_row,
                rows: donor_emb.rows(),
            });
        }
    }
    let selected: Vec<AnchorPair> = match max_atoms {
        Some(0) => return Err(AlignError::InvalidMaxAtoms),
        Some(m) if m < anchors.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, anchors.len(), m).into_vec();
            idx.sort_unstable();
            idx.into_iter()
                .map(|i| anchors.pairs()[i].clone())
                .collect()
        }
        _ => anchors.pairs().to_vec(),
    };
    Dictionary::from_anchor_rows(donor_emb.dims(), &selected, |j| {
        donor_emb.row(selected[j].donor_row)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(entries: &[(&str, usize)]) -> Vocabulary {
        Vocabulary::from_entries(entries.iter().map(|&(t, i)| (t.to_string(), i))).unwrap()
    }

    #[test]
    fn overlap_example() {
        let base = vocab(&[("a", 0), ("b", 1), ("c", 2)]);
        let donor = vocab(&[("b", 0), ("d", 1), ("a", 2)]);
        let anchors = compute_overlap(&base, &donor).unwrap();
        assert_eq!(anchors.len(), 2);
        // Sorted by donor id: b (donor 0), then a (donor 2).
        assert_eq!(anchors.pairs()[0].token, "b");
        assert_eq!((anchors.pairs()[0].base_row, anchors.pairs()[0].donor_row), (1, 0));
        assert_eq!(anchors.pairs()[1].token, "a");
        assert_eq!((anchors.pairs()[1].base_row, anchors.pairs()[1].donor_row), (0, 2));
    }

    #[test]
    fn identical_vocabularies_overlap_fully() {
        let entries: Vec<(String, usize)> = (0..100).map(|i| (format!("t{i}"), i)).collect();
        let v = Vocabulary::from_entries(entries).unwrap();
        let anchors = compute_overlap(&v, &v).unwrap();
        assert_eq!(anchors.len(), 100);
    }

    #[test]
    fn llama_to_mistral_overlap_regime() {
        // Synthetic vocabularies sized like the Llama -> Mistral NeMo pair:
        // 131,072-token base, 128,000-token donor, 54% of the base shared.
        let shared = (0.54f64 * 131_072.0).round() as usize; // 70,779
        let base = Vocabulary::from_entries(
            (0..shared)
                .map(|i| (format!("shared{i}"), i))
                .chain((shared..131_072).map(|i| (format!("base_only{i}"), i))),
        )
        .unwrap();
        let donor = Vocabulary::from_entries(
            (0..shared)
                .map(|i| (format!("shared{i}"), i))
                .chain((shared..128_000).map(|i| (format!("donor_only{i}"), i))),
        )
        .unwrap();
        let anchors = compute_overlap(&base, &donor).unwrap();
        assert_eq!(anchors.len(), shared);
        let fraction = anchors.len() as f64 / base.len() as f64;
        assert!((fraction - 0.54).abs() < 0.005, "fraction = {fraction}");
        assert!((70_000..72_000).contains(&anchors.len()));
    }

    #[test]
    fn empty_overlap_is_an_error() {
        let base = vocab(&[("a", 0)]);
        let donor = vocab(&[("b", 0)]);
        assert!(matches!(
            compute_overlap(&base, &donor),
            Err(AlignError::EmptyOverlap)
        ));
    }

    #[test]
    fn empty_vocabulary_is_an_error() {
        let v = vocab(&[("a", 0)]);
        let empty = Vocabulary::default();
        assert!(matches!(
            compute_overlap(&empty, &v),
            Err(AlignError::EmptyVocabulary { side: "base" })
        ));
        assert!(matches!(
            compute_overlap(&v, &empty),
            Err(AlignError::EmptyVocabulary { side: "donor" })
        ));
    }

    #[test]
    fn partition_examples() {
        let base = vocab(&[("a", 0), ("b", 1), ("c", 2)]);
        let donor = vocab(&[("a", 0), ("b", 1), ("x", 2)]);
        let (shared, unseen) = partition_tokens(&base, &donor);
        assert_eq!(shared, vec!["a", "b"]);
        assert_eq!(unseen, vec!["x"]);

        let subset = vocab(&[("a", 0), ("b", 1)]);
        let (shared, unseen) = partition_tokens(&base, &subset);
        assert_eq!(shared.len(), 2);
        assert!(unseen.is_empty());

        let disjoint = vocab(&[("x", 0), ("y", 1)]);
        let (shared, unseen) = partition_tokens(&base, &disjoint);
        assert!(shared.is_empty());
        assert_eq!(unseen.len(), 2);
    }

    #[test]
    fn dictionary_atoms_and_norms() {
        let donor = EmbeddingMatrix::from_rows(&[
            vec![1.0f32, 0.0, 0.0],
            vec![0.0f32, 2.0, 0.0],
        ])
        .unwrap();
        let anchors = AnchorSet::from_pairs(vec![
            AnchorPair {
                token: "a".into(),
                base_row: 0,
                donor_row: 0,
            },
            AnchorPair {
                token: "b".into(),
                base_row: 1,
                donor_row: 1,
            },
        ]);
        let dict = build_dictionary(&anchors, &donor, None, 0).unwrap();
        assert_eq!(dict.len(), 2);
        assert_eq!(dict.atom(0), &[1.0, 0.0, 0.0]);
        assert_eq!(dict.atom(1), &[0.0, 2.0, 0.0]);
        assert_eq!(dict.norms(), &[1.0, 2.0]);
        assert_eq!(dict.dropped_zero_norm(), 0);
    }

    #[test]
    fn max_atoms_equal_to_size_is_identity() {
        let donor = EmbeddingMatrix::from_rows(&[
            vec![1.0f32, 0.0],
            vec![0.0f32, 1.0],
            vec![1.0f32, 1.0],
        ])
        .unwrap();
        let anchors = AnchorSet::from_pairs(
            (0..3)
                .map(|i| AnchorPair {
                    token: format!("t{i}"),
                    base_row: i,
                    donor_row: i,
                })
                .collect(),
        );
        let full = build_dictionary(&anchors, &donor, None, 0).unwrap();
        let capped = build_dictionary(&anchors, &donor, Some(3), 0).unwrap();
        assert_eq!(full.len(), capped.len());
        assert_eq!(full.data, capped.data);
    }

    #[test]
    fn subsampling_is_seed_deterministic() {
        let rows: Vec<Vec<f32>> = (0..50).map(|i| vec![i as f32 + 1.0, 1.0]).collect();
        let donor = EmbeddingMatrix::from_rows(&rows).unwrap();
        let anchors = AnchorSet::from_pairs(
            (0..50)
                .map(|i| AnchorPair {
                    token: format!("t{i}"),
                    base_row: i,
                    donor_row: i,
                })
                .collect(),
        );
        let a = build_dictionary(&anchors, &donor, Some(10), 7).unwrap();
        let b = build_dictionary(&anchors, &donor, Some(10), 7).unwrap();
        let c = build_dictionary(&anchors, &donor, Some(10), 8).unwrap();
        let rows_of = |d: &Dictionary<f32>| -> Vec<usize> {
            d.anchors().pairs().iter().map(|p| p.donor_row).collect()
        };
        assert_eq!(rows_of(&a), rows_of(&b));
        assert_ne!(rows_of(&a), rows_of(&c));
        // Subsample stays sorted by donor id.
        let mut sorted = rows_of(&a);
        sorted.sort_unstable();
        assert_eq!(sorted, rows_of(&a));
    }

    #[test]
    fn zero_norm_atoms_are_dropped_and_counted() {
        let donor = EmbeddingMatrix::from_rows(&[
            vec![1.0f32, 0.0],
            vec![0.0f32, 0.0],
            vec![0.0f32, 3.0],
        ])
        .unwrap();
        let anchors = AnchorSet::from_pairs(
            (0..3)
                .map(|i| AnchorPair {
                    token: format!("t{i}"),
                    base_row: i,
                    donor_row: i,
                })
                .collect(),
        );
        let dict = build_dictionary(&anchors, &donor, None, 0).unwrap();
        assert_eq!(dict.len(), 2);
        assert_eq!(dict.dropped_zero_norm(), 1);
        assert_eq!(dict.anchors().pairs()[1].token, "t2");

        let all_zero = EmbeddingMatrix::<f32>::zeros(2, 2);
        let anchors2 = AnchorSet::from_pairs(
            (0..2)
                .map(|i| AnchorPair {
                    token: format!("z{i}"),
                    base_row: i,
                    donor_row: i,
                })
                .collect(),
        );
        assert!(matches!(
            build_dictionary(&anchors2, &all_zero, None, 0),
            Err(AlignError::AllAtomsZeroNorm)
        ));
    }

    #[test]
    fn anchor_out_of_range_is_rejected() {
        let donor = EmbeddingMatrix::<f32>::zeros(1, 2);
        let anchors = AnchorSet::from_pairs(vec![AnchorPair {
            token: "t".into(),
            base_row: 0,
            donor_row: 5,
        }]);
        assert!(matches!(
            build_dictionary(&anchors, &donor, None, 0),
            Err(AlignError::AnchorOutOfRange { row: 5, .. })
        ));
    }
}
