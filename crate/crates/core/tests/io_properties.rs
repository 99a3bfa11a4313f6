//! Round-trip properties of the persistence layer over adversarial inputs.

use proptest::prelude::*;
use tokensurgeon::{
    load_embeddings, load_vocabulary, save_embeddings, save_vocabulary, EmbeddingMatrix,
    Vocabulary,
};

fn finite_f32() -> impl Strategy<Value = f32> {
    prop_oneof![
        any::<f32>().prop_filter("finite", |x| x.is_finite()),
        Just(0.0f32),
        Just(-0.0f32),
        Just(f32::MIN_POSITIVE / 2.0), // subnormal
        Just(f32::MAX),
        Just(f32::MIN),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embd_round_trip_is_bit_exact(
        rows in 0usize..12,
        dims in 0usize..12,
        seed_values in proptest::collection::vec(finite_f32(), 0..160),
    ) {
        let mut data = Vec::with_capacity(rows * dims);
        for i in 0..rows * dims {
            data.push(*seed_values.get(i % seed_values.len().max(1)).unwrap_or(&1.5));
        }
        let matrix = EmbeddingMatrix::from_vec(rows, dims, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.embd");
        save_embeddings(&matrix, &path).unwrap();
        let loaded: EmbeddingMatrix<f32> = load_embeddings(&path).unwrap();
        prop_assert_eq!(loaded.rows(), matrix.rows());
        prop_assert_eq!(loaded.dims(), matrix.dims());
        for (a, b) in matrix.data().iter().zip(loaded.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }

        // Saving the loaded matrix reproduces the file byte-for-byte.
        let path2 = dir.path().join("m2.embd");
        save_embeddings(&loaded, &path2).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn f64_storage_round_trips_f32_payloads(
        values in proptest::collection::vec(finite_f32(), 1..64),
    ) {
        let matrix =
            EmbeddingMatrix::from_vec(values.len(), 1, values.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.embd");
        save_embeddings(&matrix, &path).unwrap();
        // Loading into f64 widens exactly; saving again narrows exactly.
        let wide: EmbeddingMatrix<f64> = load_embeddings(&path).unwrap();
        let path2 = dir.path().join("m2.embd");
        save_embeddings(&wide, &path2).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn vocabulary_round_trip_preserves_entries(
        tokens in proptest::collection::hash_set("[ -~\u{80}-\u{10ffff}]{1,12}", 0..40),
    ) {
        let entries: Vec<(String, usize)> = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t, i * 3)) // non-contiguous ids are legal here
            .collect();
        let vocab = Vocabulary::from_entries(entries.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        save_vocabulary(&vocab, &path).unwrap();
        let loaded = load_vocabulary(&path).unwrap();
        prop_assert_eq!(&loaded, &vocab);
        prop_assert_eq!(loaded.len(), entries.len());
    }
}
