use proptest::prelude::*;

use super::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

#[test]
fn bleu_identity_and_brevity() {
    let refs = ["a b c d e", "x y z w"];
    let b = bleu(&refs, &refs, 4).unwrap();
    assert!(b.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    let b = bleu(&["a b c d"], &["a b c d e"], 4).unwrap();
    assert!((b[0] - (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-12);
    assert!((b[0] - 0.7788).abs() < 1e-4);
}

#[test]
fn bleu_without_bigram_matches_is_zero() {
    let b = bleu(&["a x b y"], &["a b c d"], 2).unwrap();
    assert!(b[0] > 0.0);
    assert_eq!(b[1], 0.0);
}

#[test]
fn bleu_clips_repeated_words() {
    // "the the the" against "the cat": one clipped match of three.
    let b = bleu(&["the the the"], &["the cat"], 1).unwrap();
    assert!((b[0] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn bleu_errors() {
    assert!(matches!(bleu(&[], &[], 4), Err(MetricsError::EmptyCorpus)));
    assert!(matches!(bleu(&["a"], &[], 4), Err(MetricsError::Mismatch(_))));
}

#[test]
fn rouge_examples() {
    assert!((rouge_l("a b c", "a b c", 1.2).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(rouge_l("a b", "c d", 1.2).unwrap(), 0.0);
    let f = rouge_l("a b c", "a c", 1.2).unwrap();
    let (p, r, b2) = (2.0 / 3.0, 1.0, 1.44);
    assert!((f - (1.0 + b2) * p * r / (r + b2 * p)).abs() < 1e-12);
    assert!((f - 0.8299).abs() < 1e-4);
    assert!(matches!(rouge_l("a", "", 1.2), Err(MetricsError::EmptyReference(_))));
    assert_eq!(rouge_l("", "a", 1.2).unwrap(), 0.0);
    let c = corpus_rouge_l(&["a b c", "a b"], &["a c", "c d"], 1.2).unwrap();
    assert!((c - f / 2.0).abs() < 1e-12);
}

#[test]
fn asd_examples() {
    let s = SimilarityMatrix::new(ids(2), vec![1.0, 0.5, 0.5, 1.0]).unwrap();
    let h = SimilarityMatrix::new(ids(2), vec![1.0, 0.3, 0.3, 1.0]).unwrap();
    assert_eq!(asd(&s, &s).unwrap(), 0.0);
    assert!((asd(&h, &s).unwrap() - 0.2).abs() < 1e-15);
    let three = SimilarityMatrix::new(ids(3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(matches!(asd(&three, &s), Err(MetricsError::Mismatch(_))));
}

#[test]
fn cad_examples() {
    let uniform = Tensor::full(&[10, 10], 0.1);
    assert!((cad_matrix(&uniform, 0.1) - 0.28).abs() < 1e-12);
    assert!((cad_matrix(&uniform, 1.0) - 1.0).abs() < 1e-12);
    let mut eye = vec![0.0; 100];
    for i in 0..10 {
        eye[i * 11] = 1.0;
    }
    assert!((cad_matrix(&Tensor::matrix(10, 10, eye), 0.01) - 1.0).abs() < 1e-12);
}

#[test]
fn cad_rescales_rectangular_maps() {
    // 3 queries over 5 keys: centers 0, 2, 4.
    let mut w = vec![0.0; 15];
    w[0] = 1.0;
    w[5 + 2] = 1.0;
    w[10 + 4] = 1.0;
    assert!((cad_matrix(&Tensor::matrix(3, 5, w), 0.05) - 1.0).abs() < 1e-12);
}

#[test]
fn cad_of_sampled_map_uses_frame_weights() {
    // One query sampling position 1.5 with all its weight: half on frames 1 and 2.
    let map = AttentionMap::new(
        0,
        0,
        Tensor::matrix(1, 1, vec![1.0]),
        Some(Tensor::matrix(1, 1, vec![1.5])),
        4,
    )
    .unwrap();
    // Center is frame 0; band half-width 0.4 * 4 = 1.6 covers frame 1 only.
    assert!((cad(&map, 0.4) - 0.5).abs() < 1e-12);
}

#[test]
fn embedding_similarity_examples() {
    let same = Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    let s = embedding_similarity(&same, ids(3)).unwrap();
    assert!((0..3).all(|i| (0..3).all(|j| (s.get(i, j) - 1.0).abs() < 1e-12)));
    let ortho = Tensor::matrix(2, 3, vec![0.0, 2.0, 0.0, 0.0, 0.0, -3.0]);
    let s = embedding_similarity(&ortho, ids(2)).unwrap();
    assert_eq!((s.get(0, 1), s.get(0, 0)), (0.0, 1.0));
    let zero = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
    assert!(matches!(embedding_similarity(&zero, ids(2)), Err(MetricsError::ZeroNorm(1))));
}

#[test]
fn embedding_similarity_matches_direct_cosines() {
    let rows = [[0.3, -1.2, 2.0], [1.1, 0.4, -0.7], [-0.5, 0.9, 0.2]];
    let t = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    let s = embedding_similarity(&t, ids(3)).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| rows[i][k] * rows[j][k]).sum();
            let ni: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            let nj: f64 = rows[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((s.get(i, j) - dot / (ni * nj)).abs() < 1e-12);
        }
    }
}

#[test]
fn similarity_csv_round_trip_and_validation() {
    let s = SimilarityMatrix::new(ids(2), vec![1.0, 0.1 + 0.2, 0.1 + 0.2, 1.0]).unwrap();
    let back = SimilarityMatrix::from_csv(&s.to_csv()).unwrap();
    assert_eq!(back, s);
    assert!(s.to_csv().starts_with("id,s0,s1\n"));
    assert!(SimilarityMatrix::new(ids(2), vec![1.0, 0.2, 0.3, 1.0]).is_err());
    assert!(SimilarityMatrix::new(ids(2), vec![0.9, 0.2, 0.2, 1.0]).is_err());
    assert!(SimilarityMatrix::from_csv("id,a\nb,1\n").is_err());
    let sub = s.select(&["s1".to_string(), "s0".to_string()]).unwrap();
    assert_eq!(sub.ids(), ["s1", "s0"]);
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 1..8).prop_map(|v| v.join(" "))
}

proptest! {
    #[test]
    fn scores_are_bounded(h in sentence(), r in sentence()) {
        let b = bleu(&[h.as_str()], &[r.as_str()], 4).unwrap();
        prop_assert!(b.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
        let f = rouge_l(&h, &r, 1.2).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&f));
        prop_assert_eq!((f - 1.0).abs() < 1e-12, h == r);
    }

    #[test]
    fn asd_is_symmetric(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, d in -1.0f64..1.0) {
        let x = SimilarityMatrix::new(ids(3), vec![1.0, a, b, a, 1.0, c, b, c, 1.0]).unwrap();
        let y = SimilarityMatrix::new(ids(3), vec![1.0, d, a, d, 1.0, b, a, b, 1.0]).unwrap();
        prop_assert_eq!(asd(&x, &y).unwrap(), asd(&y, &x).unwrap());
        prop_assert!(asd(&x, &y).unwrap() >= 0.0);
    }

    #[test]
    fn cad_is_monotone_in_delta(vals in prop::collection::vec(0.01f64..1.0, 24), d1 in 0.01f64..1.0, d2 in 0.01f64..1.0) {
        let mut w = vals;
        for r in 0..4 {
            let s: f64 = w[r * 6..(r + 1) * 6].iter().sum();
            w[r * 6..(r + 1) * 6].iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::matrix(4, 6, w);
        let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(cad_matrix(&t, lo) <= cad_matrix(&t, hi) + 1e-12);
        prop_assert!((cad_matrix(&t, 1.0) - 1.0).abs() < 1e-9);
    }
}
