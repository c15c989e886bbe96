//! Pair enumeration and pairwise cosine similarities within a batch.
//!
//! Pairs use a canonical `(i, j)` with `i < j`, lexicographic order. That
//! ordering is load-bearing: it keeps teacher and student similarity
//! vectors aligned index by index.

use crate::error::{EkdError, Result};
use crate::numeric::Matrix;

/// Positive and negative pair indices for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub pos_pairs: Vec<(usize, usize)>,
    pub neg_pairs: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn total(&self) -> usize {
        self.pos_pairs.len() + self.neg_pairs.len()
    }
}

/// Per-pair cosine similarities for one model, aligned with a `PairSet`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilaritySet {
    pub pos_sims: Vec<f64>,
    pub neg_sims: Vec<f64>,
}

/// Partition all unordered pairs of a batch by label equality.
pub fn enumerate_pairs(labels: &[usize]) -> PairSet {
    let b = labels.len();
    let mut pos_pairs = Vec::new();
    let mut neg_pairs = Vec::new();
    for i in 0..b {
        for j in (i + 1)..b {
            if labels[i] == labels[j] {
                pos_pairs.push((i, j));
            } else {
                neg_pairs.push((i, j));
            }
        }
    }
    PairSet { pos_pairs, neg_pairs }
}

/// Cosine similarities for every pair, computed through one Gram product
/// and read off at the pair indices.
///
/// Rows must already be unit-norm; a row whose norm is off by more than
/// 1e-6 is rejected.
pub fn pairwise_similarities(embeddings: &Matrix, pairs: &PairSet) -> Result<SimilaritySet> {
    for i in 0..embeddings.rows() {
        let norm: f64 = embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(EkdError::NotNormalized {
                row: i,
                norm,
                tol: 1e-6,
            });
        }
    }
    let gram = embeddings.matmul(&embeddings.transpose());
    let read = |list: &[(usize, usize)]| list.iter().map(|&(i, j)| gram.get(i, j)).collect();
    Ok(SimilaritySet {
        pos_sims: read(&pairs.pos_pairs),
        neg_sims: read(&pairs.neg_pairs),
    })
}

/// Adjoint of the pairwise similarity map: accumulate per-pair cotangents
/// back onto embedding rows (`grad[i] += g * emb[j]` and symmetrically).
pub fn scatter_pair_grads(
    pairs: &[(usize, usize)],
    grad_per_pair: &[f64],
    embeddings: &Matrix,
    grad_embeddings: &mut Matrix,
) -> Result<()> {
    if pairs.len() != grad_per_pair.len() {
        return Err(EkdError::LengthMismatch {
            context: "pair gradients vs pairs",
            left: grad_per_pair.len(),
            right: pairs.len(),
        });
    }
    let rows = embeddings.rows();
    let cols = embeddings.cols();
    assert_eq!(grad_embeddings.rows(), rows);
    assert_eq!(grad_embeddings.cols(), cols);
    for (&(i, j), &g) in pairs.iter().zip(grad_per_pair) {
        if i >= rows || j >= rows {
            return Err(EkdError::DimensionMismatch(format!(
                "pair ({i}, {j}) out of range for batch of {rows}"
            )));
        }
        if g == 0.0 {
            continue;
        }
        for c in 0..cols {
            let ei = embeddings.get(i, c);
            let ej = embeddings.get(j, c);
            *grad_embeddings
                .data_mut()
                .get_mut(i * cols + c)
                .expect("in range") += g * ej;
            *grad_embeddings
                .data_mut()
                .get_mut(j * cols + c)
                .expect("in range") += g * ei;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{row_l2_normalize, row_l2_normalize_vjp};
    use crate::rng::RngState;
    use proptest::prelude::*;

    fn balanced_labels(p: usize, q: usize) -> Vec<usize> {
        (0..p).flat_map(|id| std::iter::repeat(id).take(q)).collect()
    }

    fn random_unit_batch(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = rng.normal();
        }
        row_l2_normalize(&m).unwrap().0
    }

    #[test]
    fn balanced_batch_pair_counts_match_closed_forms() {
        let labels = balanced_labels(128, 4);
        let pairs = enumerate_pairs(&labels);
        assert_eq!(pairs.pos_pairs.len(), 768); // 128 * 4*3/2
        assert_eq!(pairs.neg_pairs.len(), 130_048); // 128 * 4 * 127*4/2
        let b = labels.len();
        assert_eq!(pairs.total(), b * (b - 1) / 2);
    }

    #[test]
    fn all_distinct_labels_give_no_positives() {
        let labels: Vec<usize> = (0..6).collect();
        let pairs = enumerate_pairs(&labels);
        assert!(pairs.pos_pairs.is_empty());
        assert_eq!(pairs.neg_pairs.len(), 15);
    }

    #[test]
    fn two_same_labels() {
        let pairs = enumerate_pairs(&[3, 3]);
        assert_eq!(pairs.pos_pairs, vec![(0, 1)]);
        assert!(pairs.neg_pairs.is_empty());
    }

    #[test]
    fn canonical_ordering() {
        let pairs = enumerate_pairs(&[0, 1, 0, 1]);
        for &(i, j) in pairs.pos_pairs.iter().chain(&pairs.neg_pairs) {
            assert!(i < j);
        }
        assert_eq!(pairs.pos_pairs, vec![(0, 2), (1, 3)]);
        assert_eq!(pairs.neg_pairs, vec![(0, 1), (0, 3), (1, 2), (2, 3)]);
    }

    #[test]
    fn similarities_identical_and_orthogonal() {
        let emb = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ]);
        let pairs = enumerate_pairs(&[0, 0, 1]);
        let sims = pairwise_similarities(&emb, &pairs).unwrap();
        assert_eq!(sims.pos_sims, vec![1.0]);
        assert_eq!(sims.neg_sims, vec![0.0, 0.0]);
    }

    #[test]
    fn similarities_match_per_pair_dot_oracle() {
        let mut rng = RngState::new(21);
        let emb = random_unit_batch(&mut rng, 12, 6);
        let labels = balanced_labels(4, 3);
        let pairs = enumerate_pairs(&labels);
        let sims = pairwise_similarities(&emb, &pairs).unwrap();
        let dot = |i: usize, j: usize| -> f64 {
            emb.row(i).iter().zip(emb.row(j)).map(|(a, b)| a * b).sum()
        };
        for (&(i, j), s) in pairs.pos_pairs.iter().zip(&sims.pos_sims) {
            assert!((s - dot(i, j)).abs() <= 1e-12);
        }
        for (&(i, j), s) in pairs.neg_pairs.iter().zip(&sims.neg_sims) {
            assert!((s - dot(i, j)).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_non_normalized_rows() {
        let emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]);
        let pairs = enumerate_pairs(&[0, 1]);
        assert!(pairwise_similarities(&emb, &pairs).is_err());
    }

    #[test]
    fn scatter_single_pair_swaps_embeddings() {
        let emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut grad = Matrix::zeros(2, 2);
        scatter_pair_grads(&[(0, 1)], &[1.0], &emb, &mut grad).unwrap();
        assert_eq!(grad.row(0), &[0.0, 1.0]);
        assert_eq!(grad.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn scatter_zero_grads_is_zero() {
        let mut rng = RngState::new(22);
        let emb = random_unit_batch(&mut rng, 5, 4);
        let pairs = enumerate_pairs(&balanced_labels(5, 1));
        let mut grad = Matrix::zeros(5, 4);
        let zeros = vec![0.0; pairs.neg_pairs.len()];
        scatter_pair_grads(&pairs.neg_pairs, &zeros, &emb, &mut grad).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scatter_rejects_out_of_range() {
        let emb = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let mut grad = Matrix::zeros(1, 2);
        assert!(scatter_pair_grads(&[(0, 5)], &[1.0], &emb, &mut grad).is_err());
    }

    #[test]
    fn scatter_matches_finite_differences_through_normalization() {
        // loss(X) = sum_n g_n * s_n where s are pair similarities of the
        // row-normalized X; gradient = normalization vjp of the scatter.
        let mut rng = RngState::new(23);
        let mut x = Matrix::zeros(6, 4);
        for v in x.data_mut() {
            *v = rng.normal();
        }
        let labels = balanced_labels(3, 2);
        let pairs = enumerate_pairs(&labels);
        let all_pairs: Vec<(usize, usize)> = pairs
            .pos_pairs
            .iter()
            .chain(&pairs.neg_pairs)
            .copied()
            .collect();
        let g: Vec<f64> = (0..all_pairs.len()).map(|_| rng.normal()).collect();

        let loss = |m: &Matrix| -> f64 {
            let (unit, _) = row_l2_normalize(m).unwrap();
            all_pairs
                .iter()
                .zip(&g)
                .map(|(&(i, j), gv)| {
                    gv * unit
                        .row(i)
                        .iter()
                        .zip(unit.row(j))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .sum()
        };

        let (unit, norms) = row_l2_normalize(&x).unwrap();
        let mut grad_unit = Matrix::zeros(6, 4);
        scatter_pair_grads(&all_pairs, &g, &unit, &mut grad_unit).unwrap();
        let grad_x = row_l2_normalize_vjp(&unit, &norms, &grad_unit);

        let h = 1e-5;
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let a = grad_x.data()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-6, "idx {idx}: analytic {a} vs fd {fd} (rel {rel})");
        }
    }

    proptest! {
        #[test]
        fn pos_plus_neg_covers_everything(b in 2usize..40, seed in 0u64..500) {
            let mut rng = RngState::new(seed);
            let labels: Vec<usize> = (0..b).map(|_| rng.below(5)).collect();
            let pairs = enumerate_pairs(&labels);
            prop_assert_eq!(pairs.total(), b * (b - 1) / 2);
        }

        #[test]
        fn similarities_stay_in_unit_interval(rows in 2usize..16, seed in 0u64..500) {
            let mut rng = RngState::new(seed);
            let emb = random_unit_batch(&mut rng, rows, 5);
            let labels: Vec<usize> = (0..rows).map(|_| rng.below(3)).collect();
            let pairs = enumerate_pairs(&labels);
            let sims = pairwise_similarities(&emb, &pairs).unwrap();
            for s in sims.pos_sims.iter().chain(&sims.neg_sims) {
                prop_assert!(*s >= -1.0 - 1e-9 && *s <= 1.0 + 1e-9);
            }
        }

        #[test]
        fn scatter_is_exact_adjoint(rows in 3usize..10, seed in 0u64..500) {
            // dot test: <scatter(g), V> == <g, sims-of-direction(V)>
            let mut rng = RngState::new(seed);
            let emb = random_unit_batch(&mut rng, rows, 4);
            let labels: Vec<usize> = (0..rows).map(|_| rng.below(3)).collect();
            let pairs = enumerate_pairs(&labels);
            let all: Vec<(usize, usize)> =
                pairs.pos_pairs.iter().chain(&pairs.neg_pairs).copied().collect();
            let g: Vec<f64> = (0..all.len()).map(|_| rng.normal()).collect();
            let mut v = Matrix::zeros(rows, 4);
            for val in v.data_mut() {
                *val = rng.normal();
            }
            let mut scattered = Matrix::zeros(rows, 4);
            scatter_pair_grads(&all, &g, &emb, &mut scattered).unwrap();
            let lhs: f64 = scattered.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
            // directional derivative of each pair similarity along V
            let rhs: f64 = all
                .iter()
                .zip(&g)
                .map(|(&(i, j), gv)| {
                    let d: f64 = v.row(i).iter().zip(emb.row(j)).map(|(a, b)| a * b).sum::<f64>()
                        + emb.row(i).iter().zip(v.row(j)).map(|(a, b)| a * b).sum::<f64>();
                    gv * d
                })
                .sum();
            let denom = lhs.abs().max(rhs.abs()).max(1e-12);
            prop_assert!((lhs - rhs).abs() / denom <= 1e-10);
        }
    }
}
