//! Symmetric in-batch contrastive loss and the batch ranking metric.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

use super::{c, Real};

/// Cosine similarity matrix `A . B^T` of two unit-row batches.
pub fn similarity_matrix<F: Real>(a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) -> Array2<F> {
    a.dot(&b.t())
}

fn check_batch<F: Real>(a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>, tau: F) -> Result<()> {
    if tau <= F::zero() {
        return Err(Error::Config("temperature must be positive".into()));
    }
    if a.shape() != b.shape() {
        return Err(Error::Data(format!(
            "batch sides differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.nrows() < 2 {
        return Err(Error::Data("contrastive batch needs at least 2 rows".into()));
    }
    Ok(())
}

/// Mean cross-entropy with diagonal targets over the rows of `logits`.
fn diagonal_cross_entropy<F: Real>(logits: &Array2<F>) -> F {
    let n = logits.nrows();
    let mut total = F::zero();
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum_exp = row.iter().map(|&v| (v - max).exp()).fold(F::zero(), |a, b| a + b);
        // lse - z_ii, stabilized by the row max.
        total = total + sum_exp.ln() + max - row[i];
    }
    total / c::<F>(n as f64)
}

/// Symmetric InfoNCE over a batch of positive pairs with in-batch negatives:
/// the mean of row-wise and column-wise cross-entropy of `A.B^T / tau`
/// against diagonal targets.
pub fn info_nce_symmetric<F: Real>(
    a: &ArrayView2<'_, F>,
    b: &ArrayView2<'_, F>,
    tau: F,
) -> Result<F> {
    check_batch(a, b, tau)?;
    let logits = similarity_matrix(a, b).mapv(|v| v / tau);
    let row_ce = diagonal_cross_entropy(&logits);
    let col_ce = diagonal_cross_entropy(&logits.t().to_owned());
    Ok((row_ce + col_ce) / c::<F>(2.0))
}

/// Loss plus its gradient with respect to the similarity matrix `S = A.B^T`.
///
/// `dL/dS = ((P_row - I) + (P_col - I)) / (2 n tau)` where `P_row`/`P_col`
/// are the row- and column-wise softmaxes of `S / tau`.
pub(crate) fn info_nce_with_grad<F: Real>(
    s: &Array2<F>,
    tau: F,
) -> (F, Array2<F>) {
    let n = s.nrows();
    let nf = c::<F>(n as f64);
    let logits = s.mapv(|v| v / tau);

    let mut grad = Array2::<F>::zeros((n, n));
    let mut loss = F::zero();

    // Row direction.
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: F = exps.iter().copied().fold(F::zero(), |a, b| a + b);
        loss = loss + sum.ln() + max - row[i];
        for (j, &e) in exps.iter().enumerate() {
            grad[[i, j]] = grad[[i, j]] + e / sum;
        }
        grad[[i, i]] = grad[[i, i]] - F::one();
    }

    // Column direction.
    for j in 0..n {
        let col = logits.column(j);
        let max = col.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = col.iter().map(|&v| (v - max).exp()).collect();
        let sum: F = exps.iter().copied().fold(F::zero(), |a, b| a + b);
        loss = loss + sum.ln() + max - col[j];
        for (i, &e) in exps.iter().enumerate() {
            grad[[i, j]] = grad[[i, j]] + e / sum;
        }
        grad[[j, j]] = grad[[j, j]] - F::one();
    }

    let scale = F::one() / (c::<F>(2.0) * nf * tau);
    (loss / (c::<F>(2.0) * nf), grad.mapv(|v| v * scale))
}

/// Fraction of rows whose diagonal logit is the strict row maximum, averaged
/// with the same fraction over columns. Exact ties count as failures.
pub fn training_accuracy<F: Real>(a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) -> Result<f64> {
    check_batch(a, b, F::one())?;
    let s = similarity_matrix(a, b);
    Ok(accuracy_from_similarity(&s))
}

pub(crate) fn accuracy_from_similarity<F: Real>(s: &Array2<F>) -> f64 {
    let n = s.nrows();
    let mut row_hits = 0usize;
    let mut col_hits = 0usize;
    for i in 0..n {
        let diag = s[[i, i]];
        if (0..n).all(|j| j == i || s[[i, j]] < diag) {
            row_hits += 1;
        }
        if (0..n).all(|j| j == i || s[[j, i]] < diag) {
            col_hits += 1;
        }
    }
    (row_hits + col_hits) as f64 / (2 * n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn orthonormal4() -> Array2<f64> {
        Array2::eye(4)
    }

    #[test]
    fn aligned_orthonormal_batch_closed_form() {
        let e = orthonormal4();
        let loss = info_nce_symmetric(&e.view(), &e.view(), 0.05).unwrap();
        // Per row: -log(e^20 / (e^20 + 3)) = ln(1 + 3 e^-20).
        let expected = (1.0f64 + 3.0 * (-20.0f64).exp()).ln();
        assert!(
            (loss - expected).abs() < 1e-12,
            "loss {loss:e} vs closed form {expected:e}"
        );
    }

    #[test]
    fn identical_rows_give_log_batch_size() {
        let row = [0.5f64, 0.5, 0.5, 0.5];
        let a = Array2::from_shape_fn((4, 4), |(_, j)| row[j]);
        let loss = info_nce_symmetric(&a.view(), &a.view(), 0.05).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_invariant_under_joint_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut a = Array2::<f64>::zeros((6, 5));
        let mut b = Array2::<f64>::zeros((6, 5));
        for r in 0..6 {
            let mut va: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut vb: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let na = va.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt();
            va.iter_mut().for_each(|v| *v /= na);
            vb.iter_mut().for_each(|v| *v /= nb);
            for cidx in 0..5 {
                a[[r, cidx]] = va[cidx];
                b[[r, cidx]] = vb[cidx];
            }
        }
        let base = info_nce_symmetric(&a.view(), &b.view(), 0.1).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let ap = Array2::from_shape_fn((6, 5), |(r, cidx)| a[[perm[r], cidx]]);
        let bp = Array2::from_shape_fn((6, 5), |(r, cidx)| b[[perm[r], cidx]]);
        let permuted = info_nce_symmetric(&ap.view(), &bp.view(), 0.1).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn non_positive_temperature_is_config_error() {
        let e = orthonormal4();
        assert!(info_nce_symmetric(&e.view(), &e.view(), 0.0).is_err());
        assert!(info_nce_symmetric(&e.view(), &e.view(), -1.0).is_err());
    }

    #[test]
    fn accuracy_perfect_alignment() {
        let e = orthonormal4();
        assert_eq!(training_accuracy(&e.view(), &e.view()).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_ties_count_as_failure() {
        // Two identical rows: every diagonal ties with the duplicate.
        let a = arr2(&[[1.0f64, 0.0], [1.0, 0.0]]);
        assert_eq!(training_accuracy(&a.view(), &a.view()).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_random_pairs_near_chance() {
        // Independent random unit vectors: expected accuracy ~ 1/batch.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 64usize;
        let d = 32usize;
        let mut trials = 0.0;
        let mut acc_sum = 0.0;
        for _ in 0..30 {
            let mut a = Array2::<f64>::zeros((n, d));
            let mut b = Array2::<f64>::zeros((n, d));
            for r in 0..n {
                for (m, mat) in [&mut a, &mut b].into_iter().enumerate() {
                    let _ = m;
                    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for (cidx, x) in v.iter().enumerate() {
                        mat[[r, cidx]] = x / norm;
                    }
                }
            }
            acc_sum += training_accuracy(&a.view(), &b.view()).unwrap();
            trials += 1.0;
        }
        let mean = acc_sum / trials;
        let p = 1.0 / n as f64;
        // 3 sigma of the mean of 30 batches of 2n Bernoulli draws.
        let sigma = (p * (1.0 - p) / (trials * 2.0 * n as f64)).sqrt();
        assert!(
            (mean - p).abs() < 3.0 * sigma + 0.01,
            "mean accuracy {mean} vs chance {p}"
        );
    }

    #[test]
    fn grad_matches_loss_finite_difference_on_s() {
        // dL/dS from info_nce_with_grad vs central differences of the loss
        // as a function of S entries.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let s = Array2::from_shape_fn((n, n), |_| rng.gen_range(-0.9..0.9));
        let tau = 0.07f64;
        let loss_of = |m: &Array2<f64>| {
            let logits = m.mapv(|v| v / tau);
            let row = diagonal_cross_entropy(&logits);
            let col = diagonal_cross_entropy(&logits.t().to_owned());
            (row + col) / 2.0
        };
        let (loss, grad) = info_nce_with_grad(&s, tau);
        assert!((loss - loss_of(&s)).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..n {
            for j in 0..n {
                let mut plus = s.clone();
                plus[[i, j]] += h;
                let mut minus = s.clone();
                minus[[i, j]] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                assert!(
                    (fd - grad[[i, j]]).abs() < 1e-7,
                    "grad mismatch at ({i},{j}): fd {fd} analytic {}",
                    grad[[i, j]]
                );
            }
        }
    }
}
