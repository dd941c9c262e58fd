//! Hand-derived gradients of the symmetric contrastive loss through the
//! residual transform, its normalization, and the MLP stack.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

use super::loss::{accuracy_from_similarity, info_nce_with_grad};
use super::{c, similarity_matrix, AssociationModel, FTrace, Real};

#[derive(Debug, Clone)]
pub struct BlockGrads<F> {
    pub norm_gain: Array1<F>,
    pub norm_bias: Array1<F>,
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

/// Parameter gradients, same structure and flatten order as the model.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub blocks: Vec<BlockGrads<F>>,
    pub alpha_raw: F,
}

impl<F: Real> Gradients<F> {
    fn zeros_like(model: &AssociationModel<F>) -> Self {
        Gradients {
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    norm_gain: Array1::zeros(b.norm_gain.len()),
                    norm_bias: Array1::zeros(b.norm_bias.len()),
                    weight: Array2::zeros(b.weight.dim()),
                    bias: Array1::zeros(b.bias.len()),
                })
                .collect(),
            alpha_raw: F::zero(),
        }
    }

    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.norm_gain.iter().copied());
            out.extend(b.norm_bias.iter().copied());
            out.extend(b.weight.iter().copied());
            out.extend(b.bias.iter().copied());
        }
        out.push(self.alpha_raw);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Loss, batch ranking accuracy, and parameter gradients for one batch of
/// positive pairs `(xa[i], xb[i])`. Both sides share the model; their
/// gradient contributions accumulate.
pub fn backward<F: Real>(
    model: &AssociationModel<F>,
    xa: &ArrayView2<'_, F>,
    xb: &ArrayView2<'_, F>,
    tau: F,
) -> Result<(F, f64, Gradients<F>)> {
    if tau <= F::zero() {
        return Err(Error::Config("temperature must be positive".into()));
    }
    if xa.shape() != xb.shape() {
        return Err(Error::Data("batch sides differ in shape".into()));
    }
    if xa.nrows() < 2 {
        return Err(Error::Data("contrastive batch needs at least 2 rows".into()));
    }

    let (fa, trace_a) = model.forward_f(xa)?;
    let (fb, trace_b) = model.forward_f(xb)?;

    let s = similarity_matrix(&fa.view(), &fb.view());
    let accuracy = accuracy_from_similarity(&s);
    let (loss, ds) = info_nce_with_grad(&s, tau);

    // S = FA . FB^T.
    let grad_fa = ds.dot(&fb);
    let grad_fb = ds.t().dot(&fa);

    let mut grads = Gradients::zeros_like(model);
    backward_side(model, xa, &trace_a, &grad_fa, &mut grads)?;
    backward_side(model, xb, &trace_b, &grad_fb, &mut grads)?;

    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient (loss {loss:?}, alpha {:?}, batch {}x{})",
            model.alpha(),
            xa.nrows(),
            xa.ncols()
        )));
    }
    Ok((loss, accuracy, grads))
}

/// Backpropagate one side's output gradient into the shared parameter grads.
fn backward_side<F: Real>(
    model: &AssociationModel<F>,
    x: &ArrayView2<'_, F>,
    trace: &FTrace<F>,
    grad_f: &Array2<F>,
    grads: &mut Gradients<F>,
) -> Result<()> {
    let alpha = model.alpha();
    let one = F::one();

    // f = y / |y| per row: grad_y = (grad_f - f (f . grad_f)) / |y|.
    let mut grad_y = grad_f.clone();
    for (r, mut row) in grad_y.axis_iter_mut(Axis(0)).enumerate() {
        let f_row = trace.f.row(r);
        let dot = f_row
            .iter()
            .zip(row.iter())
            .map(|(&fv, &gv)| fv * gv)
            .fold(F::zero(), |a, b| a + b);
        let inv_norm = one / trace.norms[r];
        for (g, &fv) in row.iter_mut().zip(f_row.iter()) {
            *g = (*g - fv * dot) * inv_norm;
        }
    }

    // y = alpha x + (1 - alpha) u.
    let d_alpha = (&x.to_owned() - &trace.u)
        .iter()
        .zip(grad_y.iter())
        .map(|(&d, &g)| d * g)
        .fold(F::zero(), |a, b| a + b);
    grads.alpha_raw = grads.alpha_raw + d_alpha * alpha * (one - alpha);

    let mut grad_out = grad_y.mapv(|v| v * (one - alpha));

    // MLP blocks in reverse; the last block has no activation.
    let last = model.blocks.len() - 1;
    for bi in (0..model.blocks.len()).rev() {
        let block = &model.blocks[bi];
        let bt = &trace.g.blocks[bi];

        let grad_l = if bi == last {
            grad_out
        } else {
            &grad_out * &super::gelu_prime(&bt.l)
        };

        grads.blocks[bi].weight = &grads.blocks[bi].weight + &bt.o.t().dot(&grad_l);
        grads.blocks[bi].bias = &grads.blocks[bi].bias + &grad_l.sum_axis(Axis(0));

        let grad_o = grad_l.dot(&block.weight.t());
        grads.blocks[bi].norm_gain =
            &grads.blocks[bi].norm_gain + &(&grad_o * &bt.z).sum_axis(Axis(0));
        grads.blocks[bi].norm_bias = &grads.blocks[bi].norm_bias + &grad_o.sum_axis(Axis(0));

        // LayerNorm backward per row:
        // grad_h = inv_std * (grad_z - mean(grad_z) - z * mean(grad_z * z)).
        let grad_z = &grad_o * &block.norm_gain;
        let n_features = c::<F>(grad_z.ncols() as f64);
        let mut grad_h = Array2::zeros(grad_z.dim());
        for r in 0..grad_z.nrows() {
            let gz = grad_z.row(r);
            let z = bt.z.row(r);
            let mean_gz = gz.iter().copied().fold(F::zero(), |a, b| a + b) / n_features;
            let mean_gz_z = gz
                .iter()
                .zip(z.iter())
                .map(|(&g, &zv)| g * zv)
                .fold(F::zero(), |a, b| a + b)
                / n_features;
            let inv = bt.inv_std[r];
            for (cidx, (&g, &zv)) in gz.iter().zip(z.iter()).enumerate() {
                grad_h[[r, cidx]] = inv * (g - mean_gz - zv * mean_gz_z);
            }
        }
        grad_out = grad_h;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{info_nce_symmetric, ModelShape};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        let mut m = Array2::<f64>::zeros((n, d));
        for r in 0..n {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for cidx in 0..d {
                m[[r, cidx]] = v[cidx] / norm;
            }
        }
        m
    }

    /// 5-point central difference; truncation O(h^4) keeps the oracle noise
    /// well below the 1e-6 relative bound even for small gradients.
    fn five_point_fd(
        loss_at: &dyn Fn(&crate::model::AssociationModel<f64>) -> f64,
        model: &crate::model::AssociationModel<f64>,
        flat: &[f64],
        idx: usize,
        h: f64,
    ) -> f64 {
        let eval = |delta: f64| {
            let mut p = flat.to_vec();
            p[idx] += delta;
            let mut m = model.clone();
            m.load_flat(&p);
            loss_at(&m)
        };
        (-eval(2.0 * h) + 8.0 * eval(h) - 8.0 * eval(-h) + eval(-2.0 * h)) / (12.0 * h)
    }

    #[test]
    fn gradients_match_finite_differences_f64() {
        // D=4, batch=3 model; every parameter checked against central
        // differences of the f64 loss.
        let model32 = crate::model::AssociationModel::init(ModelShape::new(4), 17);
        let mut model = model32.to_f64();
        model.alpha_raw = 0.3; // keep alpha away from saturation

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xa = unit_batch(&mut rng, 3, 4);
        let xb = unit_batch(&mut rng, 3, 4);
        let tau = 0.2f64;

        let (_, _, grads) = backward(&model, &xa.view(), &xb.view(), tau).unwrap();
        let analytic = grads.flatten();
        let scale = analytic.iter().fold(0.0f64, |a, &g| a.max(g.abs()));

        let loss_at = move |m: &crate::model::AssociationModel<f64>| {
            let (fa, _) = m.forward_f(&xa.view()).unwrap();
            let (fb, _) = m.forward_f(&xb.view()).unwrap();
            info_nce_symmetric(&fa.view(), &fb.view(), tau).unwrap()
        };

        let flat = model.flatten();
        let mut max_rel = 0.0f64;
        for (idx, g) in analytic.iter().enumerate() {
            let fd = five_point_fd(&loss_at, &model, &flat, idx, 1e-4);
            let denom = g.abs().max(fd.abs()).max(scale * 1e-4);
            let rel = (g - fd).abs() / denom;
            max_rel = max_rel.max(rel);
            assert!(rel < 1e-6, "param {idx}: analytic {g} vs fd {fd} (rel {rel:e})");
        }
        assert!(max_rel < 1e-6, "max relative error {max_rel:e}");
    }

    #[test]
    fn alpha_one_gates_g_gradients() {
        // With alpha = 1 the g path is multiplied by (1 - alpha) = 0, so all
        // g-parameter gradients vanish; only alpha itself may move. sigmoid
        // saturates at raw = +inf, so use the analytic gate instead: force
        // alpha exactly 1 through a raw large enough that (1-alpha) is 0.0.
        let model32 = crate::model::AssociationModel::init(ModelShape::new(4), 3);
        let mut model = model32.to_f64();
        model.alpha_raw = f64::INFINITY;
        assert_eq!(model.alpha(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = Array2::<f64>::zeros((3, 4));
        for r in 0..3 {
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for cidx in 0..4 {
                m[[r, cidx]] = v[cidx] / norm;
            }
        }
        let xb = m.clone();
        let (_, _, grads) = backward(&model, &m.view(), &xb.view(), 0.1).unwrap();
        for (bi, b) in grads.blocks.iter().enumerate() {
            assert!(
                b.weight.iter().all(|&g| g == 0.0)
                    && b.bias.iter().all(|&g| g == 0.0)
                    && b.norm_gain.iter().all(|&g| g == 0.0)
                    && b.norm_bias.iter().all(|&g| g == 0.0),
                "block {bi} leaks gradient at alpha = 1"
            );
        }
    }

    #[test]
    fn repeated_batch_gradient_equals_single_evaluation() {
        // Mean reduction: evaluating the same batch twice and averaging the
        // gradients reproduces the single evaluation exactly.
        let model = crate::model::AssociationModel::init(ModelShape::new(4), 9).to_f64();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xa = unit_batch(&mut rng, 3, 4);
        let xb = unit_batch(&mut rng, 3, 4);

        let (loss1, acc1, g1) = backward(&model, &xa.view(), &xb.view(), 0.2).unwrap();
        let (loss2, acc2, g2) = backward(&model, &xa.view(), &xb.view(), 0.2).unwrap();
        assert_eq!(loss1, loss2);
        assert_eq!(acc1, acc2);
        let flat1 = g1.flatten();
        let flat2 = g2.flatten();
        for (idx, (a, b)) in flat1.iter().zip(flat2.iter()).enumerate() {
            let avg = (a + b) / 2.0;
            assert_eq!(avg, *a, "param {idx} differs across evaluations");
        }
    }
}
