//! The association transform: a residual MLP over unit-norm embeddings with
//! a learned mixing scalar, `f(x) = normalize(alpha * x + (1 - alpha) * g(x))`.
//!
//! All math is generic over `f32`/`f64`; training runs in 32-bit while tests
//! drive the same code in 64-bit against independent oracles.

mod backward;
mod checkpoint;
mod loss;
mod optim;
mod train;

pub use backward::{backward, BlockGrads, Gradients};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use loss::{info_nce_symmetric, similarity_matrix, training_accuracy};
pub use optim::{cosine_lr, AdamW};
pub use train::{train, train_resumable, EpochMetrics, RowGather, TrainConfig, TrainOutcome};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Float scalar usable by the model math.
pub trait Real: ndarray::NdFloat + num_traits::FromPrimitive {}
impl<T: ndarray::NdFloat + num_traits::FromPrimitive> Real for T {}

pub(crate) fn c<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("constant fits the float type")
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture knobs; `hidden = dim * hidden_multiplier`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub dim: usize,
    pub n_blocks: usize,
    pub hidden_multiplier: usize,
}

impl ModelShape {
    pub fn new(dim: usize) -> Self {
        ModelShape {
            dim,
            n_blocks: 4,
            hidden_multiplier: 1,
        }
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.hidden_multiplier
    }

    /// Input/output width of block `b` in a stack of `n_blocks`.
    fn block_dims(&self, b: usize) -> (usize, usize) {
        let input = if b == 0 { self.dim } else { self.hidden() };
        let output = if b + 1 == self.n_blocks { self.dim } else { self.hidden() };
        (input, output)
    }
}

/// One MLP block: feature normalization, then an affine map. All blocks but
/// the last are followed by GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub norm_gain: Array1<F>,
    pub norm_bias: Array1<F>,
    pub weight: Array2<F>, // input x output
    pub bias: Array1<F>,
}

/// The residual association transform with its mixing scalar stored via
/// logistic reparameterization, so `alpha = sigmoid(alpha_raw)` stays in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationModel<F = f32> {
    pub shape: ModelShape,
    pub blocks: Vec<Block<F>>,
    pub alpha_raw: F,
}

impl AssociationModel<f32> {
    /// Seeded initialization: Kaiming-style uniform fan-in weights, zero
    /// biases, unit normalization gain, `alpha_raw = 0` (alpha = 0.5).
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        assert!(shape.n_blocks >= 1 && shape.dim >= 1 && shape.hidden_multiplier >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..shape.n_blocks)
            .map(|b| {
                let (fan_in, fan_out) = shape.block_dims(b);
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                let weight = Array2::from_shape_fn((fan_in, fan_out), |_| {
                    rng.gen_range(-bound..bound)
                });
                Block {
                    norm_gain: Array1::ones(fan_in),
                    norm_bias: Array1::zeros(fan_in),
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        AssociationModel {
            shape,
            blocks,
            alpha_raw: 0.0,
        }
    }

    /// Cast parameters to f64 for oracle-precision evaluation.
    pub fn to_f64(&self) -> AssociationModel<f64> {
        AssociationModel {
            shape: self.shape,
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    norm_gain: b.norm_gain.mapv(|v| v as f64),
                    norm_bias: b.norm_bias.mapv(|v| v as f64),
                    weight: b.weight.mapv(|v| v as f64),
                    bias: b.bias.mapv(|v| v as f64),
                })
                .collect(),
            alpha_raw: self.alpha_raw as f64,
        }
    }
}

impl<F: Real> AssociationModel<F> {
    pub fn alpha(&self) -> F {
        sigmoid(self.alpha_raw)
    }

    /// Total number of scalar parameters, alpha included.
    pub fn n_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.norm_gain.len() + b.norm_bias.len() + b.weight.len() + b.bias.len())
            .sum::<usize>()
            + 1
    }

    /// Flatten parameters in a fixed order: per block gain, bias, weight
    /// (row-major), affine bias; then `alpha_raw` last.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.n_params());
        for b in &self.blocks {
            out.extend(b.norm_gain.iter().copied());
            out.extend(b.norm_bias.iter().copied());
            out.extend(b.weight.iter().copied());
            out.extend(b.bias.iter().copied());
        }
        out.push(self.alpha_raw);
        out
    }

    /// Inverse of [`AssociationModel::flatten`].
    pub fn load_flat(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.n_params());
        let mut cursor = 0usize;
        for b in &mut self.blocks {
            for dst in b.norm_gain.iter_mut() {
                *dst = flat[cursor];
                cursor += 1;
            }
            for dst in b.norm_bias.iter_mut() {
                *dst = flat[cursor];
                cursor += 1;
            }
            for dst in b.weight.iter_mut() {
                *dst = flat[cursor];
                cursor += 1;
            }
            for dst in b.bias.iter_mut() {
                *dst = flat[cursor];
                cursor += 1;
            }
        }
        self.alpha_raw = flat[cursor];
    }

    /// True for parameters that receive decoupled weight decay (the affine
    /// weight matrices only).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.n_params());
        for b in &self.blocks {
            mask.extend(std::iter::repeat(false).take(b.norm_gain.len() + b.norm_bias.len()));
            mask.extend(std::iter::repeat(true).take(b.weight.len()));
            mask.extend(std::iter::repeat(false).take(b.bias.len()));
        }
        mask.push(false); // alpha_raw
        mask
    }

    /// Flat index of `alpha_raw`.
    pub fn alpha_index(&self) -> usize {
        self.n_params() - 1
    }

    /// MLP stack without the residual mixing; returns the output and the
    /// per-block trace needed for backprop.
    pub fn forward_g(&self, x: &ArrayView2<'_, F>) -> Result<(Array2<F>, GTrace<F>)> {
        if x.ncols() != self.shape.dim {
            return Err(Error::Config(format!(
                "input dim {} does not match model dim {}",
                x.ncols(),
                self.shape.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite model input".into()));
        }
        let mut h = x.to_owned();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let last = self.blocks.len() - 1;
        for (bi, block) in self.blocks.iter().enumerate() {
            let (z, inv_std) = layer_norm(&h);
            let o = &z * &block.norm_gain + &block.norm_bias;
            let l = o.dot(&block.weight) + &block.bias;
            h = if bi == last { l.clone() } else { gelu(&l) };
            blocks.push(BlockTrace { z, inv_std, o, l });
        }
        Ok((h.clone(), GTrace { blocks }))
    }

    /// Full transform of Eq-style mixing: unit-norm output rows.
    pub fn forward_f(&self, x: &ArrayView2<'_, F>) -> Result<(Array2<F>, FTrace<F>)> {
        let (u, g_trace) = self.forward_g(x)?;
        let alpha = self.alpha();
        let one = F::one();
        let y = x.mapv(|v| v * alpha) + u.mapv(|v| v * (one - alpha));
        let mut f = y.clone();
        let mut norms = Array1::zeros(y.nrows());
        for (r, mut row) in f.axis_iter_mut(Axis(0)).enumerate() {
            let norm = row.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b).sqrt();
            if norm <= F::zero() || !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "degenerate cancellation: row {r} of alpha*x + (1-alpha)*g(x) has zero norm"
                )));
            }
            norms[r] = norm;
            row.mapv_inplace(|v| v / norm);
        }
        Ok((
            f.clone(),
            FTrace {
                g: g_trace,
                u,
                norms,
                f,
            },
        ))
    }

    /// Transform rows in fixed-size batches, returning only the outputs.
    pub fn transform(&self, x: &ArrayView2<'_, F>, batch: usize) -> Result<Array2<F>> {
        let mut out = Array2::zeros((x.nrows(), self.shape.dim));
        let mut start = 0usize;
        while start < x.nrows() {
            let end = (start + batch).min(x.nrows());
            let (f, _) = self.forward_f(&x.slice(ndarray::s![start..end, ..]))?;
            out.slice_mut(ndarray::s![start..end, ..]).assign(&f);
            start = end;
        }
        Ok(out)
    }
}

/// Per-block forward cache: normalized input `z`, per-row `1/std`,
/// post-normalization affine input `o`, and pre-activation `l`.
#[derive(Debug, Clone)]
pub struct BlockTrace<F> {
    pub z: Array2<F>,
    pub inv_std: Array1<F>,
    pub o: Array2<F>,
    pub l: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct GTrace<F> {
    pub blocks: Vec<BlockTrace<F>>,
}

/// Forward cache of the full transform for one batch side.
#[derive(Debug, Clone)]
pub struct FTrace<F> {
    pub g: GTrace<F>,
    /// g(x), pre-mixing.
    pub u: Array2<F>,
    /// Per-row norm of the mixed vector y.
    pub norms: Array1<F>,
    /// Normalized output.
    pub f: Array2<F>,
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Row-wise feature normalization: `(h - mean) / sqrt(var + eps)`.
/// Returns the normalized matrix and per-row `1/sqrt(var + eps)`.
pub(crate) fn layer_norm<F: Real>(h: &Array2<F>) -> (Array2<F>, Array1<F>) {
    let n_features = c::<F>(h.ncols() as f64);
    let eps = c::<F>(LAYER_NORM_EPS);
    let mut z = h.clone();
    let mut inv_std = Array1::zeros(h.nrows());
    for (r, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
        let mean = row.iter().copied().fold(F::zero(), |a, b| a + b) / n_features;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .fold(F::zero(), |a, b| a + b)
            / n_features;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    (z, inv_std)
}

const GELU_COEFF: f64 = 0.044715;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub(crate) fn gelu<F: Real>(l: &Array2<F>) -> Array2<F> {
    let k = c::<F>((2.0 / std::f64::consts::PI).sqrt());
    let a = c::<F>(GELU_COEFF);
    let half = c::<F>(0.5);
    l.mapv(|x| half * x * (F::one() + (k * (x + a * x * x * x)).tanh()))
}

/// Derivative of the tanh-approximation GELU.
pub(crate) fn gelu_prime<F: Real>(l: &Array2<F>) -> Array2<F> {
    let k = c::<F>((2.0 / std::f64::consts::PI).sqrt());
    let a = c::<F>(GELU_COEFF);
    let half = c::<F>(0.5);
    let three = c::<F>(3.0);
    l.mapv(|x| {
        let t = (k * (x + a * x * x * x)).tanh();
        let dt = k * (F::one() + three * a * x * x);
        half * (F::one() + t) + half * x * (F::one() - t * t) * dt
    })
}
