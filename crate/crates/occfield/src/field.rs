//! The implicit occupancy function: hash-grid features decoded by a shallow
//! ReLU MLP with a sigmoid head, mapping a world point to occupancy in (0,1).
//!
//! Forward and reverse passes are hand-rolled so gradients w.r.t. MLP
//! weights, table entries, and the query position are exact. Surface normals
//! come from central finite differences of the forward pass, which keeps the
//! normal loss first-order in the parameters.
//!
//! # Example
//!
//! ```
//! use nalgebra::Vector3;
//! use occfield::encoder::{Aabb, HashGridConfig};
//! use occfield::field::OccupancyField;
//! use rand::SeedableRng;
//!
//! let grid = HashGridConfig {
//!     levels: 4,
//!     table_size: 1 << 10,
//!     max_resolution: 32,
//!     ..HashGridConfig::with_bounds(Aabb::new([-1.0; 3], [1.0; 3]))
//! };
//! let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
//! let field = OccupancyField::init(grid, &mut rng)?;
//! // Untrained occupancy is a valid probability anywhere in bounds.
//! let f = field.evaluate(&Vector3::new(0.2, -0.3, 0.5))?;
//! assert!(f > 0.0 && f < 1.0);
//! # Ok::<(), occfield::Error>(())
//! ```

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, HashGridConfig, HashGridTables, SparseTableGrads};
use crate::error::Result;

/// Fixed gain between the decoder's raw output and the sigmoid logit.
///
/// ADAM moves each parameter at most `lr` per step regardless of gradient
/// magnitude, so with `lr` fixed at 1e-3 the logit can only change by a few
/// hundredths per iteration through the parameters alone. The structural
/// gain multiplies the logit's rate of change without touching the
/// optimizer, letting free space and surfaces saturate within the first
/// tens of iterations — early sharpness the joint pose refinement depends
/// on.
pub const LOGIT_GAIN: f64 = 16.0;

/// Step used for finite-difference surface normals (meters).
pub const DEFAULT_NORMAL_STEP: f64 = 1e-2;
/// Gradient magnitude below which a normal is considered degenerate.
pub const DEFAULT_NORMAL_GRAD_MIN: f64 = 1e-8;

/// Layer widths of the decoder including input and output,
/// e.g. `[59, 64, 64, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    pub dims: Vec<usize>,
}

impl MlpShape {
    /// Two hidden ReLU layers of 64 units on top of the encoder output.
    pub fn shallow(input_dim: usize) -> Self {
        MlpShape {
            dims: vec![input_dim, 64, 64, 1],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_layers())
            .map(|i| self.dims[i + 1] * self.dims[i] + self.dims[i + 1])
            .sum()
    }

    /// Offset of layer `i`'s weight block in the flat parameter vector;
    /// biases follow the weights of each layer.
    fn layer_offset(&self, layer: usize) -> usize {
        (0..layer)
            .map(|i| self.dims[i + 1] * self.dims[i] + self.dims[i + 1])
            .sum()
    }
}

/// Shallow decoder MLP with parameters packed in one flat vector
/// (per layer: row-major weights, then biases).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub shape: MlpShape,
    pub params: Vec<f64>,
}

impl MlpParams {
    /// Symmetric uniform fan-in init for every layer. A fresh field still
    /// evaluates to about 0.5 everywhere because the hash-grid features
    /// start near zero; keeping the decoder at full scale lets gradient
    /// reach the feature tables from the first iteration.
    pub fn init(shape: MlpShape, rng: &mut impl Rng) -> Self {
        let mut params = vec![0.0; shape.param_count()];
        for layer in 0..shape.num_layers() {
            let (fan_in, fan_out) = (shape.dims[layer], shape.dims[layer + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let off = shape.layer_offset(layer);
            for w in params[off..off + fan_out * fan_in].iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
        }
        MlpParams { shape, params }
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intermediate activations kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct EvalCache {
    /// Encoder output (MLP input).
    pub feature: Vec<f64>,
    /// Post-activation values per hidden layer.
    pub hidden: Vec<Vec<f64>>,
    pub logit: f64,
    pub occupancy: f64,
}

/// Encoder + decoder: the complete implicit occupancy function.
#[derive(Clone, Debug)]
pub struct OccupancyField {
    pub grid: HashGridConfig,
    pub tables: HashGridTables,
    pub mlp: MlpParams,
}

impl OccupancyField {
    pub fn init(grid: HashGridConfig, rng: &mut impl Rng) -> Result<Self> {
        grid.validate()?;
        let tables = HashGridTables::init(&grid, rng);
        let mlp = MlpParams::init(MlpShape::shallow(grid.output_dim()), rng);
        Ok(OccupancyField { grid, tables, mlp })
    }

    /// Occupancy in (0,1) at a world point.
    pub fn evaluate(&self, p: &Vector3<f64>) -> Result<f64> {
        Ok(self.forward_cached(p)?.1.occupancy)
    }

    /// Forward pass retaining activations for [`Self::backward`].
    pub fn forward_cached(&self, p: &Vector3<f64>) -> Result<(f64, EvalCache)> {
        let feature = encoder::encode(p, &self.tables, &self.grid)?.values;
        let shape = &self.mlp.shape;
        let mut hidden = Vec::with_capacity(shape.num_layers() - 1);
        let mut x: &[f64] = &feature;
        let mut logit = 0.0;
        for layer in 0..shape.num_layers() {
            let (fan_in, fan_out) = (shape.dims[layer], shape.dims[layer + 1]);
            let off = shape.layer_offset(layer);
            let w = &self.mlp.params[off..off + fan_out * fan_in];
            let b = &self.mlp.params[off + fan_out * fan_in..off + fan_out * fan_in + fan_out];
            let last = layer + 1 == shape.num_layers();
            let mut out = vec![0.0; fan_out];
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = b[o];
                for i in 0..fan_in {
                    acc += row[i] * x[i];
                }
                out[o] = if last { acc } else { acc.max(0.0) };
            }
            if last {
                logit = LOGIT_GAIN * out[0];
            } else {
                hidden.push(out);
                x = hidden.last().unwrap();
            }
        }
        let occupancy = sigmoid(logit);
        Ok((
            occupancy,
            EvalCache {
                feature,
                hidden,
                logit,
                occupancy,
            },
        ))
    }

    /// Reverse pass. `upstream` is d(loss)/d(occupancy). Accumulates MLP
    /// gradients into `mlp_grads` (flat, same layout as params) and table
    /// gradients into `table_grads`; returns d(loss)/d(position).
    pub fn backward(
        &self,
        p: &Vector3<f64>,
        cache: &EvalCache,
        upstream: f64,
        mlp_grads: &mut [f64],
        table_grads: &mut SparseTableGrads,
    ) -> Result<Vector3<f64>> {
        let shape = &self.mlp.shape;
        // sigmoid head and logit gain
        let mut delta = vec![upstream * cache.occupancy * (1.0 - cache.occupancy) * LOGIT_GAIN];
        for layer in (0..shape.num_layers()).rev() {
            let (fan_in, fan_out) = (shape.dims[layer], shape.dims[layer + 1]);
            let off = shape.layer_offset(layer);
            let w = &self.mlp.params[off..off + fan_out * fan_in];
            let input: &[f64] = if layer == 0 {
                &cache.feature
            } else {
                &cache.hidden[layer - 1]
            };
            // parameter gradients
            {
                let gw = &mut mlp_grads[off..off + fan_out * fan_in + fan_out];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for i in 0..fan_in {
                            gw[o * fan_in + i] += d * input[i];
                        }
                    }
                    gw[fan_out * fan_in + o] += d;
                }
            }
            // propagate to the layer input
            let mut next = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    for i in 0..fan_in {
                        next[i] += d * row[i];
                    }
                }
            }
            if layer > 0 {
                // ReLU mask of the previous hidden layer
                let act = &cache.hidden[layer - 1];
                for i in 0..fan_in {
                    if act[i] <= 0.0 {
                        next[i] = 0.0;
                    }
                }
            }
            delta = next;
        }
        encoder::encode_backward(p, &self.grid, &self.tables, &delta, table_grads)
    }

    /// Occupancy gradient estimated by central finite differences with the
    /// given step (meters).
    pub fn fd_gradient(&self, p: &Vector3<f64>, step: f64) -> Result<Vector3<f64>> {
        let mut g = Vector3::zeros();
        for d in 0..3 {
            let mut pp = *p;
            pp[d] += step;
            let mut pm = *p;
            pm[d] -= step;
            g[d] = (self.evaluate(&pp)? - self.evaluate(&pm)?) / (2.0 * step);
        }
        Ok(g)
    }

    /// Unit surface normal, or `None` when the gradient magnitude is below
    /// `grad_min` (degenerate: the caller skips the normal loss there).
    pub fn normal(&self, p: &Vector3<f64>, step: f64, grad_min: f64) -> Result<Option<Vector3<f64>>> {
        let g = self.fd_gradient(p, step)?;
        let n = g.norm();
        if n < grad_min {
            return Ok(None);
        }
        Ok(Some(g / n))
    }

    pub fn table_param_count(&self) -> usize {
        self.grid.total_table_params()
    }
}

/// Clamp an occupancy prediction away from 0 and 1 before taking logs.
pub fn clamp_pred(pred: f64, eps: f64) -> f64 {
    pred.clamp(eps, 1.0 - eps)
}

impl std::fmt::Display for OccupancyField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "OccupancyField({} levels, {} table params, mlp {:?})",
            self.grid.levels,
            self.table_param_count(),
            self.mlp.shape.dims
        )
    }
}
