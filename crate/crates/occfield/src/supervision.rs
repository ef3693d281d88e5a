//! Direct occlusion-aware 3D supervision.
//!
//! Every LiDAR return splits its ray at the measured depth: samples in front
//! of the hit are supervised as free with weight 1, samples behind it as
//! occupied with a weight that decays with the probability that the ray is
//! still inside matter. That probability comes from a log-normal prior on
//! the "generalized thickness" an occupied region presents to a ray. A
//! normal-consistency term at the measured surface point regularizes the
//! field toward smooth surfaces.
//!
//! # Example
//!
//! ```
//! use occfield::supervision::ThicknessPrior;
//!
//! let prior = ThicknessPrior::default();
//! // A point exactly at the hit is occupied with certainty; the weight
//! // decays monotonically with penetration depth.
//! assert_eq!(prior.p_occ(0.0), 1.0);
//! assert!(prior.p_occ(0.05) >= prior.p_occ(0.10));
//! assert!(prior.p_occ(0.5) < 0.1);
//! ```

use nalgebra::{Vector3, Vector6};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::encoder::SparseTableGrads;
use crate::error::{Error, Result};
use crate::field::OccupancyField;
use crate::geometry::{transform_point, PoseDelta, PoseSE3, TwistPointJacobian};

/// Prediction clamp applied before logarithms.
pub const PRED_CLAMP: f64 = 1e-7;

/// Standard normal CDF.
fn phi(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Log-normal prior on the generalized thickness of occupied regions.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ThicknessPrior {
    /// Mean of ln(thickness in meters).
    pub mu: f64,
    /// Std of ln(thickness); must be positive.
    pub sigma: f64,
}

impl Default for ThicknessPrior {
    /// Indoor wall/furniture scale: median thickness 0.1 m.
    fn default() -> Self {
        ThicknessPrior {
            mu: (0.1f64).ln(),
            sigma: 0.8,
        }
    }
}

impl ThicknessPrior {
    /// Probability that a point `delta` meters behind the measured surface
    /// is still occupied: `1 - F_B(delta)` with `F_B` the log-normal CDF.
    /// Exactly 1 at `delta = 0`, non-increasing, tends to 0.
    pub fn p_occ(&self, delta: f64) -> f64 {
        debug_assert!(delta >= 0.0, "p_occ expects a depth at or behind the hit");
        if delta <= 0.0 {
            return 1.0;
        }
        1.0 - phi((delta.ln() - self.mu) / self.sigma)
    }
}

/// Which per-sample data term the trainer optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Occlusion-aware direct BCE weighted by the thickness prior.
    Direct,
    /// Plain BCE: the no-thickness-prior ablation.
    SimpleBce,
    /// L2 on volume-rendered depth: the rendering-baseline ablation.
    DepthRender,
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(LossMode::Direct),
            "simple-bce" => Ok(LossMode::SimpleBce),
            "depth-render" => Ok(LossMode::DepthRender),
            other => Err(Error::InvalidInput(format!(
                "unknown loss mode '{other}' (expected direct | simple-bce | depth-render)"
            ))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Direct => "direct",
            LossMode::SimpleBce => "simple-bce",
            LossMode::DepthRender => "depth-render",
        })
    }
}

/// Per-point direct loss and its derivative w.r.t. the prediction.
///
/// Free side (`z < z_i`): `-log(1 - f)`. Occupied side (`z >= z_i`):
/// `-P_occ(z - z_i) * log(f)`, with `P_occ == 1` in simple-BCE mode.
pub fn direct_loss(
    pred: f64,
    z: f64,
    z_i: f64,
    prior: &ThicknessPrior,
    simple_bce: bool,
) -> (f64, f64) {
    let clamped = pred.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
    let inside_clamp = pred > PRED_CLAMP && pred < 1.0 - PRED_CLAMP;
    if z < z_i {
        let loss = -(1.0 - clamped).ln();
        let grad = if inside_clamp { 1.0 / (1.0 - clamped) } else { 0.0 };
        (loss, grad)
    } else {
        let w = if simple_bce { 1.0 } else { prior.p_occ(z - z_i) };
        let loss = -w * clamped.ln();
        let grad = if inside_clamp { -w / clamped } else { 0.0 };
        (loss, grad)
    }
}

/// Normal-consistency loss `|1 - n_a . n_b|` between two unit vectors.
pub fn normal_loss(n_a: &Vector3<f64>, n_b: &Vector3<f64>) -> Result<f64> {
    for n in [n_a, n_b] {
        if (n.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "normal_loss expects unit vectors, got norm {}",
                n.norm()
            )));
        }
    }
    Ok((1.0 - n_a.dot(n_b)).abs())
}

/// Draw `m` near-surface depths from `N(z_i, sigma_s^2)` and `k` stratified
/// depths, all clamped to `[r_min, z_i + 3 sigma_s]`.
pub fn sample_ray(
    z_i: f64,
    m: usize,
    k: usize,
    sigma_s: f64,
    r_min: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if !(z_i > r_min) {
        return Err(Error::DegenerateRay);
    }
    let hi = z_i + 3.0 * sigma_s;
    let mut depths = Vec::with_capacity(m + k);
    if sigma_s > 0.0 {
        let normal = Normal::new(z_i, sigma_s)
            .map_err(|e| Error::InvalidInput(format!("bad sampling sigma: {e}")))?;
        for _ in 0..m {
            depths.push(normal.sample(rng).clamp(r_min, hi));
        }
    } else {
        depths.extend(std::iter::repeat(z_i).take(m));
    }
    // one uniform draw per equal sub-interval of [r_min, hi]
    let span = hi - r_min;
    for j in 0..k {
        let lo = r_min + span * j as f64 / k as f64;
        let up = r_min + span * (j + 1) as f64 / k as f64;
        depths.push(rng.gen_range(lo..up));
    }
    Ok(depths)
}

/// L2 depth-rendering loss on one ray, from pre-evaluated occupancies at
/// sorted sample depths. Rendered depth uses occupancy-based volume
/// rendering weights `w_j = o_j * prod_{l<j} (1 - o_l)`.
///
/// Returns the loss and `d loss / d o_j`.
pub fn depth_render_loss(occs: &[f64], depths: &[f64], z_i: f64) -> Result<(f64, Vec<f64>)> {
    if occs.len() != depths.len() || occs.is_empty() {
        return Err(Error::InvalidInput("mismatched or empty render samples".into()));
    }
    if depths.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("render samples must be sorted ascending".into()));
    }
    let n = occs.len();
    // transmittance before each sample
    let mut trans = vec![0.0; n];
    let mut t = 1.0;
    let mut rendered = 0.0;
    for j in 0..n {
        trans[j] = t;
        rendered += occs[j] * t * depths[j];
        t *= 1.0 - occs[j];
    }
    let residual = rendered - z_i;
    let loss = residual * residual;
    // suffix[j] = sum_{k>j} z_k o_k prod_{j<l<k} (1-o_l)
    let mut suffix = vec![0.0; n];
    for j in (0..n.saturating_sub(1)).rev() {
        suffix[j] = depths[j + 1] * occs[j + 1] + (1.0 - occs[j + 1]) * suffix[j + 1];
    }
    let grads = (0..n)
        .map(|j| 2.0 * residual * trans[j] * (depths[j] - suffix[j]))
        .collect();
    Ok((loss, grads))
}

/// One supervised ray in a training batch.
#[derive(Clone, Debug)]
pub struct BatchRay {
    /// Index into the per-frame pose arrays.
    pub frame: usize,
    /// Measured point in sensor coordinates.
    pub p_local: Vector3<f64>,
    /// m + k sampled depths along the ray.
    pub depths: Vec<f64>,
    /// World-frame offset for the normal-consistency pair.
    pub normal_eps: Vector3<f64>,
}

#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub rays: Vec<BatchRay>,
    pub m: usize,
    pub k: usize,
}

/// A frame's refineable pose: frozen initial pose, current twist, and the
/// pieces needed to chain world-point gradients into the twist.
pub struct FramePose {
    pub initial: PoseSE3,
    pub current: PoseSE3,
    jacobian: TwistPointJacobian,
}

impl FramePose {
    pub fn new(initial: PoseSE3, twist: &PoseDelta) -> Result<Self> {
        let current = crate::geometry::apply_delta(&initial, twist)?;
        Ok(FramePose {
            initial,
            current,
            jacobian: TwistPointJacobian::new(twist),
        })
    }

    /// d(loss)/d(twist) contribution for a sensor-frame point with world
    /// position gradient `upstream`.
    fn chain(&self, p_local: &Vector3<f64>, upstream: &Vector3<f64>) -> Vector6<f64> {
        let q = transform_point(&self.initial, p_local);
        self.jacobian.chain(&q, upstream)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossParams {
    pub lambda_d: f64,
    pub lambda_n: f64,
    pub prior: ThicknessPrior,
    pub mode: LossMode,
    /// Finite-difference step for surface normals (meters).
    pub normal_step: f64,
    /// Gradient magnitude below which the normal loss is skipped.
    pub normal_grad_min: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            lambda_d: 1.0,
            lambda_n: 0.4,
            prior: ThicknessPrior::default(),
            mode: LossMode::Direct,
            normal_step: crate::field::DEFAULT_NORMAL_STEP,
            normal_grad_min: crate::field::DEFAULT_NORMAL_GRAD_MIN,
        }
    }
}

/// Gradient fragments produced by one batch.
#[derive(Clone, Debug)]
pub struct LossGrads {
    /// Flat, same layout as `MlpParams::params`.
    pub mlp: Vec<f64>,
    pub tables: SparseTableGrads,
    /// Per-frame twist gradients, indexed like the pose arrays.
    pub twists: Vec<Vector6<f64>>,
}

impl LossGrads {
    pub fn zeros(field: &OccupancyField, n_frames: usize) -> Self {
        LossGrads {
            mlp: field.mlp.zeros_like(),
            tables: SparseTableGrads::default(),
            twists: vec![Vector6::zeros(); n_frames],
        }
    }

    pub fn merge(&mut self, other: &LossGrads) {
        for (a, b) in self.mlp.iter_mut().zip(other.mlp.iter()) {
            *a += *b;
        }
        self.tables.entries.extend_from_slice(&other.tables.entries);
        self.tables.values.extend_from_slice(&other.tables.values);
        for (a, b) in self.twists.iter_mut().zip(other.twists.iter()) {
            *a += *b;
        }
    }
}

/// The combined objective over a batch: mean over rays of the per-sample
/// data term plus the surface normal term, with exact gradients for the MLP,
/// the hash tables, and every frame twist.
pub fn total_loss(
    field: &OccupancyField,
    frame_poses: &[FramePose],
    batch: &SampleBatch,
    params: &LossParams,
) -> Result<(f64, LossGrads)> {
    if batch.rays.is_empty() {
        return Err(Error::EmptyInput("empty sample batch".into()));
    }
    let mut grads = LossGrads::zeros(field, frame_poses.len());
    let mut loss = 0.0;
    for ray in &batch.rays {
        loss += ray_loss(field, frame_poses, ray, batch, params, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Loss contribution of a single ray, accumulated into `grads`. Exposed at
/// this granularity so the trainer can evaluate rays in deterministic
/// chunks.
pub fn ray_loss(
    field: &OccupancyField,
    frame_poses: &[FramePose],
    ray: &BatchRay,
    batch: &SampleBatch,
    params: &LossParams,
    grads: &mut LossGrads,
) -> Result<f64> {
    let n_rays = batch.rays.len() as f64;
    let n_samples = (batch.m + batch.k) as f64;
    let fp = &frame_poses[ray.frame];
    let z_i = ray.p_local.norm();
    if z_i <= 0.0 {
        return Err(Error::DegenerateRay);
    }
    let dir_local = ray.p_local / z_i;
    let mut loss = 0.0;

    match params.mode {
        LossMode::Direct | LossMode::SimpleBce => {
            let simple = params.mode == LossMode::SimpleBce;
            let coeff = params.lambda_d / (n_rays * n_samples);
            for &z in &ray.depths {
                let p_loc = dir_local * z;
                let p_world = transform_point(&fp.current, &p_loc);
                let (pred, cache) = field.forward_cached(&p_world)?;
                let (l, dl_dpred) = direct_loss(pred, z, z_i, &params.prior, simple);
                loss += coeff * l;
                if params.lambda_d == 0.0 {
                    continue;
                }
                let pos_grad = field.backward(
                    &p_world,
                    &cache,
                    coeff * dl_dpred,
                    &mut grads.mlp,
                    &mut grads.tables,
                )?;
                grads.twists[ray.frame] += fp.chain(&p_loc, &pos_grad);
            }
        }
        LossMode::DepthRender => {
            let coeff = params.lambda_d / n_rays;
            let mut depths = ray.depths.clone();
            depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut caches = Vec::with_capacity(depths.len());
            let mut occs = Vec::with_capacity(depths.len());
            for &z in &depths {
                let p_loc = dir_local * z;
                let p_world = transform_point(&fp.current, &p_loc);
                let (pred, cache) = field.forward_cached(&p_world)?;
                occs.push(pred);
                caches.push((p_loc, p_world, cache));
            }
            let (l, dl_do) = depth_render_loss(&occs, &depths, z_i)?;
            loss += coeff * l;
            if params.lambda_d != 0.0 {
                for (j, (p_loc, p_world, cache)) in caches.iter().enumerate() {
                    let pos_grad = field.backward(
                        p_world,
                        cache,
                        coeff * dl_do[j],
                        &mut grads.mlp,
                        &mut grads.tables,
                    )?;
                    grads.twists[ray.frame] += fp.chain(p_loc, &pos_grad);
                }
            }
        }
    }

    if params.lambda_n > 0.0 {
        let coeff = params.lambda_n / n_rays;
        loss += coeff
            * normal_pair_loss(
                field,
                fp,
                ray.frame,
                &ray.p_local,
                &ray.normal_eps,
                params,
                coeff,
                grads,
            )?;
    }
    Ok(loss)
}

/// Normal-consistency term at the measured surface point, with gradients
/// flowing through all twelve finite-difference evaluations. Returns the
/// unscaled loss value; gradient fragments are pre-scaled by `coeff`.
#[allow(clippy::too_many_arguments)]
fn normal_pair_loss(
    field: &OccupancyField,
    fp: &FramePose,
    frame: usize,
    p_local: &Vector3<f64>,
    normal_eps: &Vector3<f64>,
    params: &LossParams,
    coeff: f64,
    grads: &mut LossGrads,
) -> Result<f64> {
    let step = params.normal_step;
    let p_surf = transform_point(&fp.current, p_local);
    let points = [p_surf, p_surf + normal_eps];

    // forward: the six perturbed evaluations per normal
    let mut caches = Vec::with_capacity(12);
    let mut gradients = [Vector3::zeros(), Vector3::zeros()];
    for (which, base) in points.iter().enumerate() {
        for d in 0..3 {
            let mut pp = *base;
            pp[d] += step;
            let mut pm = *base;
            pm[d] -= step;
            let (vp, cp) = field.forward_cached(&pp)?;
            let (vm, cm) = field.forward_cached(&pm)?;
            gradients[which][d] = (vp - vm) / (2.0 * step);
            caches.push((pp, cp));
            caches.push((pm, cm));
        }
    }
    let norms = [gradients[0].norm(), gradients[1].norm()];
    if norms[0] < params.normal_grad_min || norms[1] < params.normal_grad_min {
        return Ok(0.0); // degenerate normal: skip the term
    }
    let n_a = gradients[0] / norms[0];
    let n_b = gradients[1] / norms[1];
    let one_minus = 1.0 - n_a.dot(&n_b);
    let loss = one_minus.abs();
    let sign = if one_minus >= 0.0 { 1.0 } else { -1.0 };

    // dL/dg for each FD gradient: project out the normal direction
    let dl_dg = [
        (-sign / norms[0]) * (n_b - n_a * n_a.dot(&n_b)),
        (-sign / norms[1]) * (n_a - n_b * n_b.dot(&n_a)),
    ];
    let mut pos_total = Vector3::zeros();
    for which in 0..2 {
        for d in 0..3 {
            let up = coeff * dl_dg[which][d] / (2.0 * step);
            for (sgn, idx) in [(1.0, which * 6 + 2 * d), (-1.0, which * 6 + 2 * d + 1)] {
                let (pt, cache) = &caches[idx];
                let pos = field.backward(pt, cache, sgn * up, &mut grads.mlp, &mut grads.tables)?;
                pos_total += pos;
            }
        }
    }
    // all twelve points ride rigidly on the measured surface point
    grads.twists[frame] += fp.chain(p_local, &pos_total);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Aabb, HashGridConfig, HashGridTables};
    use crate::field::{MlpParams, MlpShape};
    use crate::geometry::se3_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn default_prior() -> ThicknessPrior {
        ThicknessPrior::default()
    }

    /// Numerical CDF oracle: integrate the log-normal density with Simpson's
    /// rule, independent of the erf-based implementation.
    fn lognormal_cdf_oracle(x: f64, mu: f64, sigma: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let n = 20_000;
        let lo = 1e-12;
        let h = (x - lo) / n as f64;
        let pdf = |t: f64| {
            let z = (t.ln() - mu) / sigma;
            (-0.5 * z * z).exp() / (t * sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut acc = pdf(lo) + pdf(x);
        for i in 1..n {
            let t = lo + i as f64 * h;
            acc += pdf(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn p_occ_is_one_at_zero() {
        assert_eq!(default_prior().p_occ(0.0), 1.0);
    }

    #[test]
    fn p_occ_half_at_median() {
        let prior = default_prior();
        assert!((prior.p_occ(prior.mu.exp()) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn p_occ_matches_integration_oracle() {
        let prior = ThicknessPrior {
            mu: (0.1f64).ln(),
            sigma: 0.8,
        };
        let expect = 1.0 - lognormal_cdf_oracle(0.2, prior.mu, prior.sigma);
        assert!((prior.p_occ(0.2) - expect).abs() < 1e-6);
    }

    #[test]
    fn p_occ_monotone_non_increasing() {
        let prior = default_prior();
        let mut prev = prior.p_occ(0.0);
        for i in 1..=1000 {
            let d = i as f64 * 0.005;
            let cur = prior.p_occ(d);
            assert!(cur <= prev + 1e-15, "p_occ increased at {d}");
            assert!((0.0..=1.0).contains(&cur));
            prev = cur;
        }
        assert!(prior.p_occ(5.0) < 0.01);
    }

    #[test]
    fn direct_loss_examples() {
        let prior = default_prior();
        // free sample at pred 0.5
        let (l, _) = direct_loss(0.5, 1.0, 2.0, &prior, false);
        assert!((l - 0.693147).abs() < 1e-6);
        // at the hit with pred -> 1 the loss vanishes
        let (l, _) = direct_loss(1.0 - 1e-9, 2.0, 2.0, &prior, false);
        assert!(l < 1e-6);
        // one median thickness behind the hit at pred 0.5
        let (l, _) = direct_loss(0.5, 2.0 + prior.mu.exp(), 2.0, &prior, false);
        assert!((l - 0.346574).abs() < 1e-6);
    }

    #[test]
    fn direct_loss_reduces_to_simple_bce() {
        let prior = default_prior();
        // free side: identical regardless of the prior
        let a = direct_loss(0.37, 1.0, 2.0, &prior, false);
        let b = direct_loss(0.37, 1.0, 2.0, &prior, true);
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
        // occupied side at the hit where p_occ is exactly 1
        let a = direct_loss(0.37, 2.0, 2.0, &prior, false);
        let b = direct_loss(0.37, 2.0, 2.0, &prior, true);
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }

    #[test]
    fn direct_loss_monotonicity_in_pred() {
        let prior = default_prior();
        let h = 1e-6;
        for pred in [0.1, 0.4, 0.8] {
            // free branch: increasing in pred
            let up = direct_loss(pred + h, 1.0, 2.0, &prior, false).0;
            let dn = direct_loss(pred - h, 1.0, 2.0, &prior, false).0;
            assert!(up > dn);
            // occupied branch: decreasing in pred
            let up = direct_loss(pred + h, 2.5, 2.0, &prior, false).0;
            let dn = direct_loss(pred - h, 2.5, 2.0, &prior, false).0;
            assert!(up < dn);
        }
    }

    #[test]
    fn direct_loss_finite_and_nonnegative_under_extreme_preds() {
        let prior = default_prior();
        for pred in [0.0, 1e-12, 0.5, 1.0 - 1e-12, 1.0] {
            for z in [0.5, 2.0, 3.0] {
                let (l, g) = direct_loss(pred, z, 2.0, &prior, false);
                assert!(l.is_finite() && l >= 0.0);
                assert!(g.is_finite());
            }
        }
    }

    #[test]
    fn normal_loss_cases() {
        let x = Vector3::x();
        let y = Vector3::y();
        assert_eq!(normal_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(normal_loss(&x, &y).unwrap(), 1.0);
        assert_eq!(normal_loss(&x, &(-x)).unwrap(), 2.0);
        assert!(normal_loss(&x, &(y * 1.5)).is_err());
    }

    #[test]
    fn sample_ray_degenerate_sigma_collapses_to_hit() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let depths = sample_ray(2.0, 16, 0, 0.0, 0.3, &mut rng).unwrap();
        assert!(depths.iter().all(|z| *z == 2.0));
    }

    #[test]
    fn sample_ray_stratification() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        // r_min = 1, z_i + 3 sigma = 5
        let depths = sample_ray(3.5, 0, 4, 0.5, 1.0, &mut rng).unwrap();
        for (j, z) in depths.iter().enumerate() {
            let lo = 1.0 + j as f64;
            assert!(*z >= lo && *z < lo + 1.0, "sample {j} = {z}");
            assert!(*z > 0.0);
        }
    }

    #[test]
    fn sample_ray_rejects_hit_below_min_range() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        assert!(sample_ray(0.2, 4, 4, 0.3, 0.3, &mut rng).is_err());
    }

    #[test]
    fn sample_ray_mean_statistic() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let n = 100_000;
        let (z_i, sigma) = (10.0, 0.3);
        let depths = sample_ray(z_i, n, 0, sigma, 0.3, &mut rng).unwrap();
        let mean = depths.iter().sum::<f64>() / n as f64;
        let se = sigma / (n as f64).sqrt();
        assert!(
            (mean - z_i).abs() < 3.0 * se + 2e-4,
            "mean {mean} vs {z_i} (se {se})"
        );
    }

    #[test]
    fn depth_render_opaque_first_sample() {
        let depths = [1.0, 2.0, 3.0];
        let (l, _) = depth_render_loss(&[1.0, 0.3, 0.9], &depths, 2.5).unwrap();
        assert!((l - (1.0 - 2.5f64).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn depth_render_transparent_ray() {
        let depths = [1.0, 2.0, 3.0];
        let (l, _) = depth_render_loss(&[0.0, 0.0, 0.0], &depths, 2.5).unwrap();
        assert!((l - 2.5f64.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn depth_render_rejects_unsorted() {
        assert!(depth_render_loss(&[0.5, 0.5], &[2.0, 1.0], 1.5).is_err());
    }

    #[test]
    fn depth_render_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 8;
            let mut depths: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..5.0)).collect();
            depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let occs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
            let (_, grads) = depth_render_loss(&occs, &depths, 2.7).unwrap();
            let h = 1e-6;
            for j in 0..n {
                let mut op = occs.clone();
                op[j] += h;
                let mut om = occs.clone();
                om[j] -= h;
                let fd = (depth_render_loss(&op, &depths, 2.7).unwrap().0
                    - depth_render_loss(&om, &depths, 2.7).unwrap().0)
                    / (2.0 * h);
                let denom = fd.abs().max(grads[j].abs()).max(1e-9);
                assert!(
                    (grads[j] - fd).abs() / denom < 1e-3,
                    "sample {j}: {} vs {fd}",
                    grads[j]
                );
            }
        }
    }

    // ---- total_loss ----

    fn small_grid() -> HashGridConfig {
        HashGridConfig {
            levels: 3,
            features_per_level: 2,
            table_size: 1 << 10,
            base_resolution: 4,
            max_resolution: 16,
            aux_octaves: 2,
            bounds: Aabb::new([-4.0; 3], [4.0; 3]),
        }
    }

    fn random_field(seed: u64) -> OccupancyField {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let grid = small_grid();
        let mut field = OccupancyField::init(grid, &mut rng).unwrap();
        // give the tables and final layer real magnitude so predictions and
        // normals are non-trivial
        for level in field.tables.levels.iter_mut() {
            for v in level.iter_mut() {
                *v *= 5e3;
            }
        }
        let off: usize = field.mlp.params.len() - 65;
        for w in field.mlp.params[off..].iter_mut() {
            *w = rng.gen_range(-0.5..0.5);
        }
        field
    }

    fn constant_half_field() -> OccupancyField {
        let grid = small_grid();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut field = OccupancyField::init(grid.clone(), &mut rng).unwrap();
        field.tables = HashGridTables::zeros_like(&grid);
        field.mlp = MlpParams {
            shape: MlpShape::shallow(grid.output_dim()),
            params: vec![0.0; field.mlp.params.len()],
        };
        field
    }

    fn make_frames(twists: &[PoseDelta]) -> Vec<FramePose> {
        twists
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let initial = se3_exp(&PoseDelta::from_parts(
                    Vector3::new(0.02 * i as f64, -0.01, 0.03),
                    Vector3::new(0.1 * i as f64, 0.2, -0.1),
                ))
                .unwrap();
                FramePose::new(initial, t).unwrap()
            })
            .collect()
    }

    fn random_batch(rng: &mut impl Rng, n_rays: usize, n_frames: usize) -> SampleBatch {
        let (m, k) = (3, 2);
        let mut rays = Vec::new();
        for _ in 0..n_rays {
            let p_local = Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            if p_local.norm() < 0.5 {
                continue;
            }
            let depths = sample_ray(p_local.norm(), m, k, 0.3, 0.1, rng).unwrap();
            let dir = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0f64));
            rays.push(BatchRay {
                frame: rng.gen_range(0..n_frames),
                p_local,
                depths,
                normal_eps: dir.normalize() * 0.03,
            });
        }
        SampleBatch { rays, m, k }
    }

    #[test]
    fn zero_weights_zero_loss_and_grads() {
        let field = random_field(1);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let frames = make_frames(&[PoseDelta::zero(), PoseDelta::zero()]);
        let batch = random_batch(&mut rng, 10, 2);
        let params = LossParams {
            lambda_d: 0.0,
            lambda_n: 0.0,
            ..LossParams::default()
        };
        let (loss, grads) = total_loss(&field, &frames, &batch, &params).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.mlp.iter().all(|g| *g == 0.0));
        assert!(grads.tables.values.iter().all(|g| *g == 0.0));
        assert!(grads.twists.iter().all(|t| *t == Vector6::zeros()));
    }

    #[test]
    fn single_free_sample_reduces_to_bce() {
        let field = constant_half_field();
        let frames = make_frames(&[PoseDelta::zero()]);
        let batch = SampleBatch {
            rays: vec![BatchRay {
                frame: 0,
                p_local: Vector3::new(2.0, 0.0, 0.0),
                depths: vec![1.0], // in front of the hit at z=2
                normal_eps: Vector3::new(0.0, 0.01, 0.0),
            }],
            m: 1,
            k: 0,
        };
        let params = LossParams {
            lambda_d: 1.0,
            lambda_n: 0.0,
            ..LossParams::default()
        };
        let (loss, _) = total_loss(&field, &frames, &batch, &params).unwrap();
        assert!((loss - 0.693147).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn empty_batch_is_an_error() {
        let field = random_field(3);
        let frames = make_frames(&[PoseDelta::zero()]);
        let batch = SampleBatch {
            rays: vec![],
            m: 1,
            k: 0,
        };
        assert!(total_loss(&field, &frames, &batch, &LossParams::default()).is_err());
    }

    fn fd_check_mode(mode: LossMode, seed: u64) {
        let mut field = random_field(seed);
        let mut rng = ChaCha20Rng::seed_from_u64(seed + 100);
        let twists = vec![
            PoseDelta::from_parts(
                Vector3::new(0.01, -0.02, 0.015),
                Vector3::new(0.05, -0.03, 0.02),
            ),
            PoseDelta::zero(),
        ];
        let frames = make_frames(&twists);
        let batch = random_batch(&mut rng, 6, 2);
        let params = LossParams {
            mode,
            lambda_n: if mode == LossMode::DepthRender { 0.4 } else { 0.4 },
            ..LossParams::default()
        };
        let (_, grads) = total_loss(&field, &frames, &batch, &params).unwrap();

        // MLP parameters
        let h = 1e-5;
        let nparams = field.mlp.params.len();
        for _ in 0..10 {
            let kidx = rng.gen_range(0..nparams);
            let orig = field.mlp.params[kidx];
            field.mlp.params[kidx] = orig + h;
            let fp = total_loss(&field, &frames, &batch, &params).unwrap().0;
            field.mlp.params[kidx] = orig - h;
            let fm = total_loss(&field, &frames, &batch, &params).unwrap().0;
            field.mlp.params[kidx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(grads.mlp[kidx].abs()).max(1e-6);
            assert!(
                (grads.mlp[kidx] - fd).abs() / denom < 1e-3,
                "mode {mode}: mlp[{kidx}] {} vs {fd}",
                grads.mlp[kidx]
            );
        }

        // touched table entries
        let fpl = field.grid.features_per_level;
        let n_entries = grads.tables.entries.len();
        for pick in (0..n_entries).step_by((n_entries / 5).max(1)).take(5) {
            let (level, entry) = grads.tables.entries[pick];
            let slot = entry as usize * fpl;
            let mut analytic = 0.0;
            for (i, (l2, e2)) in grads.tables.entries.iter().enumerate() {
                if *l2 == level && *e2 == entry {
                    analytic += grads.tables.values[i * fpl];
                }
            }
            let orig = field.tables.levels[level as usize][slot];
            field.tables.levels[level as usize][slot] = orig + h;
            let fp = total_loss(&field, &frames, &batch, &params).unwrap().0;
            field.tables.levels[level as usize][slot] = orig - h;
            let fm = total_loss(&field, &frames, &batch, &params).unwrap().0;
            field.tables.levels[level as usize][slot] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (analytic - fd).abs() / denom < 1e-3,
                "mode {mode}: table {level}/{entry}: {analytic} vs {fd}"
            );
        }

        // pose twists
        let ht = 1e-6;
        for fi in 0..twists.len() {
            for comp in 0..6 {
                let mut tp = twists.clone();
                tp[fi].twist[comp] += ht;
                let framep = make_frames(&tp);
                let mut tm = twists.clone();
                tm[fi].twist[comp] -= ht;
                let framem = make_frames(&tm);
                let fp = total_loss(&field, &framep, &batch, &params).unwrap().0;
                let fm = total_loss(&field, &framem, &batch, &params).unwrap().0;
                let fd = (fp - fm) / (2.0 * ht);
                let got = grads.twists[fi][comp];
                let denom = fd.abs().max(got.abs()).max(1e-5);
                assert!(
                    (got - fd).abs() / denom < 2e-3,
                    "mode {mode}: twist[{fi}][{comp}] {got} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_direct() {
        fd_check_mode(LossMode::Direct, 11);
    }

    #[test]
    fn gradients_match_finite_differences_simple_bce() {
        fd_check_mode(LossMode::SimpleBce, 12);
    }

    #[test]
    fn gradients_match_finite_differences_depth_render() {
        fd_check_mode(LossMode::DepthRender, 13);
    }

    #[test]
    fn loss_decomposes_over_terms() {
        let field = random_field(21);
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let frames = make_frames(&[PoseDelta::zero(), PoseDelta::zero()]);
        let batch = random_batch(&mut rng, 12, 2);
        let both = LossParams::default();
        let only_d = LossParams {
            lambda_n: 0.0,
            ..both
        };
        let only_n = LossParams {
            lambda_d: 0.0,
            ..both
        };
        let l_both = total_loss(&field, &frames, &batch, &both).unwrap().0;
        let l_d = total_loss(&field, &frames, &batch, &only_d).unwrap().0;
        let l_n = total_loss(&field, &frames, &batch, &only_n).unwrap().0;
        assert!((l_both - (l_d + l_n)).abs() < 1e-12 * l_both.max(1.0));
        assert!(l_d >= 0.0 && l_n >= 0.0 && l_both.is_finite());
    }
}
