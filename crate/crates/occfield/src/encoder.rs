//! Multi-resolution hash-grid positional encoder.
//!
//! Each of the `L` levels holds a flat table of learnable feature vectors
//! addressed either directly (when the dense grid fits in the table) or
//! through the spatial XOR-prime hash. A query point is trilinearly
//! interpolated per level; the per-level features are concatenated and an
//! analytic sinusoidal encoding of the normalized coordinate is appended to
//! mitigate hash collisions.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HASH_PRIMES: [u32; 3] = [1, 2654435761, 805459861];

/// Axis-aligned box in world meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Aabb { min, max }
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            (self.min[0] + self.max[0]) / 2.0,
            (self.min[1] + self.max[1]) / 2.0,
            (self.min[2] + self.max[2]) / 2.0,
        )
    }

    /// Grow the box by `margin` meters on every side.
    pub fn padded(&self, margin: f64) -> Aabb {
        Aabb {
            min: [
                self.min[0] - margin,
                self.min[1] - margin,
                self.min[2] - margin,
            ],
            max: [
                self.max[0] + margin,
                self.max[1] + margin,
                self.max[2] + margin,
            ],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub table_size: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
    pub aux_octaves: usize,
    pub bounds: Aabb,
}

impl HashGridConfig {
    /// Instant-NGP style defaults over the given bounds.
    pub fn with_bounds(bounds: Aabb) -> Self {
        HashGridConfig {
            levels: 16,
            features_per_level: 2,
            table_size: 1 << 19,
            base_resolution: 16,
            max_resolution: 2048,
            aux_octaves: 4,
            bounds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::InvalidInput("hash grid needs at least 1 level".into()));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::InvalidInput("table_size must be a power of two".into()));
        }
        if self.base_resolution < 1 || self.base_resolution > self.max_resolution {
            return Err(Error::InvalidInput(
                "need 1 <= base_resolution <= max_resolution".into(),
            ));
        }
        let ext = self.bounds.extent();
        if ext.iter().any(|e| *e <= 0.0) {
            return Err(Error::InvalidInput("bounds must have positive extent".into()));
        }
        Ok(())
    }

    /// Per-level grid resolution `N_l = floor(N_min * g^l)`.
    pub fn level_resolution(&self, level: usize) -> usize {
        if self.levels == 1 {
            return self.base_resolution;
        }
        let growth = ((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln())
            / (self.levels as f64 - 1.0);
        (self.base_resolution as f64 * (growth * level as f64).exp()).floor() as usize
    }

    /// Number of feature entries stored for a level: dense when the full
    /// grid fits in the table, hashed otherwise.
    pub fn level_entries(&self, level: usize) -> usize {
        let n = self.level_resolution(level) + 1;
        (n * n * n).min(self.table_size)
    }

    /// Whether the level is indexed directly (collision-free).
    pub fn level_is_dense(&self, level: usize) -> bool {
        let n = self.level_resolution(level) + 1;
        n * n * n <= self.table_size
    }

    /// Length of the appended analytic coordinate feature.
    pub fn aux_dim(&self) -> usize {
        3 + 6 * self.aux_octaves
    }

    /// Total encoded feature length `L*F + D_aux`.
    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level + self.aux_dim()
    }

    pub fn total_table_params(&self) -> usize {
        (0..self.levels)
            .map(|l| self.level_entries(l) * self.features_per_level)
            .sum()
    }
}

/// Per-level learnable feature tables, stored flat with stride
/// `features_per_level`.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGridTables {
    pub levels: Vec<Vec<f64>>,
}

impl HashGridTables {
    /// Initialize all entries uniformly in [-1e-4, 1e-4].
    pub fn init(config: &HashGridConfig, rng: &mut impl Rng) -> Self {
        let levels = (0..config.levels)
            .map(|l| {
                (0..config.level_entries(l) * config.features_per_level)
                    .map(|_| rng.gen_range(-1e-4..1e-4))
                    .collect()
            })
            .collect();
        HashGridTables { levels }
    }

    pub fn zeros_like(config: &HashGridConfig) -> Self {
        let levels = (0..config.levels)
            .map(|l| vec![0.0; config.level_entries(l) * config.features_per_level])
            .collect();
        HashGridTables { levels }
    }
}

/// Encoded feature with a flag marking queries clamped to the bounds.
#[derive(Clone, Debug)]
pub struct EncodedFeature {
    pub values: Vec<f64>,
    pub clamped: bool,
}

/// Spatial hash of an integer cell coordinate into `[0, table_size)`.
pub fn hash_index(cell: [i64; 3], config: &HashGridConfig) -> usize {
    let h = (cell[0] as u32).wrapping_mul(HASH_PRIMES[0])
        ^ (cell[1] as u32).wrapping_mul(HASH_PRIMES[1])
        ^ (cell[2] as u32).wrapping_mul(HASH_PRIMES[2]);
    (h as usize) & (config.table_size - 1)
}

fn entry_index(cell: [i64; 3], level: usize, config: &HashGridConfig) -> usize {
    if config.level_is_dense(level) {
        let n = (config.level_resolution(level) + 1) as i64;
        ((cell[2] * n + cell[1]) * n + cell[0]) as usize
    } else {
        hash_index(cell, config)
    }
}

struct LevelQuery {
    /// Table entry index and trilinear weight for each of the 8 corners.
    corners: [(usize, f64); 8],
    /// d(weight)/d(grid coordinate) per corner per axis.
    dw_dx: [[f64; 3]; 8],
}

/// Normalized coordinate in [0,1]^3; clamps out-of-bounds queries.
/// Returns (u, clamped_mask).
fn normalize(p: &Vector3<f64>, config: &HashGridConfig) -> ([f64; 3], [bool; 3], bool) {
    let ext = config.bounds.extent();
    let mut u = [0.0; 3];
    let mut clamped = [false; 3];
    let mut any = false;
    for d in 0..3 {
        let raw = (p[d] - config.bounds.min[d]) / ext[d];
        if raw < 0.0 {
            u[d] = 0.0;
            clamped[d] = true;
            any = true;
        } else if raw > 1.0 {
            u[d] = 1.0;
            clamped[d] = true;
            any = true;
        } else {
            u[d] = raw;
        }
    }
    (u, clamped, any)
}

fn level_query(u: [f64; 3], level: usize, config: &HashGridConfig) -> LevelQuery {
    let n = config.level_resolution(level);
    let mut base = [0i64; 3];
    let mut frac = [0.0f64; 3];
    for d in 0..3 {
        let x = u[d] * n as f64;
        let c = (x.floor() as i64).min(n as i64 - 1).max(0);
        base[d] = c;
        frac[d] = x - c as f64;
    }
    let mut corners = [(0usize, 0.0f64); 8];
    let mut dw_dx = [[0.0f64; 3]; 8];
    for i in 0..8 {
        let off = [(i & 1) as i64, ((i >> 1) & 1) as i64, ((i >> 2) & 1) as i64];
        let cell = [base[0] + off[0], base[1] + off[1], base[2] + off[2]];
        let mut w = 1.0;
        let mut factors = [0.0; 3];
        for d in 0..3 {
            factors[d] = if off[d] == 1 { frac[d] } else { 1.0 - frac[d] };
            w *= factors[d];
        }
        for d in 0..3 {
            let sign = if off[d] == 1 { 1.0 } else { -1.0 };
            let mut prod = sign;
            for e in 0..3 {
                if e != d {
                    prod *= factors[e];
                }
            }
            dw_dx[i][d] = prod;
        }
        corners[i] = (entry_index(cell, level, config), w);
    }
    LevelQuery { corners, dw_dx }
}

fn write_aux(u: [f64; 3], config: &HashGridConfig, out: &mut [f64]) {
    out[0] = u[0];
    out[1] = u[1];
    out[2] = u[2];
    let mut i = 3;
    for o in 0..config.aux_octaves {
        let freq = (1u64 << o) as f64 * std::f64::consts::PI;
        for d in 0..3 {
            out[i + d] = (freq * u[d]).sin();
            out[i + 3 + d] = (freq * u[d]).cos();
        }
        i += 6;
    }
}

/// Trilinearly interpolated multi-resolution features plus the analytic
/// coordinate feature.
pub fn encode(
    p: &Vector3<f64>,
    tables: &HashGridTables,
    config: &HashGridConfig,
) -> Result<EncodedFeature> {
    if !p.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput("non-finite query point".into()));
    }
    let (u, _, clamped) = normalize(p, config);
    let f = config.features_per_level;
    let mut values = vec![0.0; config.output_dim()];
    for level in 0..config.levels {
        let q = level_query(u, level, config);
        let table = &tables.levels[level];
        let out = &mut values[level * f..(level + 1) * f];
        for (idx, w) in q.corners.iter() {
            let entry = &table[idx * f..idx * f + f];
            for j in 0..f {
                out[j] += w * entry[j];
            }
        }
    }
    write_aux(u, config, &mut values[config.levels * f..]);
    Ok(EncodedFeature { values, clamped })
}

/// Sparse gradient fragments touching at most `8 * levels` table entries.
#[derive(Clone, Debug, Default)]
pub struct SparseTableGrads {
    /// (level, entry) pairs, paired with `features_per_level` values each in
    /// `values`.
    pub entries: Vec<(u32, u32)>,
    pub values: Vec<f64>,
}

impl SparseTableGrads {
    pub fn accumulate_into(&self, dense: &mut HashGridTables, features_per_level: usize) {
        for (i, (level, entry)) in self.entries.iter().enumerate() {
            let base = *entry as usize * features_per_level;
            let src = &self.values[i * features_per_level..(i + 1) * features_per_level];
            let dst = &mut dense.levels[*level as usize][base..base + features_per_level];
            for j in 0..features_per_level {
                dst[j] += src[j];
            }
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.values.clear();
    }
}

/// Reverse-mode pass of [`encode`]: routes `upstream_grad` into the touched
/// corner entries and returns the derivative w.r.t. the query position.
/// Clamped axes get a zero position gradient.
pub fn encode_backward(
    p: &Vector3<f64>,
    config: &HashGridConfig,
    tables: &HashGridTables,
    upstream_grad: &[f64],
    table_grads: &mut SparseTableGrads,
) -> Result<Vector3<f64>> {
    if !p.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput("non-finite query point".into()));
    }
    assert_eq!(upstream_grad.len(), config.output_dim());
    let (u, clamped, _) = normalize(p, config);
    let f = config.features_per_level;
    let ext = config.bounds.extent();
    let mut du = [0.0f64; 3];
    for level in 0..config.levels {
        let q = level_query(u, level, config);
        let n = config.level_resolution(level) as f64;
        let up = &upstream_grad[level * f..(level + 1) * f];
        let table = &tables.levels[level];
        for (i, (idx, _)) in q.corners.iter().enumerate() {
            table_grads.entries.push((level as u32, *idx as u32));
            let w = q.corners[i].1;
            for j in 0..f {
                table_grads.values.push(up[j] * w);
            }
            let entry = &table[idx * f..idx * f + f];
            let dot: f64 = (0..f).map(|j| up[j] * entry[j]).sum();
            for d in 0..3 {
                du[d] += dot * q.dw_dx[i][d] * n;
            }
        }
    }
    // analytic coordinate feature
    let aux_up = &upstream_grad[config.levels * f..];
    for d in 0..3 {
        du[d] += aux_up[d];
    }
    let mut i = 3;
    for o in 0..config.aux_octaves {
        let freq = (1u64 << o) as f64 * std::f64::consts::PI;
        for d in 0..3 {
            du[d] += aux_up[i + d] * freq * (freq * u[d]).cos();
            du[d] -= aux_up[i + 3 + d] * freq * (freq * u[d]).sin();
        }
        i += 6;
    }
    let mut dp = Vector3::zeros();
    for d in 0..3 {
        if !clamped[d] {
            dp[d] = du[d] / ext[d];
        }
    }
    Ok(dp)
}
