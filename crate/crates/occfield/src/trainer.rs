//! Joint optimization loop: keyframe selection, batching, ADAM updates of
//! field parameters and per-frame pose twists, and checkpointing.
//!
//! One iteration samples `n_f` keyframes, `n_b` measured points each, and
//! `m + k` depths per ray, evaluates the combined loss with exact gradients,
//! and applies bias-corrected ADAM to the MLP, the hash tables, and (when
//! pose refinement is on) the twists. Ray gradients are evaluated in fixed
//! 16-ray chunks in parallel and merged in chunk order, so results do not
//! depend on the worker count.
//!
//! # Example
//!
//! ```
//! use occfield::supervision::LossMode;
//! use occfield::trainer::TrainConfig;
//!
//! // Defaults follow the reference schedule: 300 ADAM iterations at
//! // lr 1e-3, pose lr dropping to 1e-4 after iteration 150.
//! let config = TrainConfig::default();
//! assert_eq!(config.iterations, 300);
//! assert_eq!((config.lambda_d, config.lambda_n), (1.0, 0.4));
//! assert_eq!((config.m, config.k), (32, 8));
//! assert_eq!(config.loss_mode, LossMode::Direct);
//! assert!(config.pose_refine);
//! config.validate()?;
//! # Ok::<(), occfield::Error>(())
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Vector3, Vector6};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{HashGridConfig, HashGridTables};
use crate::field::OccupancyField;
use crate::geometry::{apply_delta, PoseDelta, PoseSE3};
use crate::io::PointCloudFrame;
use crate::supervision::{
    sample_ray, BatchRay, FramePose, LossGrads, LossMode, LossParams, SampleBatch, ThicknessPrior,
};
use crate::{Error, Result};

/// Rays per parallel evaluation chunk (fixed for reproducibility).
const RAY_CHUNK: usize = 16;
/// Abort when the loss exceeds this multiple of the first iteration's loss.
const DIVERGENCE_FACTOR: f64 = 1e3;

const CHECKPOINT_MAGIC: &[u8; 4] = b"OFCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_field: f64,
    pub lr_pose: f64,
    /// Pose learning rate after `lr_pose_drop_iteration`.
    pub lr_pose_late: f64,
    pub lr_pose_drop_iteration: usize,
    pub lambda_d: f64,
    pub lambda_n: f64,
    /// Rays per keyframe per iteration.
    pub n_b: usize,
    /// Keyframes per iteration (capped by availability).
    pub n_f: usize,
    /// Near-surface depth samples per ray.
    pub m: usize,
    /// Stratified free-space depth samples per ray.
    pub k: usize,
    /// Std of near-surface depth sampling (meters).
    pub sigma_s: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Keyframe rotation threshold (radians).
    pub keyframe_rot_thresh: f64,
    /// Keyframe translation threshold (meters).
    pub keyframe_trans_thresh: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub loss_mode: LossMode,
    pub pose_refine: bool,
    /// Largest world-frame offset for normal-consistency pairs (meters).
    pub normal_eps_max: f64,
    /// Log-normal thickness prior: mean of ln(thickness).
    pub thickness_mu: f64,
    /// Log-normal thickness prior: std of ln(thickness).
    pub thickness_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let prior = ThicknessPrior::default();
        TrainConfig {
            iterations: 300,
            lr_field: 1e-3,
            lr_pose: 1e-3,
            lr_pose_late: 1e-4,
            lr_pose_drop_iteration: 150,
            lambda_d: 1.0,
            lambda_n: 0.4,
            n_b: 100,
            n_f: 8,
            m: 32,
            k: 8,
            sigma_s: 0.3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            keyframe_rot_thresh: 5.0_f64.to_radians(),
            keyframe_trans_thresh: 0.1,
            r_min: 0.3,
            r_max: 100.0,
            loss_mode: LossMode::Direct,
            pose_refine: true,
            normal_eps_max: 0.05,
            thickness_mu: prior.mu,
            thickness_sigma: prior.sigma,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_field", self.lr_field),
            ("lr_pose", self.lr_pose),
            ("lr_pose_late", self.lr_pose_late),
            ("epsilon", self.epsilon),
            ("normal_eps_max", self.normal_eps_max),
            ("thickness_sigma", self.thickness_sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_b < 1 || self.m < 1 || self.k < 1 || self.n_f < 1 {
            return Err(Error::InvalidInput(
                "n_b, n_f, m, and k must all be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidInput("ADAM betas must lie in [0, 1)".into()));
        }
        if !(self.r_min >= 0.0 && self.r_max > self.r_min) {
            return Err(Error::InvalidInput(format!(
                "need 0 <= r_min < r_max, got [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        if self.sigma_s < 0.0 || self.lambda_d < 0.0 || self.lambda_n < 0.0 {
            return Err(Error::InvalidInput(
                "sigma_s and loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn loss_params(&self) -> LossParams {
        LossParams {
            lambda_d: self.lambda_d,
            lambda_n: self.lambda_n,
            prior: ThicknessPrior {
                mu: self.thickness_mu,
                sigma: self.thickness_sigma,
            },
            mode: self.loss_mode,
            ..LossParams::default()
        }
    }
}

/// Reads a config file (TOML mirroring the `TrainConfig` field names).
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: TrainConfig = toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// First frame is always kept; afterwards a frame is kept iff its pose
/// differs from the last kept frame by more than either threshold.
pub fn select_keyframes(
    frames: &[PointCloudFrame],
    initial_poses: &[PoseSE3],
    rot_thresh: f64,
    trans_thresh: f64,
) -> Result<Vec<usize>> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("no frames to select keyframes from".into()));
    }
    if frames.len() != initial_poses.len() {
        return Err(Error::InvalidInput(format!(
            "{} frames but {} poses",
            frames.len(),
            initial_poses.len()
        )));
    }
    let mut kept = vec![0];
    for i in 1..initial_poses.len() {
        let last = &initial_poses[kept[kept.len() - 1]];
        let rot = last.rotation_angle_to(&initial_poses[i]);
        let trans = (last.translation - initial_poses[i].translation).norm();
        if rot > rot_thresh || trans > trans_thresh {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Keeps points with finite coordinates and range within `[r_min, r_max]`.
pub fn filter_points(frame: &PointCloudFrame, r_min: f64, r_max: f64) -> PointCloudFrame {
    PointCloudFrame::new(
        frame
            .points
            .iter()
            .filter(|p| {
                let r = p.norm();
                p.iter().all(|c| c.is_finite()) && r >= r_min && r <= r_max
            })
            .cloned()
            .collect(),
    )
}

/// One bias-corrected ADAM step, elementwise over a parameter slice.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
) -> Result<()> {
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::InvalidInput(format!(
            "ADAM shape mismatch: {} params, {} grads, {} m, {} v",
            params.len(),
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    if t < 1 {
        return Err(Error::InvalidInput("ADAM step index starts at 1".into()));
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        params[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
    }
    Ok(())
}

/// A selected frame with its frozen initial pose and filtered points.
#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    /// Index into the original frame sequence.
    pub index: usize,
    pub initial_pose: PoseSE3,
    pub points: Vec<Vector3<f64>>,
}

/// Optimization state: the field, per-keyframe twists, ADAM moments, and
/// the batch RNG.
pub struct Trainer {
    pub config: TrainConfig,
    pub field: OccupancyField,
    pub keyframes: Vec<Keyframe>,
    pub twists: Vec<PoseDelta>,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
    mlp_m: Vec<f64>,
    mlp_v: Vec<f64>,
    table_m: HashGridTables,
    table_v: HashGridTables,
    table_grads: HashGridTables,
    twist_m: Vec<Vector6<f64>>,
    twist_v: Vec<Vector6<f64>>,
    rng: ChaCha20Rng,
}

impl Trainer {
    /// Selects keyframes, filters their points, and initializes the field
    /// from the config seed.
    pub fn new(
        frames: &[PointCloudFrame],
        initial_poses: &[PoseSE3],
        grid: HashGridConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let kept = select_keyframes(
            frames,
            initial_poses,
            config.keyframe_rot_thresh,
            config.keyframe_trans_thresh,
        )?;
        let mut keyframes = Vec::new();
        for index in kept {
            let filtered = filter_points(&frames[index], config.r_min, config.r_max);
            if filtered.is_empty() {
                eprintln!("warning: keyframe {index} has no usable points after filtering; dropped");
                continue;
            }
            keyframes.push(Keyframe {
                index,
                initial_pose: initial_poses[index],
                points: filtered.points,
            });
        }
        if keyframes.is_empty() {
            return Err(Error::EmptyInput(
                "no keyframes with usable points after filtering".into(),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let field = OccupancyField::init(grid, &mut rng)?;
        Ok(Self::from_parts(config, field, keyframes, rng))
    }

    fn from_parts(
        config: TrainConfig,
        field: OccupancyField,
        keyframes: Vec<Keyframe>,
        rng: ChaCha20Rng,
    ) -> Self {
        let n = keyframes.len();
        Trainer {
            mlp_m: field.mlp.zeros_like(),
            mlp_v: field.mlp.zeros_like(),
            table_m: HashGridTables::zeros_like(&field.grid),
            table_v: HashGridTables::zeros_like(&field.grid),
            table_grads: HashGridTables::zeros_like(&field.grid),
            twist_m: vec![Vector6::zeros(); n],
            twist_v: vec![Vector6::zeros(); n],
            twists: vec![PoseDelta::zero(); n],
            iteration: 0,
            loss_history: Vec::new(),
            config,
            field,
            keyframes,
            rng,
        }
    }

    /// Current pose of every keyframe (initial composed with its twist).
    pub fn refined_poses(&self) -> Vec<PoseSE3> {
        self.keyframes
            .iter()
            .zip(&self.twists)
            .map(|(kf, twist)| apply_delta(&kf.initial_pose, twist).expect("finite twist"))
            .collect()
    }

    fn assemble_batch(&mut self) -> Result<SampleBatch> {
        let cfg = &self.config;
        let n_f = cfg.n_f.min(self.keyframes.len());
        let chosen = sample_indices(&mut self.rng, self.keyframes.len(), n_f).into_vec();
        let mut rays = Vec::with_capacity(n_f * cfg.n_b);
        for &frame in &chosen {
            let points = &self.keyframes[frame].points;
            for _ in 0..cfg.n_b {
                // Points at exactly r_min cannot anchor a ray; retry a few
                // draws, then give the slot up.
                let mut picked = None;
                for _ in 0..10 {
                    let p = points[self.rng.gen_range(0..points.len())];
                    if p.norm() > cfg.r_min {
                        picked = Some(p);
                        break;
                    }
                }
                let Some(p_local) = picked else { continue };
                let depths = sample_ray(
                    p_local.norm(),
                    cfg.m,
                    cfg.k,
                    cfg.sigma_s,
                    cfg.r_min,
                    &mut self.rng,
                )?;
                let dir: [f64; 3] = UnitSphere.sample(&mut self.rng);
                let magnitude = self.rng.gen_range(0.0..cfg.normal_eps_max);
                rays.push(BatchRay {
                    frame,
                    p_local,
                    depths,
                    normal_eps: Vector3::from(dir) * magnitude,
                });
            }
        }
        if rays.is_empty() {
            return Err(Error::EmptyInput("batch assembly produced no rays".into()));
        }
        Ok(SampleBatch {
            rays,
            m: cfg.m,
            k: cfg.k,
        })
    }

    /// One optimization step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.assemble_batch()?;
        let params = self.config.loss_params();
        let frame_poses = self
            .keyframes
            .iter()
            .zip(&self.twists)
            .map(|(kf, twist)| FramePose::new(kf.initial_pose, twist))
            .collect::<Result<Vec<_>>>()?;

        // Parallel per fixed-size chunk, merged in chunk order.
        let chunk_results: Vec<Result<(f64, LossGrads)>> = batch
            .rays
            .par_chunks(RAY_CHUNK)
            .map(|chunk| {
                let mut grads = LossGrads::zeros(&self.field, frame_poses.len());
                let mut loss = 0.0;
                for ray in chunk {
                    loss += crate::supervision::ray_loss(
                        &self.field,
                        &frame_poses,
                        ray,
                        &batch,
                        &params,
                        &mut grads,
                    )?;
                }
                Ok((loss, grads))
            })
            .collect();
        let mut loss = 0.0;
        let mut grads = LossGrads::zeros(&self.field, frame_poses.len());
        for result in chunk_results {
            let (l, g) = result?;
            loss += l;
            grads.merge(&g);
        }

        if !loss.is_finite()
            || self
                .loss_history
                .first()
                .is_some_and(|&first| loss > DIVERGENCE_FACTOR * first.abs().max(1e-12))
        {
            return Err(Error::Diverged {
                iteration: self.iteration,
                loss,
            });
        }

        let t = self.iteration + 1;
        let cfg = &self.config;
        adam_step(
            &mut self.field.mlp.params,
            &grads.mlp,
            &mut self.mlp_m,
            &mut self.mlp_v,
            cfg.lr_field,
            cfg.beta1,
            cfg.beta2,
            cfg.epsilon,
            t,
        )?;
        for level in self.table_grads.levels.iter_mut() {
            level.fill(0.0);
        }
        grads
            .tables
            .accumulate_into(&mut self.table_grads, self.field.grid.features_per_level);
        for level in 0..self.field.tables.levels.len() {
            adam_step(
                &mut self.field.tables.levels[level],
                &self.table_grads.levels[level],
                &mut self.table_m.levels[level],
                &mut self.table_v.levels[level],
                cfg.lr_field,
                cfg.beta1,
                cfg.beta2,
                cfg.epsilon,
                t,
            )?;
        }
        if cfg.pose_refine {
            let lr_pose = if self.iteration >= cfg.lr_pose_drop_iteration {
                cfg.lr_pose_late
            } else {
                cfg.lr_pose
            };
            for (i, twist) in self.twists.iter_mut().enumerate() {
                adam_step(
                    twist.twist.as_mut_slice(),
                    grads.twists[i].as_slice(),
                    self.twist_m[i].as_mut_slice(),
                    self.twist_v[i].as_mut_slice(),
                    lr_pose,
                    cfg.beta1,
                    cfg.beta2,
                    cfg.epsilon,
                    t,
                )?;
            }
        }

        self.iteration += 1;
        self.loss_history.push(loss);
        Ok(loss)
    }

    /// Runs the configured number of iterations (continuing from the
    /// current one after a checkpoint load).
    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.config.iterations {
            self.step()?;
        }
        Ok(())
    }

    /// Serializes every piece of optimizer state; the round trip is
    /// bit-exact, so training continues as if never interrupted.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);

        #[derive(Serialize)]
        struct Meta<'a> {
            config: &'a TrainConfig,
            grid: &'a HashGridConfig,
        }
        let meta = toml::to_string(&Meta {
            config: &self.config,
            grid: &self.field.grid,
        })
        .map_err(|e| Error::InvalidInput(format!("cannot serialize checkpoint meta: {e}")))?;

        w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(meta.as_bytes()).map_err(io_err)?;
        w.write_all(&(self.iteration as u64).to_le_bytes()).map_err(io_err)?;

        let write_f64s = |w: &mut BufWriter<fs::File>, values: &[f64]| -> Result<()> {
            w.write_all(&(values.len() as u64).to_le_bytes())
                .map_err(io_err)?;
            for v in values {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
            Ok(())
        };

        write_f64s(&mut w, &self.loss_history)?;
        w.write_all(&self.rng.get_seed()).map_err(io_err)?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes()).map_err(io_err)?;

        w.write_all(&(self.keyframes.len() as u64).to_le_bytes()).map_err(io_err)?;
        for kf in &self.keyframes {
            w.write_all(&(kf.index as u64).to_le_bytes()).map_err(io_err)?;
            let pose: Vec<f64> = kf
                .initial_pose
                .rotation
                .iter()
                .chain(kf.initial_pose.translation.iter())
                .cloned()
                .collect();
            for v in &pose {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
            let flat: Vec<f64> = kf.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
            write_f64s(&mut w, &flat)?;
        }
        let twist_values: Vec<Vector6<f64>> = self.twists.iter().map(|t| t.twist).collect();
        for group in [&twist_values, &self.twist_m, &self.twist_v] {
            for t in group.iter() {
                for v in t.iter() {
                    w.write_all(&v.to_le_bytes()).map_err(io_err)?;
                }
            }
        }
        write_f64s(&mut w, &self.field.mlp.params)?;
        write_f64s(&mut w, &self.mlp_m)?;
        write_f64s(&mut w, &self.mlp_v)?;
        for tables in [&self.field.tables, &self.table_m, &self.table_v] {
            w.write_all(&(tables.levels.len() as u64).to_le_bytes()).map_err(io_err)?;
            for level in &tables.levels {
                write_f64s(&mut w, level)?;
            }
        }
        w.flush().map_err(io_err)
    }

    /// Restores a trainer from a checkpoint written by [`save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
        let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let mut r = CheckpointReader { bytes: &bytes, pos: 0 };

        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = r.u64()? as usize;
        let meta_bytes = r.take(meta_len)?;
        #[derive(Deserialize)]
        struct Meta {
            config: TrainConfig,
            grid: HashGridConfig,
        }
        let meta: Meta = toml::from_str(
            std::str::from_utf8(meta_bytes)
                .map_err(|_| Error::CorruptCheckpoint("meta is not UTF-8".into()))?,
        )
        .map_err(|e| Error::CorruptCheckpoint(format!("bad meta: {e}")))?;

        let iteration = r.u64()? as usize;
        let loss_history = r.f64s()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut rng = ChaCha20Rng::from_seed(seed);
        rng.set_word_pos(word_pos);

        let n_keyframes = r.u64()? as usize;
        let mut keyframes = Vec::with_capacity(n_keyframes);
        for _ in 0..n_keyframes {
            let index = r.u64()? as usize;
            let mut pose = [0.0f64; 12];
            for v in pose.iter_mut() {
                *v = r.f64()?;
            }
            let rotation = nalgebra::Matrix3::from_iterator(pose[..9].iter().cloned());
            let translation = Vector3::new(pose[9], pose[10], pose[11]);
            let flat = r.f64s()?;
            if flat.len() % 3 != 0 {
                return Err(Error::CorruptCheckpoint("keyframe point blob".into()));
            }
            let points = flat
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect();
            keyframes.push(Keyframe {
                index,
                initial_pose: PoseSE3::new(rotation, translation),
                points,
            });
        }
        let read_twists = |r: &mut CheckpointReader| -> Result<Vec<Vector6<f64>>> {
            (0..n_keyframes)
                .map(|_| {
                    let mut t = Vector6::zeros();
                    for v in t.iter_mut() {
                        *v = r.f64()?;
                    }
                    Ok(t)
                })
                .collect()
        };
        let twists: Vec<PoseDelta> = read_twists(&mut r)?
            .into_iter()
            .map(|twist| PoseDelta { twist })
            .collect();
        let twist_m = read_twists(&mut r)?;
        let twist_v = read_twists(&mut r)?;

        let mlp_params = r.f64s()?;
        let mlp_m = r.f64s()?;
        let mlp_v = r.f64s()?;
        let read_tables = |r: &mut CheckpointReader| -> Result<HashGridTables> {
            let n_levels = r.u64()? as usize;
            let levels = (0..n_levels).map(|_| r.f64s()).collect::<Result<_>>()?;
            Ok(HashGridTables { levels })
        };
        let tables = read_tables(&mut r)?;
        let table_m = read_tables(&mut r)?;
        let table_v = read_tables(&mut r)?;
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }

        let mut seed_rng = ChaCha20Rng::seed_from_u64(meta.config.seed);
        let mut field = OccupancyField::init(meta.grid, &mut seed_rng)?;
        if field.mlp.params.len() != mlp_params.len()
            || field.tables.levels.len() != tables.levels.len()
        {
            return Err(Error::CorruptCheckpoint(
                "parameter blob does not match config".into(),
            ));
        }
        field.mlp.params = mlp_params;
        field.tables = tables;

        let mut trainer = Trainer::from_parts(meta.config, field, keyframes, rng);
        trainer.iteration = iteration;
        trainer.loss_history = loss_history;
        trainer.twists = twists;
        trainer.twist_m = twist_m;
        trainer.twist_v = twist_v;
        trainer.mlp_m = mlp_m;
        trainer.mlp_v = mlp_v;
        trainer.table_m = table_m;
        trainer.table_v = table_v;
        Ok(trainer)
    }
}

struct CheckpointReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> CheckpointReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() / 8 {
            return Err(Error::CorruptCheckpoint(format!("implausible blob length {n}")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

/// End-to-end convenience wrapper: trains and returns the field, the
/// refined pose for every input frame (non-keyframes keep their initial
/// pose), and the loss history.
pub fn train(
    frames: &[PointCloudFrame],
    initial_poses: &[PoseSE3],
    grid: HashGridConfig,
    config: TrainConfig,
) -> Result<(OccupancyField, Vec<PoseSE3>, Vec<f64>)> {
    let mut trainer = Trainer::new(frames, initial_poses, grid, config)?;
    trainer.run()?;
    let mut poses = initial_poses.to_vec();
    for (kf, pose) in trainer.keyframes.iter().zip(trainer.refined_poses()) {
        poses[kf.index] = pose;
    }
    Ok((trainer.field, poses, trainer.loss_history))
}
