//! Stage-wise training with training-set augmentation, and the iterative
//! refinement loop used at inference.
//!
//! Stage 0 is the Init-CNN. Each later stage trains the Pose-REN on the
//! current sample multiset, then refines the newest generation of input poses
//! with it and appends those refined samples to the set.

mod infer;
mod train;

use std::sync::Arc;

use crate::config::KeyValues;
use crate::data::{AugmentationRanges, DepthFrame, HandPose};
use crate::error::{invalid, Error, Result};
use crate::geometry::{compute_hand_center, extract_cube_patch, CameraIntrinsics, CubeSpec};
use crate::model::ModelConfig;
use crate::parallel::{try_map_indexed, Exec};
use crate::tensor::{ParamSet, Tensor};

pub use infer::{
    infer, infer_batch, infer_with_initializer, init_pose, refine_pose, Inference, Initializer,
};
pub use train::{
    augment_training_set, train_cascade, train_init_cnn, train_stage, CascadeRun, LogEntry,
};

/// Hand localisation: centroid of the depth gate, then a fixed metric cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub cube_size: f64,
    /// Depth gate `(near, far)` in millimetres for the centroid.
    pub valid_range: (f64, f64),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            cube_size: 150.0,
            valid_range: (100.0, 1500.0),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let (near, far) = self.valid_range;
        if !(self.cube_size > 0.0 && self.cube_size.is_finite()) || !(near >= 0.0 && near < far) {
            return Err(invalid!("bad preprocessing config {self:?}"));
        }
        Ok(())
    }

    pub fn cube(&self, frame: &DepthFrame, cam: &CameraIntrinsics) -> Result<CubeSpec> {
        CubeSpec::new(compute_hand_center(frame, cam, self.valid_range)?, self.cube_size)
    }

    /// Cube and normalised patch of one frame.
    pub fn locate(&self, frame: &DepthFrame, cam: &CameraIntrinsics, patch_size: usize) -> Result<(CubeSpec, Tensor<f32>)> {
        let cube = self.cube(frame, cam)?;
        let patch = extract_cube_patch(frame, &cube, cam, patch_size)?;
        Ok((cube, patch))
    }
}

/// A frame after localisation.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub frame_id: usize,
    pub patch: Arc<Tensor<f32>>,
    pub cube: CubeSpec,
}

pub fn prepare_frames(
    frames: &[DepthFrame],
    cam: &CameraIntrinsics,
    pre: &PreprocessConfig,
    patch_size: usize,
    exec: Exec,
) -> Result<Vec<PreparedFrame>> {
    try_map_indexed(exec, frames.len(), |i| {
        let (cube, patch) = pre.locate(&frames[i], cam, patch_size)?;
        Ok(PreparedFrame {
            frame_id: i,
            patch: Arc::new(patch),
            cube,
        })
    })
}

/// One element of a stage set: a frame with the pose that guides its
/// refinement and the ground truth it should regress to.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub frame_id: usize,
    pub patch: Arc<Tensor<f32>>,
    pub input_pose: HandPose,
    pub gt_pose: HandPose,
    pub cube: CubeSpec,
}

/// The training multiset after `stage` generations of refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct StageDataset {
    pub samples: Vec<TrainingSample>,
    pub stage: usize,
    /// Samples per generation; `samples.len() == (stage + 1) * generation_size`.
    pub generation_size: usize,
}

impl StageDataset {
    /// Generation 0 from prepared frames, their ground truth and the initial
    /// input poses.
    pub fn initial(frames: &[PreparedFrame], gt: &[HandPose], input: &[HandPose]) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if frames.len() != gt.len() || frames.len() != input.len() {
            return Err(invalid!(
                "{} frames, {} ground-truth poses, {} input poses",
                frames.len(),
                gt.len(),
                input.len()
            ));
        }
        let samples = frames
            .iter()
            .zip(gt)
            .zip(input)
            .map(|((f, g), p)| {
                if g.joint_count() != p.joint_count() {
                    return Err(invalid!("frame {}: input and ground-truth joint counts differ", f.frame_id));
                }
                Ok(TrainingSample {
                    frame_id: f.frame_id,
                    patch: Arc::clone(&f.patch),
                    input_pose: p.clone(),
                    gt_pose: g.clone(),
                    cube: f.cube,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            generation_size: samples.len(),
            samples,
            stage: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The most recently added generation.
    pub fn newest(&self) -> &[TrainingSample] {
        &self.samples[self.samples.len() - self.generation_size..]
    }
}

/// Training schedule and cascade depth.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub train_stages: usize,
    pub infer_iterations: usize,
    /// Epochs for the Init-CNN and for every Pose-REN stage.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// The learning rate is multiplied by `lr_decay` after every
    /// `lr_step_epochs` epochs.
    pub lr_step_epochs: usize,
    pub lr_decay: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub smooth_l1_beta: f64,
    pub augment: bool,
    pub augmentation: AugmentationRanges,
    /// Samples per gradient work item. Fixed independently of the thread
    /// count so results do not depend on it.
    pub chunk_size: usize,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            train_stages: 2,
            infer_iterations: 3,
            epochs: 100,
            batch_size: 128,
            learning_rate: 0.001,
            lr_step_epochs: 25,
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            smooth_l1_beta: 0.01,
            augment: true,
            augmentation: AugmentationRanges::default(),
            chunk_size: 16,
            seed: 0,
        }
    }
}

impl CascadeConfig {
    pub const KEYS: &'static [&'static str] = &[
        "train_stages",
        "infer_iterations",
        "epochs",
        "batch_size",
        "learning_rate",
        "lr_step_epochs",
        "lr_decay",
        "momentum",
        "weight_decay",
        "smooth_l1_beta",
        "augment",
        "aug_scale",
        "aug_translation_px",
        "aug_rotation_deg",
        "chunk_size",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.chunk_size == 0 || self.lr_step_epochs == 0 {
            return Err(invalid!("batch size, chunk size and lr step must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !(self.smooth_l1_beta > 0.0) {
            return Err(invalid!("learning rate must be >= 0 and smooth-L1 beta > 0"));
        }
        self.augmentation.validate()
    }

    /// Learning rate for 1-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f32 {
        let steps = epoch.saturating_sub(1) / self.lr_step_epochs;
        (0..steps).fold(self.learning_rate, |lr, _| lr * self.lr_decay)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.insert("train_stages", self.train_stages);
        kv.insert("infer_iterations", self.infer_iterations);
        kv.insert("epochs", self.epochs);
        kv.insert("batch_size", self.batch_size);
        kv.insert("learning_rate", self.learning_rate);
        kv.insert("lr_step_epochs", self.lr_step_epochs);
        kv.insert("lr_decay", self.lr_decay);
        kv.insert("momentum", self.momentum);
        kv.insert("weight_decay", self.weight_decay);
        kv.insert("smooth_l1_beta", self.smooth_l1_beta);
        kv.insert("augment", self.augment);
        let a = &self.augmentation;
        kv.insert("aug_scale", format!("{},{}", a.scale.0, a.scale.1));
        kv.insert("aug_translation_px", a.translation_px);
        kv.insert("aug_rotation_deg", a.rotation_deg);
        kv.insert("chunk_size", self.chunk_size);
        kv.insert("seed", self.seed);
    }

    pub fn read_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let scale = match kv.get_list::<f64>("aug_scale")? {
            None => d.augmentation.scale,
            Some(v) if v.len() == 2 => (v[0], v[1]),
            Some(v) => return Err(Error::Config(format!("`aug_scale` needs two values, got {}", v.len()))),
        };
        let cfg = Self {
            train_stages: kv.get_or("train_stages", d.train_stages)?,
            infer_iterations: kv.get_or("infer_iterations", d.infer_iterations)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            lr_step_epochs: kv.get_or("lr_step_epochs", d.lr_step_epochs)?,
            lr_decay: kv.get_or("lr_decay", d.lr_decay)?,
            momentum: kv.get_or("momentum", d.momentum)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            smooth_l1_beta: kv.get_or("smooth_l1_beta", d.smooth_l1_beta)?,
            augment: kv.get_or("augment", d.augment)?,
            augmentation: AugmentationRanges {
                scale,
                translation_px: kv.get_or("aug_translation_px", d.augmentation.translation_px)?,
                rotation_deg: kv.get_or("aug_rotation_deg", d.augmentation.rotation_deg)?,
            },
            chunk_size: kv.get_or("chunk_size", d.chunk_size)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

impl PreprocessConfig {
    pub const KEYS: &'static [&'static str] = &["cube_size_mm", "valid_range_mm"];

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.insert("cube_size_mm", self.cube_size);
        kv.insert("valid_range_mm", format!("{},{}", self.valid_range.0, self.valid_range.1));
    }

    pub fn read_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let valid_range = match kv.get_list::<f64>("valid_range_mm")? {
            None => d.valid_range,
            Some(v) if v.len() == 2 => (v[0], v[1]),
            Some(v) => return Err(Error::Config(format!("`valid_range_mm` needs two values, got {}", v.len()))),
        };
        let cfg = Self {
            cube_size: kv.get_or("cube_size_mm", d.cube_size)?,
            valid_range,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// Init-CNN weights plus the single Pose-REN used at every iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedCascade {
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub init_params: ParamSet<f32>,
    pub ren_params: ParamSet<f32>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_steps_every_25_epochs() {
        let c = CascadeConfig::default();
        assert_eq!(c.learning_rate_at(1), 0.001);
        assert_eq!(c.learning_rate_at(25), 0.001);
        assert!((c.learning_rate_at(26) - 0.0001).abs() < 1e-10);
        assert!((c.learning_rate_at(51) - 0.00001).abs() < 1e-11);
    }

    #[test]
    fn config_round_trip() {
        let mut c = CascadeConfig::default();
        c.augmentation.scale = (0.95, 1.05);
        c.seed = 99;
        let mut kv = KeyValues::new();
        c.write_kv(&mut kv);
        kv.reject_unknown(CascadeConfig::KEYS).unwrap();
        assert_eq!(CascadeConfig::read_kv(&kv).unwrap(), c);
        let p = PreprocessConfig {
            cube_size: 180.0,
            valid_range: (200.0, 900.0),
        };
        let mut kv = KeyValues::new();
        p.write_kv(&mut kv);
        assert_eq!(PreprocessConfig::read_kv(&kv).unwrap(), p);
    }
}
