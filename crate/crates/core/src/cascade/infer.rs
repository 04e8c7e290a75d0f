use super::TrainedCascade;
use crate::data::{DepthFrame, HandPose, MeanPose};
use crate::error::{invalid, Result};
use crate::geometry::{pose_normalized_to_world, CameraIntrinsics, CubeSpec};
use crate::model::{init_cnn_forward, posren_forward, InitCnnConfig, PoseRenConfig};
use crate::parallel::{try_map_indexed, Exec};
use crate::tensor::{ParamSet, Tensor};

/// Poses for stages `0..=T`; the last is the final estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub stages: Vec<HandPose>,
}

impl Inference {
    pub fn final_pose(&self) -> &HandPose {
        self.stages.last().expect("at least the stage-0 pose")
    }
}

/// Source of the stage-0 pose.
#[derive(Debug, Clone, PartialEq)]
pub enum Initializer {
    InitCnn,
    /// The mean pose placed in each frame's cube.
    MeanPose(MeanPose),
    /// One externally supplied pose per frame.
    Poses(Vec<HandPose>),
}

/// Init-CNN estimate for a prepared patch.
pub fn init_pose(patch: &Tensor<f32>, cube: &CubeSpec, params: &ParamSet<f32>, model: &InitCnnConfig) -> Result<HandPose> {
    pose_normalized_to_world(&init_cnn_forward(patch, params, model)?, cube)
}

/// One evaluation-mode Pose-REN pass guided by `guide`.
pub fn refine_pose(
    patch: &Tensor<f32>,
    guide: &HandPose,
    cube: &CubeSpec,
    cam: &CameraIntrinsics,
    params: &ParamSet<f32>,
    model: &PoseRenConfig,
) -> Result<HandPose> {
    let (norm, _) = posren_forward(patch, guide, cube, cam, params, model, false, 0)?;
    pose_normalized_to_world(&norm, cube)
}

fn iterate(
    patch: &Tensor<f32>,
    cube: &CubeSpec,
    cam: &CameraIntrinsics,
    cascade: &TrainedCascade,
    iterations: usize,
    start: HandPose,
) -> Result<Inference> {
    let mut stages = Vec::with_capacity(iterations + 1);
    stages.push(start);
    for _ in 0..iterations {
        let next = refine_pose(patch, stages.last().expect("non-empty"), cube, cam, &cascade.ren_params, &cascade.model.ren)?;
        stages.push(next);
    }
    Ok(Inference { stages })
}

/// Localises the hand, predicts the stage-0 pose with the Init-CNN and
/// refines it `iterations` times with the one Pose-REN.
pub fn infer(frame: &DepthFrame, cam: &CameraIntrinsics, cascade: &TrainedCascade, iterations: usize) -> Result<Inference> {
    let (cube, patch) = cascade.preprocess.locate(frame, cam, cascade.model.init.backbone.input_size)?;
    let start = init_pose(&patch, &cube, &cascade.init_params, &cascade.model.init)?;
    iterate(&patch, &cube, cam, cascade, iterations, start)
}

/// [`infer`] with an externally supplied stage-0 pose.
pub fn infer_with_initializer(
    frame: &DepthFrame,
    cam: &CameraIntrinsics,
    cascade: &TrainedCascade,
    iterations: usize,
    init: &HandPose,
) -> Result<Inference> {
    let j = cascade.model.ren.joint_count();
    if init.joint_count() != j {
        return Err(invalid!("initial pose has {} joints, model expects {j}", init.joint_count()));
    }
    let (cube, patch) = cascade.preprocess.locate(frame, cam, cascade.model.init.backbone.input_size)?;
    iterate(&patch, &cube, cam, cascade, iterations, init.clone())
}

/// Inference over many frames; results are in frame order and do not depend
/// on `exec`.
pub fn infer_batch(
    frames: &[DepthFrame],
    cam: &CameraIntrinsics,
    cascade: &TrainedCascade,
    iterations: usize,
    init: &Initializer,
    exec: Exec,
) -> Result<Vec<Inference>> {
    if let Initializer::Poses(p) = init {
        if p.len() != frames.len() {
            return Err(invalid!("{} initial poses for {} frames", p.len(), frames.len()));
        }
    }
    try_map_indexed(exec, frames.len(), |i| match init {
        Initializer::InitCnn => infer(&frames[i], cam, cascade, iterations),
        Initializer::MeanPose(m) => {
            let cube = cascade.preprocess.cube(&frames[i], cam)?;
            infer_with_initializer(&frames[i], cam, cascade, iterations, &m.for_cube(&cube))
        }
        Initializer::Poses(p) => infer_with_initializer(&frames[i], cam, cascade, iterations, &p[i]),
    })
}
