//! Depth frames, hand poses, the on-disk dataset format, synthetic data
//! generation and pose-aware augmentation.

pub mod augment;
pub mod format;
pub mod synth;

use crate::error::{invalid, Error, Result};
use crate::geometry::{pose_normalized_to_world, pose_world_to_normalized, CubeSpec, WorldPoint, CameraIntrinsics};

pub use augment::{augment_sample, AugmentationParams, AugmentationRanges, Similarity};
pub use format::{load_dataset, read_frame, save_dataset, write_frame, MANIFEST_NAME};
pub use synth::{generate_synthetic_dataset, render_dataset, SyntheticHandSpec};

/// Single-channel depth image in millimetres; `0` marks missing depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<u16>,
}

impl DepthFrame {
    pub fn new(width: usize, height: usize, depth: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 || depth.len() != width * height {
            return Err(invalid!(
                "depth frame {width}x{height} needs {} samples, got {}",
                width * height,
                depth.len()
            ));
        }
        Ok(Self { width, height, depth })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0; width * height],
        }
    }

    pub fn depth_at(&self, u: usize, v: usize) -> u16 {
        self.depth[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, d: u16) {
        self.depth[v * self.width + u] = d;
    }
}

/// World-space joint positions of one hand.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HandPose {
    pub joints: Vec<WorldPoint>,
}

impl HandPose {
    pub fn new(joints: Vec<WorldPoint>) -> Self {
        Self { joints }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// `[x0, y0, z0, x1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.joints.iter().flat_map(|p| p.to_array()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(invalid!("flat pose length {} is not a multiple of 3", flat.len()));
        }
        Ok(Self::new(
            flat.chunks_exact(3)
                .map(|c| WorldPoint::new(c[0], c[1], c[2]))
                .collect(),
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.joints
            .iter()
            .all(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite())
    }

    /// Rounds every coordinate to the nearest `f32`.
    pub fn quantized(&self) -> Self {
        Self::new(
            self.joints
                .iter()
                .map(|p| WorldPoint::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64))
                .collect(),
        )
    }

    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> Self {
        Self::new(
            self.joints
                .iter()
                .map(|p| WorldPoint::new(p.x + dx, p.y + dy, p.z + dz))
                .collect(),
        )
    }
}

/// Frames, ground-truth poses and the camera they were captured with.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub camera: CameraIntrinsics,
    pub frames: Vec<DepthFrame>,
    pub poses: Vec<HandPose>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Splits off the last `count` frames.
    pub fn split_tail(mut self, count: usize) -> Result<(Dataset, Dataset)> {
        if count > self.len() {
            return Err(invalid!("cannot hold out {count} of {} frames", self.len()));
        }
        let at = self.len() - count;
        let tail = Dataset {
            camera: self.camera,
            frames: self.frames.split_off(at),
            poses: self.poses.split_off(at),
        };
        Ok((self, tail))
    }
}

/// Per-joint mean of ground-truth poses in cube-normalised coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPose {
    pub normalized: Vec<f64>,
}

impl MeanPose {
    pub fn joint_count(&self) -> usize {
        self.normalized.len() / 3
    }

    /// The mean pose placed in a frame's cube.
    pub fn for_cube(&self, cube: &CubeSpec) -> HandPose {
        pose_normalized_to_world(&self.normalized, cube).expect("length is a multiple of 3")
    }
}

/// Mean of `poses`, each expressed relative to its own cube.
pub fn compute_mean_pose(poses: &[HandPose], cubes: &[CubeSpec]) -> Result<MeanPose> {
    if poses.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if poses.len() != cubes.len() {
        return Err(invalid!("{} poses but {} cubes", poses.len(), cubes.len()));
    }
    let len = poses[0].joint_count() * 3;
    let mut acc = vec![0.0; len];
    for (pose, cube) in poses.iter().zip(cubes) {
        if pose.joint_count() * 3 != len {
            return Err(invalid!("poses disagree on joint count"));
        }
        for (a, v) in acc.iter_mut().zip(pose_world_to_normalized(pose, cube)) {
            *a += v;
        }
    }
    let n = poses.len() as f64;
    Ok(MeanPose {
        normalized: acc.into_iter().map(|v| v / n).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube() -> CubeSpec {
        CubeSpec::new(WorldPoint::new(0.0, 0.0, 500.0), 150.0).unwrap()
    }

    #[test]
    fn mean_of_single_pose_is_itself() {
        let p = HandPose::new(vec![WorldPoint::new(1.0, 2.0, 510.0), WorldPoint::new(-4.0, 8.0, 470.0)]);
        let m = compute_mean_pose(&[p.clone()], &[cube()]).unwrap();
        let back = m.for_cube(&cube());
        for (a, b) in back.joints.iter().zip(&p.joints) {
            assert!(a.distance(b) < 1e-9);
        }
    }

    #[test]
    fn symmetric_poses_average_to_center() {
        let c = cube();
        let a = HandPose::new(vec![WorldPoint::new(20.0, -10.0, 530.0)]);
        let b = HandPose::new(vec![WorldPoint::new(-20.0, 10.0, 470.0)]);
        let m = compute_mean_pose(&[a, b], &[c, c]).unwrap();
        assert!(m.normalized.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(compute_mean_pose(&[], &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn frame_length_checked() {
        assert!(DepthFrame::new(2, 2, vec![0; 3]).is_err());
        assert!(DepthFrame::new(2, 2, vec![0; 4]).is_ok());
    }
}
