//! In-plane similarity augmentation of depth patches and the matching
//! transform of hand poses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HandPose;
use crate::error::{invalid, shape_err, Result};
use crate::geometry::{patch_to_world, world_to_patch, CameraIntrinsics, CubeSpec};
use crate::tensor::Tensor;

/// Sampling ranges for [`AugmentationParams::draw`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationRanges {
    pub scale: (f64, f64),
    /// Symmetric bound on the per-axis shift, in patch pixels.
    pub translation_px: f64,
    /// Symmetric bound on the rotation, in degrees.
    pub rotation_deg: f64,
}

impl Default for AugmentationRanges {
    fn default() -> Self {
        Self {
            scale: (0.9, 1.1),
            translation_px: 10.0,
            rotation_deg: 180.0,
        }
    }
}

impl AugmentationRanges {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite())
            || !(self.translation_px >= 0.0 && self.translation_px.is_finite())
            || !(self.rotation_deg >= 0.0 && self.rotation_deg.is_finite())
        {
            return Err(invalid!("bad augmentation ranges {self:?}"));
        }
        Ok(())
    }

    pub fn contains(&self, p: &AugmentationParams) -> bool {
        p.scale >= self.scale.0
            && p.scale <= self.scale.1
            && p.tx.abs() <= self.translation_px
            && p.ty.abs() <= self.translation_px
            && p.rotation_deg.abs() <= self.rotation_deg
    }
}

/// One draw of scale, shift (patch pixels) and rotation (degrees).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationParams {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    pub rotation_deg: f64,
    pub seed: u64,
}

impl AugmentationParams {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
            rotation_deg: 0.0,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.tx == 0.0 && self.ty == 0.0 && self.rotation_deg == 0.0
    }

    /// Uniform draw inside `ranges`, fully determined by `seed`.
    pub fn draw(ranges: &AugmentationRanges, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sym = |bound: f64| {
            if bound > 0.0 {
                rng.random_range(-bound..=bound)
            } else {
                0.0
            }
        };
        let tx = sym(ranges.translation_px);
        let ty = sym(ranges.translation_px);
        let rotation_deg = sym(ranges.rotation_deg);
        let (lo, hi) = ranges.scale;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self {
            scale,
            tx,
            ty,
            rotation_deg,
            seed,
        }
    }

    pub fn similarity(&self, patch_size: usize) -> Similarity {
        let (sin, cos) = sin_cos_deg(self.rotation_deg);
        let c = patch_size as f64 / 2.0;
        Similarity {
            cos,
            sin,
            scale: self.scale,
            tx: self.tx,
            ty: self.ty,
            center: (c, c),
        }
    }
}

/// `sin` and `cos` of an angle in degrees, exact at multiples of 90.
pub fn sin_cos_deg(deg: f64) -> (f64, f64) {
    if deg % 90.0 == 0.0 {
        match (deg / 90.0).rem_euclid(4.0) as u8 {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

/// `p' = s R (p - c) + c + t` on continuous patch coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub cos: f64,
    pub sin: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    pub center: (f64, f64),
}

impl Similarity {
    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let (du, dv) = (u - self.center.0, v - self.center.1);
        let ru = self.cos * du - self.sin * dv;
        let rv = self.sin * du + self.cos * dv;
        (
            self.scale * ru + self.center.0 + self.tx,
            self.scale * rv + self.center.1 + self.ty,
        )
    }

    pub fn invert(&self, u: f64, v: f64) -> (f64, f64) {
        let du = (u - self.center.0 - self.tx) / self.scale;
        let dv = (v - self.center.1 - self.ty) / self.scale;
        (
            self.cos * du + self.sin * dv + self.center.0,
            -self.sin * du + self.cos * dv + self.center.1,
        )
    }
}

/// Resamples every `S x S` plane of `patch` (nearest neighbour, `+1` outside).
pub fn warp_patch(patch: &Tensor<f32>, sim: &Similarity) -> Result<Tensor<f32>> {
    let shape = patch.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(shape_err!("patch must end in a square plane, got {shape:?}"));
    }
    let s = shape[shape.len() - 1];
    let mut out = Vec::with_capacity(patch.len());
    for plane in patch.data().chunks_exact(s * s) {
        for i in 0..s {
            for j in 0..s {
                let (su, sv) = sim.invert(j as f64 + 0.5, i as f64 + 0.5);
                let (fu, fv) = (su.floor(), sv.floor());
                let inside = fu >= 0.0 && fv >= 0.0 && fu < s as f64 && fv < s as f64;
                out.push(if inside {
                    plane[fv as usize * s + fu as usize]
                } else {
                    1.0
                });
            }
        }
    }
    Tensor::new(shape, out)
}

/// Moves every joint's patch projection by `sim`, keeping its depth.
pub fn transform_pose(
    pose: &HandPose,
    cube: &CubeSpec,
    cam: &CameraIntrinsics,
    patch_size: usize,
    sim: &Similarity,
) -> Result<HandPose> {
    let joints = pose
        .joints
        .iter()
        .map(|p| {
            let (pu, pv) = world_to_patch(p, cube, cam, patch_size)?;
            let (qu, qv) = sim.apply(pu, pv);
            patch_to_world(qu, qv, p.z, cube, cam, patch_size)
        })
        .collect::<Result<_>>()?;
    Ok(HandPose::new(joints))
}

/// Applies one similarity draw to a patch and a pose.
///
/// Identity parameters return both inputs unchanged.
pub fn augment_sample(
    patch: &Tensor<f32>,
    pose: &HandPose,
    cube: &CubeSpec,
    cam: &CameraIntrinsics,
    params: &AugmentationParams,
) -> Result<(Tensor<f32>, HandPose)> {
    let shape = patch.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(shape_err!("patch must end in a square plane, got {shape:?}"));
    }
    if params.is_identity() {
        return Ok((patch.clone(), pose.clone()));
    }
    let s = shape[shape.len() - 1];
    let sim = params.similarity(s);
    Ok((warp_patch(patch, &sim)?, transform_pose(pose, cube, cam, s, &sim)?))
}
