//! Pinhole projection, hand-cube extraction and the joint-to-window mapping.
//!
//! Pixel conventions: a continuous image coordinate `u` falls in pixel
//! `floor(u)`, so pixel `k` is centred at `k + 0.5`. The same convention is
//! used for patch and feature-map coordinates.

use crate::data::{DepthFrame, HandPose};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Focal lengths and principal point, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(invalid!("focal lengths must be positive (fx={fx}, fy={fy})"));
        }
        Ok(Self { fx, fy, cx, cy })
    }
}

/// Camera-space point in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &WorldPoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2))
            .sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Image-plane point: `u`, `v` in pixels, `d` depth in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

/// Axis-aligned metric cube around the hand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubeSpec {
    pub center: WorldPoint,
    pub size: f64,
}

/// Image-space box covered by a cube's cross-section at its centre depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchBox {
    pub u0: f64,
    pub v0: f64,
    pub width: f64,
    pub height: f64,
}

impl CubeSpec {
    pub fn new(center: WorldPoint, size: f64) -> Result<Self> {
        if !(size > 0.0) {
            return Err(invalid!("cube size must be positive, got {size}"));
        }
        Ok(Self { center, size })
    }

    pub fn half(&self) -> f64 {
        self.size / 2.0
    }

    /// Bounding box of the cube's projection, taken at the centre depth.
    pub fn projected_box(&self, cam: &CameraIntrinsics) -> Result<PatchBox> {
        let c = project_world_to_pixel(&self.center, cam)?;
        let hu = cam.fx * self.half() / self.center.z;
        let hv = cam.fy * self.half() / self.center.z;
        Ok(PatchBox {
            u0: c.u - hu,
            v0: c.v - hv,
            width: 2.0 * hu,
            height: 2.0 * hv,
        })
    }
}

/// Rectangle on a feature map: top-left corner plus extent, in cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegionWindow {
    pub b_u: usize,
    pub b_v: usize,
    pub w: usize,
    pub h: usize,
}

impl RegionWindow {
    pub const fn new(b_u: usize, b_v: usize, w: usize, h: usize) -> Self {
        Self { b_u, b_v, w, h }
    }

    pub fn fits(&self, feat_w: usize, feat_h: usize) -> bool {
        self.b_u + self.w <= feat_w && self.b_v + self.h <= feat_h
    }
}

pub fn project_world_to_pixel(p: &WorldPoint, cam: &CameraIntrinsics) -> Result<PixelPoint> {
    if !(p.z > 0.0) {
        return Err(Error::NotProjectable(p.z));
    }
    Ok(PixelPoint {
        u: cam.fx * p.x / p.z + cam.cx,
        v: cam.fy * p.y / p.z + cam.cy,
        d: p.z,
    })
}

pub fn project_pixel_to_world(p: &PixelPoint, cam: &CameraIntrinsics) -> Result<WorldPoint> {
    if !(p.d > 0.0) {
        return Err(Error::NotProjectable(p.d));
    }
    Ok(WorldPoint {
        x: (p.u - cam.cx) * p.d / cam.fx,
        y: (p.v - cam.cy) * p.d / cam.fy,
        z: p.d,
    })
}

/// Mean world position of every pixel whose depth lies in `[near, far]`.
pub fn compute_hand_center(
    frame: &DepthFrame,
    cam: &CameraIntrinsics,
    valid_range: (f64, f64),
) -> Result<WorldPoint> {
    let (near, far) = valid_range;
    let (mut sx, mut sy, mut sz, mut n) = (0.0, 0.0, 0.0, 0usize);
    for v in 0..frame.height {
        for u in 0..frame.width {
            let d = frame.depth_at(u, v) as f64;
            if d == 0.0 || d < near || d > far {
                continue;
            }
            let p = project_pixel_to_world(
                &PixelPoint {
                    u: u as f64 + 0.5,
                    v: v as f64 + 0.5,
                    d,
                },
                cam,
            )?;
            sx += p.x;
            sy += p.y;
            sz += p.z;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    let n = n as f64;
    Ok(WorldPoint::new(sx / n, sy / n, sz / n))
}

/// Cube-normalised patch of side `out_size`, values in `[-1, 1]`.
///
/// Depth is mapped to `(d - center.z) / (size / 2)` and truncated to the
/// unit range; missing depth and pixels outside the frame become `+1`.
pub fn extract_cube_patch(
    frame: &DepthFrame,
    cube: &CubeSpec,
    cam: &CameraIntrinsics,
    out_size: usize,
) -> Result<Tensor<f32>> {
    if out_size < 2 {
        return Err(invalid!("patch size must be at least 2, got {out_size}"));
    }
    let bx = cube.projected_box(cam)?;
    if bx.width < 1.0 || bx.height < 1.0 {
        return Err(Error::DegenerateBox(bx.width.min(bx.height)));
    }
    let (su, sv) = (bx.width / out_size as f64, bx.height / out_size as f64);
    let half = cube.half();
    let mut data = Vec::with_capacity(out_size * out_size);
    for i in 0..out_size {
        let v = (bx.v0 + (i as f64 + 0.5) * sv).floor();
        for j in 0..out_size {
            let u = (bx.u0 + (j as f64 + 0.5) * su).floor();
            let d = if u < 0.0 || v < 0.0 || u >= frame.width as f64 || v >= frame.height as f64 {
                0
            } else {
                frame.depth_at(u as usize, v as usize)
            };
            let value = if d == 0 {
                1.0
            } else {
                ((d as f64 - cube.center.z) / half).clamp(-1.0, 1.0)
            };
            data.push(value as f32);
        }
    }
    Tensor::new(&[1, 1, out_size, out_size], data)
}

/// `(coord - center) / (size / 2)` per coordinate, joints flattened as
/// `[x0, y0, z0, x1, ...]`. Values outside the cube are kept.
pub fn pose_world_to_normalized(pose: &HandPose, cube: &CubeSpec) -> Vec<f64> {
    let h = cube.half();
    let c = cube.center;
    pose.joints
        .iter()
        .flat_map(|p| [(p.x - c.x) / h, (p.y - c.y) / h, (p.z - c.z) / h])
        .collect()
}

/// Inverse of [`pose_world_to_normalized`].
pub fn pose_normalized_to_world(norm: &[f64], cube: &CubeSpec) -> Result<HandPose> {
    if norm.len() % 3 != 0 {
        return Err(invalid!("normalized pose length {} is not a multiple of 3", norm.len()));
    }
    let h = cube.half();
    let c = cube.center;
    Ok(HandPose::new(
        norm.chunks_exact(3)
            .map(|v| WorldPoint::new(v[0] * h + c.x, v[1] * h + c.y, v[2] * h + c.z))
            .collect(),
    ))
}

/// Continuous patch coordinates `(pu, pv)` of a world point for a patch of
/// side `patch_size` cut from `cube`.
pub fn world_to_patch(
    p: &WorldPoint,
    cube: &CubeSpec,
    cam: &CameraIntrinsics,
    patch_size: usize,
) -> Result<(f64, f64)> {
    let px = project_world_to_pixel(p, cam)?;
    let bx = cube.projected_box(cam)?;
    let s = patch_size as f64;
    Ok(((px.u - bx.u0) * s / bx.width, (px.v - bx.v0) * s / bx.height))
}

/// Inverse of [`world_to_patch`] at depth `depth`.
pub fn patch_to_world(
    pu: f64,
    pv: f64,
    depth: f64,
    cube: &CubeSpec,
    cam: &CameraIntrinsics,
    patch_size: usize,
) -> Result<WorldPoint> {
    let bx = cube.projected_box(cam)?;
    let s = patch_size as f64;
    project_pixel_to_world(
        &PixelPoint {
            u: bx.u0 + pu * bx.width / s,
            v: bx.v0 + pv * bx.height / s,
            d: depth,
        },
        cam,
    )
}

/// Feature-map window of extent `w x h` centred on a joint's projection.
///
/// The joint is projected into patch coordinates, scaled by
/// `feat_size / patch_size`, rounded, offset by half the extent and clamped so
/// the window always lies inside the map.
#[allow(clippy::too_many_arguments)]
pub fn compute_region_window(
    joint: &WorldPoint,
    cube: &CubeSpec,
    cam: &CameraIntrinsics,
    patch_size: usize,
    feat_size: usize,
    w: usize,
    h: usize,
) -> Result<RegionWindow> {
    if w == 0 || h == 0 || w > feat_size || h > feat_size {
        return Err(invalid!("window {w}x{h} does not fit a {feat_size} feature map"));
    }
    let (pu, pv) = world_to_patch(joint, cube, cam, patch_size)?;
    let scale = feat_size as f64 / patch_size as f64;
    let place = |c: f64, extent: usize| -> usize {
        let b = (c * scale).round() - (extent / 2) as f64;
        // NaN clamps to NaN and casts to 0.
        b.clamp(0.0, (feat_size - extent) as f64) as usize
    };
    Ok(RegionWindow::new(place(pu, w), place(pv, h), w, h))
}

/// Windows laid out on a uniform grid, independent of any pose.
pub fn grid_windows(count: usize, feat_size: usize, w: usize, h: usize) -> Result<Vec<RegionWindow>> {
    if w > feat_size || h > feat_size || count == 0 {
        return Err(invalid!("cannot place {count} windows of {w}x{h} on a {feat_size} map"));
    }
    let side = (count as f64).sqrt().ceil() as usize;
    let pos = |k: usize, extent: usize| -> usize {
        if side == 1 {
            (feat_size - extent) / 2
        } else {
            ((k * (feat_size - extent)) as f64 / (side - 1) as f64).round() as usize
        }
    };
    Ok((0..count)
        .map(|i| RegionWindow::new(pos(i % side, w), pos(i / side, h), w, h))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 48.0, 48.0).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let p = project_world_to_pixel(&WorldPoint::new(0.0, 0.0, 500.0), &cam()).unwrap();
        assert_eq!((p.u, p.v, p.d), (48.0, 48.0, 500.0));
    }

    #[test]
    fn pinhole_direct_evaluation() {
        let p = project_world_to_pixel(&WorldPoint::new(50.0, 0.0, 500.0), &cam()).unwrap();
        assert!((p.u - 58.0).abs() < 1e-12);
        let w = project_pixel_to_world(&PixelPoint { u: 58.0, v: 48.0, d: 500.0 }, &cam()).unwrap();
        assert!((w.x - 50.0).abs() < 1e-12);
        let c = project_pixel_to_world(&PixelPoint { u: 48.0, v: 48.0, d: 500.0 }, &cam()).unwrap();
        assert_eq!(c, WorldPoint::new(0.0, 0.0, 500.0));
    }

    #[test]
    fn non_positive_depth_rejected() {
        assert!(project_world_to_pixel(&WorldPoint::new(1.0, 1.0, 0.0), &cam()).is_err());
        assert!(project_pixel_to_world(&PixelPoint { u: 1.0, v: 1.0, d: -3.0 }, &cam()).is_err());
    }

    #[test]
    fn window_examples() {
        // 96 patch, 12 feature map, 7x7 window.
        let c = CameraIntrinsics::new(200.0, 200.0, 80.0, 80.0).unwrap();
        let cube = CubeSpec::new(WorldPoint::new(0.0, 0.0, 500.0), 150.0).unwrap();
        let at_center = compute_region_window(&cube.center, &cube, &c, 96, 12, 7, 7).unwrap();
        assert_eq!(at_center, RegionWindow::new(3, 3, 7, 7));
        let corner = patch_to_world(0.0, 0.0, 500.0, &cube, &c, 96).unwrap();
        let w = compute_region_window(&corner, &cube, &c, 96, 12, 7, 7).unwrap();
        assert_eq!(w, RegionWindow::new(0, 0, 7, 7));
        let far = WorldPoint::new(1e6, -1e6, 500.0);
        let w = compute_region_window(&far, &cube, &c, 96, 12, 7, 7).unwrap();
        assert_eq!(w, RegionWindow::new(5, 0, 7, 7));
        assert!(compute_region_window(&WorldPoint::new(0.0, 0.0, -1.0), &cube, &c, 96, 12, 7, 7).is_err());
    }

    #[test]
    fn normalization_examples() {
        let cube = CubeSpec::new(WorldPoint::new(10.0, -20.0, 400.0), 150.0).unwrap();
        let pose = HandPose::new(vec![cube.center, WorldPoint::new(85.0, -20.0, 400.0)]);
        assert_eq!(pose_world_to_normalized(&pose, &cube), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn grid_layout_inside() {
        let ws = grid_windows(4, 12, 6, 6).unwrap();
        assert_eq!(ws[0], RegionWindow::new(0, 0, 6, 6));
        assert_eq!(ws[3], RegionWindow::new(6, 6, 6, 6));
        for w in grid_windows(11, 12, 7, 7).unwrap() {
            assert!(w.fits(12, 12));
        }
    }
}
