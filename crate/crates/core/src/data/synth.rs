//! Articulated synthetic hands rendered to depth with a sphere z-buffer.
//!
//! Joint layout (21 joints): palm, then for each finger thumb..pinky the
//! root, PIP, DIP and tip, i.e. finger `f` owns joints `1 + 4f ..= 4 + 4f`.
//! In the hand's local frame the palm faces the camera (`-z`) and extended
//! fingers point along `-y`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{format::save_dataset, Dataset, DepthFrame, HandPose};
use crate::error::{invalid, Result};
use crate::geometry::{project_world_to_pixel, CameraIntrinsics, WorldPoint};
use crate::parallel::{try_map_indexed, Exec};
use crate::derive_seed;

pub const FINGERS: usize = 5;
pub const JOINTS_PER_FINGER: usize = 4;
pub const HAND_JOINTS: usize = 1 + FINGERS * JOINTS_PER_FINGER;

pub type Range = (f64, f64);

fn proper(r: Range) -> bool {
    r.0.is_finite() && r.1.is_finite() && r.0 <= r.1
}

fn sample(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..=r.1)
    } else {
        r.0
    }
}

/// Skeleton, articulation limits, global motion box and rendering radii.
/// Lengths in millimetres, angles in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHandSpec {
    pub width: usize,
    pub height: usize,
    /// Root joint of each finger in the hand frame.
    pub finger_roots: [[f64; 3]; FINGERS],
    /// In-plane direction of each extended finger, measured from `-y`
    /// towards `+x`.
    pub finger_headings: [f64; FINGERS],
    /// Root-PIP, PIP-DIP and DIP-tip lengths.
    pub bone_lengths: [[f64; 3]; FINGERS],
    pub abduction: [Range; FINGERS],
    /// Flexion at root, PIP and DIP.
    pub flexion: [[Range; 3]; FINGERS],
    /// Shift of the hand origin, symmetric per axis in `x` and `y`.
    pub translation_xy: f64,
    pub depth: Range,
    /// Rotation about the camera axis, then about `y` and `x`.
    pub roll: Range,
    pub yaw: Range,
    pub pitch: Range,
    pub palm_radius: f64,
    /// Radii at root, PIP, DIP and tip.
    pub finger_radii: [f64; 4],
    pub thumb_radius_scale: f64,
    /// Standard deviation of additive depth noise in millimetres.
    pub noise_sigma: f64,
}

impl Default for SyntheticHandSpec {
    fn default() -> Self {
        let deg = |d: f64| d.to_radians();
        let finger_flex = [(0.0, deg(70.0)), (0.0, deg(90.0)), (0.0, deg(60.0))];
        Self {
            width: 160,
            height: 160,
            finger_roots: [
                [-24.0, 4.0, -6.0],
                [-17.0, -30.0, 0.0],
                [-5.0, -32.0, 0.0],
                [7.0, -30.0, 0.0],
                [18.0, -26.0, 0.0],
            ],
            finger_headings: [deg(-55.0), deg(-6.0), 0.0, deg(5.0), deg(12.0)],
            bone_lengths: [
                [22.0, 18.0, 15.0],
                [24.0, 15.0, 12.0],
                [27.0, 17.0, 13.0],
                [25.0, 16.0, 12.0],
                [20.0, 13.0, 11.0],
            ],
            abduction: [
                (deg(-20.0), deg(20.0)),
                (deg(-12.0), deg(12.0)),
                (deg(-8.0), deg(8.0)),
                (deg(-12.0), deg(12.0)),
                (deg(-15.0), deg(15.0)),
            ],
            flexion: [
                [(0.0, deg(50.0)), (0.0, deg(60.0)), (0.0, deg(60.0))],
                finger_flex,
                finger_flex,
                finger_flex,
                finger_flex,
            ],
            translation_xy: 30.0,
            depth: (450.0, 600.0),
            roll: (deg(-30.0), deg(30.0)),
            yaw: (deg(-20.0), deg(20.0)),
            pitch: (deg(-20.0), deg(20.0)),
            palm_radius: 14.0,
            finger_radii: [8.5, 7.5, 6.5, 5.5],
            thumb_radius_scale: 1.1,
            noise_sigma: 0.0,
        }
    }
}

impl SyntheticHandSpec {
    /// This hand with every articulation range collapsed to its lower end.
    pub fn rigid(mut self) -> Self {
        for f in 0..FINGERS {
            self.abduction[f] = (self.abduction[f].0, self.abduction[f].0);
            for r in &mut self.flexion[f] {
                *r = (r.0, r.0);
            }
        }
        self
    }

    /// Largest distance of any joint from the hand origin.
    pub fn reach(&self) -> f64 {
        (0..FINGERS)
            .map(|f| {
                let r = self.finger_roots[f];
                (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt()
                    + self.bone_lengths[f].iter().sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    pub fn validate(&self, cam: &CameraIntrinsics) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid!("frame must be non-empty"));
        }
        if self.bone_lengths.iter().flatten().any(|&l| !(l > 0.0)) {
            return Err(invalid!("bone lengths must be positive"));
        }
        let ranges = self
            .abduction
            .iter()
            .chain(self.flexion.iter().flatten())
            .chain([&self.depth, &self.roll, &self.yaw, &self.pitch]);
        if ranges.clone().any(|&r| !proper(r)) {
            return Err(invalid!("every range must be a proper interval"));
        }
        if !(self.translation_xy >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(invalid!("translation and noise must be non-negative"));
        }
        if self.palm_radius <= 0.0 || self.finger_radii.iter().any(|&r| r <= 0.0) {
            return Err(invalid!("radii must be positive"));
        }
        // Every joint must project inside the frame for any draw.
        let reach = self.reach();
        let near = self.depth.0 - reach;
        if near <= 0.0 {
            return Err(invalid!("hand can cross the camera plane"));
        }
        let span = self.translation_xy + reach;
        let worst = |f: f64, c: f64| (c - f * span / near, c + f * span / near);
        let (u0, u1) = worst(cam.fx, cam.cx);
        let (v0, v1) = worst(cam.fy, cam.cy);
        if u0 < 0.0 || v0 < 0.0 || u1 >= self.width as f64 || v1 >= self.height as f64 {
            return Err(invalid!(
                "translation box lets joints leave the frame (u in [{u0:.1}, {u1:.1}], v in [{v0:.1}, {v1:.1}])"
            ));
        }
        Ok(())
    }

    /// Joint positions in the hand frame for the given articulation.
    pub fn local_joints(&self, abduction: &[f64; FINGERS], flexion: &[[f64; 3]; FINGERS]) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(HAND_JOINTS);
        out.push([0.0, 0.0, 0.0]);
        for f in 0..FINGERS {
            let heading = self.finger_headings[f] + abduction[f];
            let (sh, ch) = heading.sin_cos();
            let mut p = self.finger_roots[f];
            out.push(p);
            let mut bend = 0.0;
            for k in 0..3 {
                bend += flexion[f][k];
                let (sb, cb) = bend.sin_cos();
                let dir = [sh * cb, -ch * cb, -sb];
                let l = self.bone_lengths[f][k];
                p = [p[0] + l * dir[0], p[1] + l * dir[1], p[2] + l * dir[2]];
                out.push(p);
            }
        }
        out
    }

    /// Draws one hand pose; the stream is fixed by `rng`'s state.
    pub fn sample_pose(&self, rng: &mut ChaCha8Rng) -> HandPose {
        let mut abd = [0.0; FINGERS];
        let mut flex = [[0.0; 3]; FINGERS];
        for f in 0..FINGERS {
            abd[f] = sample(rng, self.abduction[f]);
            for k in 0..3 {
                flex[f][k] = sample(rng, self.flexion[f][k]);
            }
        }
        let roll = sample(rng, self.roll);
        let yaw = sample(rng, self.yaw);
        let pitch = sample(rng, self.pitch);
        let t = [
            sample(rng, (-self.translation_xy, self.translation_xy)),
            sample(rng, (-self.translation_xy, self.translation_xy)),
            sample(rng, self.depth),
        ];
        let r = rotation(roll, yaw, pitch);
        let joints = self
            .local_joints(&abd, &flex)
            .into_iter()
            .map(|p| {
                let q = mat_vec(&r, p);
                WorldPoint::new(q[0] + t[0], q[1] + t[1], q[2] + t[2])
            })
            .collect();
        HandPose::new(joints).quantized()
    }

    fn spheres(&self, pose: &HandPose) -> Vec<([f64; 3], f64)> {
        let j: Vec<[f64; 3]> = pose.joints.iter().map(|p| p.to_array()).collect();
        let mut out = Vec::new();
        let palm = j[0];
        out.push((palm, self.palm_radius));
        let palm_link = self.palm_radius * 0.7;
        for f in 0..FINGERS {
            let root = j[1 + 4 * f];
            capsule(&mut out, palm, root, palm_link, palm_link);
            if f >= 2 {
                capsule(&mut out, j[1 + 4 * (f - 1)], root, palm_link, palm_link);
            }
            let scale = if f == 0 { self.thumb_radius_scale } else { 1.0 };
            for k in 0..3 {
                let (a, b) = (j[1 + 4 * f + k], j[2 + 4 * f + k]);
                capsule(&mut out, a, b, self.finger_radii[k] * scale, self.finger_radii[k + 1] * scale);
            }
        }
        out
    }

    /// Depth image of `pose`; `rng` only feeds the optional noise.
    pub fn render(&self, pose: &HandPose, cam: &CameraIntrinsics, rng: &mut ChaCha8Rng) -> DepthFrame {
        let (w, h) = (self.width, self.height);
        let mut zbuf = vec![f64::INFINITY; w * h];
        for (c, r) in self.spheres(pose) {
            if c[2] <= r {
                continue;
            }
            let Ok(px) = project_world_to_pixel(&WorldPoint::new(c[0], c[1], c[2]), cam) else {
                continue;
            };
            let ru = cam.fx * r / (c[2] - r) + 1.0;
            let rv = cam.fy * r / (c[2] - r) + 1.0;
            let u0 = (px.u - ru).floor().max(0.0) as usize;
            let v0 = (px.v - rv).floor().max(0.0) as usize;
            let u1 = ((px.u + ru).ceil().max(0.0) as usize).min(w);
            let v1 = ((px.v + rv).ceil().max(0.0) as usize).min(h);
            let cc = c[0] * c[0] + c[1] * c[1] + c[2] * c[2] - r * r;
            for v in v0..v1 {
                let dy = (v as f64 + 0.5 - cam.cy) / cam.fy;
                for u in u0..u1 {
                    let dx = (u as f64 + 0.5 - cam.cx) / cam.fx;
                    let dd = dx * dx + dy * dy + 1.0;
                    let dc = dx * c[0] + dy * c[1] + c[2];
                    let disc = dc * dc - dd * cc;
                    if disc < 0.0 {
                        continue;
                    }
                    let z = (dc - disc.sqrt()) / dd;
                    let slot = &mut zbuf[v * w + u];
                    if z < *slot {
                        *slot = z;
                    }
                }
            }
        }
        let noise = (self.noise_sigma > 0.0)
            .then(|| Normal::new(0.0, self.noise_sigma).expect("sigma is positive"));
        let depth = zbuf
            .into_iter()
            .map(|z| {
                if !z.is_finite() {
                    return 0;
                }
                let z = match &noise {
                    Some(n) => z + n.sample(rng),
                    None => z,
                };
                z.round().clamp(1.0, u16::MAX as f64) as u16
            })
            .collect();
        DepthFrame {
            width: w,
            height: h,
            depth,
        }
    }
}

fn capsule(out: &mut Vec<([f64; 3], f64)>, a: [f64; 3], b: [f64; 3], ra: f64, rb: f64) {
    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
    let step = 0.4 * ra.min(rb);
    let n = (len / step).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        out.push((
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])],
            ra + t * (rb - ra),
        ));
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

/// `Rz(roll) * Ry(yaw) * Rx(pitch)`.
fn rotation(roll: f64, yaw: f64, pitch: f64) -> Mat3 {
    let (sr, cr) = roll.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

/// Generates `count` frames in memory. Frame `i` depends only on
/// `(spec, cam, seed, i)`.
pub fn render_dataset(
    spec: &SyntheticHandSpec,
    cam: &CameraIntrinsics,
    count: usize,
    seed: u64,
    exec: Exec,
) -> Result<Dataset> {
    if count == 0 {
        return Err(invalid!("synthetic dataset needs at least one frame"));
    }
    spec.validate(cam)?;
    let pairs = try_map_indexed(exec, count, |i| -> Result<(DepthFrame, HandPose)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let pose = spec.sample_pose(&mut rng);
        let frame = spec.render(&pose, cam, &mut rng);
        Ok((frame, pose))
    })?;
    let (frames, poses) = pairs.into_iter().unzip();
    Ok(Dataset {
        camera: *cam,
        frames,
        poses,
    })
}

/// Renders `count` frames and writes them under `dir`; returns the manifest.
pub fn generate_synthetic_dataset(
    spec: &SyntheticHandSpec,
    cam: &CameraIntrinsics,
    count: usize,
    seed: u64,
    dir: &Path,
) -> Result<PathBuf> {
    let data = render_dataset(spec, cam, count, seed, Exec::default())?;
    save_dataset(dir, &data)
}

/// Camera used by the synthetic benchmark.
pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(200.0, 200.0, 80.0, 80.0).expect("valid intrinsics")
}
