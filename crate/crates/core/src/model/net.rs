//! Parameter initialisation and tape construction for both networks.
//!
//! Parameter names: `backbone.conv{1..6}.{w,b}`, `backbone.skip{block}.{w,b}`
//! (1x1 projections for taps whose channel counts differ), `init.fc.*` and
//! `init.out.*` for the baseline, and `ren.region{r}.*`, `ren.finger{f}.*`,
//! `ren.fuse.*`, `ren.out.*` for the refinement network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BackboneConfig, InitCnnConfig, PoseRenConfig, FINGER_COUNT};
use crate::data::HandPose;
use crate::derive_seed;
use crate::error::{invalid, shape_err, Result};
use crate::geometry::{compute_region_window, grid_windows, CameraIntrinsics, CubeSpec, RegionWindow};
use crate::tensor::{ParamSet, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy)]
enum Init {
    /// `U(-sqrt(6 / fan_in), +)`, for layers followed by ReLU.
    He,
    /// `U(-sqrt(6 / (fan_in + fan_out)), +)`, for the linear output layer.
    Glorot,
}

fn uniform<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, init: Init, seed: u64) -> Result<Tensor<T>> {
    let limit = match init {
        Init::He => (6.0 / fan_in as f64).sqrt(),
        Init::Glorot => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-limit..limit)))
}

/// Adds `name.w` / `name.b` to `params`; each tensor draws from its own
/// stream so layers never shift each other's values.
fn add_layer<T: Scalar>(params: &mut ParamSet<T>, name: &str, w_shape: &[usize], fan_in: usize, fan_out: usize, init: Init, seed: u64) -> Result<()> {
    let s = derive_seed(seed, params.len() as u64);
    params.insert(format!("{name}.w"), uniform(w_shape, fan_in, fan_out, init, s)?)?;
    let bias_len = if w_shape.len() == 4 { w_shape[0] } else { w_shape[1] };
    params.insert(format!("{name}.b"), Tensor::zeros(&[bias_len])?)
}

fn add_linear<T: Scalar>(params: &mut ParamSet<T>, name: &str, d: usize, e: usize, init: Init, seed: u64) -> Result<()> {
    add_layer(params, name, &[d, e], d, e, init, seed)
}

fn backbone_params<T: Scalar>(cfg: &BackboneConfig, seed: u64, params: &mut ParamSet<T>) -> Result<()> {
    cfg.validate()?;
    let k = cfg.kernel_size;
    let mut cin = 1;
    for (i, &cout) in cfg.conv_channels.iter().enumerate() {
        add_layer(params, &format!("backbone.conv{}", i + 1), &[cout, cin, k, k], cin * k * k, cout * k * k, Init::He, seed)?;
        cin = cout;
    }
    for block in 0..3 {
        let (src, dst) = skip_channels(cfg, block);
        if cfg.has_tap(block) && src != dst {
            add_layer(params, &format!("backbone.skip{block}"), &[dst, src, 1, 1], src, dst, Init::He, seed)?;
        }
    }
    Ok(())
}

/// Channels entering block `block` and leaving its second convolution.
fn skip_channels(cfg: &BackboneConfig, block: usize) -> (usize, usize) {
    let src = if block == 0 { 1 } else { cfg.conv_channels[2 * block - 1] };
    (src, cfg.conv_channels[2 * block + 1])
}

pub fn init_cnn_params<T: Scalar>(cfg: &InitCnnConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    backbone_params(&cfg.backbone, seed, &mut p)?;
    let f = cfg.backbone.feat_size();
    let flat = cfg.backbone.feat_channels() * f * f;
    add_linear(&mut p, "init.fc", flat, cfg.fc_dim, Init::He, seed)?;
    add_linear(&mut p, "init.out", cfg.fc_dim, 3 * cfg.joint_count, Init::Glorot, seed)?;
    Ok(p)
}

pub fn posren_params<T: Scalar>(cfg: &PoseRenConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    backbone_params(&cfg.backbone, seed, &mut p)?;
    let m = cfg.region_count();
    let rf = cfg.region_features();
    let out = 3 * cfg.joint_count();
    if cfg.flat_ensemble {
        for r in 0..m {
            add_linear(&mut p, &format!("ren.region{r}"), rf, cfg.flat_region_dim, Init::He, seed)?;
        }
        add_linear(&mut p, "ren.fuse", m * cfg.flat_region_dim, cfg.flat_fuse_dim, Init::He, seed)?;
        add_linear(&mut p, "ren.out", cfg.flat_fuse_dim, out, Init::Glorot, seed)?;
    } else {
        for r in 0..m {
            add_linear(&mut p, &format!("ren.region{r}"), rf, cfg.fc_region_dim, Init::He, seed)?;
        }
        for (f, group) in cfg.schema.finger_groups().iter().enumerate() {
            add_linear(&mut p, &format!("ren.finger{f}"), group.len() * cfg.fc_region_dim, cfg.fc_finger_dim, Init::He, seed)?;
        }
        add_linear(&mut p, "ren.out", FINGER_COUNT * cfg.fc_finger_dim, out, Init::Glorot, seed)?;
    }
    Ok(p)
}

/// A parameter set placed on a tape; every tensor becomes a leaf.
pub struct Bound<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    vars: Vec<Var>,
}

impl<'p, T: Scalar> Bound<'p, T> {
    pub fn new(tape: &mut Tape<'p, T>, params: &'p ParamSet<T>) -> Self {
        let vars = params.tensors().iter().map(|t| tape.param(t)).collect();
        Self { params, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| invalid!("no parameter named `{name}`"))
    }

    /// Gradients in parameter order; parameters unused by the graph get zeros.
    pub fn take_grads(&self, tape: &mut Tape<'p, T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![T::zero(); t.len()]))
            .collect()
    }

    fn linear(&self, tape: &mut Tape<'p, T>, x: Var, name: &str) -> Result<Var> {
        let (w, b) = (self.var(&format!("{name}.w"))?, self.var(&format!("{name}.b"))?);
        tape.linear(x, w, b)
    }

    fn conv(&self, tape: &mut Tape<'p, T>, x: Var, name: &str, pad: usize) -> Result<Var> {
        let (w, b) = (self.var(&format!("{name}.w"))?, self.var(&format!("{name}.b"))?);
        tape.conv2d(x, w, b, 1, pad)
    }
}

fn check_input(shape: &[usize], size: usize) -> Result<usize> {
    match *shape {
        [n, 1, h, w] if h == size && w == size => Ok(n),
        _ => Err(shape_err!("expected N x 1 x {size} x {size} patches, got {shape:?}")),
    }
}

/// Three blocks of conv-ReLU, conv, optional skip add, ReLU, max-pool.
pub fn backbone_tape<'p, T: Scalar>(tape: &mut Tape<'p, T>, p: &Bound<'p, T>, cfg: &BackboneConfig, x: Var) -> Result<Var> {
    check_input(tape.shape(x), cfg.input_size)?;
    let pad = cfg.kernel_size / 2;
    let mut h = x;
    for block in 0..3 {
        let src = h;
        let a = p.conv(tape, h, &format!("backbone.conv{}", 2 * block + 1), pad)?;
        let a = tape.relu(a)?;
        let mut z = p.conv(tape, a, &format!("backbone.conv{}", 2 * block + 2), pad)?;
        if cfg.has_tap(block) {
            let (sc, dc) = skip_channels(cfg, block);
            let skip = if sc == dc { src } else { p.conv(tape, src, &format!("backbone.skip{block}"), 0)? };
            z = tape.add(z, skip)?;
        }
        let z = tape.relu(z)?;
        h = tape.max_pool2d(z, cfg.pool_window, cfg.pool_window)?;
    }
    Ok(h)
}

fn flatten<T: Scalar>(tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let n = s[0];
    let rest = s[1..].iter().product();
    tape.reshape(x, &[n, rest])
}

/// Init-CNN graph builder.
pub struct InitCnn;

impl InitCnn {
    /// Returns the `N x 3J` normalised pose node.
    pub fn build<'p, T: Scalar>(
        tape: &mut Tape<'p, T>,
        p: &Bound<'p, T>,
        cfg: &InitCnnConfig,
        x: Var,
        training: bool,
        seed: u64,
    ) -> Result<Var> {
        let feat = backbone_tape(tape, p, &cfg.backbone, x)?;
        let flat = flatten(tape, feat)?;
        let h = p.linear(tape, flat, "init.fc")?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, cfg.dropout_rate, training, derive_seed(seed, 1000))?;
        p.linear(tape, h, "init.out")
    }

    /// Evaluation-mode predictions for a batch of patches, one `3J` vector each.
    pub fn predict<T: Scalar>(params: &ParamSet<T>, cfg: &InitCnnConfig, patches: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, params);
        let x = tape.input(patches);
        let y = Self::build(&mut tape, &p, cfg, x, false, 0)?;
        Ok(rows(tape.value(y)))
    }
}

fn rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let e = t.shape()[1];
    t.data()
        .chunks_exact(e)
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect()
}

/// Intermediate nodes of one Pose-REN pass.
#[derive(Debug, Clone)]
pub struct HiddenVars {
    pub h1: Vec<Var>,
    pub hbar1: Vec<Var>,
    pub h2: Vec<Var>,
    pub hbar2: Var,
}

/// Intermediate features of one Pose-REN pass: per-region features `h1`,
/// per-finger concatenations `hbar1`, per-finger features `h2` and their
/// concatenation `hbar2`. In flat mode `hbar1` is empty and `h2` holds the
/// single fused feature.
#[derive(Debug, Clone)]
pub struct HiddenActivations<T: Scalar = f32> {
    pub h1: Vec<Tensor<T>>,
    pub hbar1: Vec<Tensor<T>>,
    pub h2: Vec<Tensor<T>>,
    pub hbar2: Tensor<T>,
}

impl<T: Scalar> HiddenActivations<T> {
    pub fn from_vars(tape: &Tape<'_, T>, v: &HiddenVars) -> Self {
        let get = |vs: &[Var]| vs.iter().map(|&x| tape.value(x).clone()).collect();
        Self {
            h1: get(&v.h1),
            hbar1: get(&v.hbar1),
            h2: get(&v.h2),
            hbar2: tape.value(v.hbar2).clone(),
        }
    }
}

/// Pose-REN graph builder.
pub struct PoseRen;

impl PoseRen {
    /// `windows[r][n]` is region `r`'s window for sample `n`; a single entry
    /// per region is shared by the whole batch.
    #[allow(clippy::too_many_arguments)]
    pub fn build<'p, T: Scalar>(
        tape: &mut Tape<'p, T>,
        p: &Bound<'p, T>,
        cfg: &PoseRenConfig,
        x: Var,
        windows: &[Vec<RegionWindow>],
        training: bool,
        seed: u64,
    ) -> Result<(Var, HiddenVars)> {
        let m = cfg.region_count();
        if windows.len() != m {
            return Err(invalid!("expected {m} region window lists, got {}", windows.len()));
        }
        let feat = backbone_tape(tape, p, &cfg.backbone, x)?;
        let mut h1 = Vec::with_capacity(m);
        for (r, win) in windows.iter().enumerate() {
            if win.iter().any(|w| w.w != cfg.region_w || w.h != cfg.region_h) {
                return Err(invalid!("region {r} window extent differs from the configured {}x{}", cfg.region_w, cfg.region_h));
            }
            let c = tape.crop(feat, win)?;
            let c = flatten(tape, c)?;
            let h = p.linear(tape, c, &format!("ren.region{r}"))?;
            let h = tape.relu(h)?;
            h1.push(tape.dropout(h, cfg.dropout_rate, training, derive_seed(seed, r as u64))?);
        }
        let (hbar1, h2, hbar2) = if cfg.flat_ensemble {
            let all = tape.concat(&h1, 1)?;
            let h = p.linear(tape, all, "ren.fuse")?;
            let h = tape.relu(h)?;
            let h = tape.dropout(h, cfg.dropout_rate, training, derive_seed(seed, 200))?;
            (Vec::new(), vec![h], h)
        } else {
            let mut hbar1 = Vec::with_capacity(FINGER_COUNT);
            let mut h2 = Vec::with_capacity(FINGER_COUNT);
            for (f, group) in cfg.schema.finger_groups().iter().enumerate() {
                let members: Vec<Var> = group.iter().map(|&r| h1[r]).collect();
                let cat = tape.concat(&members, 1)?;
                hbar1.push(cat);
                let h = p.linear(tape, cat, &format!("ren.finger{f}"))?;
                let h = tape.relu(h)?;
                h2.push(tape.dropout(h, cfg.dropout_rate, training, derive_seed(seed, 100 + f as u64))?);
            }
            let hbar2 = tape.concat(&h2, 1)?;
            (hbar1, h2, hbar2)
        };
        let out = p.linear(tape, hbar2, "ren.out")?;
        Ok((out, HiddenVars { h1, hbar1, h2, hbar2 }))
    }
}

/// The `M` crop windows for one frame: at the guide joints, or on a grid in
/// grid mode.
pub fn guide_windows(pose: &HandPose, cube: &CubeSpec, cam: &CameraIntrinsics, cfg: &PoseRenConfig) -> Result<Vec<RegionWindow>> {
    let feat = cfg.backbone.feat_size();
    if cfg.grid_regions {
        return grid_windows(cfg.region_count(), feat, cfg.region_w, cfg.region_h);
    }
    if pose.joint_count() != cfg.joint_count() {
        return Err(invalid!(
            "guide pose has {} joints, schema expects {}",
            pose.joint_count(),
            cfg.joint_count()
        ));
    }
    cfg.schema
        .guide_indices()
        .iter()
        .map(|&j| compute_region_window(&pose.joints[j], cube, cam, cfg.backbone.input_size, feat, cfg.region_w, cfg.region_h))
        .collect()
}

/// Backbone features of a batch of patches.
pub fn backbone_forward<T: Scalar>(patch: &Tensor<T>, params: &ParamSet<T>, cfg: &BackboneConfig) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params);
    let x = tape.input(patch);
    let y = backbone_tape(&mut tape, &p, cfg, x)?;
    Ok(tape.value(y).clone())
}

/// Normalised `3J` pose predicted by the Init-CNN for one `1x1xSxS` patch.
pub fn init_cnn_forward<T: Scalar>(patch: &Tensor<T>, params: &ParamSet<T>, cfg: &InitCnnConfig) -> Result<Vec<f64>> {
    if check_input(patch.shape(), cfg.backbone.input_size)? != 1 {
        return Err(shape_err!("init_cnn_forward takes a single patch"));
    }
    Ok(InitCnn::predict(params, cfg, patch)?.remove(0))
}

/// One Pose-REN pass for a single patch guided by `guide_pose`.
#[allow(clippy::too_many_arguments)]
pub fn posren_forward<T: Scalar>(
    patch: &Tensor<T>,
    guide_pose: &HandPose,
    cube: &CubeSpec,
    cam: &CameraIntrinsics,
    params: &ParamSet<T>,
    cfg: &PoseRenConfig,
    training: bool,
    seed: u64,
) -> Result<(Vec<f64>, HiddenActivations<T>)> {
    if check_input(patch.shape(), cfg.backbone.input_size)? != 1 {
        return Err(shape_err!("posren_forward takes a single patch"));
    }
    let windows: Vec<Vec<RegionWindow>> = guide_windows(guide_pose, cube, cam, cfg)?
        .into_iter()
        .map(|w| vec![w])
        .collect();
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params);
    let x = tape.input(patch);
    let (y, hidden) = PoseRen::build(&mut tape, &p, cfg, x, &windows, training, seed)?;
    let out = tape.value(y).data().iter().map(|v| v.as_f64()).collect();
    Ok((out, HiddenActivations::from_vars(&tape, &hidden)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::WorldPoint;
    use crate::model::{ModelConfig, GuideSchema};
    use crate::tensor::param_count;

    fn patch(seed: u64, size: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 1, size, size], |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn zero_out(params: &mut ParamSet<f32>, prefix: &str) {
        for (name, t) in params.names().to_vec().iter().zip(params.tensors_mut()) {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    #[test]
    fn backbone_shapes_and_zero_input() {
        let cfg = ModelConfig::tiny();
        let params = init_cnn_params::<f32>(&cfg.init, 1).unwrap();
        let y = backbone_forward(&patch(0, 96), &params, &cfg.init.backbone).unwrap();
        assert_eq!(y.shape(), &[1, 16, 12, 12]);
        let z = backbone_forward(&Tensor::zeros(&[1, 1, 96, 96]).unwrap(), &params, &cfg.init.backbone).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_taps_are_live() {
        let cfg = ModelConfig::tiny();
        let params = init_cnn_params::<f32>(&cfg.init, 2).unwrap();
        let x = patch(1, 96);
        let with = backbone_forward(&x, &params, &cfg.init.backbone).unwrap();
        let mut no_taps = cfg.init.backbone.clone();
        no_taps.residual_taps.clear();
        let without = backbone_forward(&x, &params, &no_taps).unwrap();
        assert_ne!(with.data(), without.data());
    }

    #[test]
    fn init_cnn_output_and_zero_head() {
        let mut cfg = ModelConfig::default().init;
        cfg.backbone.conv_channels = [4, 4, 8, 8, 16, 16];
        cfg.fc_dim = 16;
        let mut params = init_cnn_params::<f32>(&cfg, 3).unwrap();
        let x = patch(2, 96);
        let a = init_cnn_forward(&x, &params, &cfg).unwrap();
        assert_eq!(a.len(), 63);
        assert_eq!(a, init_cnn_forward(&x, &params, &cfg).unwrap());
        zero_out(&mut params, "init.out");
        assert!(init_cnn_forward(&x, &params, &cfg).unwrap().iter().all(|&v| v == 0.0));
        assert!(init_cnn_forward(&patch(0, 48), &params, &cfg).is_err());
    }

    fn cam_cube() -> (CameraIntrinsics, CubeSpec) {
        (
            CameraIntrinsics::new(200.0, 200.0, 80.0, 80.0).unwrap(),
            CubeSpec::new(WorldPoint::new(0.0, 0.0, 500.0), 150.0).unwrap(),
        )
    }

    fn spread_pose(j: usize, shift: f64) -> HandPose {
        HandPose::new(
            (0..j)
                .map(|i| {
                    let a = i as f64 * 0.9;
                    WorldPoint::new(60.0 * a.cos() + shift, 60.0 * a.sin(), 500.0)
                })
                .collect(),
        )
    }

    #[test]
    fn posren_hidden_shapes() {
        let (cam, cube) = (cam_cube().0, cam_cube().1);
        for flat in [false, true] {
            let mut cfg = ModelConfig::tiny().ren;
            cfg.flat_ensemble = flat;
            let params = posren_params::<f32>(&cfg, 4).unwrap();
            let (out, h) = posren_forward(&patch(3, 96), &spread_pose(6, 0.0), &cube, &cam, &params, &cfg, false, 0).unwrap();
            assert_eq!(out.len(), 18);
            assert_eq!(h.h1.len(), 4);
            if flat {
                assert!(h.hbar1.is_empty());
                assert_eq!(h.h2.len(), 1);
            } else {
                assert_eq!(h.h2.len(), 5);
                assert_eq!(h.hbar2.shape(), &[1, 5 * 32]);
                assert_eq!(h.hbar1[0].shape(), &[1, 2 * 32]);
            }
        }
    }

    #[test]
    fn default_config_has_eleven_regions() {
        let (cam, cube) = cam_cube();
        let mut cfg = PoseRenConfig::default();
        cfg.backbone.conv_channels = [2, 2, 2, 2, 2, 2];
        cfg.fc_region_dim = 4;
        cfg.fc_finger_dim = 4;
        let params = posren_params::<f32>(&cfg, 0).unwrap();
        let (_, h) = posren_forward(&patch(0, 96), &spread_pose(21, 0.0), &cube, &cam, &params, &cfg, false, 0).unwrap();
        assert_eq!(h.h1.len(), 11);
        assert_eq!(h.h2.len(), 5);
    }

    #[test]
    fn output_depends_on_guide_and_zero_head_is_zero() {
        let (cam, cube) = cam_cube();
        let cfg = ModelConfig::tiny().ren;
        let mut params = posren_params::<f32>(&cfg, 5).unwrap();
        let x = patch(4, 96);
        let a = posren_forward(&x, &spread_pose(6, 0.0), &cube, &cam, &params, &cfg, false, 0).unwrap().0;
        let b = posren_forward(&x, &spread_pose(6, 40.0), &cube, &cam, &params, &cfg, false, 0).unwrap().0;
        assert_ne!(a, b);
        zero_out(&mut params, "ren.out");
        let z = posren_forward(&x, &spread_pose(6, 40.0), &cube, &cam, &params, &cfg, false, 0).unwrap().0;
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(posren_forward(&x, &spread_pose(5, 0.0), &cube, &cam, &params, &cfg, false, 0).is_err());
    }

    #[test]
    fn dropout_only_in_training() {
        let (cam, cube) = cam_cube();
        let cfg = ModelConfig::tiny().ren;
        let params = posren_params::<f32>(&cfg, 6).unwrap();
        let x = patch(5, 96);
        let g = spread_pose(6, 0.0);
        let e1 = posren_forward(&x, &g, &cube, &cam, &params, &cfg, false, 1).unwrap().0;
        let e2 = posren_forward(&x, &g, &cube, &cam, &params, &cfg, false, 2).unwrap().0;
        assert_eq!(e1, e2);
        let t1 = posren_forward(&x, &g, &cube, &cam, &params, &cfg, true, 1).unwrap().0;
        let t2 = posren_forward(&x, &g, &cube, &cam, &params, &cfg, true, 2).unwrap().0;
        assert_ne!(t1, t2);
        assert_eq!(t1, posren_forward(&x, &g, &cube, &cam, &params, &cfg, true, 1).unwrap().0);
    }

    #[test]
    fn widening_region_layer_adds_parameters() {
        let mut cfg = ModelConfig::tiny().ren;
        let a = param_count(&posren_params::<f32>(&cfg, 0).unwrap());
        cfg.fc_region_dim *= 2;
        let b = param_count(&posren_params::<f32>(&cfg, 0).unwrap());
        assert!(b > a);
    }

    #[test]
    fn schema_mismatch_rejected() {
        let (cam, cube) = cam_cube();
        let mut cfg = ModelConfig::tiny().ren;
        cfg.schema = GuideSchema::hand21();
        assert!(guide_windows(&spread_pose(6, 0.0), &cube, &cam, &cfg).is_err());
    }
}
