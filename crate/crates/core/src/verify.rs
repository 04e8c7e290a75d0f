//! Finite-difference gradient suite over every tape operation and the tiny
//! end-to-end networks, in f64.
//!
//! Random inputs are drawn away from non-smooth points (ReLU kinks, pooling
//! near-ties, the smooth-L1 junction) so central differences are meaningful.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::HandPose;
use crate::derive_seed;
use crate::error::Result;
use crate::geometry::{CameraIntrinsics, CubeSpec, RegionWindow, WorldPoint};
use crate::model::net::Bound;
use crate::model::{guide_windows, init_cnn_params, posren_params, InitCnn, ModelConfig, PoseRen};
use crate::tensor::gradcheck::{check_tape_op, finite_difference_gradient_piecewise, project_to_scalar, Elements, GradCheckReport};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-3;

/// A deliberately broken backward rule, used to show the suite catches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates the analytic gradient of `conv2d`.
    FlipConvBackward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub configs_per_op: usize,
    pub eps: f64,
    /// Step for the end-to-end checks, where a full network has many kinks
    /// within reach of `eps`.
    pub network_eps: f64,
    pub seed: u64,
    /// Elements perturbed per parameter tensor in the end-to-end checks.
    pub network_samples: usize,
    pub fault: Option<Fault>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            configs_per_op: 10,
            eps: 1e-3,
            network_eps: 1e-5,
            seed: 0,
            network_samples: 4,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub configs: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Uniform values in `[-1, 1]` with `|x| >= 0.05`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .expect("valid shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).expect("valid shape")
}

/// Distinct values on a 0.05 grid, shuffled: no two elements within 2.5e-2.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    v.shuffle(rng);
    let jitter: Vec<f64> = (0..n).map(|_| rng.random_range(-0.01..0.01)).collect();
    Tensor::new(shape, v.iter().zip(jitter).map(|(a, b)| a + b).collect()).expect("valid shape")
}

fn op_check<F>(name: &'static str, opts: &SuiteOptions, mut one: F) -> Result<OpCheck>
where
    F: FnMut(&mut ChaCha8Rng, u64) -> Result<GradCheckReport>,
{
    let mut report = GradCheckReport::default();
    for c in 0..opts.configs_per_op {
        let seed = derive_seed(derive_seed(opts.seed, name.len() as u64 * 131 + name.as_bytes()[0] as u64), c as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        report = report.merge(one(&mut rng, seed)?);
    }
    Ok(OpCheck {
        name,
        configs: opts.configs_per_op,
        checked: report.checked,
        skipped: report.skipped,
        max_rel_error: report.max_rel_error,
    })
}

fn check_ops(opts: &SuiteOptions) -> Result<Vec<OpCheck>> {
    let eps = opts.eps;
    let all = Elements::All;
    let flip = opts.fault == Some(Fault::FlipConvBackward);
    Ok(vec![
        op_check("conv2d", opts, |rng, seed| {
            let (n, c, k) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
            let kern = [1, 3, 5][rng.random_range(0..3)];
            let size = rng.random_range(kern..=kern + 4);
            let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=kern / 2));
            let inputs = [uniform(rng, &[n, c, size, size]), uniform(rng, &[k, c, kern, kern]), uniform(rng, &[k])];
            check_tape_op(&inputs, eps, all, seed, flip, |t, v| t.conv2d(v[0], v[1], v[2], stride, pad))
        })?,
        op_check("max_pool2d", opts, |rng, seed| {
            let window = rng.random_range(2..=3);
            let size = window * rng.random_range(1..=3) + rng.random_range(0..2);
            let stride = rng.random_range(1..=window);
            let c = rng.random_range(1..=2);
            let inputs = [separated(rng, &[1, c, size, size])];
            check_tape_op(&inputs, eps, all, seed, false, |t, v| t.max_pool2d(v[0], window, stride))
        })?,
        op_check("relu", opts, |rng, seed| {
            let shape = [rng.random_range(1..=3), rng.random_range(1..=6)];
            let inputs = [away_from_zero(rng, &shape)];
            check_tape_op(&inputs, eps, all, seed, false, |t, v| t.relu(v[0]))
        })?,
        op_check("linear", opts, |rng, seed| {
            let (n, d, e) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=5));
            let inputs = [uniform(rng, &[n, d]), uniform(rng, &[d, e]), uniform(rng, &[e])];
            check_tape_op(&inputs, eps, all, seed, false, |t, v| t.linear(v[0], v[1], v[2]))
        })?,
        op_check("dropout", opts, |rng, seed| {
            let rate = rng.random_range(0.0..0.8) as f32;
            let e = rng.random_range(2..=10);
            let inputs = [uniform(rng, &[2, e])];
            check_tape_op(&inputs, eps, all, seed, false, |t, v| t.dropout(v[0], rate, true, seed))
        })?,
        op_check("concat", opts, |rng, seed| {
            let parts = rng.random_range(1..=3);
            let axis = rng.random_range(0..=1);
            let inputs: Vec<Tensor<f64>> = (0..parts)
                .map(|_| {
                    let k = rng.random_range(1..=4);
                    uniform(rng, &if axis == 0 { [k, 3] } else { [2, k] })
                })
                .collect();
            check_tape_op(&inputs, eps, all, seed, false, |t, v| t.concat(v, axis))
        })?,
        op_check("add", opts, |rng, seed| {
            let shape = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4)];
            let inputs = [uniform(rng, &shape), uniform(rng, &shape)];
            check_tape_op(&inputs, eps, all, seed, false, |t, v| t.add(v[0], v[1]))
        })?,
        op_check("crop", opts, |rng, seed| {
            let (n, f) = (rng.random_range(1..=2), rng.random_range(3..=8));
            let (w, h) = (rng.random_range(1..=f), rng.random_range(1..=f));
            let windows: Vec<RegionWindow> = (0..n)
                .map(|_| RegionWindow::new(rng.random_range(0..=f - w), rng.random_range(0..=f - h), w, h))
                .collect();
            let inputs = [uniform(rng, &[n, 2, f, f])];
            check_tape_op(&inputs, eps, all, seed, false, |t, v| {
                let a = t.crop(v[0], &windows)?;
                // Two overlapping reads exercise the scatter-add.
                let b = t.crop(v[0], &windows)?;
                t.add(a, b)
            })
        })?,
        op_check("reshape", opts, |rng, seed| {
            let (a, b) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let inputs = [uniform(rng, &[a, b, 2])];
            check_tape_op(&inputs, eps, all, seed, false, |t, v| t.reshape(v[0], &[2 * b, a]))
        })?,
        op_check("smooth_l1", opts, |rng, seed| {
            let beta = rng.random_range(0.1..0.5);
            let (n, e) = (rng.random_range(1..=3), rng.random_range(1..=6));
            let target = uniform(rng, &[n, e]);
            // Differences kept at least 0.02 from 0 and from +-beta.
            let pred = Tensor::from_fn(&[n, e], |i| {
                let d = loop {
                    let d: f64 = rng.random_range(-1.0..1.0);
                    if d.abs() > 0.02 && (d.abs() - beta).abs() > 0.02 {
                        break d;
                    }
                };
                target.data()[i] + d
            })?;
            let inputs = [pred, target];
            check_tape_op(&inputs, eps, all, seed, false, |t, v| t.smooth_l1_loss(v[0], v[1], beta))
        })?,
    ])
}

/// Random joint positions around a cube centre, for guide windows.
fn random_pose(rng: &mut ChaCha8Rng, joints: usize, cube: &CubeSpec) -> HandPose {
    let h = cube.half();
    HandPose::new(
        (0..joints)
            .map(|_| {
                WorldPoint::new(
                    cube.center.x + rng.random_range(-h..h),
                    cube.center.y + rng.random_range(-h..h),
                    cube.center.z + rng.random_range(-h..h),
                )
            })
            .collect(),
    )
}

/// Gradient of a fixed projection of a network's output with respect to
/// every parameter, against central differences on sampled elements.
fn check_network<B>(params: &ParamSet<f64>, opts: &SuiteOptions, seed: u64, build: B) -> Result<GradCheckReport>
where
    B: for<'p> Fn(&mut Tape<'p, f64>, &Bound<'p, f64>) -> Result<Var>,
{
    let out_len = {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, params);
        let y = build(&mut tape, &p)?;
        tape.value(y).len()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params);
    let y = build(&mut tape, &p)?;
    let s = project_to_scalar(&mut tape, y, &projection)?;
    tape.backward(s)?;
    let analytic = p.take_grads(&mut tape);

    let names = params.names().to_vec();
    let forward = |xs: &[Tensor<f64>]| -> Result<(f64, Vec<u32>)> {
        let mut set = ParamSet::new();
        for (n, t) in names.iter().zip(xs) {
            set.insert(n.clone(), t.clone())?;
        }
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &set);
        let y = build(&mut tape, &p)?;
        let s = project_to_scalar(&mut tape, y, &projection)?;
        Ok((tape.value(s).item(), tape.branch_pattern()))
    };
    finite_difference_gradient_piecewise(
        forward,
        params.tensors(),
        &analytic,
        opts.network_eps,
        Elements::Sample {
            per_tensor: opts.network_samples,
            seed,
        },
    )
}

fn check_networks(opts: &SuiteOptions) -> Result<Vec<OpCheck>> {
    let mut model = ModelConfig::tiny();
    model.init.dropout_rate = 0.0;
    model.ren.dropout_rate = 0.0;
    let cam = CameraIntrinsics::new(200.0, 200.0, 80.0, 80.0)?;
    let cube = CubeSpec::new(WorldPoint::new(0.0, 0.0, 500.0), 150.0)?;
    let size = model.init.backbone.input_size;
    let configs = opts.configs_per_op.clamp(1, 2);
    let mut out = Vec::new();

    let mut report = GradCheckReport::default();
    for c in 0..configs {
        let seed = derive_seed(opts.seed ^ 0x1417, c as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch = uniform(&mut rng, &[1, 1, size, size]);
        let params = init_cnn_params::<f64>(&model.init, seed)?;
        report = report.merge(check_network(&params, opts, seed, |tape, p| {
            let x = tape.constant(patch.clone());
            InitCnn::build(tape, p, &model.init, x, false, 0)
        })?);
    }
    out.push(OpCheck {
        name: "init_cnn_tiny",
        configs,
        checked: report.checked,
        skipped: report.skipped,
        max_rel_error: report.max_rel_error,
    });

    for (name, flat) in [("posren_tiny", false), ("posren_tiny_flat", true)] {
        let mut cfg = model.ren.clone();
        cfg.flat_ensemble = flat;
        let mut report = GradCheckReport::default();
        for c in 0..configs {
            let seed = derive_seed(opts.seed ^ 0x2e11 ^ flat as u64, c as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let patch = uniform(&mut rng, &[1, 1, size, size]);
            let guide = random_pose(&mut rng, cfg.joint_count(), &cube);
            let windows: Vec<Vec<RegionWindow>> = guide_windows(&guide, &cube, &cam, &cfg)?
                .into_iter()
                .map(|w| vec![w])
                .collect();
            let params = posren_params::<f64>(&cfg, seed)?;
            report = report.merge(check_network(&params, opts, seed, |tape, p| {
                let x = tape.constant(patch.clone());
                Ok(PoseRen::build(tape, p, &cfg, x, &windows, false, 0)?.0)
            })?);
        }
        out.push(OpCheck {
            name,
            configs,
            checked: report.checked,
            skipped: report.skipped,
            max_rel_error: report.max_rel_error,
        });
    }
    Ok(out)
}

/// One row per tape operation, then the end-to-end networks.
pub fn run_gradcheck_suite(opts: &SuiteOptions) -> Result<Vec<OpCheck>> {
    let mut rows = check_ops(opts)?;
    rows.extend(check_networks(opts)?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_lists_every_op() {
        let rows = run_gradcheck_suite(&SuiteOptions::default()).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.name).collect();
        for op in ["conv2d", "max_pool2d", "relu", "linear", "dropout", "concat", "add", "crop", "reshape", "smooth_l1"] {
            assert!(names.contains(&op), "{op} missing");
        }
        for r in &rows {
            assert!(r.passed(), "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn flipped_conv_backward_is_reported() {
        let opts = SuiteOptions {
            configs_per_op: 2,
            fault: Some(Fault::FlipConvBackward),
            ..SuiteOptions::default()
        };
        let rows = check_ops(&opts).unwrap();
        let conv = rows.iter().find(|r| r.name == "conv2d").unwrap();
        assert!(!conv.passed());
        assert!(rows.iter().filter(|r| r.name != "conv2d").all(OpCheck::passed));
    }
}
