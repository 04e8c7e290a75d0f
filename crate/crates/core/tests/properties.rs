use posecascade::data::synth::default_camera;
use posecascade::data::{augment_sample, render_dataset, AugmentationParams, AugmentationRanges, HandPose, SyntheticHandSpec};
use posecascade::eval::{per_joint_errors, success_rate_curve};
use posecascade::geometry::{
    compute_region_window, extract_cube_patch, pose_normalized_to_world, pose_world_to_normalized,
    project_pixel_to_world, project_world_to_pixel, CameraIntrinsics, CubeSpec, WorldPoint,
};
use posecascade::model::{posren_forward, posren_params, BackboneConfig, GuideSchema, PoseRenConfig};
use posecascade::parallel::Exec;
use posecascade::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn camera() -> impl Strategy<Value = CameraIntrinsics> {
    (50.0..600.0f64, 50.0..600.0f64, 0.0..320.0f64, 0.0..240.0f64)
        .prop_map(|(fx, fy, cx, cy)| CameraIntrinsics::new(fx, fy, cx, cy).unwrap())
}

fn point(lo: f64, hi: f64) -> impl Strategy<Value = WorldPoint> {
    (-500.0..500.0f64, -500.0..500.0f64, lo..hi).prop_map(|(x, y, z)| WorldPoint::new(x, y, z))
}

fn cube() -> impl Strategy<Value = CubeSpec> {
    (point(150.0, 1500.0), 50.0..400.0f64).prop_map(|(c, s)| CubeSpec::new(c, s).unwrap())
}

fn pose(joints: usize) -> impl Strategy<Value = HandPose> {
    prop::collection::vec(point(100.0, 900.0), joints).prop_map(HandPose::new)
}

fn pose_pair() -> impl Strategy<Value = (Vec<HandPose>, Vec<HandPose>)> {
    (1..12usize, 1..8usize).prop_flat_map(|(frames, joints)| {
        (
            prop::collection::vec(pose(joints), frames),
            prop::collection::vec(pose(joints), frames),
        )
    })
}

proptest! {
    #[test]
    fn projection_round_trip(cam in camera(), p in point(100.0, 2000.0)) {
        let q = project_pixel_to_world(&project_world_to_pixel(&p, &cam).unwrap(), &cam).unwrap();
        prop_assert!(p.distance(&q) < 1e-6);
    }

    #[test]
    fn region_window_stays_inside(
        cam in camera(),
        cube in cube(),
        x in prop::num::f64::ANY,
        y in prop::num::f64::ANY,
        z in prop::num::f64::POSITIVE,
        feat in 1..20usize,
        w_frac in 0.0..1.0f64,
        h_frac in 0.0..1.0f64,
        patch in 4..200usize,
    ) {
        let w = 1 + ((feat - 1) as f64 * w_frac) as usize;
        let h = 1 + ((feat - 1) as f64 * h_frac) as usize;
        let win = compute_region_window(&WorldPoint::new(x, y, z), &cube, &cam, patch, feat, w, h).unwrap();
        prop_assert!(win.b_u + w <= feat && win.b_v + h <= feat);
        prop_assert_eq!((win.w, win.h), (w, h));
    }

    #[test]
    fn normalized_pose_round_trip(cube in cube(), p in pose(5)) {
        let back = pose_normalized_to_world(&pose_world_to_normalized(&p, &cube), &cube).unwrap();
        for (a, b) in p.joints.iter().zip(&back.joints) {
            prop_assert!(a.distance(b) < 1e-5);
        }
    }

    #[test]
    fn augmentation_draws_stay_in_range(seed in any::<u64>(), s in 0.5..1.0f64, t in 0.0..30.0f64, r in 0.0..180.0f64) {
        let ranges = AugmentationRanges { scale: (s, s + 0.3), translation_px: t, rotation_deg: r };
        prop_assert!(ranges.contains(&AugmentationParams::draw(&ranges, seed)));
    }

    #[test]
    fn success_rate_is_monotone_and_complete((pred, gt) in pose_pair(), mut taus in prop::collection::vec(0.0..2000.0f64, 1..30)) {
        taus.sort_by(f64::total_cmp);
        taus.push(1e9);
        let curve = success_rate_curve(&pred, &gt, &taus).unwrap();
        prop_assert!(curve.rates.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(curve.rates.iter().all(|r| (0.0..=1.0).contains(r)));
        prop_assert_eq!(*curve.rates.last().unwrap(), 1.0);
    }

    #[test]
    fn joint_errors_ignore_common_translation((pred, gt) in pose_pair(), dx in -300.0..300.0f64, dy in -300.0..300.0f64, dz in -50.0..50.0f64) {
        let a = per_joint_errors(&pred, &gt).unwrap();
        let shift = |ps: &[HandPose]| ps.iter().map(|p| p.translated(dx, dy, dz)).collect::<Vec<_>>();
        let b = per_joint_errors(&shift(&pred), &shift(&gt)).unwrap();
        for (x, y) in a.per_joint_errors.iter().zip(&b.per_joint_errors) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let mean = a.per_joint_errors.iter().sum::<f64>() / a.per_joint_errors.len() as f64;
        prop_assert!((a.mean_error - mean).abs() < 1e-12);
        prop_assert!(a.per_joint_errors.iter().all(|&e| e >= 0.0));
    }

    #[test]
    fn gradients_of_two_branches_add(values in prop::collection::vec(-2.0..2.0f64, 1..20)) {
        let n = values.len();
        let x = Tensor::new(&[1, n], values).unwrap();
        // With every prediction far above the target the smooth-L1 upstream
        // gradient is the constant 1/n, shared by all three graphs.
        let grad_of = |relu_branch: bool, linear_branch: bool| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.param_owned(x.clone());
            let f = tape.relu(xv).unwrap();
            let g = tape.reshape(xv, &[1, n]).unwrap();
            let y = match (relu_branch, linear_branch) {
                (true, true) => tape.add(f, g).unwrap(),
                (true, false) => f,
                _ => g,
            };
            let target = tape.constant(Tensor::full(&[1, n], -10.0).unwrap());
            let loss = tape.smooth_l1_loss(y, target, 0.01).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(xv).unwrap().to_vec()
        };
        let (both, f, g) = (grad_of(true, true), grad_of(true, false), grad_of(false, true));
        for i in 0..n {
            prop_assert_eq!(both[i], f[i] + g[i]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn hidden_activation_shapes_and_determinism(
        fingers in prop::collection::vec(0..3usize, 5),
        fc_region in 1..6usize,
        fc_finger in 1..6usize,
        flat in any::<bool>(),
        region in 1..4usize,
        seed in any::<u64>(),
    ) {
        let mut next = 1;
        let groups: [Vec<usize>; 5] = std::array::from_fn(|f| {
            let g: Vec<usize> = (next..next + fingers[f]).collect();
            next += fingers[f];
            g
        });
        let joints = next;
        let cfg = PoseRenConfig {
            backbone: BackboneConfig { conv_channels: [2, 2, 3, 3, 4, 4], input_size: 32, ..BackboneConfig::default() },
            schema: GuideSchema::new(joints, 0, groups).unwrap(),
            region_w: region,
            region_h: region,
            fc_region_dim: fc_region,
            fc_finger_dim: fc_finger,
            flat_ensemble: flat,
            flat_region_dim: fc_region,
            flat_fuse_dim: fc_finger,
            ..PoseRenConfig::default()
        };
        let params = posren_params::<f32>(&cfg, seed).unwrap();
        let cam = default_camera();
        let cube = CubeSpec::new(WorldPoint::new(0.0, 0.0, 500.0), 150.0).unwrap();
        let guide = HandPose::new((0..joints).map(|j| WorldPoint::new(j as f64 * 9.0 - 20.0, 10.0, 500.0)).collect());
        let patch = Tensor::from_fn(&[1, 1, 32, 32], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0).unwrap();
        let (out, h) = posren_forward(&patch, &guide, &cube, &cam, &params, &cfg, false, 0).unwrap();
        let (again, _) = posren_forward(&patch, &guide, &cube, &cam, &params, &cfg, false, 0).unwrap();
        prop_assert_eq!(&out, &again);
        prop_assert_eq!(out.len(), 3 * joints);
        prop_assert_eq!(h.h1.len(), cfg.region_count());
        if flat {
            prop_assert!(h.hbar1.is_empty());
            prop_assert_eq!(h.h2.len(), 1);
            prop_assert_eq!(h.hbar2.shape(), &[1, fc_finger][..]);
        } else {
            prop_assert_eq!(h.h2.len(), 5);
            prop_assert_eq!(h.hbar2.shape(), &[1, 5 * fc_finger][..]);
        }
    }

    #[test]
    fn patches_are_normalized_and_identity_augmentation_is_exact(seed in any::<u64>(), c in cube()) {
        let cam = default_camera();
        let data = render_dataset(&SyntheticHandSpec::default(), &cam, 2, seed, Exec::Sequential).unwrap();
        let again = render_dataset(&SyntheticHandSpec::default(), &cam, 2, seed, Exec::Sequential).unwrap();
        prop_assert_eq!(&data, &again);
        let patch = extract_cube_patch(&data.frames[0], &c, &cam, 24).unwrap();
        prop_assert!(patch.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let (p, q) = augment_sample(&patch, &data.poses[0], &c, &cam, &AugmentationParams::identity()).unwrap();
        prop_assert_eq!(p.data(), patch.data());
        prop_assert_eq!(&q, &data.poses[0]);
    }
}

#[test]
fn ten_thousand_augmentation_draws_stay_in_default_ranges() {
    let ranges = AugmentationRanges::default();
    for seed in 0..10_000 {
        assert!(ranges.contains(&AugmentationParams::draw(&ranges, seed)));
    }
}
