use posecascade::cascade::{
    augment_training_set, infer, infer_batch, infer_with_initializer, prepare_frames, refine_pose, train_cascade,
    train_stage, CascadeConfig, Initializer, PreprocessConfig, StageDataset,
};
use posecascade::data::synth::default_camera;
use posecascade::data::{compute_mean_pose, render_dataset, Dataset, SyntheticHandSpec};
use posecascade::model::{posren_params, BackboneConfig, ModelConfig};
use posecascade::parallel::Exec;

fn small_model() -> ModelConfig {
    let backbone = BackboneConfig {
        conv_channels: [4, 4, 8, 8, 16, 16],
        input_size: 48,
        ..BackboneConfig::default()
    };
    let mut m = ModelConfig::default();
    m.init.backbone = backbone.clone();
    m.init.fc_dim = 16;
    m.ren.backbone = backbone;
    m.ren.region_w = 3;
    m.ren.region_h = 3;
    m.ren.fc_region_dim = 16;
    m.ren.fc_finger_dim = 16;
    m
}

fn small_config() -> CascadeConfig {
    CascadeConfig {
        epochs: 1,
        batch_size: 4,
        chunk_size: 2,
        train_stages: 1,
        ..CascadeConfig::default()
    }
}

fn data(n: usize) -> Dataset {
    render_dataset(&SyntheticHandSpec::default(), &default_camera(), n, 4, Exec::Sequential).unwrap()
}

fn initial_set(d: &Dataset, m: &ModelConfig) -> StageDataset {
    let frames = prepare_frames(&d.frames, &d.camera, &PreprocessConfig::default(), m.init.backbone.input_size, Exec::Sequential).unwrap();
    let shifted: Vec<_> = d.poses.iter().map(|p| p.translated(5.0, -3.0, 2.0)).collect();
    StageDataset::initial(&frames, &d.poses, &shifted).unwrap()
}

#[test]
fn zero_epochs_return_the_start_parameters() {
    let d = data(6);
    let m = small_model();
    let set = initial_set(&d, &m);
    let start = posren_params::<f32>(&m.ren, 9).unwrap();
    let cfg = CascadeConfig { epochs: 0, ..small_config() };
    let (out, log) = train_stage(&set, start.clone(), &m.ren, &d.camera, &cfg, 1, Exec::Sequential).unwrap();
    assert!(log.is_empty());
    for (a, b) in out.tensors().iter().zip(start.tensors()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn augmentation_appends_refined_copies_sharing_patches() {
    let d = data(5);
    let m = small_model();
    let set = initial_set(&d, &m);
    let params = posren_params::<f32>(&m.ren, 1).unwrap();
    let grown = augment_training_set(&set, &params, &m.ren, &d.camera, Exec::Parallel).unwrap();
    assert_eq!(grown.len(), 10);
    assert_eq!(grown.stage, set.stage + 1);
    for (old, new) in set.samples.iter().zip(grown.newest()) {
        let expected = refine_pose(&old.patch, &old.input_pose, &old.cube, &d.camera, &params, &m.ren).unwrap();
        assert_eq!(new.input_pose, expected);
        assert_eq!(new.gt_pose, old.gt_pose);
        assert!(new.shares_patch(old));
    }
    let twice = augment_training_set(&grown, &params, &m.ren, &d.camera, Exec::Sequential).unwrap();
    assert_eq!(twice.len(), 15);
}

#[test]
fn initializer_substitution_and_exec_independence() {
    let d = data(8);
    let (train, test) = d.split_tail(3).unwrap();
    let m = small_model();
    let run = train_cascade(&train, &m, &PreprocessConfig::default(), &small_config(), Exec::Parallel).unwrap();
    let cam = &test.camera;
    for frame in &test.frames {
        let direct = infer(frame, cam, &run.cascade, 2).unwrap();
        let substituted = infer_with_initializer(frame, cam, &run.cascade, 2, &direct.stages[0]).unwrap();
        assert_eq!(direct, substituted);
        assert_eq!(direct.stages.len(), 3);
    }
    let seq = infer_batch(&test.frames, cam, &run.cascade, 2, &Initializer::InitCnn, Exec::Sequential).unwrap();
    let par = infer_batch(&test.frames, cam, &run.cascade, 2, &Initializer::InitCnn, Exec::Parallel).unwrap();
    assert_eq!(seq, par);

    // Starting from ground truth still regresses a new pose.
    let from_gt = infer_with_initializer(&test.frames[0], cam, &run.cascade, 1, &test.poses[0]).unwrap();
    assert_ne!(from_gt.stages[1], test.poses[0]);

    let pre = PreprocessConfig::default();
    let cubes: Vec<_> = train.frames.iter().map(|f| pre.cube(f, cam).unwrap()).collect();
    let mean = compute_mean_pose(&train.poses, &cubes).unwrap();
    let by_mean = infer_batch(&test.frames, cam, &run.cascade, 1, &Initializer::MeanPose(mean.clone()), Exec::Parallel).unwrap();
    let cube0 = pre.cube(&test.frames[0], cam).unwrap();
    assert_eq!(by_mean[0].stages[0], mean.for_cube(&cube0));

    let short = posecascade::data::HandPose::new(test.poses[0].joints[..5].to_vec());
    assert!(infer_with_initializer(&test.frames[0], cam, &run.cascade, 1, &short).is_err());
}

#[test]
fn guide_pose_changes_the_refinement() {
    let d = data(2);
    let m = small_model();
    let set = initial_set(&d, &m);
    let params = posren_params::<f32>(&m.ren, 5).unwrap();
    let s = &set.samples[0];
    let a = refine_pose(&s.patch, &s.input_pose, &s.cube, &d.camera, &params, &m.ren).unwrap();
    let moved = s.input_pose.translated(40.0, -40.0, 0.0);
    let b = refine_pose(&s.patch, &moved, &s.cube, &d.camera, &params, &m.ren).unwrap();
    assert_ne!(a, b);
}

#[test]
fn empty_dataset_is_rejected() {
    let d = data(1);
    let empty = Dataset { camera: d.camera, frames: vec![], poses: vec![] };
    assert!(train_cascade(&empty, &small_model(), &PreprocessConfig::default(), &small_config(), Exec::Sequential).is_err());
}
