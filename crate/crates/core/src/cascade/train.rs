use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::infer::{init_pose, refine_pose};
use super::{prepare_frames, CascadeConfig, PreprocessConfig, StageDataset, TrainedCascade, TrainingSample};
use crate::data::{augment_sample, AugmentationParams, Dataset, HandPose};
use crate::derive_seed;
use crate::error::{invalid, Error, Result};
use crate::geometry::{pose_world_to_normalized, CameraIntrinsics, CubeSpec, RegionWindow};
use crate::model::net::Bound;
use crate::model::{guide_windows, init_cnn_params, posren_params, InitCnn, InitCnnConfig, ModelConfig, PoseRen, PoseRenConfig};
use crate::parallel::{map_indexed, try_map_indexed, Exec};
use crate::tensor::{OptimState, ParamSet, Sgd, Tape, Tensor, Var};

/// Mean training loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    /// 0 for the Init-CNN, `t` for Pose-REN stage `t`.
    pub stage: usize,
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f32,
    pub loss: f64,
}

/// A sample after per-epoch augmentation.
struct Augmented {
    patch: Tensor<f32>,
    guide: HandPose,
    target: Vec<f64>,
    cube: CubeSpec,
}

trait Network: Sync {
    fn build<'p>(
        &self,
        tape: &mut Tape<'p, f32>,
        p: &Bound<'p, f32>,
        x: Var,
        batch: &[Augmented],
        cam: &CameraIntrinsics,
        seed: u64,
    ) -> Result<Var>;
}

impl Network for InitCnnConfig {
    fn build<'p>(
        &self,
        tape: &mut Tape<'p, f32>,
        p: &Bound<'p, f32>,
        x: Var,
        _: &[Augmented],
        _: &CameraIntrinsics,
        seed: u64,
    ) -> Result<Var> {
        InitCnn::build(tape, p, self, x, true, seed)
    }
}

impl Network for PoseRenConfig {
    fn build<'p>(
        &self,
        tape: &mut Tape<'p, f32>,
        p: &Bound<'p, f32>,
        x: Var,
        batch: &[Augmented],
        cam: &CameraIntrinsics,
        seed: u64,
    ) -> Result<Var> {
        let per_sample = batch
            .iter()
            .map(|s| guide_windows(&s.guide, &s.cube, cam, self))
            .collect::<Result<Vec<_>>>()?;
        let windows: Vec<Vec<RegionWindow>> = (0..self.region_count())
            .map(|r| per_sample.iter().map(|w| w[r]).collect())
            .collect();
        Ok(PoseRen::build(tape, p, self, x, &windows, true, seed)?.0)
    }
}

fn augment(s: &TrainingSample, cam: &CameraIntrinsics, params: &AugmentationParams) -> Result<Augmented> {
    let (patch, gt) = augment_sample(&s.patch, &s.gt_pose, &s.cube, cam, params)?;
    let guide = if params.is_identity() {
        s.input_pose.clone()
    } else {
        augment_sample(&s.patch, &s.input_pose, &s.cube, cam, params)?.1
    };
    Ok(Augmented {
        target: pose_world_to_normalized(&gt, &s.cube),
        patch,
        guide,
        cube: s.cube,
    })
}

fn stack(batch: &[Augmented]) -> Result<Tensor<f32>> {
    let shape = batch[0].patch.shape();
    let mut dims = shape.to_vec();
    dims[0] = batch.len();
    let mut data = Vec::with_capacity(batch.len() * batch[0].patch.len());
    for s in batch {
        data.extend_from_slice(s.patch.data());
    }
    Tensor::new(&dims, data)
}

/// Loss and parameter gradients of one chunk.
fn chunk_gradients<N: Network>(
    net: &N,
    params: &ParamSet<f32>,
    chunk: &[Augmented],
    cam: &CameraIntrinsics,
    beta: f64,
    seed: u64,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let x = stack(chunk)?;
    let width = chunk[0].target.len();
    let target = Tensor::new(
        &[chunk.len(), width],
        chunk.iter().flat_map(|s| s.target.iter().map(|&v| v as f32)).collect(),
    )?;
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params);
    let xv = tape.input(&x);
    let y = net.build(&mut tape, &p, xv, chunk, cam, seed)?;
    if tape.shape(y) != target.shape() {
        return Err(invalid!("network output {:?} does not match targets {:?}", tape.shape(y), target.shape()));
    }
    let t = tape.constant(target);
    let loss = tape.smooth_l1_loss(y, t, beta)?;
    let value = tape.value(loss).item() as f64;
    tape.backward(loss)?;
    Ok((value, p.take_grads(&mut tape)))
}

/// SGD over `samples` for `cfg.epochs` epochs.
fn fit<N: Network>(
    net: &N,
    mut params: ParamSet<f32>,
    samples: &[TrainingSample],
    cam: &CameraIntrinsics,
    cfg: &CascadeConfig,
    stage: usize,
    exec: Exec,
) -> Result<(ParamSet<f32>, Vec<LogEntry>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let stage_seed = derive_seed(cfg.seed, 1 + stage as u64);
    let mut opt = OptimState::new(
        &params,
        Sgd {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        },
    );
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        let epoch_seed = derive_seed(stage_seed, epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        order.sort_unstable();
        order.shuffle(&mut rng);
        opt.hyper.learning_rate = cfg.learning_rate_at(epoch);
        let (aug_seed, drop_seed) = (derive_seed(epoch_seed, 1), derive_seed(epoch_seed, 2));
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = try_map_indexed(exec, idx.len(), |k| {
                let i = idx[k];
                let params = if cfg.augment {
                    AugmentationParams::draw(&cfg.augmentation, derive_seed(aug_seed, i as u64))
                } else {
                    AugmentationParams::identity()
                };
                augment(&samples[i], cam, &params)
            })?;
            let chunks: Vec<&[Augmented]> = batch.chunks(cfg.chunk_size).collect();
            let batch_seed = derive_seed(drop_seed, b as u64);
            let results = map_indexed(exec, chunks.len(), |c| {
                chunk_gradients(net, &params, chunks[c], cam, cfg.smooth_l1_beta, derive_seed(batch_seed, c as u64))
            });
            // Chunk losses are means over their own elements; weight them
            // by size so the sum is the batch mean.
            let n = batch.len() as f64;
            let mut grads: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            let mut loss = 0.0;
            for (chunk, r) in chunks.iter().zip(results) {
                let (l, g) = r?;
                let w = chunk.len() as f64 / n;
                loss += w * l;
                for (acc, g) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(g).for_each(|(a, v)| *a += (w * v as f64) as f32);
                }
            }
            for (t, g) in params.tensors_mut().iter_mut().zip(grads) {
                t.set_grad(Some(g))?;
            }
            opt.step(&mut params)?;
            total += loss * n;
        }
        log.push(LogEntry {
            stage,
            epoch,
            learning_rate: opt.hyper.learning_rate,
            loss: total / samples.len() as f64,
        });
    }
    Ok((params, log))
}

/// Trains the Init-CNN from its seeded initialisation on patch to
/// ground-truth pairs.
pub fn train_init_cnn(
    dataset: &StageDataset,
    model: &InitCnnConfig,
    cam: &CameraIntrinsics,
    cfg: &CascadeConfig,
    exec: Exec,
) -> Result<(ParamSet<f32>, Vec<LogEntry>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    model.validate()?;
    let params = init_cnn_params(model, derive_seed(cfg.seed, 0))?;
    fit(model, params, &dataset.samples, cam, cfg, 0, exec)
}

/// Trains one Pose-REN stage, starting from `start`, with every sample
/// guided by its input pose.
pub fn train_stage(
    dataset: &StageDataset,
    start: ParamSet<f32>,
    model: &PoseRenConfig,
    cam: &CameraIntrinsics,
    cfg: &CascadeConfig,
    stage: usize,
    exec: Exec,
) -> Result<(ParamSet<f32>, Vec<LogEntry>)> {
    model.validate()?;
    let j = model.joint_count();
    if let Some(s) = dataset
        .samples
        .iter()
        .find(|s| s.input_pose.joint_count() != j || s.gt_pose.joint_count() != j)
    {
        return Err(invalid!(
            "frame {}: poses have {}/{} joints, schema expects {j}",
            s.frame_id,
            s.input_pose.joint_count(),
            s.gt_pose.joint_count()
        ));
    }
    fit(model, start, &dataset.samples, cam, cfg, stage, exec)
}

/// Refines the newest generation's input poses once with `ren_params` and
/// appends the refined samples; earlier samples are kept as they are.
pub fn augment_training_set(
    dataset: &StageDataset,
    ren_params: &ParamSet<f32>,
    model: &PoseRenConfig,
    cam: &CameraIntrinsics,
    exec: Exec,
) -> Result<StageDataset> {
    let newest = dataset.newest();
    let refined = try_map_indexed(exec, newest.len(), |i| {
        let s = &newest[i];
        Ok::<_, Error>(TrainingSample {
            input_pose: refine_pose(&s.patch, &s.input_pose, &s.cube, cam, ren_params, model)?,
            ..s.clone()
        })
    })?;
    let mut samples = dataset.samples.clone();
    samples.extend(refined);
    Ok(StageDataset {
        samples,
        stage: dataset.stage + 1,
        generation_size: dataset.generation_size,
    })
}

/// Everything produced by [`train_cascade`].
#[derive(Debug, Clone)]
pub struct CascadeRun {
    pub cascade: TrainedCascade,
    pub log: Vec<LogEntry>,
    /// Training-set size after each generation, starting with `T^0`.
    pub stage_sizes: Vec<usize>,
    pub final_dataset: StageDataset,
}

/// Init-CNN, then `train_stages` rounds of Pose-REN training and set
/// augmentation. Each Pose-REN stage continues from the previous one; the
/// first starts from random heads on top of the Init-CNN backbone.
pub fn train_cascade(
    data: &Dataset,
    model: &ModelConfig,
    pre: &PreprocessConfig,
    cfg: &CascadeConfig,
    exec: Exec,
) -> Result<CascadeRun> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    model.validate()?;
    pre.validate()?;
    let cam = &data.camera;
    let frames = prepare_frames(&data.frames, cam, pre, model.init.backbone.input_size, exec)?;
    let gt_only = StageDataset::initial(&frames, &data.poses, &data.poses)?;
    let (init_params, mut log) = train_init_cnn(&gt_only, &model.init, cam, cfg, exec)?;

    let initial = try_map_indexed(exec, frames.len(), |i| {
        init_pose(&frames[i].patch, &frames[i].cube, &init_params, &model.init)
    })?;
    let mut dataset = StageDataset::initial(&frames, &data.poses, &initial)?;
    let mut stage_sizes = vec![dataset.len()];

    let mut ren = posren_params::<f32>(&model.ren, derive_seed(cfg.seed, 1_000))?;
    ren.copy_prefix_from(&init_params, "backbone.")?;
    for t in 1..=cfg.train_stages {
        let (next, stage_log) = train_stage(&dataset, ren, &model.ren, cam, cfg, t, exec)?;
        ren = next;
        log.extend(stage_log);
        dataset = augment_training_set(&dataset, &ren, &model.ren, cam, exec)?;
        stage_sizes.push(dataset.len());
    }
    Ok(CascadeRun {
        cascade: TrainedCascade {
            model: model.clone(),
            preprocess: *pre,
            init_params,
            ren_params: ren,
        },
        log,
        stage_sizes,
        final_dataset: dataset,
    })
}

impl TrainingSample {
    /// A sample whose patch is shared with `other`.
    pub fn shares_patch(&self, other: &TrainingSample) -> bool {
        Arc::ptr_eq(&self.patch, &other.patch)
    }
}
