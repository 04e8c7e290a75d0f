use std::fs;
use std::path::{Path, PathBuf};

use posecascade::cascade::{infer_batch, train_cascade, Initializer, TrainedCascade};
use posecascade::config::KeyValues;
use posecascade::data::{compute_mean_pose, generate_synthetic_dataset, load_dataset, Dataset, HandPose, MeanPose};
use posecascade::eval::{
    default_thresholds, parse_csv, per_joint_errors_in, success_rate_curve_in, CsvTable, ErrorSpace, PoseTable,
};
use posecascade::model::checkpoint::{load_checkpoint, save_checkpoint};
use posecascade::model::{init_cnn_params, posren_params};
use posecascade::parallel::Exec;
use posecascade::verify::{run_gradcheck_suite, Fault, SuiteOptions, TOLERANCE};
use posecascade::Error;

use crate::run_config::RunConfig;
use crate::{Cli, CliError, Command};

const INIT_CKPT: &str = "init_cnn.ckpt";
const REN_CKPT: &str = "posren.ckpt";
const LOG_CSV: &str = "train_log.csv";
const MEAN_POSE_CSV: &str = "mean_pose.csv";
const MEAN_POSE_HEADER: &str = "coord_index,normalized_value";

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    match &cli.command {
        Command::Synth { count } => synth(&cfg, *count, &cli.out),
        Command::Train { data } => train(&cfg, data, &cli.out),
        Command::Infer {
            checkpoint,
            data,
            iterations,
            init_pose,
        } => infer(cli, checkpoint, data, *iterations, init_pose),
        Command::Eval { pred, gt, pixel } => eval(&cfg, pred, gt, *pixel, &cli.out),
        Command::Gradcheck {
            configs,
            inject_conv_fault,
        } => gradcheck(&cfg, *configs, *inject_conv_fault),
        Command::Report { checkpoint } => report(checkpoint),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Core(Error::Io(e)))
}

fn write_text(path: &Path, cfg: &RunConfig, body: &str) -> Result<(), CliError> {
    fs::write(path, format!("{}{body}", cfg.header())).map_err(|e| CliError::Core(Error::Io(e)))
}

fn synth(cfg: &RunConfig, count: usize, out: &Path) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let spec = cfg.synth_spec();
    spec.validate(&cfg.camera).map_err(|e| CliError::Usage(e.to_string()))?;
    create_dir(out)?;
    let manifest = generate_synthetic_dataset(&spec, &cfg.camera, count, cfg.cascade.seed, out)?;
    cfg.echo(out)?;
    println!("{}", manifest.display());
    println!("{count} frames");
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let dataset = load_dataset(data)?;
    create_dir(out)?;
    let run = train_cascade(&dataset, &cfg.model, &cfg.preprocess, &cfg.cascade, Exec::default())?;
    let kv = cfg.resolved();
    save_checkpoint(&run.cascade.init_params, &kv, &out.join(INIT_CKPT))?;
    save_checkpoint(&run.cascade.ren_params, &kv, &out.join(REN_CKPT))?;

    let mut log = String::from("epoch,stage,lr,loss\n");
    for e in &run.log {
        log.push_str(&format!("{},{},{},{:.6}\n", e.epoch, e.stage, e.learning_rate, e.loss));
    }
    write_text(&out.join(LOG_CSV), cfg, &log)?;

    let samples = &run.final_dataset.samples[..run.final_dataset.generation_size];
    let gt: Vec<HandPose> = samples.iter().map(|s| s.gt_pose.clone()).collect();
    let cubes: Vec<_> = samples.iter().map(|s| s.cube).collect();
    let mean = compute_mean_pose(&gt, &cubes)?;
    let mut body = format!("{MEAN_POSE_HEADER}\n");
    for (i, v) in mean.normalized.iter().enumerate() {
        body.push_str(&format!("{i},{v:.9}\n"));
    }
    write_text(&out.join(MEAN_POSE_CSV), cfg, &body)?;
    cfg.echo(out)?;

    for (t, n) in run.stage_sizes.iter().enumerate() {
        println!("generation {t}: {n} samples");
    }
    if let Some(last) = run.log.last() {
        println!("final loss (stage {}, epoch {}): {:.6}", last.stage, last.epoch, last.loss);
    }
    println!("{}", out.join(REN_CKPT).display());
    Ok(())
}

/// The config embedded in the Pose-REN checkpoint, with the user's file and
/// `--seed` laid over it.
fn checkpoint_config(cli: &Cli, dir: &Path) -> Result<(TrainedCascade, RunConfig), CliError> {
    let (init_params, _) = load_checkpoint(&dir.join(INIT_CKPT))?;
    let (ren_params, mut kv) = load_checkpoint(&dir.join(REN_CKPT))?;
    if let Some(p) = &cli.config {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        kv.merge(&KeyValues::parse(&text)?);
    }
    if let Some(s) = cli.seed {
        kv.insert("seed", s);
    }
    let cfg = RunConfig::from_kv(&kv)?;
    let expect = (
        init_cnn_params::<f32>(&cfg.model.init, 0)?.param_count(),
        posren_params::<f32>(&cfg.model.ren, 0)?.param_count(),
    );
    if expect != (init_params.param_count(), ren_params.param_count()) {
        return Err(CliError::Usage("checkpoint parameters do not match the model config".into()));
    }
    let cascade = TrainedCascade {
        model: cfg.model.clone(),
        preprocess: cfg.preprocess,
        init_params,
        ren_params,
    };
    Ok((cascade, cfg))
}

fn read_mean_pose(path: &Path) -> Result<MeanPose, CliError> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let rows = parse_csv(&text, MEAN_POSE_HEADER)?;
    Ok(MeanPose {
        normalized: rows.into_iter().map(|(_, v)| v).collect(),
    })
}

fn read_pose_table(path: &Path) -> Result<PoseTable, CliError> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    Ok(PoseTable::parse(&text)?)
}

fn infer(cli: &Cli, checkpoint: &Path, data: &Path, iterations: Option<usize>, init_pose: &str) -> Result<(), CliError> {
    let (cascade, cfg) = checkpoint_config(cli, checkpoint)?;
    let dataset = load_dataset(data)?;
    let iterations = iterations.unwrap_or(cfg.cascade.infer_iterations);
    let init = match init_pose {
        "cnn" => Initializer::InitCnn,
        "meanpose" => Initializer::MeanPose(read_mean_pose(&checkpoint.join(MEAN_POSE_CSV))?),
        path => {
            let table = read_pose_table(Path::new(path))?;
            Initializer::Poses(table.stages.last().cloned().unwrap_or_default())
        }
    };
    let results = infer_batch(&dataset.frames, &dataset.camera, &cascade, iterations, &init, Exec::default())?;
    let table = PoseTable {
        stages: (0..=iterations)
            .map(|t| results.iter().map(|r| r.stages[t].clone()).collect())
            .collect(),
    };
    create_dir(&cli.out)?;
    let path = cli.out.join("predictions.csv");
    write_text(&path, &cfg, &table.to_csv())?;
    println!("{}", path.display());
    println!("{} frames x {} stages", dataset.len(), iterations + 1);
    Ok(())
}

fn load_gt(path: &Path) -> Result<(Vec<HandPose>, Option<Dataset>), CliError> {
    if path.extension().is_some_and(|e| e == "csv") {
        let table = read_pose_table(path)?;
        Ok((table.stages.last().cloned().unwrap_or_default(), None))
    } else {
        let d = load_dataset(path)?;
        Ok((d.poses.clone(), Some(d)))
    }
}

fn eval(cfg: &RunConfig, pred: &Path, gt: &Path, pixel: bool, out: &Path) -> Result<(), CliError> {
    let table = read_pose_table(pred)?;
    let (gt_poses, dataset) = load_gt(gt)?;
    let space = match (pixel, &dataset) {
        (false, _) => ErrorSpace::World,
        (true, Some(d)) => ErrorSpace::Pixel(d.camera),
        (true, None) => return Err(CliError::Usage("--pixel needs a dataset manifest as --gt".into())),
    };
    if table.frame_count() != gt_poses.len() {
        return Err(CliError::Core(Error::InvalidArgument(format!(
            "{} predicted frames vs {} ground-truth frames",
            table.frame_count(),
            gt_poses.len()
        ))));
    }
    create_dir(out)?;
    let unit = if pixel { "px" } else { "mm" };
    let mut summary = format!("stage,mean_error_{unit}\n");
    for (t, stage) in table.stages.iter().enumerate() {
        let report = per_joint_errors_in(stage, &gt_poses, space)?;
        let curve = success_rate_curve_in(stage, &gt_poses, &default_thresholds(), space)?;
        write_text(&out.join(format!("stage{t}_joint_errors.csv")), cfg, &report.to_csv())?;
        write_text(&out.join(format!("stage{t}_success_rate.csv")), cfg, &curve.to_csv())?;
        summary.push_str(&format!("{t},{:.6}\n", report.mean_error));
        println!("stage {t}: mean error {:.3} {unit}", report.mean_error);
    }
    write_text(&out.join("summary.csv"), cfg, &summary)?;
    Ok(())
}

fn gradcheck(cfg: &RunConfig, configs: usize, fault: bool) -> Result<(), CliError> {
    if configs == 0 {
        return Err(CliError::Usage("--configs must be at least 1".into()));
    }
    let opts = SuiteOptions {
        configs_per_op: configs,
        seed: cfg.cascade.seed,
        fault: fault.then_some(Fault::FlipConvBackward),
        ..SuiteOptions::default()
    };
    let rows = run_gradcheck_suite(&opts)?;
    println!("{:<18} {:>7} {:>8} {:>8} {:>14}  status", "op", "configs", "checked", "skipped", "max_rel_error");
    for r in &rows {
        println!(
            "{:<18} {:>7} {:>8} {:>8} {:>14.3e}  {}",
            r.name,
            r.configs,
            r.checked,
            r.skipped,
            r.max_rel_error,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} checks below {TOLERANCE:e}", rows.len());
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn report(dir: &Path) -> Result<(), CliError> {
    let (init, _) = load_checkpoint(&dir.join(INIT_CKPT))?;
    let (ren, kv) = load_checkpoint(&dir.join(REN_CKPT))?;
    let cfg = RunConfig::from_kv(&kv)?;
    println!("config_sha256 = {}", cfg.hash());
    println!("init_cnn parameters: {}", init.param_count());
    println!(
        "pose_ren parameters: {} ({})",
        ren.param_count(),
        if cfg.model.ren.flat_ensemble { "flat" } else { "structured" }
    );
    let log_path: PathBuf = dir.join(LOG_CSV);
    if let Ok(text) = fs::read_to_string(&log_path) {
        let mut last: Vec<(String, String)> = Vec::new();
        for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() == 4 {
                match last.iter_mut().find(|(s, _)| s == f[1]) {
                    Some(slot) => slot.1 = format!("epoch {} loss {}", f[0], f[3]),
                    None => last.push((f[1].to_string(), format!("epoch {} loss {}", f[0], f[3]))),
                }
            }
        }
        for (stage, s) in last {
            println!("stage {stage}: {s}");
        }
    }
    Ok(())
}
