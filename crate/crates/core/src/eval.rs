//! Per-joint mean error, worst-joint success rate, per-stage reports and
//! their CSV forms.

use std::fs;
use std::path::Path;

use crate::data::HandPose;
use crate::error::{invalid, Error, Result};
use crate::geometry::{project_world_to_pixel, CameraIntrinsics};

/// Where distances are measured.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ErrorSpace {
    /// Euclidean distance in millimetres.
    #[default]
    World,
    /// Distance between `(u, v)` projections, in pixels.
    Pixel(CameraIntrinsics),
}

impl ErrorSpace {
    fn distance(&self, a: &crate::geometry::WorldPoint, b: &crate::geometry::WorldPoint) -> Result<f64> {
        match self {
            ErrorSpace::World => Ok(a.distance(b)),
            ErrorSpace::Pixel(cam) => {
                let (p, q) = (project_world_to_pixel(a, cam)?, project_world_to_pixel(b, cam)?);
                Ok((p.u - q.u).hypot(p.v - q.v))
            }
        }
    }
}

/// `errors[f][j]`: distance of joint `j` in frame `f`.
pub fn joint_distances(pred: &[HandPose], gt: &[HandPose], space: ErrorSpace) -> Result<Vec<Vec<f64>>> {
    if pred.len() != gt.len() {
        return Err(invalid!("{} predicted frames vs {} ground-truth frames", pred.len(), gt.len()));
    }
    pred.iter()
        .zip(gt)
        .enumerate()
        .map(|(f, (p, g))| {
            if p.joint_count() != g.joint_count() {
                return Err(invalid!(
                    "frame {f}: {} predicted joints vs {} ground-truth joints",
                    p.joint_count(),
                    g.joint_count()
                ));
            }
            p.joints.iter().zip(&g.joints).map(|(a, b)| space.distance(a, b)).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_joint_errors: Vec<f64>,
    pub mean_error: f64,
    pub frame_count: usize,
    pub joint_count: usize,
}

pub fn per_joint_errors(pred: &[HandPose], gt: &[HandPose]) -> Result<EvalReport> {
    per_joint_errors_in(pred, gt, ErrorSpace::World)
}

pub fn per_joint_errors_in(pred: &[HandPose], gt: &[HandPose], space: ErrorSpace) -> Result<EvalReport> {
    let d = joint_distances(pred, gt, space)?;
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let joints = d[0].len();
    if d.iter().any(|r| r.len() != joints) {
        return Err(invalid!("frames disagree on the joint count"));
    }
    let n = d.len() as f64;
    let per_joint: Vec<f64> = (0..joints).map(|j| d.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mean_error = if joints == 0 { 0.0 } else { per_joint.iter().sum::<f64>() / joints as f64 };
    Ok(EvalReport {
        per_joint_errors: per_joint,
        mean_error,
        frame_count: d.len(),
        joint_count: joints,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuccessCurve {
    pub thresholds: Vec<f64>,
    pub rates: Vec<f64>,
}

/// 0 to 80 mm in 1 mm steps.
pub fn default_thresholds() -> Vec<f64> {
    (0..=80).map(f64::from).collect()
}

pub fn success_rate_curve(pred: &[HandPose], gt: &[HandPose], thresholds: &[f64]) -> Result<SuccessCurve> {
    success_rate_curve_in(pred, gt, thresholds, ErrorSpace::World)
}

/// Fraction of frames whose largest joint distance is `<= tau`, per `tau`.
pub fn success_rate_curve_in(
    pred: &[HandPose],
    gt: &[HandPose],
    thresholds: &[f64],
    space: ErrorSpace,
) -> Result<SuccessCurve> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(invalid!("thresholds must be ascending"));
    }
    let mut worst: Vec<f64> = joint_distances(pred, gt, space)?
        .iter()
        .map(|r| r.iter().copied().fold(0.0, f64::max))
        .collect();
    worst.sort_by(f64::total_cmp);
    let n = worst.len();
    let rates = thresholds
        .iter()
        .map(|&tau| {
            if n == 0 {
                0.0
            } else {
                worst.partition_point(|&e| e <= tau) as f64 / n as f64
            }
        })
        .collect();
    Ok(SuccessCurve {
        thresholds: thresholds.to_vec(),
        rates,
    })
}

/// One report per stage; `stages[t][f]` is frame `f`'s pose after stage `t`.
pub fn per_stage_report(stages: &[Vec<HandPose>], gt: &[HandPose]) -> Result<Vec<EvalReport>> {
    if let Some(t) = stages.iter().position(|s| s.len() != gt.len()) {
        return Err(invalid!("stage {t} has {} frames, ground truth has {}", stages[t].len(), gt.len()));
    }
    stages.iter().map(|s| per_joint_errors(s, gt)).collect()
}

/// Anything with a fixed two-column CSV form.
pub trait CsvTable {
    fn header(&self) -> &'static str;
    fn rows(&self) -> Vec<(String, f64)>;

    fn to_csv(&self) -> String {
        let mut out = format!("{}\n", self.header());
        for (k, v) in self.rows() {
            out.push_str(&format!("{k},{v:.6}\n"));
        }
        out
    }
}

impl CsvTable for EvalReport {
    fn header(&self) -> &'static str {
        "joint_index,error_mm"
    }

    fn rows(&self) -> Vec<(String, f64)> {
        self.per_joint_errors
            .iter()
            .enumerate()
            .map(|(j, &e)| (j.to_string(), e))
            .collect()
    }
}

impl CsvTable for SuccessCurve {
    fn header(&self) -> &'static str {
        "threshold_mm,success_rate"
    }

    fn rows(&self) -> Vec<(String, f64)> {
        self.thresholds
            .iter()
            .zip(&self.rates)
            .map(|(t, &r)| (format!("{t:.6}"), r))
            .collect()
    }
}

pub fn export_csv(table: &impl CsvTable, path: &Path) -> Result<()> {
    fs::write(path, table.to_csv())?;
    Ok(())
}

/// Reads a two-column CSV written by [`export_csv`]; `#` lines are skipped
/// and the header must equal `header`.
pub fn parse_csv(text: &str, header: &str) -> Result<Vec<(f64, f64)>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == header => {}
        other => return Err(Error::Parse(format!("expected header `{header}`, found {other:?}"))),
    }
    lines
        .map(|l| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("expected two columns in `{l}`")))?;
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("`{s}`: {e}")));
            Ok((num(a)?, num(b)?))
        })
        .collect()
}

/// Poses of every frame after every stage, one row per `(frame, stage)`:
/// `frame,stage,x0,y0,z0,x1,...` in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTable {
    /// `stages[t][f]`.
    pub stages: Vec<Vec<HandPose>>,
}

impl PoseTable {
    pub fn frame_count(&self) -> usize {
        self.stages.first().map_or(0, Vec::len)
    }

    pub fn to_csv(&self) -> String {
        let joints = self.stages.first().and_then(|s| s.first()).map_or(0, HandPose::joint_count);
        let mut out = String::from("frame,stage");
        for j in 0..joints {
            out.push_str(&format!(",x{j},y{j},z{j}"));
        }
        out.push('\n');
        for f in 0..self.frame_count() {
            for (t, stage) in self.stages.iter().enumerate() {
                out.push_str(&format!("{f},{t}"));
                for p in &stage[f].joints {
                    out.push_str(&format!(",{:.6},{:.6},{:.6}", p.x, p.y, p.z));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Parses [`PoseTable::to_csv`] output; `#` lines are skipped. Every
    /// frame must list the same stages `0..=T` in order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty pose table".into()))?;
        let cols = header.split(',').count();
        if !header.starts_with("frame,stage") || (cols - 2) % 3 != 0 {
            return Err(Error::Parse(format!("bad pose table header `{header}`")));
        }
        let mut stages: Vec<Vec<HandPose>> = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(Error::Parse(format!("row {}: {} columns, expected {cols}", n + 1, fields.len())));
            }
            let idx = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::Parse(format!("row {}: `{s}`: {e}", n + 1)));
            let (f, t) = (idx(fields[0])?, idx(fields[1])?);
            let coords = fields[2..]
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {}: `{s}`: {e}", n + 1))))
                .collect::<Result<Vec<_>>>()?;
            if t == stages.len() && f == 0 {
                stages.push(Vec::new());
            }
            if t >= stages.len() || stages[t].len() != f {
                return Err(Error::Parse(format!("row {}: frame {f} stage {t} out of order", n + 1)));
            }
            stages[t].push(HandPose::from_flat(&coords)?);
        }
        if stages.iter().any(|s| s.len() != stages[0].len()) {
            return Err(Error::Parse("stages list different frame counts".into()));
        }
        Ok(Self { stages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::WorldPoint;

    fn pose(points: &[(f64, f64, f64)]) -> HandPose {
        HandPose::new(points.iter().map(|&(x, y, z)| WorldPoint::new(x, y, z)).collect())
    }

    #[test]
    fn three_four_five() {
        let r = per_joint_errors(&[pose(&[(3.0, 4.0, 500.0)])], &[pose(&[(0.0, 0.0, 500.0)])]).unwrap();
        assert_eq!(r.per_joint_errors, vec![5.0]);
        assert_eq!(r.mean_error, 5.0);
    }

    #[test]
    fn one_third_at_ten() {
        let gt = vec![pose(&[(0.0, 0.0, 500.0)]); 3];
        let pred = vec![pose(&[(5.0, 0.0, 500.0)]), pose(&[(12.0, 0.0, 500.0)]), pose(&[(0.0, 30.0, 500.0)])];
        let c = success_rate_curve(&pred, &gt, &[10.0]).unwrap();
        assert!((c.rates[0] - 1.0 / 3.0).abs() < 1e-12);
        let c = success_rate_curve(&pred, &gt, &[4.9, 30.0, f64::INFINITY]).unwrap();
        assert_eq!(c.rates, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn mismatches_rejected() {
        let a = vec![pose(&[(0.0, 0.0, 1.0)])];
        assert!(per_joint_errors(&a, &[]).is_err());
        assert!(per_joint_errors(&a, &[pose(&[(0.0, 0.0, 1.0), (1.0, 1.0, 1.0)])]).is_err());
        assert!(success_rate_curve(&a, &a, &[2.0, 1.0]).is_err());
        assert!(per_stage_report(&[a.clone(), vec![]], &a).is_err());
    }

    #[test]
    fn pixel_mode_uses_projection() {
        let cam = CameraIntrinsics::new(100.0, 100.0, 48.0, 48.0).unwrap();
        let r = per_joint_errors_in(&[pose(&[(50.0, 0.0, 500.0)])], &[pose(&[(0.0, 0.0, 500.0)])], ErrorSpace::Pixel(cam)).unwrap();
        assert!((r.mean_error - 10.0).abs() < 1e-12);
    }

    #[test]
    fn csv_shapes() {
        let c = SuccessCurve {
            thresholds: vec![],
            rates: vec![],
        };
        assert_eq!(c.to_csv(), "threshold_mm,success_rate\n");
        let r = EvalReport {
            per_joint_errors: vec![1.5, 2.0],
            mean_error: 1.75,
            frame_count: 1,
            joint_count: 2,
        };
        assert_eq!(r.to_csv(), "joint_index,error_mm\n0,1.500000\n1,2.000000\n");
        let back = parse_csv(&format!("# cfg abc\n{}", r.to_csv()), "joint_index,error_mm").unwrap();
        assert_eq!(back, vec![(0.0, 1.5), (1.0, 2.0)]);
    }

    #[test]
    fn pose_table_round_trip() {
        let a = pose(&[(1.0, 2.0, 500.0), (3.5, -4.25, 480.0)]);
        let b = pose(&[(0.5, 0.0, 510.0), (1.0, 1.0, 490.0)]);
        let table = PoseTable {
            stages: vec![vec![a.clone(), b.clone()], vec![b, a]],
        };
        let text = table.to_csv();
        assert_eq!(text.lines().count(), 1 + 4);
        assert_eq!(PoseTable::parse(&format!("# h\n{text}")).unwrap(), table);
        assert!(PoseTable::parse("frame,stage,x0,y0,z0\n1,0,1,2,3\n").is_err());
    }
}
