//! Network definitions: the convolutional backbone, the Init-CNN baseline and
//! the pose-guided structured region ensemble, plus checkpoint files.

pub mod checkpoint;
pub mod net;

use crate::config::{join_list, parse_list, KeyValues};
use crate::error::{invalid, Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{
    backbone_forward, guide_windows, init_cnn_forward, init_cnn_params, posren_forward, posren_params,
    HiddenActivations, InitCnn, PoseRen,
};

pub const FINGER_COUNT: usize = 5;

/// Six 3x3-style convolutions in three pooled blocks with optional skip
/// connections across pool boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub conv_channels: [usize; 6],
    pub kernel_size: usize,
    pub pool_window: usize,
    pub input_size: usize,
    /// `(a, a + 1)` adds the output of pool `a` (the input when `a == 0`) to
    /// the last convolution before pool `a + 1`.
    pub residual_taps: Vec<(usize, usize)>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            conv_channels: [16, 16, 32, 32, 64, 64],
            kernel_size: 3,
            pool_window: 2,
            input_size: 96,
            residual_taps: vec![(1, 2), (2, 3)],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.contains(&0) {
            return Err(invalid!("conv channel counts must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(invalid!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.pool_window < 2 {
            return Err(invalid!("pool window must be at least 2"));
        }
        let div = self.pool_window.pow(3);
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(invalid!(
                "input size {} must be a positive multiple of {div}",
                self.input_size
            ));
        }
        for &(a, b) in &self.residual_taps {
            if a > 2 || b != a + 1 {
                return Err(invalid!("residual tap ({a}, {b}) must bridge consecutive pools"));
            }
        }
        Ok(())
    }

    pub fn feat_size(&self) -> usize {
        self.input_size / self.pool_window.pow(3)
    }

    pub fn feat_channels(&self) -> usize {
        self.conv_channels[5]
    }

    /// Whether block `b` (0-based) carries a skip connection.
    pub fn has_tap(&self, block: usize) -> bool {
        self.residual_taps.contains(&(block, block + 1))
    }

    fn write_kv(&self, kv: &mut KeyValues) {
        kv.insert("channels", join_list(&self.conv_channels));
        kv.insert("kernel_size", self.kernel_size);
        kv.insert("pool_window", self.pool_window);
        kv.insert("input_size", self.input_size);
        let taps: Vec<String> = self.residual_taps.iter().map(|(a, b)| format!("{a}-{b}")).collect();
        kv.insert("residual_taps", if taps.is_empty() { "none".into() } else { taps.join(",") });
    }

    fn read_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let conv_channels = match kv.get_list::<usize>("channels")? {
            Some(v) => v
                .try_into()
                .map_err(|v: Vec<usize>| Error::Config(format!("`channels` needs 6 entries, got {}", v.len())))?,
            None => d.conv_channels,
        };
        let residual_taps = match kv.raw("residual_taps") {
            None => d.residual_taps,
            Some("none") | Some("") => Vec::new(),
            Some(s) => s
                .split(',')
                .map(|t| {
                    let (a, b) = t
                        .trim()
                        .split_once('-')
                        .ok_or_else(|| Error::Config(format!("residual tap `{t}` must look like `1-2`")))?;
                    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| Error::Config(format!("residual tap `{t}`: {e}")));
                    Ok((p(a)?, p(b)?))
                })
                .collect::<Result<_>>()?,
        };
        let cfg = Self {
            conv_channels,
            kernel_size: kv.get_or("kernel_size", d.kernel_size)?,
            pool_window: kv.get_or("pool_window", d.pool_window)?,
            input_size: kv.get_or("input_size", d.input_size)?,
            residual_taps,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// Which joints steer region crops and how regions group into fingers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuideSchema {
    pub joint_count: usize,
    pub palm: usize,
    /// Guide joints of each finger, thumb to pinky; may be empty.
    pub fingers: [Vec<usize>; FINGER_COUNT],
}

impl GuideSchema {
    pub fn new(joint_count: usize, palm: usize, fingers: [Vec<usize>; FINGER_COUNT]) -> Result<Self> {
        let s = Self {
            joint_count,
            palm,
            fingers,
        };
        s.validate()?;
        Ok(s)
    }

    /// Palm plus the root and tip of every finger of the 21-joint hand.
    pub fn hand21() -> Self {
        Self {
            joint_count: 21,
            palm: 0,
            fingers: std::array::from_fn(|f| vec![1 + 4 * f, 4 + 4 * f]),
        }
    }

    /// Palm and the five fingertips of a 6-joint toy hand, with guides on
    /// the palm, thumb, middle and pinky.
    pub fn toy6() -> Self {
        Self {
            joint_count: 6,
            palm: 0,
            fingers: [vec![1], vec![], vec![3], vec![], vec![5]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.guide_indices();
        if let Some(&bad) = all.iter().find(|&&j| j >= self.joint_count) {
            return Err(invalid!("guide joint {bad} out of range for {} joints", self.joint_count));
        }
        let mut seen = all.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != all.len() {
            return Err(invalid!("guide joints must be distinct"));
        }
        Ok(())
    }

    /// Palm first, then each finger's guides in order.
    pub fn guide_indices(&self) -> Vec<usize> {
        std::iter::once(self.palm)
            .chain(self.fingers.iter().flatten().copied())
            .collect()
    }

    /// `M`, the number of regions.
    pub fn region_count(&self) -> usize {
        1 + self.fingers.iter().map(Vec::len).sum::<usize>()
    }

    /// Region positions (into [`Self::guide_indices`]) fused by each finger:
    /// the palm region followed by that finger's own regions.
    pub fn finger_groups(&self) -> [Vec<usize>; FINGER_COUNT] {
        let mut next = 1;
        std::array::from_fn(|f| {
            let mut g = vec![0];
            for _ in &self.fingers[f] {
                g.push(next);
                next += 1;
            }
            g
        })
    }

    fn write_kv(&self, kv: &mut KeyValues) {
        kv.insert("joint_count", self.joint_count);
        kv.insert("palm_index", self.palm);
        let f: Vec<String> = self.fingers.iter().map(|g| join_list(g)).collect();
        kv.insert("finger_guides", f.join(";"));
    }

    fn read_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::hand21();
        let joint_count = kv.get_or("joint_count", d.joint_count)?;
        let palm = kv.get_or("palm_index", d.palm)?;
        let fingers = match kv.raw("finger_guides") {
            None => d.fingers,
            Some(s) => {
                let groups: Vec<Vec<usize>> = s
                    .split(';')
                    .map(|g| parse_list("finger_guides", g))
                    .collect::<Result<_>>()?;
                groups.try_into().map_err(|g: Vec<Vec<usize>>| {
                    Error::Config(format!("`finger_guides` needs 5 `;`-separated groups, got {}", g.len()))
                })?
            }
        };
        Self::new(joint_count, palm, fingers).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Baseline network: backbone, one hidden fc layer, linear pose output.
#[derive(Debug, Clone, PartialEq)]
pub struct InitCnnConfig {
    pub backbone: BackboneConfig,
    pub joint_count: usize,
    pub fc_dim: usize,
    pub dropout_rate: f32,
}

impl Default for InitCnnConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            joint_count: 21,
            fc_dim: 2048,
            dropout_rate: 0.5,
        }
    }
}

impl InitCnnConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.joint_count == 0 || self.fc_dim == 0 {
            return Err(invalid!("joint count and fc width must be positive"));
        }
        check_rate(self.dropout_rate)
    }
}

fn check_rate(r: f32) -> Result<()> {
    if !(0.0..1.0).contains(&r) {
        return Err(invalid!("dropout rate {r} outside [0, 1)"));
    }
    Ok(())
}

/// The refinement network.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRenConfig {
    pub backbone: BackboneConfig,
    pub schema: GuideSchema,
    pub region_w: usize,
    pub region_h: usize,
    pub fc_region_dim: usize,
    pub fc_finger_dim: usize,
    pub dropout_rate: f32,
    /// Replace the finger hierarchy with one fusion layer over all regions.
    pub flat_ensemble: bool,
    /// Place regions on a fixed grid instead of at the guide joints.
    pub grid_regions: bool,
    /// Per-region and fusion widths used when `flat_ensemble` is set.
    pub flat_region_dim: usize,
    pub flat_fuse_dim: usize,
}

impl Default for PoseRenConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            schema: GuideSchema::hand21(),
            region_w: 7,
            region_h: 7,
            fc_region_dim: 2048,
            fc_finger_dim: 2048,
            dropout_rate: 0.5,
            flat_ensemble: false,
            grid_regions: false,
            flat_region_dim: 2304,
            flat_fuse_dim: 2048,
        }
    }
}

impl PoseRenConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.schema.validate()?;
        let f = self.backbone.feat_size();
        if self.region_w == 0 || self.region_h == 0 || self.region_w > f || self.region_h > f {
            return Err(invalid!(
                "region {}x{} does not fit the {f}x{f} feature map",
                self.region_w,
                self.region_h
            ));
        }
        if [self.fc_region_dim, self.fc_finger_dim, self.flat_region_dim, self.flat_fuse_dim].contains(&0) {
            return Err(invalid!("fc widths must be positive"));
        }
        check_rate(self.dropout_rate)
    }

    pub fn joint_count(&self) -> usize {
        self.schema.joint_count
    }

    pub fn region_count(&self) -> usize {
        self.schema.region_count()
    }

    pub fn region_features(&self) -> usize {
        self.backbone.feat_channels() * self.region_w * self.region_h
    }
}

/// Init-CNN plus Pose-REN configuration, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub init: InitCnnConfig,
    pub ren: PoseRenConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            init: InitCnnConfig::default(),
            ren: PoseRenConfig::default(),
        }
    }
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "channels",
        "kernel_size",
        "pool_window",
        "input_size",
        "residual_taps",
        "joint_count",
        "palm_index",
        "finger_guides",
        "init_fc_dim",
        "init_dropout_rate",
        "region_w",
        "region_h",
        "fc_region_dim",
        "fc_finger_dim",
        "dropout_rate",
        "flat_ensemble",
        "grid_regions",
        "flat_region_dim",
        "flat_fuse_dim",
    ];

    /// The small test network: channels `[4,4,8,8,16,16]`, fc widths 32,
    /// 6 joints and 4 regions.
    pub fn tiny() -> Self {
        let backbone = BackboneConfig {
            conv_channels: [4, 4, 8, 8, 16, 16],
            ..BackboneConfig::default()
        };
        Self {
            init: InitCnnConfig {
                backbone: backbone.clone(),
                joint_count: 6,
                fc_dim: 32,
                dropout_rate: 0.5,
            },
            ren: PoseRenConfig {
                backbone,
                schema: GuideSchema::toy6(),
                fc_region_dim: 32,
                fc_finger_dim: 32,
                flat_region_dim: 32,
                flat_fuse_dim: 32,
                ..PoseRenConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.init.validate()?;
        self.ren.validate()?;
        if self.init.backbone != self.ren.backbone {
            return Err(invalid!("Init-CNN and Pose-REN must share one backbone layout"));
        }
        if self.init.joint_count != self.ren.joint_count() {
            return Err(invalid!("Init-CNN and Pose-REN disagree on the joint count"));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        self.ren.backbone.write_kv(kv);
        self.ren.schema.write_kv(kv);
        kv.insert("init_fc_dim", self.init.fc_dim);
        kv.insert("init_dropout_rate", self.init.dropout_rate);
        let r = &self.ren;
        kv.insert("region_w", r.region_w);
        kv.insert("region_h", r.region_h);
        kv.insert("fc_region_dim", r.fc_region_dim);
        kv.insert("fc_finger_dim", r.fc_finger_dim);
        kv.insert("dropout_rate", r.dropout_rate);
        kv.insert("flat_ensemble", r.flat_ensemble);
        kv.insert("grid_regions", r.grid_regions);
        kv.insert("flat_region_dim", r.flat_region_dim);
        kv.insert("flat_fuse_dim", r.flat_fuse_dim);
    }

    /// Reads the model keys of `kv`; absent keys keep their defaults.
    pub fn read_kv(kv: &KeyValues) -> Result<Self> {
        let backbone = BackboneConfig::read_kv(kv)?;
        let schema = GuideSchema::read_kv(kv)?;
        let d = PoseRenConfig::default();
        let ren = PoseRenConfig {
            backbone: backbone.clone(),
            region_w: kv.get_or("region_w", d.region_w)?,
            region_h: kv.get_or("region_h", d.region_h)?,
            fc_region_dim: kv.get_or("fc_region_dim", d.fc_region_dim)?,
            fc_finger_dim: kv.get_or("fc_finger_dim", d.fc_finger_dim)?,
            dropout_rate: kv.get_or("dropout_rate", d.dropout_rate)?,
            flat_ensemble: kv.get_or("flat_ensemble", d.flat_ensemble)?,
            grid_regions: kv.get_or("grid_regions", d.grid_regions)?,
            flat_region_dim: kv.get_or("flat_region_dim", d.flat_region_dim)?,
            flat_fuse_dim: kv.get_or("flat_fuse_dim", d.flat_fuse_dim)?,
            schema: schema.clone(),
        };
        let di = InitCnnConfig::default();
        let init = InitCnnConfig {
            backbone,
            joint_count: schema.joint_count,
            fc_dim: kv.get_or("init_fc_dim", di.fc_dim)?,
            dropout_rate: kv.get_or("init_dropout_rate", di.dropout_rate)?,
        };
        let cfg = Self { init, ren };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_has_eleven_regions() {
        let s = GuideSchema::hand21();
        assert_eq!(s.region_count(), 11);
        assert_eq!(s.guide_indices(), vec![0, 1, 4, 5, 8, 9, 12, 13, 16, 17, 20]);
        let g = s.finger_groups();
        assert_eq!(g[0], vec![0, 1, 2]);
        assert_eq!(g[4], vec![0, 9, 10]);
        assert!(g.iter().all(|x| x.len() == 3));
    }

    #[test]
    fn toy_schema_groups() {
        let s = GuideSchema::toy6();
        assert_eq!(s.region_count(), 4);
        assert_eq!(s.finger_groups(), [vec![0, 1], vec![0], vec![0, 2], vec![0], vec![0, 3]]);
    }

    #[test]
    fn schema_validation() {
        assert!(GuideSchema::new(5, 0, [vec![1], vec![], vec![], vec![], vec![7]]).is_err());
        assert!(GuideSchema::new(5, 0, [vec![0], vec![], vec![], vec![], vec![]]).is_err());
    }

    #[test]
    fn feature_map_is_twelve() {
        assert_eq!(BackboneConfig::default().feat_size(), 12);
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = ModelConfig::tiny();
        cfg.ren.flat_ensemble = true;
        cfg.ren.backbone.residual_taps = vec![(1, 2)];
        cfg.init.backbone = cfg.ren.backbone.clone();
        let mut kv = KeyValues::new();
        cfg.write_kv(&mut kv);
        kv.reject_unknown(ModelConfig::KEYS).unwrap();
        let back = ModelConfig::read_kv(&KeyValues::parse(&kv.to_text()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_regions_rejected() {
        let mut c = PoseRenConfig::default();
        c.region_w = 13;
        assert!(c.validate().is_err());
    }
}
