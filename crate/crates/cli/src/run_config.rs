use std::fs;
use std::path::Path;

use posecascade::cascade::{CascadeConfig, PreprocessConfig};
use posecascade::config::{parse_list, KeyValues};
use posecascade::data::synth::default_camera;
use posecascade::data::SyntheticHandSpec;
use posecascade::geometry::CameraIntrinsics;
use posecascade::model::ModelConfig;
use posecascade::{Error, Result};
use sha2::{Digest, Sha256};

/// Keys read by the synthetic generator.
const SYNTH_KEYS: &[&str] = &["camera", "noise_sigma"];

/// Every option of every command, resolved from a `key = value` file with
/// defaults for absent keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub cascade: CascadeConfig,
    pub preprocess: PreprocessConfig,
    pub camera: CameraIntrinsics,
    pub noise_sigma: f64,
}

impl RunConfig {
    pub fn allowed_keys() -> Vec<&'static str> {
        [ModelConfig::KEYS, CascadeConfig::KEYS, PreprocessConfig::KEYS, SYNTH_KEYS].concat()
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&Self::allowed_keys())?;
        let camera = match kv.raw("camera") {
            None => default_camera(),
            Some(v) => {
                let c: Vec<f64> = parse_list("camera", v)?;
                let [fx, fy, cx, cy] = c[..] else {
                    return Err(Error::Config(format!("`camera` needs fx,fy,cx,cy, got `{v}`")));
                };
                CameraIntrinsics::new(fx, fy, cx, cy).map_err(|e| Error::Config(e.to_string()))?
            }
        };
        Ok(Self {
            model: ModelConfig::read_kv(kv)?,
            cascade: CascadeConfig::read_kv(kv)?,
            preprocess: PreprocessConfig::read_kv(kv)?,
            camera,
            noise_sigma: kv.get_or("noise_sigma", 0.0)?,
        })
    }

    /// Reads `path` (if any) and applies the `--seed` override. Unknown keys
    /// are rejected here, before any command does work.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut kv = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                KeyValues::parse(&text)?
            }
            None => KeyValues::new(),
        };
        if let Some(s) = seed {
            kv.insert("seed", s);
        }
        Self::from_kv(&kv)
    }

    pub fn resolved(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        self.model.write_kv(&mut kv);
        self.cascade.write_kv(&mut kv);
        self.preprocess.write_kv(&mut kv);
        let c = &self.camera;
        kv.insert("camera", format!("{},{},{},{}", c.fx, c.fy, c.cx, c.cy));
        kv.insert("noise_sigma", self.noise_sigma);
        kv
    }

    /// SHA-256 of the resolved config text, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.resolved().to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// First line of every text output.
    pub fn header(&self) -> String {
        format!("# config_sha256 = {}\n", self.hash())
    }

    pub fn synth_spec(&self) -> SyntheticHandSpec {
        SyntheticHandSpec {
            noise_sigma: self.noise_sigma,
            ..SyntheticHandSpec::default()
        }
    }

    /// Writes `config.txt` (hash header plus resolved keys) into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("config.txt"), format!("{}{}", self.header(), self.resolved().to_text()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_round_trips_and_hash_is_stable() {
        let a = RunConfig::load(None, Some(5)).unwrap();
        let b = RunConfig::from_kv(&a.resolved()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = RunConfig::load(None, Some(6)).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let kv = KeyValues::parse("bogus = 1\n").unwrap();
        assert!(matches!(RunConfig::from_kv(&kv), Err(Error::Config(_))));
    }
}
