//! PRDF frame files and the text manifest that lists them.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! "PRDF" | u32 version | u32 width | u32 height | u32 joints
//!        | width*height x u16 depth (mm) | 3*joints x f32 world coords
//! ```
//!
//! The manifest is UTF-8: a header line `fx fy cx cy`, then one frame path
//! per line, relative to the manifest's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Dataset, DepthFrame, HandPose};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, WorldPoint};

pub const FRAME_MAGIC: [u8; 4] = *b"PRDF";
pub const FRAME_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";
const HEADER_LEN: usize = 20;

pub fn encode_frame(frame: &DepthFrame, pose: &HandPose) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + frame.depth.len() * 2 + pose.joint_count() * 12);
    out.extend_from_slice(&FRAME_MAGIC);
    for v in [
        FRAME_VERSION,
        frame.width as u32,
        frame.height as u32,
        pose.joint_count() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for d in &frame.depth {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for p in &pose.joints {
        for c in p.to_array() {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<(DepthFrame, HandPose)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::SizeMismatch(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != FRAME_MAGIC {
        return Err(Error::BadMagic {
            expected: FRAME_MAGIC,
            found: magic,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != FRAME_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FRAME_VERSION,
        });
    }
    let (width, height, joints) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let expected = HEADER_LEN + width * height * 2 + joints * 12;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch(format!(
            "header describes {expected} bytes ({width}x{height}, {joints} joints), file has {}",
            bytes.len()
        )));
    }
    let body = &bytes[HEADER_LEN..];
    let (depth_bytes, pose_bytes) = body.split_at(width * height * 2);
    let depth = depth_bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let coords: Vec<f64> = pose_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let pose = HandPose::new(
        coords
            .chunks_exact(3)
            .map(|c| WorldPoint::new(c[0], c[1], c[2]))
            .collect(),
    );
    Ok((DepthFrame::new(width, height, depth)?, pose))
}

pub fn write_frame(path: &Path, frame: &DepthFrame, pose: &HandPose) -> Result<()> {
    fs::write(path, encode_frame(frame, pose))?;
    Ok(())
}

pub fn read_frame(path: &Path) -> Result<(DepthFrame, HandPose)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_frame(&bytes)
}

/// Writes `dir/manifest.txt` plus `dir/frames/frame_NNNNNN.prdf`; returns the
/// manifest path.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<PathBuf> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    let c = &data.camera;
    let mut manifest = format!("{} {} {} {}\n", c.fx, c.fy, c.cx, c.cy);
    for (i, (frame, pose)) in data.frames.iter().zip(&data.poses).enumerate() {
        let rel = format!("frames/frame_{i:06}.prdf");
        write_frame(&dir.join(&rel), frame, pose)?;
        manifest.push_str(&rel);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST_NAME);
    let mut f = fs::File::create(&path)?;
    f.write_all(manifest.as_bytes())?;
    Ok(path)
}

pub fn parse_camera_line(line: &str) -> Result<CameraIntrinsics> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("camera value `{t}`: {e}"))))
        .collect::<Result<_>>()?;
    let [fx, fy, cx, cy] = vals[..] else {
        return Err(Error::Parse(format!(
            "manifest header must hold `fx fy cx cy`, got `{line}`"
        )));
    };
    CameraIntrinsics::new(fx, fy, cx, cy)
}

/// Frame paths listed by a manifest, resolved against its directory.
pub fn manifest_entries(manifest: &Path) -> Result<(CameraIntrinsics, Vec<PathBuf>)> {
    let text = fs::read_to_string(manifest).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(manifest.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty manifest".into()))?;
    let camera = parse_camera_line(header)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let paths = lines
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect();
    Ok((camera, paths))
}

pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let (camera, paths) = manifest_entries(manifest)?;
    let mut frames = Vec::with_capacity(paths.len());
    let mut poses = Vec::with_capacity(paths.len());
    for p in &paths {
        let (f, pose) = read_frame(p)?;
        frames.push(f);
        poses.push(pose);
    }
    Ok(Dataset {
        camera,
        frames,
        poses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (DepthFrame, HandPose) {
        let frame = DepthFrame::new(3, 2, vec![0, 1, 500, 65535, 7, 1000]).unwrap();
        let pose = HandPose::new(vec![WorldPoint::new(1.5, -2.25, 480.0), WorldPoint::new(0.1f32 as f64, 3.0, 512.5)]);
        (frame, pose)
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let (f, p) = sample();
        let bytes = encode_frame(&f, &p);
        assert_eq!(&bytes[..4], b"PRDF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..22], &0u16.to_le_bytes());
        assert_eq!(&bytes[26..28], &65535u16.to_le_bytes());
        assert_eq!(&bytes[32..36], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 12 + 24);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let (f, p) = sample();
        let good = encode_frame(&f, &p);
        assert_eq!(decode_frame(&good).unwrap(), (f, p));

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_frame(&bad), Err(Error::BadMagic { .. })));

        let mut ver = good.clone();
        ver[4] = 9;
        assert!(matches!(decode_frame(&ver), Err(Error::VersionMismatch { found: 9, .. })));

        assert!(matches!(decode_frame(&good[..good.len() - 3]), Err(Error::SizeMismatch(_))));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_frame(&long), Err(Error::SizeMismatch(_))));
    }
}
