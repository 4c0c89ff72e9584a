//! Dataset directory format.
//!
//! A dataset directory holds `scene.json` (the manifest: rig, poses,
//! timestamps, statics, checksums) plus one binary array file per tensor:
//! `frames/<k>/lidar.bin` and `gt.bin`. Binary arrays start with an 8-byte
//! magic, a u32 format version, a u32 dtype code, a u32 rank, and one u32 per
//! extent, followed by little-endian payload. The manifest stores a SHA-256
//! checksum for every referenced file; checksums are verified before any
//! array is parsed, so truncated or corrupted files never half-load.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Frame, GtBox, LidarPoint, PointTag, Scene, SceneError};
use crate::geometry::{BevGridSpec, Box3, CameraModel, Pose};

const MAGIC: &[u8; 8] = b"BEVTARR\0";
const ARRAY_VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;

/// Typed payload of a binary array file.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl ArrayData {
    fn dtype_code(&self) -> u32 {
        match self {
            ArrayData::F32(_) => 1,
            ArrayData::F64(_) => 2,
            ArrayData::I32(_) => 3,
        }
    }

    fn elem_size(code: u32) -> Option<usize> {
        match code {
            1 | 3 => Some(4),
            2 => Some(8),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match self {
            ArrayData::F64(v) => Some(v),
            _ => None,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn encode_array(dims: &[usize], data: &ArrayData) -> Result<Vec<u8>, SceneError> {
    let numel: usize = dims.iter().product();
    if numel != data.len() {
        return Err(SceneError::BadArray {
            file: "<encode>".into(),
            details: format!("{} elements for dims {:?}", data.len(), dims),
        });
    }
    let mut buf = Vec::with_capacity(24 + data.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ARRAY_VERSION.to_le_bytes());
    buf.extend_from_slice(&data.dtype_code().to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    match data {
        ArrayData::F32(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        ArrayData::F64(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        ArrayData::I32(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

fn decode_array(file: &str, bytes: &[u8]) -> Result<(Vec<usize>, ArrayData), SceneError> {
    let bad = |details: String| SceneError::BadArray { file: file.into(), details };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing or wrong magic header".into()));
    }
    let u32_at = |off: usize| -> u32 {
        u32::from_le_bytes(bytes[off..off + 4].try_into().expect("bounds checked"))
    };
    let version = u32_at(8);
    if version != ARRAY_VERSION {
        return Err(SceneError::Version { found: version, expected: ARRAY_VERSION });
    }
    let dtype = u32_at(12);
    let ndim = u32_at(16) as usize;
    let header = 20 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated shape header".into()));
    }
    let dims: Vec<usize> = (0..ndim).map(|i| u32_at(20 + 4 * i) as usize).collect();
    let numel: usize = dims.iter().product();
    let elem = ArrayData::elem_size(dtype).ok_or_else(|| bad(format!("unknown dtype {dtype}")))?;
    if bytes.len() != header + numel * elem {
        return Err(bad(format!(
            "payload is {} bytes, expected {} for dims {dims:?}",
            bytes.len() - header,
            numel * elem
        )));
    }
    let payload = &bytes[header..];
    let data = match dtype {
        1 => ArrayData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunked")))
                .collect(),
        ),
        2 => ArrayData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunked")))
                .collect(),
        ),
        _ => ArrayData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().expect("chunked")))
                .collect(),
        ),
    };
    Ok((dims, data))
}

/// Writes one binary array file, creating parent directories.
pub fn write_array(path: &Path, dims: &[usize], data: &ArrayData) -> Result<(), SceneError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let buf = encode_array(dims, data)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads one binary array file (no checksum context; dataset reads verify
/// checksums via the manifest before calling this).
pub fn read_array(path: &Path) -> Result<(Vec<usize>, ArrayData), SceneError> {
    let bytes = fs::read(path)?;
    decode_array(&path.display().to_string(), &bytes)
}

#[derive(Serialize, Deserialize)]
struct FrameMeta {
    timestamp: f64,
    ego_pose: Pose,
    lidar_file: String,
    n_points: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    dt: f64,
    feature_seed: u64,
    feature_channels: usize,
    grid: BevGridSpec,
    rig: Vec<CameraModel>,
    statics: Vec<Box3>,
    frames: Vec<FrameMeta>,
    gt_file: String,
    checksums: BTreeMap<String, String>,
}

const KIND_GROUND: f64 = 0.0;
const KIND_STATIC: f64 = 1.0;
const KIND_OBJECT: f64 = 2.0;

fn lidar_rows(points: &[LidarPoint]) -> Vec<f64> {
    let mut rows = Vec::with_capacity(points.len() * 5);
    for p in points {
        rows.extend_from_slice(&p.pos);
        let (kind, id) = match p.tag {
            PointTag::Ground => (KIND_GROUND, 0.0),
            PointTag::Static(i) => (KIND_STATIC, i as f64),
            PointTag::Object(t) => (KIND_OBJECT, t as f64),
        };
        rows.push(kind);
        rows.push(id);
    }
    rows
}

fn lidar_from_rows(file: &str, rows: &[f64]) -> Result<Vec<LidarPoint>, SceneError> {
    rows.chunks_exact(5)
        .map(|r| {
            let tag = if r[3] == KIND_GROUND {
                PointTag::Ground
            } else if r[3] == KIND_STATIC {
                PointTag::Static(r[4] as usize)
            } else if r[3] == KIND_OBJECT {
                PointTag::Object(r[4] as u64)
            } else {
                return Err(SceneError::BadArray {
                    file: file.into(),
                    details: format!("unknown point kind {}", r[3]),
                });
            };
            Ok(LidarPoint { pos: [r[0], r[1], r[2]], tag })
        })
        .collect()
}

const GT_COLS: usize = 13;

fn gt_rows(frames: &[Frame]) -> Vec<f64> {
    let mut rows = Vec::new();
    for f in frames {
        for g in &f.gt {
            rows.extend_from_slice(&[
                g.frame as f64,
                g.track_id as f64,
                g.class_id as f64,
                g.center[0],
                g.center[1],
                g.center[2],
                g.size[0],
                g.size[1],
                g.size[2],
                g.yaw,
                g.velocity[0],
                g.velocity[1],
                g.velocity[2],
            ]);
        }
    }
    rows
}

fn gt_from_rows(rows: &[f64]) -> Vec<GtBox> {
    rows.chunks_exact(GT_COLS)
        .map(|r| GtBox {
            frame: r[0] as usize,
            track_id: r[1] as u64,
            class_id: r[2] as usize,
            center: [r[3], r[4], r[5]],
            size: [r[6], r[7], r[8]],
            yaw: r[9],
            velocity: [r[10], r[11], r[12]],
        })
        .collect()
}

/// Writes a scene as a dataset directory (manifest + binary arrays).
pub fn write_dataset(scene: &Scene, dir: &Path) -> Result<(), SceneError> {
    fs::create_dir_all(dir)?;
    let mut checksums = BTreeMap::new();
    let mut frames_meta = Vec::with_capacity(scene.frames.len());

    for (k, f) in scene.frames.iter().enumerate() {
        let rel = format!("frames/{k}/lidar.bin");
        let rows = lidar_rows(&f.lidar);
        let buf = encode_array(&[f.lidar.len(), 5], &ArrayData::F64(rows))?;
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, &buf)?;
        checksums.insert(rel.clone(), sha256_hex(&buf));
        frames_meta.push(FrameMeta {
            timestamp: f.timestamp,
            ego_pose: f.ego_pose.clone(),
            lidar_file: rel,
            n_points: f.lidar.len(),
        });
    }

    let gt = gt_rows(&scene.frames);
    let n_gt = gt.len() / GT_COLS;
    let gt_buf = encode_array(&[n_gt, GT_COLS], &ArrayData::F64(gt))?;
    fs::write(dir.join("gt.bin"), &gt_buf)?;
    checksums.insert("gt.bin".into(), sha256_hex(&gt_buf));

    let rig = scene
        .frames
        .first()
        .map(|f| f.cameras.clone())
        .unwrap_or_default();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: scene.seed,
        dt: scene.dt,
        feature_seed: scene.feature_seed,
        feature_channels: scene.feature_channels,
        grid: scene.grid,
        rig,
        statics: scene.statics.clone(),
        frames: frames_meta,
        gt_file: "gt.bin".into(),
        checksums,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("scene.json"), json)?;
    Ok(())
}

fn read_verified(dir: &Path, rel: &str, manifest: &Manifest) -> Result<Vec<u8>, SceneError> {
    let bytes = fs::read(dir.join(rel))?;
    match manifest.checksums.get(rel) {
        Some(expect) if *expect == sha256_hex(&bytes) => Ok(bytes),
        _ => Err(SceneError::Checksum { file: rel.into() }),
    }
}

/// Reads a dataset directory back into a scene. Fails without partial results
/// on version mismatch, checksum mismatch, or malformed arrays.
pub fn read_dataset(dir: &Path) -> Result<Scene, SceneError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("scene.json"))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(SceneError::Version {
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }

    let gt_bytes = read_verified(dir, &manifest.gt_file, &manifest)?;
    let (gt_dims, gt_data) = decode_array(&manifest.gt_file, &gt_bytes)?;
    let gt_flat = gt_data.as_f64().ok_or_else(|| SceneError::BadArray {
        file: manifest.gt_file.clone(),
        details: "expected f64 payload".into(),
    })?;
    if gt_dims.len() != 2 || gt_dims[1] != GT_COLS {
        return Err(SceneError::BadArray {
            file: manifest.gt_file.clone(),
            details: format!("expected [n, {GT_COLS}], got {gt_dims:?}"),
        });
    }
    let all_gt = gt_from_rows(gt_flat);

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (k, meta) in manifest.frames.iter().enumerate() {
        let bytes = read_verified(dir, &meta.lidar_file, &manifest)?;
        let (dims, data) = decode_array(&meta.lidar_file, &bytes)?;
        let flat = data.as_f64().ok_or_else(|| SceneError::BadArray {
            file: meta.lidar_file.clone(),
            details: "expected f64 payload".into(),
        })?;
        if dims.len() != 2 || dims[1] != 5 || dims[0] != meta.n_points {
            return Err(SceneError::BadArray {
                file: meta.lidar_file.clone(),
                details: format!("expected [{}, 5], got {dims:?}", meta.n_points),
            });
        }
        let lidar = lidar_from_rows(&meta.lidar_file, flat)?;
        frames.push(Frame {
            timestamp: meta.timestamp,
            ego_pose: meta.ego_pose.clone(),
            cameras: manifest.rig.clone(),
            lidar,
            gt: all_gt.iter().filter(|g| g.frame == k).cloned().collect(),
        });
    }

    Ok(Scene {
        seed: manifest.seed,
        dt: manifest.dt,
        frames,
        statics: manifest.statics,
        feature_seed: manifest.feature_seed,
        feature_channels: manifest.feature_channels,
        grid: manifest.grid,
    })
}

#[cfg(test)]
mod tests {
    use super::super::generate_scene;
    use super::*;

    #[test]
    fn dataset_round_trip_is_field_identical() {
        let scene = generate_scene(5, 3, 2, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scene, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        // f64 payloads and shortest-round-trip JSON floats make this exact.
        assert_eq!(scene, back);
    }

    #[test]
    fn truncated_array_fails_checksum_with_no_partial_load() {
        let scene = generate_scene(5, 2, 1, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scene, dir.path()).unwrap();
        let victim = dir.path().join("frames/1/lidar.bin");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(SceneError::Checksum { .. })
        ));
    }

    #[test]
    fn manifest_version_bump_is_an_explicit_error() {
        let scene = generate_scene(5, 1, 1, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scene, dir.path()).unwrap();
        let manifest_path = dir.path().join("scene.json");
        let text = fs::read_to_string(&manifest_path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 2");
        fs::write(&manifest_path, text).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(SceneError::Version { found: 2, .. })
        ));
    }

    #[test]
    fn array_round_trip_preserves_all_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let cases = vec![
            (vec![2, 3], ArrayData::F64(vec![1.5, -2.25, 0.1, 4.0, 5.0, -6.5])),
            (vec![4], ArrayData::F32(vec![1.0, 0.5, -0.25, 3.0])),
            (vec![2, 2], ArrayData::I32(vec![-1, 7, 0, 42])),
        ];
        for (i, (dims, data)) in cases.into_iter().enumerate() {
            let path = dir.path().join(format!("a{i}.bin"));
            write_array(&path, &dims, &data).unwrap();
            let (rdims, rdata) = read_array(&path).unwrap();
            assert_eq!(rdims, dims);
            assert_eq!(rdata, data);
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"NOTMAGIC\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            read_array(&path),
            Err(SceneError::BadArray { .. })
        ));
    }
}
