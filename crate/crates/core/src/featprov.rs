//! Per-camera dense feature maps used as the distillation source.
//!
//! [`ProceduralProvider`] synthesizes features directly from scene geometry:
//! each pixel's feature is built from an orthonormal embedding of the surface
//! class its ray hits, a smooth positional encoding of the hit point, and a
//! small per-pixel noise term. The construction guarantees, by orthogonality
//! of the parts, that two views of the same surface point agree (cosine
//! > 0.99) while different classes stay well separated (cosine < 0.5).
//!
//! [`FileProvider`] reads precomputed maps from disk in the dataset array
//! format, so externally produced features can be swapped in without touching
//! the rest of the pipeline.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use thiserror::Error;

use crate::geometry::{scaled_extent, CameraModel, GeometryError, Pose};
use crate::grid::FeatureGrid;
use crate::scene::{
    derive_rng, read_array, write_array, ArrayData, Frame, HitTag, Scene, SceneError,
    SceneGeometry, N_CLASSES,
};

/// Feature-map pyramid levels, as fractions of full image resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Quarter,
    Eighth,
    Sixteenth,
    ThirtySecond,
}

impl Scale {
    pub const ALL: [Scale; 4] = [
        Scale::Quarter,
        Scale::Eighth,
        Scale::Sixteenth,
        Scale::ThirtySecond,
    ];

    pub fn denominator(self) -> usize {
        match self {
            Scale::Quarter => 4,
            Scale::Eighth => 8,
            Scale::Sixteenth => 16,
            Scale::ThirtySecond => 32,
        }
    }

    pub fn factor(self) -> f64 {
        1.0 / self.denominator() as f64
    }
}

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("camera index {index} out of range ({count} cameras)")]
    UnknownCamera { index: usize, count: usize },
    #[error("frame index {index} out of range ({count} frames)")]
    UnknownFrame { index: usize, count: usize },
    #[error("provider configured for {provider} channels, scene has {scene}")]
    ChannelMismatch { provider: usize, scene: usize },
    #[error("bad provider config: {0}")]
    BadConfig(String),
    #[error("feature file {path}: expected shape {expected:?}, found {found:?}")]
    BadShape {
        path: PathBuf,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Dataset(#[from] SceneError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One camera's feature map at one pyramid level. Rows index image v, columns
/// image u; dimensions are ceil of the full resolution times the scale.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub cam_index: usize,
    pub scale: Scale,
    pub grid: FeatureGrid,
}

impl FeatureMap {
    /// Bilinear sample at full-resolution pixel coordinates. Converts to this
    /// map's coordinate frame (us = (u + 0.5) * s - 0.5) and samples; the
    /// flag reports out-of-bounds clamping.
    pub fn sample_full_res(&self, u: f64, v: f64) -> (Vec<f64>, bool) {
        let s = self.scale.factor();
        let us = (u + 0.5) * s - 0.5;
        let vs = (v + 0.5) * s - 0.5;
        self.grid.bilinear(us, vs)
    }
}

/// Source of per-camera feature maps.
pub trait FeatureProvider {
    /// Channel count of every map this provider produces.
    fn channels(&self) -> usize;

    fn compute(
        &self,
        scene: &Scene,
        frame_index: usize,
        cam_index: usize,
        scale: Scale,
    ) -> Result<FeatureMap, FeatError>;
}

/// Mixing weights of the three feature components, applied before the final
/// renormalization. Class and positional parts live in orthogonal subspaces,
/// so the pre-norm magnitude is sqrt(class^2 + posenc^2) +- noise.
#[derive(Debug, Clone, Copy)]
pub struct ProviderConfig {
    pub class_weight: f64,
    pub posenc_weight: f64,
    pub noise_weight: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            class_weight: 0.85,
            posenc_weight: 0.15,
            noise_weight: 0.002,
        }
    }
}

/// Surface classes with distinct embeddings: ground, static obstacle, one per
/// object class, and sky for rays that miss everything.
const N_EMBED: usize = 3 + N_CLASSES;
const EMBED_GROUND: usize = 0;
const EMBED_STATIC: usize = 1;
const EMBED_OBJECT0: usize = 2;
const EMBED_SKY: usize = 2 + N_CLASSES;

/// Deterministic geometry-driven feature synthesis. Stateless: everything is
/// derived from the scene's feature seed on each call.
#[derive(Debug, Clone)]
pub struct ProceduralProvider {
    channels: usize,
    config: ProviderConfig,
}

impl ProceduralProvider {
    pub fn new(channels: usize, config: ProviderConfig) -> Result<Self, FeatError> {
        // N_EMBED class columns plus at least one sin/cos pair.
        if channels < N_EMBED + 2 {
            return Err(FeatError::BadConfig(format!(
                "need at least {} channels, got {channels}",
                N_EMBED + 2
            )));
        }
        if !(config.class_weight > 0.0 && config.posenc_weight >= 0.0 && config.noise_weight >= 0.0)
        {
            return Err(FeatError::BadConfig(
                "weights must be positive (class) and non-negative".into(),
            ));
        }
        if config.noise_weight >= config.class_weight {
            return Err(FeatError::BadConfig(
                "noise weight must stay below class weight".into(),
            ));
        }
        Ok(ProceduralProvider { channels, config })
    }

    pub fn for_scene(scene: &Scene) -> Result<Self, FeatError> {
        ProceduralProvider::new(scene.feature_channels, ProviderConfig::default())
    }
}

/// Random orthonormal vectors (rows) spanning R^c, via Gram-Schmidt on
/// uniform draws. First N_EMBED rows are class embeddings; the rest carry the
/// positional encoding, so the two parts are exactly orthogonal.
fn orthonormal_basis(seed: u64, c: usize) -> Vec<Vec<f64>> {
    let mut rng = derive_rng(seed, &[10]);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(c);
    while basis.len() < c {
        let mut v: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue; // degenerate draw, try again
        }
        for x in &mut v {
            *x /= n;
        }
        basis.push(v);
    }
    basis
}

/// Positional encoding bands: unit direction, frequency (rad/m), phase.
struct Band {
    dir: Vector3<f64>,
    freq: f64,
    phase: f64,
}

fn posenc_bands(seed: u64, n: usize) -> Vec<Band> {
    let mut rng = derive_rng(seed, &[11]);
    (0..n)
        .map(|i| {
            let dir = loop {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0f64),
                );
                let n = v.norm();
                if n > 1e-3 {
                    break v / n;
                }
            };
            // Low frequencies keep nearby surface points similar; the spread
            // gives distinct positions distinct encodings.
            let freq = if n == 1 {
                0.35
            } else {
                0.1 + 0.5 * i as f64 / (n - 1) as f64
            };
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            Band { dir, freq, phase }
        })
        .collect()
}

/// Ray through the center of pixel (row, col) of a scaled feature map, in
/// global coordinates. Returns (origin, dir) with origin at the camera center
/// and |dir| chosen so that origin + t * dir has camera depth t.
pub fn pixel_ray(
    cam: &CameraModel,
    ego_pose: &Pose,
    row: usize,
    col: usize,
    scale: Scale,
) -> Result<(Vector3<f64>, Vector3<f64>), GeometryError> {
    let s = scale.factor();
    let u = (col as f64 + 0.5) / s - 0.5;
    let v = (row as f64 + 0.5) / s - 0.5;
    // Unprojection is linear in depth, so two depths recover the full ray.
    let p1 = ego_pose.apply(&cam.unproject(u, v, 1.0)?);
    let p2 = ego_pose.apply(&cam.unproject(u, v, 2.0)?);
    Ok((2.0 * p1 - p2, p2 - p1))
}

impl FeatureProvider for ProceduralProvider {
    fn channels(&self) -> usize {
        self.channels
    }

    fn compute(
        &self,
        scene: &Scene,
        frame_index: usize,
        cam_index: usize,
        scale: Scale,
    ) -> Result<FeatureMap, FeatError> {
        if self.channels != scene.feature_channels {
            return Err(FeatError::ChannelMismatch {
                provider: self.channels,
                scene: scene.feature_channels,
            });
        }
        let frame = scene
            .frames
            .get(frame_index)
            .ok_or(FeatError::UnknownFrame {
                index: frame_index,
                count: scene.n_frames(),
            })?;
        let cam = frame.cameras.get(cam_index).ok_or(FeatError::UnknownCamera {
            index: cam_index,
            count: frame.cameras.len(),
        })?;

        let c = self.channels;
        let basis = orthonormal_basis(scene.feature_seed, c);
        let n_bands = (c - N_EMBED) / 2;
        let bands = posenc_bands(scene.feature_seed, n_bands);
        let geom = SceneGeometry::for_frame(scene, frame_index);
        // Global-frame box per track, for object-local coordinates.
        let obj_boxes: Vec<(u64, usize, crate::geometry::Box3)> = frame
            .gt
            .iter()
            .map(|g| (g.track_id, g.class_id, frame.gt_in_global(g).box3()))
            .collect();

        let h = scaled_extent(cam.height, scale.factor());
        let w = scaled_extent(cam.width, scale.factor());
        let mut noise_rng = derive_rng(
            scene.feature_seed,
            &[12, frame_index as u64, cam_index as u64, scale.denominator() as u64],
        );
        let mut data = vec![0.0f64; h * w * c];
        let band_amp = if n_bands > 0 {
            self.config.posenc_weight / (n_bands as f64).sqrt()
        } else {
            0.0
        };

        for row in 0..h {
            for col in 0..w {
                let (origin, dir) = pixel_ray(cam, &frame.ego_pose, row, col, scale)?;
                let (embed, pos) = match geom.first_hit(&origin, &dir) {
                    Some((t, tag)) => {
                        let hit = origin + t * dir;
                        match tag {
                            HitTag::Ground => (EMBED_GROUND, hit),
                            HitTag::Static(_) => (EMBED_STATIC, hit),
                            HitTag::Object(id) => {
                                let (_, class_id, b) = obj_boxes
                                    .iter()
                                    .find(|(tid, _, _)| *tid == id)
                                    .expect("raycast object comes from this frame's gt");
                                debug_assert!(*class_id < N_CLASSES);
                                // Box-local coordinates make the feature ride
                                // along with the moving object.
                                (EMBED_OBJECT0 + class_id, b.local(&hit))
                            }
                        }
                    }
                    // Sky: encode the view direction at a nominal range so
                    // the background still varies smoothly.
                    None => (EMBED_SKY, dir.normalize() * 10.0),
                };

                let out = &mut data[(row * w + col) * c..(row * w + col + 1) * c];
                for (o, b) in out.iter_mut().zip(&basis[embed]) {
                    *o = self.config.class_weight * b;
                }
                for (j, band) in bands.iter().enumerate() {
                    let theta = band.freq * band.dir.dot(&pos) + band.phase;
                    let (sin, cos) = theta.sin_cos();
                    let bs = &basis[N_EMBED + 2 * j];
                    let bc = &basis[N_EMBED + 2 * j + 1];
                    for k in 0..c {
                        out[k] += band_amp * (sin * bs[k] + cos * bc[k]);
                    }
                }
                if self.config.noise_weight > 0.0 {
                    let noise = unit_noise(&mut noise_rng, c);
                    for (o, n) in out.iter_mut().zip(&noise) {
                        *o += self.config.noise_weight * n;
                    }
                }
                let norm: f64 = out.iter().map(|x| x * x).sum::<f64>().sqrt();
                debug_assert!(norm > 1e-9);
                for o in out.iter_mut() {
                    *o /= norm;
                }
            }
        }

        Ok(FeatureMap {
            cam_index,
            scale,
            grid: FeatureGrid::new(h, w, c, data).expect("dims match data"),
        })
    }
}

fn unit_noise(rng: &mut impl Rng, c: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Reads precomputed feature maps from `<dir>/frame{k}_cam{i}_scale{d}.bin`
/// in the dataset array format, shape [Hs, Ws, C].
#[derive(Debug, Clone)]
pub struct FileProvider {
    dir: PathBuf,
    channels: usize,
}

impl FileProvider {
    pub fn new(dir: impl Into<PathBuf>, channels: usize) -> Self {
        FileProvider {
            dir: dir.into(),
            channels,
        }
    }

    pub fn map_path(dir: &Path, frame: usize, cam: usize, scale: Scale) -> PathBuf {
        dir.join(format!(
            "frame{frame:04}_cam{cam}_scale{}.bin",
            scale.denominator()
        ))
    }

    /// Writes a map where this provider will look for it.
    pub fn write_map(dir: &Path, frame: usize, map: &FeatureMap) -> Result<(), SceneError> {
        let g = &map.grid;
        write_array(
            &FileProvider::map_path(dir, frame, map.cam_index, map.scale),
            &[g.height(), g.width(), g.channels()],
            &ArrayData::F64(g.data().to_vec()),
        )
    }
}

impl FeatureProvider for FileProvider {
    fn channels(&self) -> usize {
        self.channels
    }

    fn compute(
        &self,
        scene: &Scene,
        frame_index: usize,
        cam_index: usize,
        scale: Scale,
    ) -> Result<FeatureMap, FeatError> {
        let frame: &Frame = scene
            .frames
            .get(frame_index)
            .ok_or(FeatError::UnknownFrame {
                index: frame_index,
                count: scene.n_frames(),
            })?;
        let cam = frame.cameras.get(cam_index).ok_or(FeatError::UnknownCamera {
            index: cam_index,
            count: frame.cameras.len(),
        })?;
        let path = FileProvider::map_path(&self.dir, frame_index, cam_index, scale);
        let (dims, data) = read_array(&path)?;
        let expected = vec![
            scaled_extent(cam.height, scale.factor()),
            scaled_extent(cam.width, scale.factor()),
            self.channels,
        ];
        let values = match data {
            ArrayData::F64(v) if dims == expected => v,
            _ => {
                return Err(FeatError::BadShape {
                    path,
                    expected,
                    found: dims,
                })
            }
        };
        Ok(FeatureMap {
            cam_index,
            scale,
            grid: FeatureGrid::new(expected[0], expected[1], expected[2], values)
                .expect("shape checked"),
        })
    }
}
