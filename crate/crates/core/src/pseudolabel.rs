//! Image-feature pseudo-labels on the BEV grid.
//!
//! The offline stage that turns per-camera feature maps into a dense BEV
//! supervision target: LiDAR points are painted with bilinear-sampled image
//! features averaged over the cameras that actually observe them, the painted
//! clouds are accumulated across the sequence (static world in the global
//! frame, each object in its own box frame), placed back at a reference
//! frame, and averaged per BEV cell over a height slab. The valid mask marks
//! cells that received at least one point.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::featprov::{FeatError, FeatureMap, FeatureProvider, Scale};
use crate::geometry::{BevGridSpec, GeometryError};
use crate::grid::FeatureGrid;
use crate::scene::{read_array, write_array, ArrayData, Frame, Scene, SceneError, SceneGeometry};

#[derive(Debug, Error)]
pub enum PseudoError {
    #[error("no cameras / feature maps supplied")]
    NoCameras,
    #[error("feature map set does not match the frame: {0}")]
    MapSetMismatch(String),
    #[error("track {0} absent from every requested frame")]
    UnknownTrack(u64),
    #[error("painted cloud for frame {expected} is labeled {found}")]
    WrongCloudFrame { expected: usize, found: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Features(#[from] FeatError),
    #[error(transparent)]
    Dataset(#[from] SceneError),
}

/// Coordinate frame a painted cloud lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFrame {
    /// Ego frame of the given frame index.
    Ego(usize),
    Global,
    /// Box-local frame of the given track.
    Object(u64),
}

/// Where a painted point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Source {
    pub frame: usize,
    /// Track the point was attributed to; None for static/unsplit points.
    pub track: Option<u64>,
}

/// Points with per-point feature vectors.
#[derive(Debug, Clone)]
pub struct FeaturePointCloud {
    pub frame: CloudFrame,
    pub channels: usize,
    pub positions: Vec<[f64; 3]>,
    /// Row-major N x channels.
    pub features: Vec<f64>,
    pub sources: Vec<Source>,
}

impl FeaturePointCloud {
    pub fn empty(frame: CloudFrame, channels: usize) -> Self {
        FeaturePointCloud {
            frame,
            channels,
            positions: Vec::new(),
            features: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.positions[i])
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    fn push(&mut self, pos: [f64; 3], feature: &[f64], source: Source) {
        debug_assert_eq!(feature.len(), self.channels);
        self.positions.push(pos);
        self.features.extend_from_slice(feature);
        self.sources.push(source);
    }
}

/// Knobs of the pseudo-label stage. The ablation switches exist so their
/// effect on coverage can be measured; defaults reproduce the full method.
#[derive(Debug, Clone, Copy)]
pub struct PseudoLabelConfig {
    /// Pyramid level sampled during painting (finest by default).
    pub scale: Scale,
    /// Occlusion tolerance in meters for the camera-to-point depth test.
    pub visibility_tol: f64,
    /// Box inflation in meters for the static/dynamic split.
    pub inflate: f64,
    /// Ego-frame height slab averaged into the BEV grid.
    pub z_slab: (f64, f64),
    /// Renormalize each valid cell to unit norm after averaging. Averaging
    /// raw features instead is the literal formulation; renormalization
    /// keeps cosine targets well scaled and is the default here.
    pub renormalize: bool,
    /// Accumulate painted clouds across frames (off = reference frame only).
    pub accumulate: bool,
    /// Include per-object clouds (off = static world only).
    pub include_objects: bool,
    /// Use only frames at or before the reference frame.
    pub causal: bool,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            scale: Scale::Quarter,
            visibility_tol: 0.1,
            inflate: 0.1,
            z_slab: (-1.0, 3.0),
            renormalize: true,
            accumulate: true,
            include_objects: true,
            causal: false,
        }
    }
}

/// Paint ego-frame points with the mean feature of the cameras that observe
/// them, then renormalize to unit length. A camera observes a point when the
/// point projects inside its image, its bilinear sample lies inside the
/// scaled map's sample domain, and the depth test against the scene passes
/// within `visibility_tol`. Points no camera observes are dropped.
pub fn paint_points(
    scene: &Scene,
    frame_index: usize,
    maps: &[FeatureMap],
    positions: &[[f64; 3]],
    cfg: &PseudoLabelConfig,
) -> Result<FeaturePointCloud, PseudoError> {
    let frame = &scene.frames[frame_index];
    if maps.is_empty() || frame.cameras.is_empty() {
        return Err(PseudoError::NoCameras);
    }
    if maps.len() != frame.cameras.len() {
        return Err(PseudoError::MapSetMismatch(format!(
            "{} maps for {} cameras",
            maps.len(),
            frame.cameras.len()
        )));
    }
    let channels = maps[0].grid.channels();
    for (i, m) in maps.iter().enumerate() {
        if m.cam_index != i || m.scale != cfg.scale || m.grid.channels() != channels {
            return Err(PseudoError::MapSetMismatch(format!(
                "map {i} is cam {} scale 1/{} with {} channels",
                m.cam_index,
                m.scale.denominator(),
                m.grid.channels()
            )));
        }
    }

    let geom = SceneGeometry::for_frame(scene, frame_index);
    let centers: Vec<Vector3<f64>> = frame
        .cameras
        .iter()
        .map(|c| Ok(frame.ego_pose.apply(&c.optical_center()?)))
        .collect::<Result<_, GeometryError>>()?;

    let mut out = FeaturePointCloud::empty(CloudFrame::Ego(frame_index), channels);
    let mut sum = vec![0.0f64; channels];
    for pos in positions {
        let p_ego = Vector3::from(*pos);
        let p_global = frame.ego_pose.apply(&p_ego);
        sum.iter_mut().for_each(|s| *s = 0.0);
        let mut n_views = 0usize;
        for (ci, cam) in frame.cameras.iter().enumerate() {
            let Some(proj) = cam.project(&p_ego) else {
                continue;
            };
            if !geom.point_visible(&centers[ci], &p_global, cfg.visibility_tol) {
                continue;
            }
            let (f, oob) = maps[ci].sample_full_res(proj.u, proj.v);
            if oob {
                continue; // half-pixel border outside the scaled sample domain
            }
            for (s, x) in sum.iter_mut().zip(&f) {
                *s += x;
            }
            n_views += 1;
        }
        if n_views == 0 {
            continue;
        }
        for s in sum.iter_mut() {
            *s /= n_views as f64;
        }
        let norm: f64 = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue; // views cancelled out; nothing meaningful to keep
        }
        for s in sum.iter_mut() {
            *s /= norm;
        }
        out.push(
            *pos,
            &sum,
            Source {
                frame: frame_index,
                track: None,
            },
        );
    }
    Ok(out)
}

fn expect_ego_cloud(painted: &FeaturePointCloud, frame: usize) -> Result<(), PseudoError> {
    if painted.frame != CloudFrame::Ego(frame) {
        return Err(PseudoError::WrongCloudFrame {
            expected: frame,
            found: format!("{:?}", painted.frame),
        });
    }
    Ok(())
}

/// Concatenate painted points that lie outside every (inflated) GT box of
/// their own frame, transformed into the global frame. `painted[k]` must be
/// frame k's painted cloud; `frames_used` selects which frames contribute.
pub fn accumulate_static(
    scene: &Scene,
    painted: &[FeaturePointCloud],
    frames_used: &[usize],
    cfg: &PseudoLabelConfig,
) -> Result<FeaturePointCloud, PseudoError> {
    let channels = painted.first().map_or(0, |c| c.channels);
    let mut out = FeaturePointCloud::empty(CloudFrame::Global, channels);
    for &k in frames_used {
        let frame = &scene.frames[k];
        let cloud = &painted[k];
        expect_ego_cloud(cloud, k)?;
        let boxes: Vec<_> = frame.gt.iter().map(|g| g.box3()).collect();
        for i in 0..cloud.len() {
            let p = cloud.position(i);
            if boxes.iter().any(|b| b.contains(&p, cfg.inflate)) {
                continue;
            }
            let g = frame.ego_pose.apply(&p);
            out.push([g.x, g.y, g.z], cloud.feature(i), cloud.sources[i]);
        }
    }
    Ok(out)
}

/// Concatenate painted points inside the track's GT box, per contributing
/// frame, expressed in box-local coordinates (center origin, yaw aligned).
/// Frames where the track is absent are skipped; if it appears in none of
/// them the track is unknown.
pub fn accumulate_object(
    scene: &Scene,
    painted: &[FeaturePointCloud],
    frames_used: &[usize],
    track: u64,
) -> Result<FeaturePointCloud, PseudoError> {
    let channels = painted.first().map_or(0, |c| c.channels);
    let mut out = FeaturePointCloud::empty(CloudFrame::Object(track), channels);
    let mut seen = false;
    for &k in frames_used {
        let frame = &scene.frames[k];
        let cloud = &painted[k];
        expect_ego_cloud(cloud, k)?;
        let Some(gt) = frame.gt.iter().find(|g| g.track_id == track) else {
            continue;
        };
        seen = true;
        let b = gt.box3();
        for i in 0..cloud.len() {
            let p = cloud.position(i);
            if !b.contains(&p, 0.0) {
                continue;
            }
            let l = b.local(&p);
            out.push(
                [l.x, l.y, l.z],
                cloud.feature(i),
                Source {
                    frame: k,
                    track: Some(track),
                },
            );
        }
    }
    if !seen {
        return Err(PseudoError::UnknownTrack(track));
    }
    Ok(out)
}

/// BEV feature target plus the set of cells that actually received points.
/// Grid rows index x cells, columns y cells, matching the BEV grid's flat
/// index order.
#[derive(Debug, Clone)]
pub struct PseudoLabelGrid {
    grid: FeatureGrid,
}

impl PseudoLabelGrid {
    /// Wrap a feature grid as a supervision target. The grid must carry a
    /// validity mask marking the supervised cells.
    pub fn from_grid(grid: FeatureGrid) -> Result<Self, PseudoError> {
        if grid.mask().is_none() {
            return Err(PseudoError::MapSetMismatch(
                "pseudo-label grid has no validity mask".into(),
            ));
        }
        Ok(PseudoLabelGrid { grid })
    }

    pub fn grid(&self) -> &FeatureGrid {
        &self.grid
    }

    /// The valid mask over flat cell indices.
    pub fn valid(&self) -> &[bool] {
        self.grid.mask().expect("pseudo-label grids carry a mask")
    }

    pub fn n_valid(&self) -> usize {
        self.valid().iter().filter(|v| **v).count()
    }

    /// Flat indices of valid cells, ascending.
    pub fn valid_indices(&self) -> Vec<usize> {
        self.valid()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.then_some(i))
            .collect()
    }
}

/// Bin features into BEV cells at the reference frame and average.
///
/// The static cloud arrives in global coordinates and is mapped into the
/// reference ego frame; each object cloud is placed back at its track's GT
/// pose in the reference frame (clouds whose track is absent there are
/// skipped). Points outside the height slab or the grid are ignored. Cells
/// hold the mean feature of their points, renormalized when configured;
/// cells with no points hold exactly zero.
pub fn rasterize_bev(
    static_cloud: &FeaturePointCloud,
    object_clouds: &[FeaturePointCloud],
    ref_frame: &Frame,
    grid: &BevGridSpec,
    cfg: &PseudoLabelConfig,
) -> Result<PseudoLabelGrid, PseudoError> {
    let channels = if static_cloud.channels > 0 {
        static_cloud.channels
    } else {
        object_clouds.first().map_or(0, |c| c.channels)
    };
    let cells = grid.n_cells();
    let mut sum = vec![0.0f64; cells * channels];
    let mut count = vec![0usize; cells];
    let ego_from_global = ref_frame.ego_pose.invert();

    let mut bin = |p_ego: Vector3<f64>, feature: &[f64]| {
        if p_ego.z < cfg.z_slab.0 || p_ego.z > cfg.z_slab.1 {
            return;
        }
        let Some((ix, iy)) = grid.cell_of(p_ego.x, p_ego.y) else {
            return;
        };
        let idx = grid.flat_index(ix, iy);
        count[idx] += 1;
        for (s, x) in sum[idx * channels..(idx + 1) * channels]
            .iter_mut()
            .zip(feature)
        {
            *s += x;
        }
    };

    for i in 0..static_cloud.len() {
        debug_assert_eq!(static_cloud.frame, CloudFrame::Global);
        bin(
            ego_from_global.apply(&static_cloud.position(i)),
            static_cloud.feature(i),
        );
    }
    for cloud in object_clouds {
        let CloudFrame::Object(track) = cloud.frame else {
            return Err(PseudoError::WrongCloudFrame {
                expected: usize::MAX,
                found: format!("{:?} (expected an object cloud)", cloud.frame),
            });
        };
        let Some(gt) = ref_frame.gt.iter().find(|g| g.track_id == track) else {
            continue;
        };
        let b = gt.box3();
        for i in 0..cloud.len() {
            bin(b.from_local(&cloud.position(i)), cloud.feature(i));
        }
    }

    let mut data = vec![0.0f64; cells * channels];
    let mut valid = vec![false; cells];
    for idx in 0..cells {
        if count[idx] == 0 {
            continue;
        }
        valid[idx] = true;
        let cell = &mut data[idx * channels..(idx + 1) * channels];
        for (d, s) in cell.iter_mut().zip(&sum[idx * channels..]) {
            *d = s / count[idx] as f64;
        }
        if cfg.renormalize {
            let norm: f64 = cell.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for d in cell.iter_mut() {
                    *d /= norm;
                }
            }
        }
    }

    let fg = FeatureGrid::new(grid.nx, grid.ny, channels, data)
        .expect("dims match data")
        .with_mask(valid)
        .expect("mask len matches");
    Ok(PseudoLabelGrid { grid: fg })
}

/// Full offline pipeline: paint every frame once, then build one pseudo-label
/// grid per reference frame according to the accumulation switches.
pub fn build_pseudo_labels(
    scene: &Scene,
    provider: &dyn FeatureProvider,
    cfg: &PseudoLabelConfig,
) -> Result<Vec<PseudoLabelGrid>, PseudoError> {
    let n = scene.n_frames();
    let mut painted = Vec::with_capacity(n);
    for k in 0..n {
        let maps: Vec<FeatureMap> = (0..scene.n_cameras())
            .map(|i| provider.compute(scene, k, i, cfg.scale))
            .collect::<Result<_, FeatError>>()?;
        let positions: Vec<[f64; 3]> = scene.frames[k].lidar.iter().map(|p| p.pos).collect();
        painted.push(paint_points(scene, k, &maps, &positions, cfg)?);
    }

    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let frames_used: Vec<usize> = if !cfg.accumulate {
            vec![t]
        } else if cfg.causal {
            (0..=t).collect()
        } else {
            (0..n).collect()
        };
        let static_cloud = accumulate_static(scene, &painted, &frames_used, cfg)?;
        let mut object_clouds = Vec::new();
        if cfg.include_objects {
            for g in &scene.frames[t].gt {
                object_clouds.push(accumulate_object(scene, &painted, &frames_used, g.track_id)?);
            }
        }
        out.push(rasterize_bev(
            &static_cloud,
            &object_clouds,
            &scene.frames[t],
            &scene.grid,
            cfg,
        )?);
    }
    Ok(out)
}

fn label_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("frame{frame:04}.bin"))
}

fn mask_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("frame{frame:04}_mask.bin"))
}

/// Write one frame's pseudo-label grid and mask in the dataset array format.
pub fn write_pseudo_label(
    dir: &Path,
    frame: usize,
    label: &PseudoLabelGrid,
) -> Result<(), PseudoError> {
    let g = label.grid();
    write_array(
        &label_path(dir, frame),
        &[g.height(), g.width(), g.channels()],
        &ArrayData::F64(g.data().to_vec()),
    )?;
    write_array(
        &mask_path(dir, frame),
        &[g.height(), g.width()],
        &ArrayData::I32(label.valid().iter().map(|v| *v as i32).collect()),
    )?;
    Ok(())
}

pub fn read_pseudo_label(dir: &Path, frame: usize) -> Result<PseudoLabelGrid, PseudoError> {
    let (gdims, gdata) = read_array(&label_path(dir, frame))?;
    let (mdims, mdata) = read_array(&mask_path(dir, frame))?;
    let bad = |d: &str| {
        PseudoError::Dataset(SceneError::BadArray {
            file: label_path(dir, frame).display().to_string(),
            details: d.to_string(),
        })
    };
    let (ArrayData::F64(values), ArrayData::I32(mask)) = (gdata, mdata) else {
        return Err(bad("expected f64 grid with i32 mask"));
    };
    if gdims.len() != 3 || mdims != gdims[..2] {
        return Err(bad("grid must be [nx, ny, c] with matching [nx, ny] mask"));
    }
    let grid = FeatureGrid::new(gdims[0], gdims[1], gdims[2], values)
        .map_err(|e| bad(&e.to_string()))?
        .with_mask(mask.into_iter().map(|v| v != 0).collect())
        .map_err(|e| bad(&e.to_string()))?;
    Ok(PseudoLabelGrid { grid })
}
