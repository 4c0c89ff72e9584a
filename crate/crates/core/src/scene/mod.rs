//! Synthetic multi-camera driving scenes and their on-disk dataset format.
//!
//! A scene is a short sequence of frames captured by a surround camera rig on
//! a moving ego vehicle, with simulated LiDAR sweeps over a ground plane,
//! static obstacle boxes, and moving objects. Boxes, LiDAR points, and
//! velocities are stored in the ego frame of their own frame; ego poses map
//! ego coordinates to a shared global frame.

mod augment;
mod gen;
mod io;
mod raycast;

pub use augment::{augment_scene, AugmentParams};
pub(crate) use gen::derive_rng;
pub use gen::{generate_scene, generate_scene_with, GenParams};
pub use io::{read_array, read_dataset, sha256_hex, write_array, write_dataset, ArrayData};
pub use raycast::{HitTag, SceneGeometry};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, BevGridSpec, Box3, CameraModel, GeometryError, Pose};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checksum mismatch for {file}")]
    Checksum { file: String },
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed array file {file}: {details}")]
    BadArray { file: String, details: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scene generation failed: {0}")]
    Gen(String),
}

/// Object classes available to the generator and the detector head.
#[derive(Debug, Clone, Copy)]
pub struct ClassSpec {
    pub name: &'static str,
    /// Nominal (width, length, height) in meters.
    pub size: [f64; 3],
    /// Speed range in m/s.
    pub speed: (f64, f64),
}

pub const CLASSES: [ClassSpec; 3] = [
    ClassSpec { name: "car", size: [1.9, 4.2, 1.6], speed: (2.0, 4.0) },
    ClassSpec { name: "pedestrian", size: [0.7, 0.7, 1.8], speed: (0.5, 1.5) },
    ClassSpec { name: "cyclist", size: [0.7, 1.9, 1.5], speed: (1.5, 3.5) },
];

pub const N_CLASSES: usize = CLASSES.len();

/// Ground-truth box in the ego frame of its frame. `size` is
/// (width, length, height); velocity is the global velocity expressed in ego
/// axes (rotated, not translated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub frame: usize,
    pub track_id: u64,
    pub class_id: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 3],
}

impl GtBox {
    pub fn box3(&self) -> Box3 {
        Box3 {
            center: self.center,
            width: self.size[0],
            length: self.size[1],
            height: self.size[2],
            yaw: self.yaw,
        }
    }
}

/// Where a LiDAR point landed, used for feature synthesis and accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointTag {
    Ground,
    /// Index into [`Scene::statics`].
    Static(usize),
    /// Track id of the object the point lies on.
    Object(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    /// Ego-frame position.
    pub pos: [f64; 3],
    pub tag: PointTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub timestamp: f64,
    /// Global-from-ego transform.
    pub ego_pose: Pose,
    pub cameras: Vec<CameraModel>,
    pub lidar: Vec<LidarPoint>,
    pub gt: Vec<GtBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    /// Keyframe spacing in seconds.
    pub dt: f64,
    pub frames: Vec<Frame>,
    /// Static obstacle boxes in the global frame.
    pub statics: Vec<Box3>,
    /// Seed for the procedural feature provider.
    pub feature_seed: u64,
    pub feature_channels: usize,
    pub grid: BevGridSpec,
}

/// Yaw of a planar rotation (about +z). Debug-asserts planarity; every pose
/// produced by the generator and by BEV augmentation is planar.
pub fn planar_yaw(p: &Pose) -> f64 {
    let r = p.rotation();
    debug_assert!(
        (r[(2, 2)] - 1.0).abs() < 1e-9
            && r[(0, 2)].abs() < 1e-9
            && r[(1, 2)].abs() < 1e-9,
        "pose rotation is not planar"
    );
    r[(1, 0)].atan2(r[(0, 0)])
}

impl Frame {
    /// The box expressed in the global frame.
    pub fn gt_in_global(&self, b: &GtBox) -> GtBox {
        let c = self
            .ego_pose
            .apply(&Vector3::new(b.center[0], b.center[1], b.center[2]));
        let v = self
            .ego_pose
            .rotate(&Vector3::new(b.velocity[0], b.velocity[1], b.velocity[2]));
        let ego_yaw = planar_yaw(&self.ego_pose);
        GtBox {
            center: [c.x, c.y, c.z],
            yaw: wrap_angle(b.yaw + ego_yaw),
            velocity: [v.x, v.y, v.z],
            ..b.clone()
        }
    }
}

impl Scene {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_cameras(&self) -> usize {
        self.frames.first().map_or(0, |f| f.cameras.len())
    }
}
