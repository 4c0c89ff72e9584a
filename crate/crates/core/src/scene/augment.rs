//! Sequence-level BEV augmentation.
//!
//! One similarity transform `A = s * M` (planar rotation about +z, optional
//! y-axis reflection, uniform scale) is applied to the whole sequence: LiDAR
//! points, boxes, velocities, and static obstacles are mapped through `A`,
//! ego poses are conjugated (`A T A^-1`, which stays rigid for similarity
//! transforms), and each camera gets `A^-1` folded into its pre-transform so
//! projections of augmented geometry reproduce the original pixels exactly.
//! An optional image-level horizontal flip mirrors the u axis instead.

use nalgebra::{Matrix3, Vector3};

use super::{Scene, SceneError};
use crate::geometry::Box3;

#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    /// Rotation about +z (radians).
    pub rot: f64,
    /// Uniform scale factor (> 0).
    pub scale: f64,
    /// Reflect across the x-z plane (y -> -y).
    pub flip_y: bool,
    /// Mirror images horizontally (u -> W-1-u).
    pub flip_image: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams { rot: 0.0, scale: 1.0, flip_y: false, flip_image: false }
    }
}

impl AugmentParams {
    pub fn matrix(&self) -> Matrix3<f64> {
        let (s, c) = self.rot.sin_cos();
        let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let flip = if self.flip_y {
            Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0))
        } else {
            Matrix3::identity()
        };
        rot * flip * self.scale
    }
}

fn transform_box(b: &Box3, a: &Matrix3<f64>, scale: f64) -> Box3 {
    let c = a * Vector3::new(b.center[0], b.center[1], b.center[2]);
    // Yaw maps through the transformed heading direction; reflections flip
    // the heading's sense but |local y| containment keeps the box valid.
    let (s, cy) = b.yaw.sin_cos();
    let h = a * Vector3::new(cy, s, 0.0);
    Box3 {
        center: [c.x, c.y, c.z],
        width: b.width * scale,
        length: b.length * scale,
        height: b.height * scale,
        yaw: h.y.atan2(h.x),
    }
}

/// Applies one augmentation to a whole scene. Fails only if the transform is
/// degenerate (zero scale).
pub fn augment_scene(scene: &Scene, p: &AugmentParams) -> Result<Scene, SceneError> {
    if p.scale <= 0.0 || p.scale.is_nan() {
        return Err(SceneError::Gen(format!(
            "augmentation scale must be positive, got {}",
            p.scale
        )));
    }
    let a = p.matrix();
    let a_inv = a.try_inverse().expect("similarity transforms are invertible");

    let mut out = scene.clone();
    out.statics = scene
        .statics
        .iter()
        .map(|b| transform_box(b, &a, p.scale))
        .collect();

    for f in &mut out.frames {
        f.ego_pose = f.ego_pose.conjugate_by(&a)?;
        for cam in &mut f.cameras {
            *cam = cam.with_pre_transform(&a_inv);
            if p.flip_image {
                *cam = cam.with_flip_u(!cam.flip_u);
            }
        }
        for pt in &mut f.lidar {
            let q = a * Vector3::new(pt.pos[0], pt.pos[1], pt.pos[2]);
            pt.pos = [q.x, q.y, q.z];
        }
        for g in &mut f.gt {
            let b = transform_box(&g.box3(), &a, p.scale);
            g.center = b.center;
            g.size = [b.width, b.length, b.height];
            g.yaw = b.yaw;
            let v = a * Vector3::new(g.velocity[0], g.velocity[1], g.velocity[2]);
            g.velocity = [v.x, v.y, v.z];
        }
    }
    Ok(out)
}
