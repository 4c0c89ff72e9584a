//! Cameras, rigid poses, BEV grid indexing, and oriented boxes.
//!
//! Frame conventions, used everywhere downstream: the ego frame has x
//! forward, y left, z up; yaw is the rotation of a box's length axis about
//! +z measured from +x; the BEV grid covers a square centered on the ego
//! origin with row index along x and column index along y. Pixel coordinates
//! are continuous with integer values at pixel centers, so the valid image
//! domain is `[0, W-1] x [0, H-1]`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::PinholeParams;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (max deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("rotation is not right-handed (det {0:.6})")]
    NotRightHanded(f64),
    #[error("invalid camera: {0}")]
    BadCamera(String),
    #[error("invalid grid spec: {0}")]
    BadGridSpec(String),
    #[error("domain error in {op}: {details}")]
    Domain { op: &'static str, details: String },
}

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rigid transform (rotation then translation): `apply(p) = R p + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    rot: Matrix3<f64>,
    trans: Vector3<f64>,
}

/// Serialized form: row-major rotation entries plus translation.
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let r = p.rot;
        PoseRepr {
            rotation: [
                r[(0, 0)], r[(0, 1)], r[(0, 2)],
                r[(1, 0)], r[(1, 1)], r[(1, 2)],
                r[(2, 0)], r[(2, 1)], r[(2, 2)],
            ],
            translation: [p.trans.x, p.trans.y, p.trans.z],
        }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = GeometryError;
    fn try_from(r: PoseRepr) -> Result<Self, Self::Error> {
        Pose::new(
            Matrix3::from_row_slice(&r.rotation),
            Vector3::from_column_slice(&r.translation),
        )
    }
}

impl Pose {
    /// Validates orthonormality (RᵀR = I within 1e-9) and right-handedness.
    pub fn new(rot: Matrix3<f64>, trans: Vector3<f64>) -> Result<Self, GeometryError> {
        let dev = (rot.transpose() * rot - Matrix3::identity()).abs().max();
        if dev > ORTHONORMAL_TOL {
            return Err(GeometryError::NotOrthonormal(dev));
        }
        let det = rot.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::NotRightHanded(det));
        }
        Ok(Pose { rot, trans })
    }

    pub fn identity() -> Self {
        Pose { rot: Matrix3::identity(), trans: Vector3::zeros() }
    }

    /// Planar pose: rotation by `yaw` about +z, then translation.
    pub fn from_yaw(yaw: f64, trans: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Pose { rot, trans }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rot
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.trans
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot * p + self.trans
    }

    /// Rotates a direction (no translation), e.g. velocities.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rot * v
    }

    /// `a.compose(&b)` applies `b` first: `(a∘b)(p) = a(b(p))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rot: self.rot * other.rot,
            trans: self.rot * other.trans + self.trans,
        }
    }

    pub fn invert(&self) -> Pose {
        let rt = self.rot.transpose();
        Pose { rot: rt, trans: -(rt * self.trans) }
    }

    /// Conjugates this pose by an invertible linear map: `A ∘ self ∘ A⁻¹`.
    /// For `A = s·M` with `M` orthogonal (including reflections) the result
    /// is again rigid, which is what keeps augmented ego-motion chains valid.
    pub fn conjugate_by(&self, a: &Matrix3<f64>) -> Result<Pose, GeometryError> {
        let a_inv = a.try_inverse().ok_or(GeometryError::Domain {
            op: "conjugate_by",
            details: "transform is singular".into(),
        })?;
        Pose::new(a * self.rot * a_inv, a * self.trans)
    }
}

/// Continuous pixel position and camera-frame depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Depth below which a point counts as behind the camera.
pub const EPS_DEPTH: f64 = 1e-6;

/// Pinhole camera with camera-from-ego extrinsics.
///
/// `pre` is an optional invertible linear map applied to ego-frame points
/// before the extrinsics; scene augmentation stores the inverse scene
/// transform here. `flip_u` mirrors the image horizontally (u -> W-1-u).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub cam_from_ego: Pose,
    #[serde(default)]
    pub pre: Option<[f64; 9]>,
    #[serde(default)]
    pub flip_u: bool,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        cam_from_ego: Pose,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::BadCamera(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::BadCamera(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            cam_from_ego,
            pre: None,
            flip_u: false,
        })
    }

    fn pre_matrix(&self) -> Option<Matrix3<f64>> {
        self.pre.map(|m| Matrix3::from_row_slice(&m))
    }

    /// Returns a copy whose `pre` map is `m` composed after the existing one
    /// (new points are multiplied by `m` first).
    pub fn with_pre_transform(&self, m: &Matrix3<f64>) -> CameraModel {
        let combined = match self.pre_matrix() {
            None => *m,
            Some(old) => old * m,
        };
        let mut out = self.clone();
        out.pre = Some([
            combined[(0, 0)], combined[(0, 1)], combined[(0, 2)],
            combined[(1, 0)], combined[(1, 1)], combined[(1, 2)],
            combined[(2, 0)], combined[(2, 1)], combined[(2, 2)],
        ]);
        out
    }

    pub fn with_flip_u(&self, flip: bool) -> CameraModel {
        let mut out = self.clone();
        out.flip_u = flip;
        out
    }

    /// Camera-frame coordinates of an ego-frame point (pre map included).
    pub fn to_camera_frame(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let q = match self.pre_matrix() {
            None => *p,
            Some(m) => m * p,
        };
        self.cam_from_ego.apply(&q)
    }

    /// Projects an ego-frame point; `None` means out of view (behind the
    /// camera or outside the image domain).
    pub fn project(&self, p: &Vector3<f64>) -> Option<Projection> {
        let pc = self.to_camera_frame(p);
        if pc.z <= EPS_DEPTH {
            return None;
        }
        let mut u = self.fx * pc.x / pc.z + self.cx;
        if self.flip_u {
            u = (self.width - 1) as f64 - u;
        }
        let v = self.fy * pc.y / pc.z + self.cy;
        let in_bounds = (0.0..=(self.width - 1) as f64).contains(&u)
            && (0.0..=(self.height - 1) as f64).contains(&v);
        if in_bounds {
            Some(Projection { u, v, depth: pc.z })
        } else {
            None
        }
    }

    /// Inverse of [`CameraModel::project`] for in-frustum points.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if depth <= 0.0 {
            return Err(GeometryError::Domain {
                op: "unproject",
                details: format!("depth must be positive, got {depth}"),
            });
        }
        let u_cam = if self.flip_u { (self.width - 1) as f64 - u } else { u };
        let ray = Vector3::new(
            (u_cam - self.cx) / self.fx,
            (v - self.cy) / self.fy,
            1.0,
        ) * depth;
        let q = self.cam_from_ego.invert().apply(&ray);
        match self.pre_matrix() {
            None => Ok(q),
            Some(m) => {
                let inv = m.try_inverse().ok_or(GeometryError::Domain {
                    op: "unproject",
                    details: "pre transform is singular".into(),
                })?;
                Ok(inv * q)
            }
        }
    }

    /// Parameters for the differentiable projection op, at an optional
    /// feature-map scale (intrinsics shrink with the image).
    /// Camera center in ego coordinates (the point all rays pass through).
    /// Derived from two unprojections so it stays correct under any
    /// pre-transform and image flip.
    pub fn optical_center(&self) -> Result<Vector3<f64>, GeometryError> {
        let p1 = self.unproject(self.cx, self.cy, 1.0)?;
        let p2 = self.unproject(self.cx, self.cy, 2.0)?;
        Ok(2.0 * p1 - p2)
    }

    pub fn pinhole_params(&self, scale: f64) -> PinholeParams {
        // Pixel centers at scale s satisfy u_s = (u + 0.5) * s - 0.5.
        let r = self.cam_from_ego.rotation();
        let t = self.cam_from_ego.translation();
        PinholeParams {
            fx: self.fx * scale,
            fy: self.fy * scale,
            cx: (self.cx + 0.5) * scale - 0.5,
            cy: (self.cy + 0.5) * scale - 0.5,
            width: scaled_extent(self.width, scale),
            height: scaled_extent(self.height, scale),
            rot: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            trans: [t.x, t.y, t.z],
            pre: self.pre.map(|m| [
                [m[0], m[1], m[2]],
                [m[3], m[4], m[5]],
                [m[6], m[7], m[8]],
            ]),
            flip_u: self.flip_u,
            eps_depth: EPS_DEPTH,
        }
    }
}

/// Feature-map extent at a fractional scale, rounding up so every source
/// pixel lands inside some cell.
pub fn scaled_extent(full: usize, scale: f64) -> usize {
    ((full as f64) * scale).ceil() as usize
}

/// Square BEV grid centered on the ego origin. `x_range`/`y_range` are
/// half-extents in meters; cells index as `(ix, iy)` with flat index
/// `ix * ny + iy` (x varies slowest).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub x_range: f64,
    pub y_range: f64,
    pub nx: usize,
    pub ny: usize,
}

impl BevGridSpec {
    pub fn new(x_range: f64, y_range: f64, nx: usize, ny: usize) -> Result<Self, GeometryError> {
        if !(x_range > 0.0 && y_range > 0.0) || nx < 2 || ny < 2 {
            return Err(GeometryError::BadGridSpec(format!(
                "ranges must be positive and resolution >= 2, got ±{x_range} x ±{y_range} at {nx}x{ny}"
            )));
        }
        Ok(BevGridSpec { x_range, y_range, nx, ny })
    }

    /// Desk default: 32x32 cells over ±16 m (1 m cells).
    pub fn desk_default() -> Self {
        BevGridSpec { x_range: 16.0, y_range: 16.0, nx: 32, ny: 32 }
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (2.0 * self.x_range / self.nx as f64, 2.0 * self.y_range / self.ny as f64)
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Cell containing the point, or `None` outside the grid. The upper
    /// boundary is exclusive so every in-range point maps to exactly one cell.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (dx, dy) = self.cell_size();
        if !(-self.x_range..self.x_range).contains(&x)
            || !(-self.y_range..self.y_range).contains(&y)
        {
            return None;
        }
        let ix = ((x + self.x_range) / dx) as usize;
        let iy = ((y + self.y_range) / dy) as usize;
        Some((ix.min(self.nx - 1), iy.min(self.ny - 1)))
    }

    pub fn flat_index(&self, ix: usize, iy: usize) -> usize {
        ix * self.ny + iy
    }

    /// Metric center of a cell.
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let (dx, dy) = self.cell_size();
        (
            -self.x_range + (ix as f64 + 0.5) * dx,
            -self.y_range + (iy as f64 + 0.5) * dy,
        )
    }
}

/// Oriented box: `length` along the heading (yaw about +z from +x), `width`
/// lateral, `height` vertical, center at the volumetric center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: [f64; 3],
    pub width: f64,
    pub length: f64,
    pub height: f64,
    pub yaw: f64,
}

impl Box3 {
    /// Box-local coordinates of a point: x along heading, y lateral, z up.
    pub fn local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let d = Vector3::new(p.x - self.center[0], p.y - self.center[1], p.z - self.center[2]);
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// Inverse of [`Box3::local`].
    pub fn from_local(&self, l: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(
            self.center[0] + c * l.x - s * l.y,
            self.center[1] + s * l.x + c * l.y,
            self.center[2] + l.z,
        )
    }

    /// Point-in-box test with every face pushed out by `inflate` meters.
    pub fn contains(&self, p: &Vector3<f64>, inflate: f64) -> bool {
        let l = self.local(p);
        l.x.abs() <= self.length * 0.5 + inflate
            && l.y.abs() <= self.width * 0.5 + inflate
            && l.z.abs() <= self.height * 0.5 + inflate
    }

    /// The 8 corners, ordered by (±length, ±width, ±height) sign triples.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let mut out = [Vector3::zeros(); 8];
        let mut i = 0;
        for sx in [-0.5, 0.5] {
            for sy in [-0.5, 0.5] {
                for sz in [-0.5, 0.5] {
                    out[i] = self.from_local(&Vector3::new(
                        sx * self.length,
                        sy * self.width,
                        sz * self.height,
                    ));
                    i += 1;
                }
            }
        }
        out
    }

    /// Slab-test ray intersection; returns entry/exit distances along `dir`
    /// (must be non-zero) if the ray hits the box with exit distance > 0.
    pub fn ray_intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let o = self.local(origin);
        // Rotate the direction only.
        let (s, c) = self.yaw.sin_cos();
        let d = Vector3::new(c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z);
        let half = [self.length * 0.5, self.width * 0.5, self.height * 0.5];
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if o[a].abs() > half[a] {
                    return None;
                }
                continue;
            }
            let mut t0 = (-half[a] - o[a]) / d[a];
            let mut t1 = (half[a] - o[a]) / d[a];
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        if t_far <= 0.0 {
            return None;
        }
        Some((t_near, t_far))
    }
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * std::f64::consts::PI);
    if r > std::f64::consts::PI {
        r -= 2.0 * std::f64::consts::PI;
    }
    r
}
