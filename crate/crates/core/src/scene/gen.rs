//! Deterministic synthetic scene generation.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Frame, GtBox, LidarPoint, PointTag, Scene, SceneError, CLASSES};
use crate::geometry::{wrap_angle, BevGridSpec, Box3, CameraModel, Pose};

#[derive(Debug, Clone)]
pub struct GenParams {
    pub seed: u64,
    pub n_frames: usize,
    pub n_objects: usize,
    pub n_cameras: usize,
    /// Keyframe spacing (seconds).
    pub dt: f64,
    pub n_ground_points: usize,
    pub points_per_object: usize,
    pub points_per_static: usize,
    pub n_statics: usize,
    /// Probability that an object follows a turning arc instead of a
    /// constant-velocity line.
    pub turn_prob: f64,
    pub feature_channels: usize,
    pub grid: BevGridSpec,
    pub image_width: usize,
    pub image_height: usize,
    pub focal: f64,
    /// Camera height above the ego origin (meters).
    pub camera_height: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            seed: 0,
            n_frames: 8,
            n_objects: 3,
            n_cameras: 6,
            dt: 0.5,
            n_ground_points: 1200,
            points_per_object: 80,
            points_per_static: 60,
            n_statics: 6,
            turn_prob: 0.3,
            feature_channels: 16,
            grid: BevGridSpec::desk_default(),
            image_width: 176,
            image_height: 64,
            focal: 80.0,
            camera_height: 1.6,
        }
    }
}

/// Independent deterministic RNG stream derived from the scene seed and a
/// stream tag (hashed, so streams never overlap).
pub(crate) fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for t in tags {
        hasher.update(t.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Motion model solved in closed form so positions carry no integration error.
#[derive(Debug, Clone)]
struct Trajectory {
    p0: Vector3<f64>,
    speed: f64,
    yaw0: f64,
    /// Zero for constant-velocity motion.
    yaw_rate: f64,
}

impl Trajectory {
    fn yaw(&self, t: f64) -> f64 {
        wrap_angle(self.yaw0 + self.yaw_rate * t)
    }

    fn position(&self, t: f64) -> Vector3<f64> {
        if self.yaw_rate == 0.0 {
            let v = self.velocity(0.0);
            self.p0 + v * t
        } else {
            // Circle through p0 with heading yaw0 and angular rate yaw_rate.
            let r = self.speed / self.yaw_rate;
            let (s0, c0) = self.yaw0.sin_cos();
            let center = self.p0 + Vector3::new(-s0, c0, 0.0) * r;
            let (st, ct) = (self.yaw0 + self.yaw_rate * t).sin_cos();
            center + Vector3::new(st, -ct, 0.0) * r
        }
    }

    fn velocity(&self, t: f64) -> Vector3<f64> {
        let (s, c) = (self.yaw0 + self.yaw_rate * t).sin_cos();
        Vector3::new(c, s, 0.0) * self.speed
    }
}

/// Surround rig: `n` cameras at equal azimuth spacing, optical axes parallel
/// to the ground, positioned `height` above the ego origin. The camera frame
/// has z forward (optical axis), x right, y down.
fn build_rig(p: &GenParams) -> Result<Vec<CameraModel>, SceneError> {
    let mut rig = Vec::with_capacity(p.n_cameras);
    for i in 0..p.n_cameras {
        let theta = 2.0 * std::f64::consts::PI * i as f64 / p.n_cameras as f64;
        let (s, c) = theta.sin_cos();
        // Camera axes in ego coordinates (columns of ego-from-camera).
        let x_cam = Vector3::new(s, -c, 0.0);
        let y_cam = Vector3::new(0.0, 0.0, -1.0);
        let z_cam = Vector3::new(c, s, 0.0);
        let r_ec = Matrix3::from_columns(&[x_cam, y_cam, z_cam]);
        let ego_from_cam = Pose::new(r_ec, Vector3::new(0.0, 0.0, p.camera_height))?;
        rig.push(CameraModel::new(
            p.focal,
            p.focal,
            (p.image_width - 1) as f64 / 2.0,
            (p.image_height - 1) as f64 / 2.0,
            p.image_width,
            p.image_height,
            ego_from_cam.invert(),
        )?);
    }
    Ok(rig)
}

/// Uniform sample on the surface of a box, faces weighted by area.
fn sample_box_surface(rng: &mut ChaCha8Rng, b: &Box3) -> Vector3<f64> {
    let (l, w, h) = (b.length, b.width, b.height);
    let areas = [w * h, w * h, l * h, l * h, l * w, l * w];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 5;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let (u, v): (f64, f64) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
    let local = match face {
        0 => Vector3::new(0.5 * l, u * w, v * h),
        1 => Vector3::new(-0.5 * l, u * w, v * h),
        2 => Vector3::new(u * l, 0.5 * w, v * h),
        3 => Vector3::new(u * l, -0.5 * w, v * h),
        4 => Vector3::new(u * l, v * w, 0.5 * h),
        _ => Vector3::new(u * l, v * w, -0.5 * h),
    };
    b.from_local(&local)
}

struct ObjectTrack {
    track_id: u64,
    class_id: usize,
    size: [f64; 3],
    traj: Trajectory,
}

impl ObjectTrack {
    fn box_at(&self, t: f64) -> Box3 {
        let p = self.traj.position(t);
        Box3 {
            center: [p.x, p.y, p.z],
            width: self.size[0],
            length: self.size[1],
            height: self.size[2],
            yaw: self.traj.yaw(t),
        }
    }
}

/// Generates a scene with default desk parameters. See [`generate_scene_with`].
pub fn generate_scene(
    seed: u64,
    n_frames: usize,
    n_objects: usize,
    n_cameras: usize,
) -> Result<Scene, SceneError> {
    generate_scene_with(&GenParams {
        seed,
        n_frames,
        n_objects,
        n_cameras,
        ..GenParams::default()
    })
}

/// Deterministic scene generation: identical parameters yield identical
/// scenes. Every object is guaranteed to project into at least one camera in
/// at least one frame (spawns are resampled until that holds).
pub fn generate_scene_with(p: &GenParams) -> Result<Scene, SceneError> {
    if p.n_cameras == 0 || p.n_frames == 0 {
        return Err(SceneError::Gen(format!(
            "need at least 1 camera and 1 frame, got {} cameras, {} frames",
            p.n_cameras, p.n_frames
        )));
    }
    if p.dt <= 0.0 || p.dt.is_nan() {
        return Err(SceneError::Gen(format!("dt must be positive, got {}", p.dt)));
    }
    let rig = build_rig(p)?;

    // Ego trajectory: gentle arc at constant speed, starting at the global
    // origin facing +x.
    let mut ego_rng = derive_rng(p.seed, &[1]);
    let ego = Trajectory {
        p0: Vector3::zeros(),
        speed: 2.0,
        yaw0: 0.0,
        yaw_rate: ego_rng.gen_range(-0.05..0.05),
    };
    let ego_pose_at = |t: f64| Pose::from_yaw(ego.yaw(t), ego.position(t));

    // Static obstacles scattered around the origin.
    let mut static_rng = derive_rng(p.seed, &[2]);
    let mut statics = Vec::with_capacity(p.n_statics);
    for _ in 0..p.n_statics {
        let r = static_rng.gen_range(6.0..15.0);
        let phi = static_rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let (w, l, h): (f64, f64, f64) = (
            static_rng.gen_range(0.8..2.5),
            static_rng.gen_range(0.8..2.5),
            static_rng.gen_range(0.8..2.2),
        );
        statics.push(Box3 {
            center: [r * phi.cos(), r * phi.sin(), h / 2.0],
            width: w,
            length: l,
            height: h,
            yaw: static_rng.gen_range(0.0..std::f64::consts::PI),
        });
    }

    // Objects: resample spawns until each is separated from the others and
    // visible from the rig in some frame.
    let mut obj_rng = derive_rng(p.seed, &[3]);
    let mut objects: Vec<ObjectTrack> = Vec::with_capacity(p.n_objects);
    for track_id in 0..p.n_objects as u64 {
        let mut placed = false;
        for _attempt in 0..100 {
            let class_id = obj_rng.gen_range(0..CLASSES.len());
            let spec = &CLASSES[class_id];
            let jitter = |rng: &mut ChaCha8Rng, v: f64| v * rng.gen_range(0.9..1.1);
            let size = [
                jitter(&mut obj_rng, spec.size[0]),
                jitter(&mut obj_rng, spec.size[1]),
                jitter(&mut obj_rng, spec.size[2]),
            ];
            let r = obj_rng.gen_range(5.0..13.0);
            let phi = obj_rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let p0 = Vector3::new(r * phi.cos(), r * phi.sin(), size[2] / 2.0);
            let yaw0 = obj_rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let speed = obj_rng.gen_range(spec.speed.0..spec.speed.1);
            let turning = obj_rng.gen_bool(p.turn_prob);
            let yaw_rate = if turning {
                let mag = obj_rng.gen_range(0.15..0.4);
                if obj_rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            } else {
                0.0
            };
            let cand = ObjectTrack {
                track_id,
                class_id,
                size,
                traj: Trajectory { p0, speed, yaw0, yaw_rate },
            };
            let separated = objects
                .iter()
                .all(|o| (o.traj.p0 - cand.traj.p0).norm() > 3.0);
            if !separated {
                continue;
            }
            let visible = (0..p.n_frames).any(|k| {
                let t = k as f64 * p.dt;
                let ego_pose = ego_pose_at(t);
                let c_global = cand.traj.position(t);
                let c_ego = ego_pose.invert().apply(&c_global);
                rig.iter().any(|cam| cam.project(&c_ego).is_some())
            });
            if visible {
                objects.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::Gen(format!(
                "could not place object {track_id} visibly after 100 attempts"
            )));
        }
    }

    let mut frames = Vec::with_capacity(p.n_frames);
    for k in 0..p.n_frames {
        let t = k as f64 * p.dt;
        let ego_pose = ego_pose_at(t);
        let ego_inv = ego_pose.invert();
        let ego_yaw = ego.yaw(t);

        let gt: Vec<GtBox> = objects
            .iter()
            .map(|o| {
                let b = o.box_at(t);
                let c_ego = ego_inv.apply(&Vector3::new(b.center[0], b.center[1], b.center[2]));
                let v_ego = ego_inv.rotate(&o.traj.velocity(t));
                GtBox {
                    frame: k,
                    track_id: o.track_id,
                    class_id: o.class_id,
                    center: [c_ego.x, c_ego.y, c_ego.z],
                    size: o.size,
                    yaw: wrap_angle(b.yaw - ego_yaw),
                    velocity: [v_ego.x, v_ego.y, v_ego.z],
                }
            })
            .collect();

        let mut lidar_rng = derive_rng(p.seed, &[4, k as u64]);
        let mut lidar = Vec::new();
        let ego_xy = ego.position(t);
        for _ in 0..p.n_ground_points {
            // Area-uniform annulus around the ego, on the ground plane.
            let r = (lidar_rng.gen_range(0.0f64..1.0) * (400.0 - 16.0) + 16.0).sqrt();
            let a = lidar_rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let g = Vector3::new(ego_xy.x + r * a.cos(), ego_xy.y + r * a.sin(), 0.0);
            lidar.push(LidarPoint {
                pos: vec3_to_arr(&ego_inv.apply(&g)),
                tag: PointTag::Ground,
            });
        }
        for (i, b) in statics.iter().enumerate() {
            for _ in 0..p.points_per_static {
                let g = sample_box_surface(&mut lidar_rng, b);
                lidar.push(LidarPoint {
                    pos: vec3_to_arr(&ego_inv.apply(&g)),
                    tag: PointTag::Static(i),
                });
            }
        }
        for o in &objects {
            let b = o.box_at(t);
            for _ in 0..p.points_per_object {
                let g = sample_box_surface(&mut lidar_rng, &b);
                lidar.push(LidarPoint {
                    pos: vec3_to_arr(&ego_inv.apply(&g)),
                    tag: PointTag::Object(o.track_id),
                });
            }
        }

        frames.push(Frame {
            timestamp: t,
            ego_pose,
            cameras: rig.clone(),
            lidar,
            gt,
        });
    }

    Ok(Scene {
        seed: p.seed,
        dt: p.dt,
        frames,
        statics,
        feature_seed: p.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x51),
        feature_channels: p.feature_channels,
        grid: p.grid,
    })
}

fn vec3_to_arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}
