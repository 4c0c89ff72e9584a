//! Ray queries against the analytic scene geometry (ground plane, static
//! obstacles, and the objects of one frame), all in the global frame.
//!
//! This is the continuous stand-in for a rendered depth buffer: cameras and
//! visibility tests ask "what does this ray hit first" instead of comparing
//! against rasterized depth, which keeps grazing rays exact.

use nalgebra::Vector3;

use super::Scene;
use crate::geometry::Box3;

/// What a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitTag {
    Ground,
    /// Index into the scene's static list.
    Static(usize),
    /// Track id.
    Object(u64),
}

/// Analytic geometry of one frame, in global coordinates.
pub struct SceneGeometry {
    pub ground_z: f64,
    pub statics: Vec<Box3>,
    /// (track id, box) pairs for the frame's objects.
    pub objects: Vec<(u64, Box3)>,
}

impl SceneGeometry {
    pub fn for_frame(scene: &Scene, frame: usize) -> SceneGeometry {
        let f = &scene.frames[frame];
        let objects = f
            .gt
            .iter()
            .map(|g| (g.track_id, f.gt_in_global(g).box3()))
            .collect();
        SceneGeometry {
            ground_z: 0.0,
            statics: scene.statics.clone(),
            objects,
        }
    }

    /// First surface hit along `origin + t * dir` for `t > 0`, returned as
    /// `(t, tag)`. `t` is in units of `|dir|`.
    pub fn first_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, HitTag)> {
        let mut best: Option<(f64, HitTag)> = None;
        let mut consider = |t: f64, tag: HitTag| {
            if t > 0.0 && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, tag));
            }
        };
        if dir.z.abs() > 1e-12 {
            let t = (self.ground_z - origin.z) / dir.z;
            consider(t, HitTag::Ground);
        }
        for (i, b) in self.statics.iter().enumerate() {
            if let Some((t0, _)) = b.ray_intersect(origin, dir) {
                consider(t0.max(0.0), HitTag::Static(i));
            }
        }
        for (id, b) in &self.objects {
            if let Some((t0, _)) = b.ray_intersect(origin, dir) {
                consider(t0.max(0.0), HitTag::Object(*id));
            }
        }
        best
    }

    /// Whether the surface point `p` is visible from `origin`: nothing else
    /// blocks the ray by more than `tol` meters before reaching `p`.
    pub fn point_visible(&self, origin: &Vector3<f64>, p: &Vector3<f64>, tol: f64) -> bool {
        let dir = p - origin;
        let dist = dir.norm();
        if dist < 1e-9 {
            return true;
        }
        match self.first_hit(origin, &dir) {
            None => true,
            Some((t, _)) => (1.0 - t) * dist <= tol,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::generate_scene;
    use super::*;

    #[test]
    fn nearest_of_stacked_boxes_wins() {
        let geo = SceneGeometry {
            ground_z: 0.0,
            statics: vec![
                Box3 { center: [8.0, 0.0, 1.0], width: 2.0, length: 2.0, height: 2.0, yaw: 0.0 },
                Box3 { center: [4.0, 0.0, 1.0], width: 2.0, length: 2.0, height: 2.0, yaw: 0.0 },
            ],
            objects: vec![],
        };
        let (t, tag) = geo
            .first_hit(&Vector3::new(0.0, 0.0, 1.0), &Vector3::new(1.0, 0.0, 0.0))
            .unwrap();
        assert_eq!(tag, HitTag::Static(1));
        assert!((t - 3.0).abs() < 1e-12);
    }

    #[test]
    fn downward_ray_hits_ground() {
        let geo = SceneGeometry { ground_z: 0.0, statics: vec![], objects: vec![] };
        let (t, tag) = geo
            .first_hit(&Vector3::new(0.0, 0.0, 2.0), &Vector3::new(1.0, 0.0, -0.5))
            .unwrap();
        assert_eq!(tag, HitTag::Ground);
        assert!((t - 4.0).abs() < 1e-12);
        // Horizontal ray above ground never hits it.
        assert!(geo
            .first_hit(&Vector3::new(0.0, 0.0, 2.0), &Vector3::new(1.0, 0.0, 0.0))
            .is_none());
    }

    #[test]
    fn occluded_point_is_invisible_and_surface_point_is_visible() {
        let blocker = Box3 { center: [5.0, 0.0, 1.0], width: 2.0, length: 2.0, height: 2.0, yaw: 0.0 };
        let geo = SceneGeometry { ground_z: 0.0, statics: vec![blocker], objects: vec![] };
        let eye = Vector3::new(0.0, 0.0, 1.0);
        // A point behind the blocker at the same height.
        assert!(!geo.point_visible(&eye, &Vector3::new(9.0, 0.0, 1.0), 0.1));
        // The blocker's front face itself.
        assert!(geo.point_visible(&eye, &Vector3::new(4.0, 0.0, 1.0), 0.1));
        // A grazing ground point: the ray hits the plane exactly there.
        let geo2 = SceneGeometry { ground_z: 0.0, statics: vec![], objects: vec![] };
        assert!(geo2.point_visible(&Vector3::new(0.0, 0.0, 1.6), &Vector3::new(19.0, 3.0, 0.0), 0.1));
    }

    #[test]
    fn every_lidar_point_is_visible_from_directly_above() {
        // Sanity link between the generator and the geometry: each surface
        // point, viewed from straight above, either is the first hit or sits
        // within tolerance of it (top faces); side-face points can be hidden.
        let scene = generate_scene(2, 2, 2, 6).unwrap();
        let geo = SceneGeometry::for_frame(&scene, 0);
        let f = &scene.frames[0];
        let mut seen = 0;
        for pt in f.lidar.iter().take(200) {
            let g = f.ego_pose.apply(&Vector3::new(pt.pos[0], pt.pos[1], pt.pos[2]));
            let eye = g + Vector3::new(0.0, 0.0, 30.0);
            if geo.point_visible(&eye, &g, 0.01) {
                seen += 1;
            }
        }
        assert!(seen > 100, "only {seen} of 200 points visible from above");
    }
}
