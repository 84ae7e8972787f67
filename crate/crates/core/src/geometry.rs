//! Cameras, rigid poses, rays and ellipsoids shared by both renderers.
//!
//! Conventions (fixed once, used everywhere): right-handed world with y
//! up; camera space has x right, y toward increasing image row, z forward;
//! pixel u grows right, v grows down. Projection is
//! `u = fx·x/z + cx`, `v = fy·y/z + cy`, depth is camera-space z.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

/// Points closer than this to the camera plane are clipped.
pub const EPS_NEAR: f64 = 1e-4;

/// Shared pinhole intrinsics, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Per-frame world-to-camera extrinsics plus shared intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraTrack {
    pub intrinsics: Intrinsics,
    pub extrinsics: Vec<Matrix4<f64>>,
}

impl CameraTrack {
    pub fn len(&self) -> usize {
        self.extrinsics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.extrinsics.is_empty()
    }

    /// Checks the track invariants: frame-0 extrinsics is the identity and
    /// every rotation block is orthonormal with determinant +1.
    pub fn validate(&self) -> Result<(), String> {
        if self.extrinsics.is_empty() {
            return Err("camera track has no frames".into());
        }
        if (self.extrinsics[0] - Matrix4::identity()).abs().max() > 1e-9 {
            return Err("frame-0 extrinsics is not the identity".into());
        }
        for (t, e) in self.extrinsics.iter().enumerate() {
            let r = e.fixed_view::<3, 3>(0, 0);
            let defect = (r.transpose() * r - Matrix3::identity()).abs().max();
            if defect > 1e-6 {
                return Err(format!("frame {t}: rotation block not orthonormal ({defect:.2e})"));
            }
            if (r.determinant() - 1.0).abs() > 1e-6 {
                return Err(format!("frame {t}: rotation determinant {}", r.determinant()));
            }
        }
        Ok(())
    }

    /// Camera center of frame `t` in world coordinates.
    pub fn center(&self, t: usize) -> Point3<f64> {
        let e = &self.extrinsics[t];
        let r = e.fixed_view::<3, 3>(0, 0);
        let tr = Vector3::new(e[(0, 3)], e[(1, 3)], e[(2, 3)]);
        Point3::from(-(r.transpose() * tr))
    }

    /// Concatenated top 3x4 blocks of every frame, row-major: the
    /// length-12L vector the camera encoder consumes.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(12 * self.extrinsics.len());
        for e in &self.extrinsics {
            for r in 0..3 {
                for c in 0..4 {
                    out.push(e[(r, c)]);
                }
            }
        }
        out
    }

    /// Re-express a contiguous window so its first frame has identity
    /// extrinsics. Returns the window track and the world rebasing
    /// transform (old world -> new world).
    pub fn rebased_window(&self, first: usize, len: usize) -> (CameraTrack, Matrix4<f64>) {
        assert!(first + len <= self.extrinsics.len());
        let base = self.extrinsics[first];
        let base_inv = base.try_inverse().expect("extrinsics invertible");
        let extrinsics = (first..first + len)
            .map(|t| self.extrinsics[t] * base_inv)
            .collect();
        (CameraTrack { intrinsics: self.intrinsics, extrinsics }, base)
    }
}

/// Rotation about the world vertical (y) axis.
pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// d/dθ of [`rot_y`].
pub fn rot_y_deriv(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

/// An object's pose: a 3D location and an azimuth about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPose {
    pub location: Vector3<f64>,
    pub azimuth: f64,
}

impl ObjectPose {
    pub fn new(location: Vector3<f64>, azimuth: f64) -> ObjectPose {
        ObjectPose { location, azimuth }
    }
}

/// Homogeneous object-to-world transform `translate(location) · rotY(azimuth)`.
pub fn pose_to_transform(pose: &ObjectPose) -> Matrix4<f64> {
    let r = rot_y(pose.azimuth);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m[(0, 3)] = pose.location.x;
    m[(1, 3)] = pose.location.y;
    m[(2, 3)] = pose.location.z;
    m
}

/// Ellipsoid with a vertical-axis orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: Point3<f64>,
    pub radii: Vector3<f64>,
    pub azimuth: f64,
}

/// A ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Point3<f64>, direction: Vector3<f64>) -> Ray {
        Ray { origin, direction: direction.normalize() }
    }

    pub fn at(&self, t: f64) -> Point3<f64> {
        self.origin + self.direction * t
    }
}

/// Project a world point into frame `t`. Returns `(u, v, depth)` or `None`
/// when the point sits at or behind the near plane.
pub fn project(point: &Point3<f64>, camera: &CameraTrack, t: usize) -> Option<(f64, f64, f64)> {
    let e = &camera.extrinsics[t];
    let p = e * Vector4::new(point.x, point.y, point.z, 1.0);
    if p.z <= EPS_NEAR {
        return None;
    }
    let k = &camera.intrinsics;
    Some((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z))
}

/// World-space ray through a (continuous) pixel coordinate of frame `t`.
pub fn ray_for_pixel(u: f64, v: f64, camera: &CameraTrack, t: usize) -> Ray {
    let k = &camera.intrinsics;
    let d_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    let e = &camera.extrinsics[t];
    let r = e.fixed_view::<3, 3>(0, 0);
    Ray::new(camera.center(t), r.transpose() * d_cam)
}

/// Both intersections of a ray with an ellipsoid, nearest first (signed
/// along the ray). `None` on a miss.
pub fn ray_ellipsoid_intersect(ray: &Ray, e: &Ellipsoid) -> Option<(Point3<f64>, Point3<f64>)> {
    let rot = rot_y(-e.azimuth);
    let o = rot * (ray.origin - e.center);
    let d = rot * ray.direction;
    let mut qa = 0.0;
    let mut qb = 0.0;
    let mut qc = -1.0;
    for i in 0..3 {
        let r2 = e.radii[i] * e.radii[i];
        qa += d[i] * d[i] / r2;
        qb += 2.0 * o[i] * d[i] / r2;
        qc += o[i] * o[i] / r2;
    }
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t1 = (-qb - sq) / (2.0 * qa);
    let t2 = (-qb + sq) / (2.0 * qa);
    Some((ray.at(t1), ray.at(t2)))
}

/// The symmetric ellipsoid through all eight corners of a posed cuboid
/// with half-extents `h`: radii `sqrt(3)·h` about the cuboid center.
pub fn circumscribing_ellipsoid(h: Vector3<f64>, pose: &ObjectPose) -> Ellipsoid {
    Ellipsoid {
        center: Point3::from(pose.location),
        radii: h * 3f64.sqrt(),
        azimuth: pose.azimuth,
    }
}

/// Implicit ellipsoid equation value minus one; zero on the surface.
pub fn ellipsoid_residual(e: &Ellipsoid, p: &Point3<f64>) -> f64 {
    let q = rot_y(-e.azimuth) * (p - e.center);
    (0..3).map(|i| (q[i] / e.radii[i]).powi(2)).sum::<f64>() - 1.0
}

/// Level look-at camera: forward toward `target`, camera y aligned with
/// world vertical. Returns world-to-camera extrinsics.
pub fn look_at_level(eye: Point3<f64>, target: Point3<f64>) -> Matrix4<f64> {
    let up = Vector3::new(0.0, 1.0, 0.0);
    let z = (target - eye).normalize();
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let mut m = Matrix4::identity();
    for (row, axis) in [x, y, z].iter().enumerate() {
        m[(row, 0)] = axis.x;
        m[(row, 1)] = axis.y;
        m[(row, 2)] = axis.z;
        m[(row, 3)] = -axis.dot(&eye.coords);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_track(l: usize) -> CameraTrack {
        CameraTrack {
            intrinsics: Intrinsics { fx: 10.0, fy: 10.0, cx: 16.0, cy: 16.0 },
            extrinsics: vec![Matrix4::identity(); l],
        }
    }

    #[test]
    fn pose_transform_identity_and_translation() {
        let id = pose_to_transform(&ObjectPose::new(Vector3::zeros(), 0.0));
        assert_eq!(id, Matrix4::identity());
        let tr = pose_to_transform(&ObjectPose::new(Vector3::new(1.0, 0.0, 2.0), 0.0));
        let p = tr * Vector4::new(0.0, 0.0, 0.0, 1.0);
        assert_eq!((p.x, p.y, p.z), (1.0, 0.0, 2.0));
    }

    #[test]
    fn quarter_turn_sends_x_to_minus_z() {
        let m = pose_to_transform(&ObjectPose::new(Vector3::zeros(), std::f64::consts::FRAC_PI_2));
        let p = m * Vector4::new(1.0, 0.0, 0.0, 1.0);
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && (p.z + 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let cam = identity_track(1);
        let (u, v, d) = project(&Point3::new(0.0, 0.0, 2.0), &cam, 0).unwrap();
        assert_eq!((u, v, d), (16.0, 16.0, 2.0));
        let (u, v, _) = project(&Point3::new(1.0, 0.0, 2.0), &cam, 0).unwrap();
        assert_eq!((u, v), (21.0, 16.0));
        assert!(project(&Point3::new(0.0, 0.0, -1.0), &cam, 0).is_none());
    }

    #[test]
    fn center_pixel_ray_looks_forward() {
        let cam = identity_track(1);
        let ray = ray_for_pixel(16.0, 16.0, &cam, 0);
        assert!((ray.direction - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        let (u, v, d) = project(&ray.at(3.0), &cam, 0).unwrap();
        assert!((u - 16.0).abs() < 1e-9 && (v - 16.0).abs() < 1e-9 && (d - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_camera_ray_matches_inverse_oracle() {
        // Ray direction through a rotated camera equals Rᵀ times the
        // canonical camera-space direction.
        let angle = 0.7;
        let r = rot_y(angle);
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        let cam = CameraTrack {
            intrinsics: Intrinsics { fx: 12.0, fy: 9.0, cx: 8.0, cy: 6.0 },
            extrinsics: vec![Matrix4::identity(), e],
        };
        let ray = ray_for_pixel(3.0, 11.0, &cam, 1);
        let d_cam = Vector3::new((3.0 - 8.0) / 12.0, (11.0 - 6.0) / 9.0, 1.0);
        let oracle = (r.transpose() * d_cam).normalize();
        assert!((ray.direction - oracle).norm() < 1e-12);
    }

    #[test]
    fn sphere_intersections() {
        let unit = Ellipsoid {
            center: Point3::origin(),
            radii: Vector3::new(1.0, 1.0, 1.0),
            azimuth: 0.0,
        };
        let ray = Ray::new(Point3::new(0.0, 0.0, -2.0), Vector3::new(0.0, 0.0, 1.0));
        let (i1, i2) = ray_ellipsoid_intersect(&ray, &unit).unwrap();
        assert!((i1 - Point3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!((i2 - Point3::new(0.0, 0.0, 1.0)).norm() < 1e-12);

        let miss = Ray::new(Point3::new(0.0, 2.0, -2.0), Vector3::new(0.0, 0.0, 1.0));
        assert!(ray_ellipsoid_intersect(&miss, &unit).is_none());

        let stretched = Ellipsoid {
            center: Point3::origin(),
            radii: Vector3::new(2.0, 1.0, 1.0),
            azimuth: 0.0,
        };
        let along_x = Ray::new(Point3::new(-3.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0));
        let (i1, i2) = ray_ellipsoid_intersect(&along_x, &stretched).unwrap();
        assert!((i1 - Point3::new(-2.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((i2 - Point3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn circumscribing_ellipsoid_touches_corners() {
        let e = circumscribing_ellipsoid(
            Vector3::new(0.5, 0.5, 0.5),
            &ObjectPose::new(Vector3::zeros(), 0.0),
        );
        assert!((e.radii.x - 0.75f64.sqrt()).abs() < 1e-12);

        let pose = ObjectPose::new(Vector3::new(2.0, -1.0, 3.0), 0.4);
        let e = circumscribing_ellipsoid(Vector3::new(1.0, 2.0, 3.0), &pose);
        assert_eq!(e.center, Point3::new(2.0, -1.0, 3.0));
        assert_eq!(e.azimuth, 0.4);
        let m = pose_to_transform(&pose);
        for corner in 0..8 {
            let c = Vector3::new(
                if corner & 1 == 0 { -1.0 } else { 1.0 },
                if corner & 2 == 0 { -2.0 } else { 2.0 },
                if corner & 4 == 0 { -3.0 } else { 3.0 },
            );
            let w = m * Vector4::new(c.x, c.y, c.z, 1.0);
            let res = ellipsoid_residual(&e, &Point3::new(w.x, w.y, w.z));
            assert!(res.abs() < 1e-9, "corner {corner}: residual {res}");
        }
    }

    #[test]
    fn circumscribing_ellipsoid_contains_cuboid_lattice() {
        let h = Vector3::new(0.8, 1.3, 0.4);
        let pose = ObjectPose::new(Vector3::new(0.5, 0.0, 2.0), 1.1);
        let e = circumscribing_ellipsoid(h, &pose);
        let m = pose_to_transform(&pose);
        for ix in 0..10 {
            for iy in 0..10 {
                for iz in 0..10 {
                    let p = Vector3::new(
                        h.x * (2.0 * ix as f64 / 9.0 - 1.0),
                        h.y * (2.0 * iy as f64 / 9.0 - 1.0),
                        h.z * (2.0 * iz as f64 / 9.0 - 1.0),
                    );
                    let w = m * Vector4::new(p.x, p.y, p.z, 1.0);
                    assert!(ellipsoid_residual(&e, &Point3::new(w.x, w.y, w.z)) <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn intersections_satisfy_implicit_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hits = 0;
        for _ in 0..500 {
            let e = Ellipsoid {
                center: Point3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ),
                radii: Vector3::new(
                    rng.random_range(0.2..2.0),
                    rng.random_range(0.2..2.0),
                    rng.random_range(0.2..2.0),
                ),
                azimuth: rng.random_range(-3.0..3.0),
            };
            let origin = Point3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let jitter = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            let ray = Ray::new(origin, e.center - origin + jitter);
            if let Some((i1, i2)) = ray_ellipsoid_intersect(&ray, &e) {
                hits += 1;
                assert!(ellipsoid_residual(&e, &i1).abs() < 1e-6);
                assert!(ellipsoid_residual(&e, &i2).abs() < 1e-6);
                // Reversing the ray swaps the two intersection points.
                let rev = Ray::new(ray.origin, -ray.direction);
                let (r1, r2) = ray_ellipsoid_intersect(&rev, &e).unwrap();
                assert!((r1 - i2).norm() < 1e-6 && (r2 - i1).norm() < 1e-6);
            }
        }
        assert!(hits > 20, "too few hits ({hits}) to be meaningful");
    }

    #[test]
    fn look_at_level_keeps_vertical() {
        let e = look_at_level(Point3::new(3.0, 1.5, -2.0), Point3::new(0.0, 1.5, 0.0));
        let r = e.fixed_view::<3, 3>(0, 0);
        let y_cam = Vector3::new(r[(1, 0)], r[(1, 1)], r[(1, 2)]);
        assert!((y_cam - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert!(((r.transpose() * r) - Matrix3::identity()).abs().max() < 1e-12);
    }

    proptest! {
        #[test]
        fn project_inverts_ray_for_pixel(
            u in 0.5f64..31.5,
            v in 0.5f64..31.5,
            angle in -1.0f64..1.0,
            tx in -1.0f64..1.0,
            s in 0.5f64..10.0,
        ) {
            let r = rot_y(angle);
            let mut e = Matrix4::identity();
            e.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            e[(0, 3)] = tx;
            let cam = CameraTrack {
                intrinsics: Intrinsics { fx: 20.0, fy: 18.0, cx: 16.0, cy: 16.0 },
                extrinsics: vec![Matrix4::identity(), e],
            };
            let ray = ray_for_pixel(u, v, &cam, 1);
            let (pu, pv, pd) = project(&ray.at(s), &cam, 1).unwrap();
            prop_assert!((pu - u).abs() < 1e-4);
            prop_assert!((pv - v).abs() < 1e-4);
            prop_assert!(pd > 0.0);
        }
    }
}
