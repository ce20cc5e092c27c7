//! Pinhole cameras, ray generation at feature-map resolution, and uniform
//! sampling along rays.
//!
//! Camera frames follow the usual computer-vision convention: `+x` right,
//! `+y` down, `+z` forward. Pixel `(u, v)` has its center at `(u + 0.5, v + 0.5)`.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use rand::Rng;

use crate::error::{contract_err, Result};
use crate::planes::SpacetimePoint;

pub const ORTHONORMAL_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) && self.fx > 0.0 && self.fy > 0.0;
        if ok {
            Ok(())
        } else {
            Err(contract_err!("non-invertible intrinsics {self:?}"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    pub intrinsics: Intrinsics,
    pub camera_to_world: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
    /// Normalized time in `[0, 1]`.
    pub timestamp: f64,
}

impl CameraPose {
    pub fn rotation(&self) -> Matrix3<f64> {
        self.camera_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn center(&self) -> Vector3<f64> {
        self.camera_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Checks `RᵀR = I` and a rigid bottom row.
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        check_rigid(&self.camera_to_world)?;
        if self.width == 0 || self.height == 0 {
            return Err(contract_err!("empty image size {}x{}", self.width, self.height));
        }
        Ok(())
    }

    /// Projects a world point to continuous pixel coordinates; `None` when the
    /// point is behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let r = self.rotation();
        let pc = r.transpose() * (p - self.center());
        if pc.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
    }

    /// Unit world-space direction through continuous pixel coordinate `(u, v)`.
    pub fn direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let d = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        (self.rotation() * d).normalize()
    }
}

pub(crate) fn check_rigid(m: &Matrix4<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(contract_err!("pose contains non-finite values"));
    }
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ORTHONORMAL_TOL {
        return Err(contract_err!("rotation is not orthonormal (max |RᵀR - I| = {err:.2e})"));
    }
    if r.determinant() < 0.0 {
        return Err(contract_err!("rotation has negative determinant"));
    }
    let bottom = m.fixed_view::<1, 4>(3, 0);
    if (bottom - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).abs().max() > ORTHONORMAL_TOL {
        return Err(contract_err!("pose bottom row is not [0 0 0 1]"));
    }
    Ok(())
}

/// Camera-to-world transform for a camera at `eye` looking at `target`.
/// `up` is the approximate world up direction; image `-y` points along it.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Matrix4<f64> {
    let forward = (target - eye).normalize();
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
    m.fixed_view_mut::<3, 1>(0, 1).copy_from(&down);
    m.fixed_view_mut::<3, 1>(0, 2).copy_from(&forward);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
    m
}

/// Axis-aligned scene box plus near/far ray bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl SceneBounds {
    pub fn validate(&self) -> Result<()> {
        let finite =
            self.min.iter().chain(&self.max).all(|v| v.is_finite()) && self.near.is_finite() && self.far.is_finite();
        if !finite || (0..3).any(|i| self.min[i] >= self.max[i]) {
            return Err(contract_err!("scene box must satisfy min < max: {self:?}"));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(contract_err!(
                "ray bounds must satisfy 0 < near < far, got {} and {}",
                self.near,
                self.far
            ));
        }
        Ok(())
    }

    /// Bounds for real footage: the union of where each camera's corner and
    /// center rays cross a ground slab `z ∈ [ground_min, ground_max]`, with
    /// near/far covering every such crossing.
    pub fn from_frustums(cameras: &[CameraPose], ground_min: f64, ground_max: f64) -> Result<Self> {
        if cameras.is_empty() || ground_min >= ground_max {
            return Err(contract_err!("need cameras and a non-empty ground slab"));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let (mut near, mut far) = (f64::INFINITY, 0.0f64);
        for cam in cameras {
            let (w, h) = (cam.width as f64, cam.height as f64);
            let o = cam.center();
            for (u, v) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h), (w / 2.0, h / 2.0)] {
                let d = cam.direction(u, v);
                if d.z.abs() < 1e-9 {
                    return Err(contract_err!("camera ray parallel to the ground slab"));
                }
                for z in [ground_min, ground_max] {
                    let t = (z - o.z) / d.z;
                    if t <= 0.0 {
                        return Err(contract_err!("ground slab is behind a camera"));
                    }
                    let p = o + d * t;
                    for i in 0..3 {
                        lo[i] = lo[i].min(p[i]);
                        hi[i] = hi[i].max(p[i]);
                    }
                    near = near.min(t);
                    far = far.max(t);
                }
            }
        }
        let b = Self {
            min: lo,
            max: hi,
            near: near * 0.95,
            far: far * 1.05,
        };
        b.validate()?;
        Ok(b)
    }
}

/// One ray per feature-map pixel; `origins[i]`, `directions[i]` for
/// `i = row * map_w + col`.
#[derive(Clone, Debug)]
pub struct Rays {
    pub map_w: usize,
    pub map_h: usize,
    pub origins: Vec<Vector3<f64>>,
    pub directions: Vec<Vector3<f64>>,
}

impl Rays {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Casts rays through the centers of the `map_w × map_h` footprints tiling
/// the image. The footprint size must divide the image exactly.
pub fn generate_rays(camera: &CameraPose, map_w: usize, map_h: usize) -> Result<Rays> {
    camera.intrinsics.validate()?;
    if map_w == 0 || map_h == 0 || !camera.width.is_multiple_of(map_w) || !camera.height.is_multiple_of(map_h) {
        return Err(contract_err!(
            "feature map {map_w}x{map_h} does not tile image {}x{}",
            camera.width,
            camera.height
        ));
    }
    let fx = (camera.width / map_w) as f64;
    let fy = (camera.height / map_h) as f64;
    let o = camera.center();
    let n = map_w * map_h;
    let mut directions = Vec::with_capacity(n);
    for row in 0..map_h {
        for col in 0..map_w {
            directions.push(camera.direction((col as f64 + 0.5) * fx, (row as f64 + 0.5) * fy));
        }
    }
    Ok(Rays {
        map_w,
        map_h,
        origins: vec![o; n],
        directions,
    })
}

/// Sample depths and step sizes along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
    pub near: f64,
    pub far: f64,
}

/// `count` samples, one per equal sub-interval of `[near, far]`: the
/// midpoint, or a uniformly jittered position strictly inside the
/// sub-interval when `jitter` is given.
pub fn sample_uniform<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    count: usize,
    jitter: Option<&mut R>,
) -> Result<RaySamples> {
    if !(near < far) || !near.is_finite() || !far.is_finite() {
        return Err(contract_err!("sample_uniform needs near < far, got {near} and {far}"));
    }
    if count == 0 {
        return Err(contract_err!("sample_uniform needs at least one sample"));
    }
    let step = (far - near) / count as f64;
    let t = match jitter {
        None => (0..count).map(|i| near + (i as f64 + 0.5) * step).collect(),
        Some(rng) => (0..count)
            .map(|i| {
                // open interval (0, 1) keeps samples off the sub-interval edges
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                near + (i as f64 + u) * step
            })
            .collect(),
    };
    Ok(RaySamples {
        t,
        deltas: vec![step; count],
        near,
        far,
    })
}

/// Affine map of the scene box onto `[0, 1]³`, clamped. Time passes through
/// (clamped to `[0, 1]`).
pub fn normalize_to_scene(points: &[Point3<f64>], time: f64, bounds: &SceneBounds) -> Vec<SpacetimePoint> {
    points
        .iter()
        .map(|p| {
            let n = |i: usize| ((p[i] - bounds.min[i]) / (bounds.max[i] - bounds.min[i])).clamp(0.0, 1.0);
            SpacetimePoint {
                x: n(0),
                y: n(1),
                z: n(2),
                t: time.clamp(0.0, 1.0),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn camera(w: usize, h: usize, f: f64, c2w: Matrix4<f64>) -> CameraPose {
        CameraPose {
            intrinsics: Intrinsics {
                fx: f,
                fy: f,
                cx: w as f64 / 2.0,
                cy: h as f64 / 2.0,
            },
            camera_to_world: c2w,
            width: w,
            height: h,
            timestamp: 0.0,
        }
    }

    #[test]
    fn principal_point_looks_down_the_axis() {
        let cam = camera(64, 64, 50.0, Matrix4::identity());
        let d = cam.direction(32.0, 32.0);
        assert_abs_diff_eq!(d, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
        let rays = generate_rays(&cam, 1, 1).unwrap();
        assert_abs_diff_eq!(rays.directions[0], Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn okutama_ray_budget() {
        let cam = camera(1280, 720, 1000.0, Matrix4::identity());
        let rays = generate_rays(&cam, 1280 / 16, 720 / 16).unwrap();
        assert_eq!((rays.map_w, rays.map_h), (80, 45));
        assert_eq!(rays.len(), 3600);
        assert_eq!(720 * 1280 / rays.len(), 256);
        assert_eq!(720 * 1280 % rays.len(), 0);
    }

    #[test]
    fn rays_rotate_with_the_pose() {
        let r = Rotation3::from_euler_angles(0.3, -0.2, 1.1);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
        let base = generate_rays(&camera(32, 16, 20.0, Matrix4::identity()), 8, 4).unwrap();
        let rotated = generate_rays(&camera(32, 16, 20.0, m), 8, 4).unwrap();
        for (a, b) in base.directions.iter().zip(&rotated.directions) {
            assert_abs_diff_eq!(r * a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn bad_intrinsics_and_tiling_are_rejected() {
        let mut cam = camera(64, 64, 50.0, Matrix4::identity());
        assert!(generate_rays(&cam, 5, 4).is_err());
        cam.intrinsics.fx = 0.0;
        assert!(generate_rays(&cam, 4, 4).is_err());
    }

    #[test]
    fn uniform_sampling_examples() {
        let s = sample_uniform::<ChaCha8Rng>(0.0, 1.0, 4, None).unwrap();
        assert_eq!(s.t, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.deltas, vec![0.25; 4]);
        let s = sample_uniform::<ChaCha8Rng>(2.0, 3.0, 1, None).unwrap();
        assert_eq!(s.t, vec![2.5]);
        assert!(sample_uniform::<ChaCha8Rng>(1.0, 1.0, 4, None).is_err());
        assert!(sample_uniform::<ChaCha8Rng>(2.0, 1.0, 4, None).is_err());
    }

    #[test]
    fn jittered_samples_stay_in_their_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = sample_uniform(1.5, 3.5, 7, Some(&mut rng)).unwrap();
            for (i, &t) in s.t.iter().enumerate() {
                let lo = 1.5 + i as f64 * 2.0 / 7.0;
                assert!(t > lo && t < lo + 2.0 / 7.0);
            }
        }
    }

    #[test]
    fn normalization_examples() {
        let b = SceneBounds {
            min: [-1.0, -2.0, 0.0],
            max: [1.0, 2.0, 0.5],
            near: 1.0,
            far: 2.0,
        };
        let pts = [
            Point3::new(-1.0, -2.0, 0.0),
            Point3::new(0.0, 0.0, 0.25),
            Point3::new(5.0, -9.0, 0.1),
        ];
        let n = normalize_to_scene(&pts, 0.3, &b);
        assert_eq!((n[0].x, n[0].y, n[0].z), (0.0, 0.0, 0.0));
        assert_eq!((n[1].x, n[1].y, n[1].z), (0.5, 0.5, 0.5));
        assert_eq!((n[2].x, n[2].y), (1.0, 0.0));
        assert_abs_diff_eq!(n[2].z, 0.2, epsilon = 1e-12);
        assert!(n.iter().all(|p| p.t == 0.3));
    }

    #[test]
    fn non_orthonormal_pose_is_rejected() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 1.01;
        assert!(check_rigid(&m).is_err());
        assert!(check_rigid(&Matrix4::identity()).is_ok());
    }

    #[test]
    fn frustum_bounds_cover_the_ground() {
        let eye = Vector3::new(0.0, 0.0, 3.0);
        let cam = camera(64, 48, 60.0, look_at(eye, Vector3::zeros(), Vector3::y()));
        let b = SceneBounds::from_frustums(std::slice::from_ref(&cam), 0.0, 0.3).unwrap();
        assert!(b.near < 2.7 && b.far > 3.0);
        assert!(b.min[0] < -1.5 && b.max[0] > 1.5);
    }

    proptest! {
        #[test]
        fn rays_reproject_to_their_pixels(
            ax in -0.4f64..0.4, ay in -0.4f64..0.4, az in -3.0f64..3.0,
            tx in -2.0f64..2.0, ty in -2.0f64..2.0, tz in -2.0f64..2.0,
            depth in 0.01f64..50.0,
        ) {
            let r = Rotation3::from_euler_angles(ax, ay, az);
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::new(tx, ty, tz));
            let cam = camera(48, 32, 40.0, m);
            let rays = generate_rays(&cam, 12, 8).unwrap();
            prop_assert_eq!(rays.len(), 96);
            for (i, d) in rays.directions.iter().enumerate() {
                prop_assert!((d.norm() - 1.0).abs() < 1e-12);
                let p = rays.origins[i] + d * depth;
                let (u, v) = cam.project(&p).unwrap();
                let (row, col) = (i / 12, i % 12);
                prop_assert!((u - (col as f64 + 0.5) * 4.0).abs() < 1e-4);
                prop_assert!((v - (row as f64 + 0.5) * 4.0).abs() < 1e-4);
            }
        }

        #[test]
        fn unjittered_steps_are_uniform(near in 0.01f64..10.0, span in 0.01f64..10.0, count in 1usize..200) {
            let s = sample_uniform::<ChaCha8Rng>(near, near + span, count, None).unwrap();
            prop_assert!(s.deltas.iter().all(|d| (d - s.deltas[0]).abs() < 1e-9 && *d > 0.0));
            prop_assert!(s.t.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.t[0] > near && *s.t.last().unwrap() <= near + span);
        }
    }
}
