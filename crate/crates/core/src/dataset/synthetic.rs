//! Procedural dynamic scenes: a textured ground plane at `z = 0`, cube
//! sprites moving over it, and a camera hovering above or orbiting.
//!
//! Images are ray cast directly (2×2 supersampling per pixel). Each box is
//! the pixel-aligned hull of the sprite's eight projected corners, which for
//! a convex solid bounds the silhouette exactly.

use std::f64::consts::TAU;
use std::path::PathBuf;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BoundingBox, Frame, FrameRecord, Manifest, Split};
use crate::camera::{look_at, CameraPose, Intrinsics, SceneBounds};
use crate::error::{Error, Result};
use crate::raster::{from_rgb8, to_rgb8, RgbImage};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trajectory {
    /// Ground-plane position moves from `start` to `end` at constant speed.
    Linear { start: [f64; 2], end: [f64; 2] },
    /// `period` is in normalized time; `phase` in turns.
    Circular {
        center: [f64; 2],
        radius: f64,
        period: f64,
        phase: f64,
    },
}

impl Trajectory {
    pub fn position(&self, t: f64) -> [f64; 2] {
        match *self {
            Trajectory::Linear { start, end } => {
                [start[0] + t * (end[0] - start[0]), start[1] + t * (end[1] - start[1])]
            }
            Trajectory::Circular {
                center,
                radius,
                period,
                phase,
            } => {
                let a = TAU * (t / period + phase);
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            }
        }
    }

    /// Axis-aligned extent covered for `t ∈ [0, 1]` (conservative for arcs).
    fn extent(&self) -> ([f64; 2], [f64; 2]) {
        match *self {
            Trajectory::Linear { start, end } => (
                [start[0].min(end[0]), start[1].min(end[1])],
                [start[0].max(end[0]), start[1].max(end[1])],
            ),
            Trajectory::Circular { center, radius, .. } => (
                [center[0] - radius, center[1] - radius],
                [center[0] + radius, center[1] + radius],
            ),
        }
    }
}

/// An axis-aligned cube resting on the ground.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sprite {
    /// Edge length in world units.
    pub size: f64,
    pub color_seed: u64,
    pub trajectory: Trajectory,
}

impl Sprite {
    pub fn color(&self) -> [f32; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.color_seed);
        hsv(rng.random_range(0.0..1.0), 0.85, 0.95)
    }

    pub fn corners(&self, t: f64) -> [Vector3<f64>; 8] {
        let [cx, cy] = self.trajectory.position(t);
        let h = 0.5 * self.size;
        std::array::from_fn(|i| {
            Vector3::new(
                cx + if i & 1 == 0 { -h } else { h },
                cy + if i & 2 == 0 { -h } else { h },
                if i & 4 == 0 { 0.0 } else { self.size },
            )
        })
    }

    /// Pixel box of the projected cube, clipped to the image; `None` when
    /// off screen or behind the camera.
    pub fn project_box(&self, camera: &CameraPose, t: f64) -> Option<BoundingBox> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for c in self.corners(t) {
            let (u, v) = camera.project(&c)?;
            lo = [lo[0].min(u), lo[1].min(v)];
            hi = [hi[0].max(u), hi[1].max(v)];
        }
        let (w, h) = (camera.width as f64, camera.height as f64);
        let b = BoundingBox {
            x_min: lo[0].floor().clamp(0.0, w),
            y_min: lo[1].floor().clamp(0.0, h),
            x_max: hi[0].ceil().clamp(0.0, w),
            y_max: hi[1].ceil().clamp(0.0, h),
        };
        (b.area() > 0.0).then_some(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CameraPath {
    /// Looking down from `altitude` over the origin, drifting smoothly by up
    /// to `jitter` world units per axis.
    Hover { altitude: f64, jitter: f64 },
    /// One full circle of `radius` at `altitude`, looking at the origin.
    Orbit { radius: f64, altitude: f64 },
}

/// Sprite edge length of the desk scene: about 12 px at 64×64, wider than
/// the 8 px footprint of a tier-1 ray so no sprite slips between rays.
pub const DESK_SPRITE_SIZE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels (both axes); principal point at the center.
    pub focal: f64,
    /// Sprites must stay inside `[-ground_extent, ground_extent]²`.
    pub ground_extent: f64,
    pub sprites: Vec<Sprite>,
    pub camera: CameraPath,
    /// Training frames, at `t = i / (frames - 1)`.
    pub frames: usize,
    /// Adds validation frames halfway between consecutive training frames.
    pub val_midpoints: bool,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// 64×64 scene with one linear and one circular sprite under a fixed
    /// hovering camera. With a pose that drifts smoothly in time a static
    /// model can explain the sprites as view-dependent appearance, so the
    /// desk scene keeps the camera still.
    pub fn desk(seed: u64) -> Self {
        Self {
            width: 64,
            height: 64,
            focal: 96.0,
            ground_extent: 0.75,
            sprites: vec![
                Sprite {
                    size: DESK_SPRITE_SIZE,
                    color_seed: seed.wrapping_add(1),
                    trajectory: Trajectory::Linear {
                        start: [-0.5, -0.35],
                        end: [0.5, 0.3],
                    },
                },
                Sprite {
                    size: DESK_SPRITE_SIZE,
                    color_seed: seed.wrapping_add(2),
                    trajectory: Trajectory::Circular {
                        center: [0.05, 0.1],
                        radius: 0.4,
                        period: 1.0,
                        phase: 0.25,
                    },
                },
            ],
            camera: CameraPath::Hover {
                altitude: 2.5,
                jitter: 0.0,
            },
            frames: 30,
            val_midpoints: true,
            seed,
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::Scene("image size and frame count must be positive".into()));
        }
        if !(self.focal > 0.0 && self.ground_extent > 0.0) {
            return Err(Error::Scene("focal length and ground extent must be positive".into()));
        }
        for (i, s) in self.sprites.iter().enumerate() {
            if !(s.size > 0.0) {
                return Err(Error::Scene(format!("sprite {i} has non-positive size")));
            }
            if let Trajectory::Circular { period, .. } = s.trajectory {
                if !(period > 0.0) {
                    return Err(Error::Scene(format!("sprite {i} has non-positive period")));
                }
            }
            let (lo, hi) = s.trajectory.extent();
            let r = 0.5 * s.size;
            let g = self.ground_extent;
            if lo.iter().chain(&hi).any(|v| !v.is_finite())
                || lo[0] - r < -g
                || lo[1] - r < -g
                || hi[0] + r > g
                || hi[1] + r > g
            {
                return Err(Error::Scene(format!(
                    "sprite {i} leaves the ground square [-{g}, {g}]² (path spans {lo:?} to {hi:?})"
                )));
            }
        }
        match self.camera {
            CameraPath::Hover { altitude, jitter } if altitude > self.max_sprite_height() && jitter >= 0.0 => Ok(()),
            CameraPath::Orbit { radius, altitude } if radius >= 0.0 && altitude > self.max_sprite_height() => Ok(()),
            _ => Err(Error::Scene("camera must fly above every sprite".into())),
        }
    }

    fn max_sprite_height(&self) -> f64 {
        self.sprites.iter().map(|s| s.size).fold(0.0, f64::max)
    }

    /// Timestamps of every generated frame with its split, in time order.
    pub fn timeline(&self) -> Vec<(f64, Split)> {
        let n = self.frames;
        let at = |i: f64| if n > 1 { i / (n - 1) as f64 } else { 0.0 };
        let mut out = Vec::new();
        for i in 0..n {
            out.push((at(i as f64), Split::Train));
            if self.val_midpoints && i + 1 < n {
                out.push((at(i as f64 + 0.5), Split::Val));
            }
        }
        out
    }

    /// Camera at any `t ∈ [0, 1]`.
    pub fn camera_at(&self, t: f64) -> CameraPose {
        let m = match self.camera {
            CameraPath::Hover { altitude, jitter } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_cafe);
                let mut wobble = || {
                    let (a, f1, p1, f2, p2): (f64, f64, f64, f64, f64) = (
                        rng.random_range(0.5..1.0),
                        rng.random_range(0.5..1.5),
                        rng.random_range(0.0..1.0),
                        rng.random_range(1.5..3.0),
                        rng.random_range(0.0..1.0),
                    );
                    jitter * a * (0.6 * (TAU * (f1 * t + p1)).sin() + 0.4 * (TAU * (f2 * t + p2)).sin())
                };
                let (dx, dy, dz, tx, ty) = (wobble(), wobble(), wobble(), wobble(), wobble());
                let eye = Vector3::new(dx, dy, altitude + dz);
                let target = Vector3::new(0.5 * tx, 0.5 * ty, 0.0);
                look_at(eye, target, Vector3::y())
            }
            CameraPath::Orbit { radius, altitude } => {
                let a = TAU * t;
                let eye = Vector3::new(radius * a.cos(), radius * a.sin(), altitude);
                look_at(eye, Vector3::zeros(), Vector3::z())
            }
        };
        CameraPose {
            intrinsics: self.intrinsics(),
            camera_to_world: m,
            width: self.width,
            height: self.height,
            timestamp: t,
        }
    }

    /// Scene box: the ground square up to the tallest sprite, with near/far
    /// covering every camera.
    pub fn bounds(&self) -> Result<SceneBounds> {
        let g = self.ground_extent;
        let top = self.max_sprite_height().max(0.05) * 1.25;
        let mut near = f64::INFINITY;
        let mut far = 0.0f64;
        for (t, _) in self.timeline() {
            let cam = self.camera_at(t);
            let o = cam.center();
            let (w, h) = (self.width as f64, self.height as f64);
            for (u, v) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h), (w / 2.0, h / 2.0)] {
                let d = cam.direction(u, v);
                if d.z >= 0.0 {
                    return Err(Error::Scene("a camera ray misses the ground".into()));
                }
                near = near.min((top - o.z) / d.z);
                far = far.max(-o.z / d.z);
            }
        }
        let b = SceneBounds {
            min: [-g, -g, -0.05 * top],
            max: [g, g, top],
            near: 0.95 * near,
            far: 1.05 * far,
        };
        b.validate()?;
        Ok(b)
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        (v - v * s * (k.min(4.0 - k).clamp(0.0, 1.0))) as f32
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Smooth procedural ground color: a few low-frequency plane waves per
/// channel, kept inside `[0.15, 0.85]`.
#[derive(Clone, Debug)]
pub struct GroundTexture {
    waves: Vec<[f64; 5]>,
}

impl GroundTexture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let waves = (0..9)
            .map(|i| {
                let ang: f64 = rng.random_range(0.0..TAU);
                let freq: f64 = rng.random_range(0.6..1.6);
                [
                    (i / 3) as f64,
                    freq * ang.cos(),
                    freq * ang.sin(),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.06..0.12),
                ]
            })
            .collect();
        Self { waves }
    }

    pub fn color(&self, x: f64, y: f64) -> [f32; 3] {
        let mut c = [0.5f64; 3];
        for &[ch, kx, ky, ph, amp] in &self.waves {
            c[ch as usize] += amp * (TAU * (kx * x + ky * y + ph)).sin();
        }
        c.map(|v| v.clamp(0.15, 0.85) as f32)
    }
}

/// Generated frames and their records, in time order.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SyntheticSceneSpec,
    pub manifest: Manifest,
    pub images: Vec<RgbImage>,
    /// Fraction of pixels (over all frames) covered by a sprite box.
    pub dynamic_pixel_ratio: f64,
}

fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<(f64, usize)> {
    let (mut t0, mut t1, mut axis) = (0.0f64, f64::INFINITY, 2usize);
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i] < lo[i] || o[i] > hi[i] {
                return None;
            }
            continue;
        }
        let (mut a, mut b) = ((lo[i] - o[i]) / d[i], (hi[i] - o[i]) / d[i]);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        if a > t0 {
            t0 = a;
            axis = i;
        }
        t1 = t1.min(b);
    }
    (t0 <= t1 && t0 > 0.0).then_some((t0, axis))
}

/// Ray casts one frame.
pub fn render_frame(spec: &SyntheticSceneSpec, texture: &GroundTexture, camera: &CameraPose) -> RgbImage {
    let (w, h) = (spec.width, spec.height);
    let o = camera.center();
    let solids: Vec<(Vector3<f64>, Vector3<f64>, [f32; 3])> = spec
        .sprites
        .iter()
        .map(|s| {
            let c = s.corners(camera.timestamp);
            (c[0], c[7], s.color())
        })
        .collect();
    let mut data = vec![0.0f32; 3 * w * h];
    for py in 0..h {
        for px in 0..w {
            let mut acc = [0.0f32; 3];
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let d = camera.direction(px as f64 + sx, py as f64 + sy);
                let mut best = f64::INFINITY;
                let mut color = [0.0f32; 3];
                if d.z < 0.0 {
                    let t = -o.z / d.z;
                    best = t;
                    let p = o + d * t;
                    color = texture.color(p.x, p.y);
                }
                for (lo, hi, c) in &solids {
                    if let Some((t, axis)) = ray_box(&o, &d, lo, hi) {
                        if t < best {
                            best = t;
                            let shade = if axis == 2 { 1.0 } else { 0.7 };
                            color = c.map(|v| v * shade);
                        }
                    }
                }
                for ch in 0..3 {
                    acc[ch] += 0.25 * color[ch];
                }
            }
            for ch in 0..3 {
                data[ch * w * h + py * w + px] = acc[ch];
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("image buffer matches its shape")
}

/// Renders every frame of the timeline. Frame images are named
/// `frames/NNNN.png` in the returned manifest.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let texture = GroundTexture::new(spec.seed);
    let bounds = spec.bounds()?;
    let timeline = spec.timeline();
    let mut frames = Vec::with_capacity(timeline.len());
    let mut images = Vec::with_capacity(timeline.len());
    let mut covered = 0.0;
    for (i, &(t, split)) in timeline.iter().enumerate() {
        let camera = spec.camera_at(t);
        let boxes: Vec<BoundingBox> = spec.sprites.iter().filter_map(|s| s.project_box(&camera, t)).collect();
        covered += boxes.iter().map(BoundingBox::area).sum::<f64>();
        images.push(render_frame(spec, &texture, &camera));
        frames.push(FrameRecord {
            image: PathBuf::from(format!("frames/{i:04}.png")),
            pose: camera,
            boxes,
            split,
        });
    }
    let dynamic_pixel_ratio = covered / (timeline.len() * spec.width * spec.height) as f64;
    let manifest = Manifest {
        width: spec.width,
        height: spec.height,
        intrinsics: spec.intrinsics(),
        bounds: Some(bounds),
        ground: None,
        val_every: None,
        frames,
        base_dir: PathBuf::new(),
    };
    Ok(SyntheticScene {
        spec: spec.clone(),
        manifest,
        images,
        dynamic_pixel_ratio,
    })
}

impl SyntheticScene {
    /// Frames of one split, with images quantized to 8 bits exactly as a
    /// written and reloaded dataset would hold them.
    pub fn frames(&self, split: Split) -> Vec<Frame> {
        self.manifest
            .frames
            .iter()
            .zip(&self.images)
            .filter(|(r, _)| r.split == split)
            .map(|(r, img)| {
                let (h, w) = (self.spec.height, self.spec.width);
                let bytes = to_rgb8(img).expect("generated images are RGB");
                Frame {
                    record: r.clone(),
                    image: from_rgb8(&bytes, h, w).expect("size matches"),
                }
            })
            .collect()
    }
}

#[cfg(feature = "io")]
impl SyntheticScene {
    /// Writes `manifest.txt` and the frame PNGs under `dir`; returns the
    /// manifest path.
    pub fn write(&self, dir: &std::path::Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (f, img) in self.manifest.frames.iter().zip(&self.images) {
            crate::raster::write_png(&dir.join(&f.image), img)?;
        }
        let path = dir.join("manifest.txt");
        self.manifest.write(&path)?;
        Ok(path)
    }
}
