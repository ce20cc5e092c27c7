//! Posed, timestamped frame manifests and the synthetic scene generator.
//!
//! A manifest is a line-oriented text file. Blank lines and lines starting
//! with `#` are ignored.
//!
//! ```text
//! intrinsics <width> <height> <fx> <fy> <cx> <cy>
//! bounds <minx> <miny> <minz> <maxx> <maxy> <maxz> <near> <far>   # optional
//! ground <zmin> <zmax>                                             # optional
//! val_every <k>                                                    # optional
//! frame <image> <16 camera-to-world values, row-major> <timestamp> <train|val|auto> <n> <x_min y_min x_max y_max>*n
//! ```
//!
//! Image paths are relative to the manifest's directory. Frames tagged
//! `auto` go to validation when their index (after sorting by time) is
//! `k - 1` modulo `val_every`.

pub mod synthetic;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;

use crate::camera::{CameraPose, Intrinsics, SceneBounds};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub use synthetic::{generate_synthetic, CameraPath, Sprite, SyntheticScene, SyntheticSceneSpec, Trajectory};

pub const DEFAULT_VAL_EVERY: usize = 8;
/// Ground slab used for frustum-derived bounds when a manifest gives neither
/// `bounds` nor `ground`.
pub const DEFAULT_GROUND: (f64, f64) = (0.0, 1.0);

/// Pixel-space box; `x_max`/`y_max` are exclusive edges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    fn within(&self, width: usize, height: usize) -> bool {
        let ok = |v: f64| v.is_finite();
        ok(self.x_min)
            && ok(self.y_min)
            && ok(self.x_max)
            && ok(self.y_max)
            && 0.0 <= self.x_min
            && self.x_min <= self.x_max
            && self.x_max <= width as f64
            && 0.0 <= self.y_min
            && self.y_min <= self.y_max
            && self.y_max <= height as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    /// Resolved by the every-k-th-frame rule when loading.
    Auto,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "auto" => Some(Split::Auto),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Auto => "auto",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    /// As written in the manifest; see [`Manifest::image_path`].
    pub image: PathBuf,
    /// Carries the (normalized) timestamp.
    pub pose: CameraPose,
    pub boxes: Vec<BoundingBox>,
    pub split: Split,
}

impl FrameRecord {
    pub fn timestamp(&self) -> f64 {
        self.pose.timestamp
    }
}

/// A record together with its decoded image.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub record: FrameRecord,
    pub image: RgbImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub bounds: Option<SceneBounds>,
    pub ground: Option<(f64, f64)>,
    pub val_every: Option<usize>,
    pub frames: Vec<FrameRecord>,
    /// Directory relative image paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn image_path(&self, frame: &FrameRecord) -> PathBuf {
        self.base_dir.join(&frame.image)
    }

    pub fn split(&self, split: Split) -> Vec<&FrameRecord> {
        self.frames.iter().filter(|f| f.split == split).collect()
    }

    /// Reads the images of one split, checking their size.
    #[cfg(feature = "io")]
    pub fn load_frames(&self, split: Split) -> Result<Vec<Frame>> {
        self.split(split)
            .into_iter()
            .map(|record| {
                let path = self.image_path(record);
                let image = crate::raster::read_png(&path)?;
                if crate::raster::dims(&image)? != (self.height, self.width) {
                    return Err(load_err(
                        record.image.display().to_string(),
                        format!("image is not {}x{}", self.width, self.height),
                    ));
                }
                Ok(Frame {
                    record: record.clone(),
                    image,
                })
            })
            .collect()
    }

    /// Explicit bounds, or bounds derived from the camera frustums over the
    /// ground slab.
    pub fn scene_bounds(&self) -> Result<SceneBounds> {
        if let Some(b) = self.bounds {
            return Ok(b);
        }
        let poses: Vec<CameraPose> = self.frames.iter().map(|f| f.pose.clone()).collect();
        let (lo, hi) = self.ground.unwrap_or(DEFAULT_GROUND);
        SceneBounds::from_frustums(&poses, lo, hi)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let k = &self.intrinsics;
        let _ = writeln!(
            s,
            "intrinsics {} {} {:?} {:?} {:?} {:?}",
            self.width, self.height, k.fx, k.fy, k.cx, k.cy
        );
        if let Some(b) = &self.bounds {
            let _ = writeln!(
                s,
                "bounds {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
                b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2], b.near, b.far
            );
        }
        if let Some((lo, hi)) = self.ground {
            let _ = writeln!(s, "ground {lo:?} {hi:?}");
        }
        if let Some(k) = self.val_every {
            let _ = writeln!(s, "val_every {k}");
        }
        for f in &self.frames {
            let _ = write!(s, "frame {}", f.image.display());
            let m = &f.pose.camera_to_world;
            for r in 0..4 {
                for c in 0..4 {
                    let _ = write!(s, " {:?}", m[(r, c)]);
                }
            }
            let _ = write!(s, " {:?} {} {}", f.pose.timestamp, f.split.as_str(), f.boxes.len());
            for b in &f.boxes {
                let _ = write!(s, " {:?} {:?} {:?} {:?}", b.x_min, b.y_min, b.x_max, b.y_max);
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// How much checking and normalization [`parse_manifest`] applies.
#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Require every image file to exist.
    pub require_images: bool,
    /// Sort by time, min-max normalize timestamps to `[0, 1]` and resolve
    /// `auto` splits.
    pub normalize: bool,
}

impl LoadOptions {
    pub const DATASET: Self = Self {
        require_images: true,
        normalize: true,
    };
    /// Pose lists for rendering: no images, timestamps taken verbatim.
    pub const POSES: Self = Self {
        require_images: false,
        normalize: false,
    };
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    load_with(path, LoadOptions::DATASET)
}

pub fn load_poses(path: &Path) -> Result<Manifest> {
    load_with(path, LoadOptions::POSES)
}

pub fn load_with(path: &Path, options: LoadOptions) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &base, options)
}

fn load_err(record: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Load {
        record: record.into(),
        reason: reason.into(),
    }
}

fn numbers<T: std::str::FromStr>(fields: &[&str], record: &str, what: &str) -> Result<Vec<T>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<T>()
                .map_err(|_| load_err(record, format!("{what}: cannot parse {f:?}")))
        })
        .collect()
}

pub fn parse_manifest(text: &str, base_dir: &Path, options: LoadOptions) -> Result<Manifest> {
    let mut camera: Option<(usize, usize, Intrinsics)> = None;
    let mut bounds = None;
    let mut ground = None;
    let mut val_every = None;
    let mut raw: Vec<(String, FrameRecord)> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let at = format!("line {}", lineno + 1);
        match fields[0] {
            "intrinsics" => {
                if fields.len() != 7 {
                    return Err(load_err(at, "intrinsics needs width height fx fy cx cy"));
                }
                let wh: Vec<usize> = numbers(&fields[1..3], &at, "intrinsics")?;
                let k: Vec<f64> = numbers(&fields[3..7], &at, "intrinsics")?;
                let intr = Intrinsics {
                    fx: k[0],
                    fy: k[1],
                    cx: k[2],
                    cy: k[3],
                };
                intr.validate().map_err(|e| load_err(&at, e.to_string()))?;
                camera = Some((wh[0], wh[1], intr));
            }
            "bounds" => {
                if fields.len() != 9 {
                    return Err(load_err(at, "bounds needs 8 values"));
                }
                let v: Vec<f64> = numbers(&fields[1..], &at, "bounds")?;
                let b = SceneBounds {
                    min: [v[0], v[1], v[2]],
                    max: [v[3], v[4], v[5]],
                    near: v[6],
                    far: v[7],
                };
                b.validate().map_err(|e| load_err(&at, e.to_string()))?;
                bounds = Some(b);
            }
            "ground" => {
                if fields.len() != 3 {
                    return Err(load_err(at, "ground needs zmin zmax"));
                }
                let v: Vec<f64> = numbers(&fields[1..], &at, "ground")?;
                if !(v[0] < v[1]) {
                    return Err(load_err(at, "ground needs zmin < zmax"));
                }
                ground = Some((v[0], v[1]));
            }
            "val_every" => {
                let v: Vec<usize> = numbers(&fields[1..], &at, "val_every")?;
                match v.as_slice() {
                    [k] if *k >= 1 => val_every = Some(*k),
                    _ => return Err(load_err(at, "val_every needs one positive integer")),
                }
            }
            "frame" => {
                let (width, height, intrinsics) =
                    camera.ok_or_else(|| load_err(&at, "frame before the intrinsics line"))?;
                if fields.len() < 21 {
                    return Err(load_err(
                        at,
                        "frame needs image, 16 pose values, timestamp, split, box count",
                    ));
                }
                let name = format!("{at} ({})", fields[1]);
                let m: Vec<f64> = numbers(&fields[2..18], &name, "pose")?;
                let timestamp: f64 = fields[18]
                    .parse()
                    .ok()
                    .filter(|t: &f64| t.is_finite())
                    .ok_or_else(|| load_err(&name, format!("bad timestamp {:?}", fields[18])))?;
                let split = Split::parse(fields[19]).ok_or_else(|| {
                    load_err(&name, format!("split must be train, val or auto, got {:?}", fields[19]))
                })?;
                let nbox: usize = fields[20]
                    .parse()
                    .map_err(|_| load_err(&name, format!("bad box count {:?}", fields[20])))?;
                if fields.len() != 21 + 4 * nbox {
                    return Err(load_err(
                        &name,
                        format!("{nbox} boxes need {} values, found {}", 4 * nbox, fields.len() - 21),
                    ));
                }
                let bv: Vec<f64> = numbers(&fields[21..], &name, "boxes")?;
                let boxes: Vec<BoundingBox> = bv
                    .chunks_exact(4)
                    .map(|c| BoundingBox {
                        x_min: c[0],
                        y_min: c[1],
                        x_max: c[2],
                        y_max: c[3],
                    })
                    .collect();
                if let Some(b) = boxes.iter().find(|b| !b.within(width, height)) {
                    return Err(load_err(&name, format!("box {b:?} outside the {width}x{height} image")));
                }
                let pose = CameraPose {
                    intrinsics,
                    camera_to_world: Matrix4::from_row_slice(&m),
                    width,
                    height,
                    timestamp,
                };
                pose.validate().map_err(|e| load_err(&name, e.to_string()))?;
                let image = PathBuf::from(fields[1]);
                if options.require_images && !base_dir.join(&image).is_file() {
                    return Err(load_err(
                        &name,
                        format!("image {} not found", base_dir.join(&image).display()),
                    ));
                }
                raw.push((
                    name,
                    FrameRecord {
                        image,
                        pose,
                        boxes,
                        split,
                    },
                ));
            }
            other => return Err(load_err(at, format!("unknown directive {other:?}"))),
        }
    }

    let (width, height, intrinsics) = camera.ok_or_else(|| load_err("manifest", "missing intrinsics line"))?;
    if options.require_images && raw.is_empty() {
        return Err(load_err("manifest", "no frames"));
    }
    let mut frames: Vec<FrameRecord> = raw.into_iter().map(|(_, f)| f).collect();
    if options.normalize {
        frames.sort_by(|a, b| a.pose.timestamp.total_cmp(&b.pose.timestamp));
        let lo = frames.first().map_or(0.0, |f| f.pose.timestamp);
        let hi = frames.last().map_or(0.0, |f| f.pose.timestamp);
        for f in &mut frames {
            f.pose.timestamp = if hi > lo {
                (f.pose.timestamp - lo) / (hi - lo)
            } else {
                0.0
            };
        }
        let k = val_every.unwrap_or(DEFAULT_VAL_EVERY);
        for (i, f) in frames.iter_mut().enumerate() {
            if f.split == Split::Auto {
                f.split = if i % k == k - 1 { Split::Val } else { Split::Train };
            }
        }
    }
    Ok(Manifest {
        width,
        height,
        intrinsics,
        bounds,
        ground,
        val_every,
        frames,
        base_dir: base_dir.to_path_buf(),
    })
}
