//! Flat `key = value` configuration for training, synthesis and evaluation.
//!
//! One assignment per line; `#` starts a comment. Per-tier settings use
//! `tier<k>.<field>` keys and synthetic-scene settings use `synth.<field>`.
//! Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{CameraPath, Sprite, SyntheticSceneSpec, Trajectory};
use crate::error::{Error, Result};
use crate::planes::TierConfig;

/// Parsed assignments, remembering the line each came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if let Some((prev, _)) = entries.insert(k.to_string(), (i + 1, v.to_string())) {
                return Err(Error::Config(format!("line {}: {k} already set on line {prev}", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: invalid value {v:?} for {key}"))),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Removes every key starting with `prefix` into a new set.
    pub fn split_prefix(&mut self, prefix: &str) -> KeyValues {
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        let entries = keys
            .into_iter()
            .map(|k| {
                let v = self.entries.remove(&k).expect("key listed above");
                (k, v)
            })
            .collect();
        KeyValues { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fails on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key {k}"))),
        }
    }
}

/// `temporal_resolution` value meaning "one row per distinct training timestamp".
pub const AUTO: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Tier layout; a temporal resolution of [`AUTO`] is resolved from the data.
    pub tiers: TierConfig,
    pub samples_per_ray: usize,
    /// Override the scene's near/far ray bounds.
    pub near: Option<f64>,
    pub far: Option<f64>,
    pub seed: u64,
    /// Total-variation weight on the spatial planes (0 disables it).
    pub tv_weight: f64,
    pub cosine_decay: bool,
    /// Write a checkpoint every this many iterations (0: only the final one).
    pub checkpoint_interval: usize,
    /// Log validation PSNR every this many iterations (0: never).
    pub validation_interval: usize,
    /// Jitter samples within their sub-intervals while training.
    pub stratified: bool,
    /// Relu 3×3 convolutions in the decoder's final block.
    pub final_convs: usize,
    /// Keep dynamic spatial and temporal planes at their initial values.
    pub freeze_dynamic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            iterations: 2000,
            tiers: TierConfig::desk(2, AUTO),
            samples_per_ray: 48,
            near: None,
            far: None,
            seed: 42,
            tv_weight: 0.0,
            cosine_decay: false,
            checkpoint_interval: 0,
            validation_interval: 0,
            stratified: true,
            final_convs: 2,
            freeze_dynamic: false,
        }
    }
}

impl TrainConfig {
    /// Consumes the training keys of `kv`.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.set("learning_rate", &mut self.learning_rate)?;
        kv.set("iterations", &mut self.iterations)?;
        kv.set("samples_per_ray", &mut self.samples_per_ray)?;
        if let Some(v) = kv.take("near")? {
            self.near = Some(v);
        }
        if let Some(v) = kv.take("far")? {
            self.far = Some(v);
        }
        kv.set("seed", &mut self.seed)?;
        kv.set("tv_weight", &mut self.tv_weight)?;
        kv.set("cosine_decay", &mut self.cosine_decay)?;
        kv.set("checkpoint_interval", &mut self.checkpoint_interval)?;
        kv.set("validation_interval", &mut self.validation_interval)?;
        kv.set("stratified", &mut self.stratified)?;
        kv.set("final_convs", &mut self.final_convs)?;
        kv.set("freeze_dynamic", &mut self.freeze_dynamic)?;

        let rt = match kv.take::<String>("temporal_resolution")? {
            None => None,
            Some(s) if s == "auto" => Some(AUTO),
            Some(s) => Some(
                s.parse()
                    .map_err(|_| Error::Config(format!("invalid temporal_resolution {s:?}")))?,
            ),
        };
        if let Some(n) = kv.take::<usize>("tiers")? {
            self.tiers = TierConfig::desk(n, rt.unwrap_or(AUTO));
        } else if let Some(rt) = rt {
            self.tiers.tiers.iter_mut().for_each(|t| t.temporal_resolution = rt);
        }
        for (k, tier) in self.tiers.tiers.iter_mut().enumerate() {
            kv.set(&format!("tier{k}.feature_dim"), &mut tier.feature_dim)?;
            kv.set(&format!("tier{k}.spatial_resolution"), &mut tier.spatial_resolution)?;
            kv.set(&format!("tier{k}.temporal_resolution"), &mut tier.temporal_resolution)?;
            kv.set(&format!("tier{k}.downsample"), &mut tier.downsample)?;
            kv.set(&format!("tier{k}.field_features"), &mut tier.field_features)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.samples_per_ray == 0 {
            return Err(Error::Config("samples_per_ray must be at least 1".into()));
        }
        if !(self.tv_weight >= 0.0) {
            return Err(Error::Config("tv_weight must be non-negative".into()));
        }
        if let (Some(n), Some(f)) = (self.near, self.far) {
            if !(0.0 < n && n < f) {
                return Err(Error::Config(format!("need 0 < near < far, got {n} and {f}")));
            }
        }
        let mut probe = self.tiers.clone();
        probe
            .tiers
            .iter_mut()
            .for_each(|t| t.temporal_resolution = t.temporal_resolution.max(1));
        probe.validate()
    }

    /// Tier layout with automatic temporal resolutions replaced by `timestamps`.
    pub fn resolved_tiers(&self, timestamps: usize) -> TierConfig {
        let mut t = self.tiers.clone();
        for tier in &mut t.tiers {
            if tier.temporal_resolution == AUTO {
                tier.temporal_resolution = timestamps.max(2);
            }
        }
        t
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "learning_rate = {:?}", self.learning_rate);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "samples_per_ray = {}", self.samples_per_ray);
        if let Some(n) = self.near {
            let _ = writeln!(s, "near = {n:?}");
        }
        if let Some(f) = self.far {
            let _ = writeln!(s, "far = {f:?}");
        }
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "tv_weight = {:?}", self.tv_weight);
        let _ = writeln!(s, "cosine_decay = {}", self.cosine_decay);
        let _ = writeln!(s, "checkpoint_interval = {}", self.checkpoint_interval);
        let _ = writeln!(s, "validation_interval = {}", self.validation_interval);
        let _ = writeln!(s, "stratified = {}", self.stratified);
        let _ = writeln!(s, "final_convs = {}", self.final_convs);
        let _ = writeln!(s, "freeze_dynamic = {}", self.freeze_dynamic);
        let _ = writeln!(s, "tiers = {}", self.tiers.n_tiers());
        for (k, t) in self.tiers.tiers.iter().enumerate() {
            let _ = writeln!(s, "tier{k}.feature_dim = {}", t.feature_dim);
            let _ = writeln!(s, "tier{k}.spatial_resolution = {}", t.spatial_resolution);
            let _ = writeln!(s, "tier{k}.temporal_resolution = {}", t.temporal_resolution);
            let _ = writeln!(s, "tier{k}.downsample = {}", t.downsample);
            let _ = writeln!(s, "tier{k}.field_features = {}", t.field_features);
        }
        s
    }
}

/// Synthetic scene knobs; see [`SyntheticSceneSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub frames: usize,
    pub sprites: usize,
    pub sprite_size: f64,
    pub ground_extent: f64,
    /// `hover` or `orbit`.
    pub camera: String,
    pub altitude: f64,
    pub jitter: f64,
    pub orbit_radius: f64,
    pub val_midpoints: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            focal: 96.0,
            frames: 30,
            sprites: 2,
            sprite_size: crate::dataset::synthetic::DESK_SPRITE_SIZE,
            ground_extent: 0.75,
            camera: "hover".into(),
            altitude: 2.5,
            jitter: 0.0,
            orbit_radius: 1.0,
            val_midpoints: true,
        }
    }
}

impl SynthConfig {
    /// Consumes `synth.*` keys.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.set("synth.width", &mut self.width)?;
        kv.set("synth.height", &mut self.height)?;
        kv.set("synth.focal", &mut self.focal)?;
        kv.set("synth.frames", &mut self.frames)?;
        kv.set("synth.sprites", &mut self.sprites)?;
        kv.set("synth.sprite_size", &mut self.sprite_size)?;
        kv.set("synth.ground_extent", &mut self.ground_extent)?;
        kv.set("synth.camera", &mut self.camera)?;
        kv.set("synth.altitude", &mut self.altitude)?;
        kv.set("synth.jitter", &mut self.jitter)?;
        kv.set("synth.orbit_radius", &mut self.orbit_radius)?;
        kv.set("synth.val_midpoints", &mut self.val_midpoints)?;
        if self.camera != "hover" && self.camera != "orbit" {
            return Err(Error::Config(format!(
                "synth.camera must be hover or orbit, got {:?}",
                self.camera
            )));
        }
        Ok(())
    }

    /// Scene spec: the desk sprites first, then seeded random linear paths.
    pub fn to_spec(&self, seed: u64) -> SyntheticSceneSpec {
        let mut spec = SyntheticSceneSpec::desk(seed);
        spec.width = self.width;
        spec.height = self.height;
        spec.focal = self.focal;
        spec.frames = self.frames;
        spec.ground_extent = self.ground_extent;
        spec.val_midpoints = self.val_midpoints;
        spec.camera = if self.camera == "orbit" {
            CameraPath::Orbit {
                radius: self.orbit_radius,
                altitude: self.altitude,
            }
        } else {
            CameraPath::Hover {
                altitude: self.altitude,
                jitter: self.jitter,
            }
        };
        spec.sprites.truncate(self.sprites);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5971);
        let reach = (self.ground_extent - self.sprite_size).max(0.0);
        while spec.sprites.len() < self.sprites {
            let mut p = || [rng.random_range(-reach..=reach), rng.random_range(-reach..=reach)];
            let (start, end) = (p(), p());
            spec.sprites.push(Sprite {
                size: self.sprite_size,
                color_seed: seed.wrapping_add(spec.sprites.len() as u64 + 1),
                trajectory: Trajectory::Linear { start, end },
            });
        }
        for s in &mut spec.sprites {
            s.size = self.sprite_size;
        }
        spec
    }
}

/// Everything a config file can set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSettings {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Write rendered validation frames next to the report.
    pub dump_images: bool,
}

impl RunSettings {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KeyValues::parse(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mut s = Self::default();
        s.train.apply(&mut kv)?;
        s.synth.apply(&mut kv)?;
        kv.set("eval.dump_images", &mut s.dump_images)?;
        kv.finish()?;
        Ok(s)
    }
}
