//! The full model: per-tier planes and heads, the image decoder, and the
//! scene box they live in.

use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::camera::{CameraPose, SceneBounds};
use crate::config::{KeyValues, TrainConfig};
use crate::decoder::{blocks_for, Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::field::{render_feature_maps, FieldHeads, Sampling, TierField};
use crate::planes::{init_planes, TierConfig};
use crate::raster::RgbImage;
use crate::tensor::container::Container;
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Structural settings fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub tiers: TierConfig,
    pub width: usize,
    pub height: usize,
    pub samples_per_ray: usize,
    pub final_convs: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tiers.validate()?;
        let t0 = &self.tiers.tiers[0];
        if !self.width.is_multiple_of(t0.downsample) || !self.height.is_multiple_of(t0.downsample) {
            return Err(Error::Config(format!(
                "{}x{} images are not divisible by the tier-0 downsample {}",
                self.width, self.height, t0.downsample
            )));
        }
        if self.samples_per_ray == 0 {
            return Err(Error::Config("samples_per_ray must be at least 1".into()));
        }
        Ok(())
    }

    /// Feature-map rays rendered per image, summed over tiers.
    pub fn rays_per_image(&self) -> usize {
        self.tiers
            .tiers
            .iter()
            .map(|t| (self.width / t.downsample) * (self.height / t.downsample))
            .sum()
    }
}

/// Parameter groups, for optimizer bookkeeping and ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Planes,
    Heads,
    Decoder,
}

#[derive(Clone, Debug)]
pub struct TkPlanes {
    pub config: ModelConfig,
    pub bounds: SceneBounds,
    pub store: ParamStore<f32>,
    pub fields: Vec<TierField>,
    pub decoder: Decoder,
}

impl TkPlanes {
    pub fn new(config: ModelConfig, bounds: SceneBounds, seed: u64) -> Result<Self> {
        config.validate()?;
        bounds.validate()?;
        let mut store = ParamStore::new();
        let planes = init_planes(&config.tiers, seed, &mut store)?;
        let mut fields = Vec::with_capacity(planes.len());
        for (k, set) in planes.into_iter().enumerate() {
            let spec = set.spec;
            let heads = FieldHeads::new(
                &mut store,
                k,
                spec.feature_dim,
                spec.field_features,
                seed.wrapping_add(1000 + k as u64),
            )?;
            fields.push(TierField { planes: set, heads });
        }
        let t0 = &config.tiers.tiers[0];
        let n_blocks = blocks_for(
            config.height / t0.downsample,
            config.width / t0.downsample,
            config.height,
            config.width,
        )?;
        let decoder = Decoder::new(
            DecoderConfig {
                tier_channels: config.tiers.tiers.iter().map(|t| t.field_features).collect(),
                n_blocks,
                final_convs: config.final_convs,
            },
            &mut store,
            seed.wrapping_add(2000),
        )?;
        Ok(Self {
            config,
            bounds,
            store,
            fields,
            decoder,
        })
    }

    pub fn group(&self, group: ParamGroup) -> Vec<ParamId> {
        match group {
            ParamGroup::Planes => self
                .fields
                .iter()
                .flat_map(|f| f.planes.all().collect::<Vec<_>>())
                .collect(),
            ParamGroup::Heads => self
                .fields
                .iter()
                .flat_map(|f| f.heads.params().collect::<Vec<_>>())
                .collect(),
            ParamGroup::Decoder => self.decoder.params().collect(),
        }
    }

    /// Dynamic spatial and temporal planes of every tier.
    pub fn dynamic_planes(&self) -> Vec<ParamId> {
        self.fields
            .iter()
            .flat_map(|f| f.planes.dynamic().collect::<Vec<_>>())
            .collect()
    }

    pub fn freeze_dynamic(&mut self) {
        for id in self.dynamic_planes() {
            self.store.set_requires_grad(id, false);
        }
    }

    /// Builds the render → decode graph for `camera`; returns the `[3, H, W]` image.
    pub fn forward(
        &self,
        graph: &mut Graph<'_, f32>,
        camera: &CameraPose,
        jitter: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if camera.width != self.config.width || camera.height != self.config.height {
            return Err(Error::Config(format!(
                "model renders {}x{} images, camera is {}x{}",
                self.config.width, self.config.height, camera.width, camera.height
            )));
        }
        let mut sampling = Sampling {
            samples_per_ray: self.config.samples_per_ray,
            jitter,
        };
        let maps = render_feature_maps(graph, &self.fields, camera, &self.bounds, &mut sampling)?;
        self.decoder.decode_image(graph, &maps, camera.height, camera.width)
    }

    /// Deterministic render with samples at sub-interval midpoints.
    pub fn render(&self, camera: &CameraPose) -> Result<RgbImage> {
        let mut g = Graph::with_params(&self.store);
        let img = self.forward(&mut g, camera, None)?;
        Ok(g.value(img).clone())
    }
}

/// Training state stored alongside the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub train: TrainConfig,
    pub iteration: usize,
    /// Mean loss over the most recent iterations.
    pub running_loss: f64,
}

const MAGIC_KEY: &str = "checkpoint.format";
const MAGIC: &str = "tkplanes-1";

fn meta_text(model: &TkPlanes, info: &CheckpointInfo) -> String {
    let mut s = String::new();
    let b = &model.bounds;
    let _ = writeln!(s, "{MAGIC_KEY} = {MAGIC}");
    let _ = writeln!(s, "checkpoint.iteration = {}", info.iteration);
    let _ = writeln!(s, "checkpoint.running_loss = {:?}", info.running_loss);
    let _ = writeln!(s, "checkpoint.width = {}", model.config.width);
    let _ = writeln!(s, "checkpoint.height = {}", model.config.height);
    for (i, v) in b.min.iter().chain(&b.max).chain([&b.near, &b.far]).enumerate() {
        let _ = writeln!(s, "checkpoint.bounds{i} = {v:?}");
    }
    // the model's own structure wins over whatever the run config said
    let mut train = info.train.clone();
    train.tiers = model.config.tiers.clone();
    train.samples_per_ray = model.config.samples_per_ray;
    train.final_convs = model.config.final_convs;
    s + &train.to_text()
}

pub fn checkpoint_container(model: &TkPlanes, info: &CheckpointInfo) -> Container {
    Container::from_params(&model.store, meta_text(model, info))
}

pub fn save_checkpoint(path: &Path, model: &TkPlanes, info: &CheckpointInfo) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    checkpoint_container(model, info).write(path)
}

pub fn model_from_container(c: &Container) -> Result<(TkPlanes, CheckpointInfo)> {
    let ck = |e: Error| Error::Checkpoint(e.to_string());
    let mut kv = KeyValues::parse(&c.meta).map_err(ck)?;
    let mut own = kv.split_prefix("checkpoint.");
    if own.take::<String>(MAGIC_KEY).map_err(ck)?.as_deref() != Some(MAGIC) {
        return Err(Error::Checkpoint("metadata lacks the checkpoint format marker".into()));
    }
    let mut need = |key: &str| -> Result<f64> {
        own.take::<f64>(&format!("checkpoint.{key}"))
            .map_err(ck)?
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks checkpoint.{key}")))
    };
    let iteration = need("iteration")? as usize;
    let running_loss = need("running_loss")?;
    let width = need("width")? as usize;
    let height = need("height")? as usize;
    let mut bv = [0.0; 8];
    for (i, slot) in bv.iter_mut().enumerate() {
        *slot = need(&format!("bounds{i}"))?;
    }
    own.finish().map_err(ck)?;
    let mut train = TrainConfig::default();
    train.apply(&mut kv).map_err(ck)?;
    kv.finish().map_err(ck)?;

    let bounds = SceneBounds {
        min: [bv[0], bv[1], bv[2]],
        max: [bv[3], bv[4], bv[5]],
        near: bv[6],
        far: bv[7],
    };
    let config = ModelConfig {
        tiers: train.tiers.clone(),
        width,
        height,
        samples_per_ray: train.samples_per_ray,
        final_convs: train.final_convs,
    };
    let mut model = TkPlanes::new(config, bounds, train.seed).map_err(ck)?;
    if c.arrays.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} arrays, the model has {} parameters",
            c.arrays.len(),
            model.store.len()
        )));
    }
    c.load_into(&mut model.store)?;
    if train.freeze_dynamic {
        model.freeze_dynamic();
    }
    Ok((
        model,
        CheckpointInfo {
            train,
            iteration,
            running_loss,
        },
    ))
}

pub fn load_checkpoint(path: &Path) -> Result<(TkPlanes, CheckpointInfo)> {
    model_from_container(&Container::read(path)?)
}
