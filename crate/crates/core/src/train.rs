//! Full-image training: render every tier, decode, MSE against the frame,
//! backpropagate, one Adam step.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{CameraPose, SceneBounds};
use crate::config::TrainConfig;
use crate::dataset::Frame;
use crate::error::{Error, Result};
use crate::eval::psnr;
use crate::model::{save_checkpoint, CheckpointInfo, ModelConfig, TkPlanes};
use crate::raster::RgbImage;
use crate::tensor::{adam_step, AdamState, CustomOp, Graph, Real, Tensor, Var};

const ORDER_STREAM: u64 = 0x6f72_6465;
const JITTER_STREAM: u64 = 0x6a69_7474;
/// Iterations averaged into a checkpoint's running loss.
const RUNNING_WINDOW: usize = 100;

/// Mean squared difference of neighbouring texels of a `[D, A, B]` plane,
/// along both plane axes.
#[derive(Clone, Debug)]
pub struct PlaneTv;

impl<T: Real> CustomOp<T> for PlaneTv {
    fn name(&self) -> &'static str {
        "plane_tv"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let p = inputs[0];
        let [d, a, b] = *p.shape() else {
            return Err(Error::Dimension(format!(
                "plane_tv expects [D, A, B], got {:?}",
                p.shape()
            )));
        };
        let x = p.data();
        let mut sum = T::zero();
        let count = d * ((a - 1) * b + a * (b - 1));
        for c in 0..d {
            for i in 0..a {
                for j in 0..b {
                    let v = x[(c * a + i) * b + j];
                    if i + 1 < a {
                        let e = x[(c * a + i + 1) * b + j] - v;
                        sum += e * e;
                    }
                    if j + 1 < b {
                        let e = x[(c * a + i) * b + j + 1] - v;
                        sum += e * e;
                    }
                }
            }
        }
        let n = T::of(count.max(1) as f64);
        Ok(Tensor::scalar(sum / n))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad_output: &[T],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        if !needs_grad[0] {
            return vec![None];
        }
        let p = inputs[0];
        let (d, a, b) = (p.shape()[0], p.shape()[1], p.shape()[2]);
        let x = p.data();
        let count = d * ((a - 1) * b + a * (b - 1));
        let k = grad_output[0] * T::of(2.0) / T::of(count.max(1) as f64);
        let mut g = vec![T::zero(); x.len()];
        for c in 0..d {
            for i in 0..a {
                for j in 0..b {
                    let idx = (c * a + i) * b + j;
                    if i + 1 < a {
                        let e = (x[idx + b] - x[idx]) * k;
                        g[idx + b] += e;
                        g[idx] -= e;
                    }
                    if j + 1 < b {
                        let e = (x[idx + 1] - x[idx]) * k;
                        g[idx + 1] += e;
                        g[idx] -= e;
                    }
                }
            }
        }
        vec![Some(g)]
    }
}

/// Sum of [`PlaneTv`] over every plane of every tier.
fn tv_term(graph: &mut Graph<'_, f32>, model: &TkPlanes) -> Result<Var> {
    let mut total: Option<Var> = None;
    for f in &model.fields {
        for id in f.planes.all() {
            let p = graph.param(id);
            let t = graph.custom(Box::new(PlaneTv), &[p])?;
            total = Some(match total {
                None => t,
                Some(acc) => graph.add(acc, t)?,
            });
        }
    }
    total.ok_or_else(|| Error::Contract("model has no planes".into()))
}

/// One optimization step on one frame; returns the loss before the update.
pub fn train_step(
    model: &mut TkPlanes,
    adam: &mut AdamState<f32>,
    camera: &CameraPose,
    target: &RgbImage,
    jitter: Option<&mut ChaCha8Rng>,
    tv_weight: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::with_params(&model.store);
        let img = model.forward(&mut g, camera, jitter)?;
        let mut loss = g.mse(img, target)?;
        if tv_weight > 0.0 {
            let tv = tv_term(&mut g, model)?;
            let tv = g.scale(tv, tv_weight as f32)?;
            loss = g.add(loss, tv)?;
        }
        let value = f64::from(g.value(loss).item()?);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss ({value})")));
        }
        (value, g.backward(loss)?)
    };
    model.store.accumulate(&grads);
    adam_step(&mut model.store, adam)?;
    Ok(loss)
}

/// A fresh model sized for `width × height` frames inside `bounds`, with
/// `timestamps` distinct training times.
pub fn build_model(
    config: &TrainConfig,
    width: usize,
    height: usize,
    mut bounds: SceneBounds,
    timestamps: usize,
) -> Result<TkPlanes> {
    config.validate()?;
    if let Some(n) = config.near {
        bounds.near = n;
    }
    if let Some(f) = config.far {
        bounds.far = f;
    }
    let model_config = ModelConfig {
        tiers: config.resolved_tiers(timestamps),
        width,
        height,
        samples_per_ray: config.samples_per_ray,
        final_convs: config.final_convs,
    };
    let mut model = TkPlanes::new(model_config, bounds, config.seed)?;
    if config.freeze_dynamic {
        model.freeze_dynamic();
    }
    Ok(model)
}

/// Number of distinct timestamps among `frames`.
pub fn distinct_timestamps(frames: &[Frame]) -> usize {
    let mut t: Vec<f64> = frames.iter().map(|f| f.record.timestamp()).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t.len()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

/// `iteration,loss,wall_ms`; without `timing` the wall-clock column is empty.
pub fn loss_log_csv(log: &[LossRecord], timing: bool) -> String {
    let mut s = String::from("iteration,loss,wall_ms\n");
    for r in log {
        let ms = if timing {
            format!("{:.3}", r.wall_ms)
        } else {
            String::new()
        };
        let _ = writeln!(s, "{},{:.9e},{}", r.iteration, r.loss, ms);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TkPlanes,
    pub log: Vec<LossRecord>,
    pub info: CheckpointInfo,
}

fn running_loss(log: &[LossRecord]) -> f64 {
    let tail = &log[log.len().saturating_sub(RUNNING_WINDOW)..];
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
    }
}

/// Mean PSNR of deterministic renders of `frames`.
pub fn mean_psnr(model: &TkPlanes, frames: &[Frame]) -> Result<f64> {
    let mut sum = 0.0;
    for f in frames {
        sum += psnr(&f.image, &model.render(&f.record.pose)?)?;
    }
    Ok(sum / frames.len().max(1) as f64)
}

/// Trains on `frames` for `config.iterations` steps, visiting frames in a
/// seeded shuffled order (reshuffled every pass). With `out_dir`, writes
/// `loss_log.csv`, periodic `checkpoint_NNNNNN.tkpc` files and a final
/// `checkpoint.tkpc`.
pub fn train(
    mut model: TkPlanes,
    frames: &[Frame],
    val: &[Frame],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::Contract("training needs at least one frame".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut adam = AdamState::new(&model.store, config.learning_rate as f32);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ ORDER_STREAM);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(config.seed ^ JITTER_STREAM);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.iterations);
    let start = Instant::now();
    let info_at = |log: &[LossRecord], iteration| CheckpointInfo {
        train: config.clone(),
        iteration,
        running_loss: running_loss(log),
    };

    for it in 0..config.iterations {
        if order.is_empty() {
            order = (0..frames.len()).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let frame = &frames[order.pop().expect("refilled above")];
        if config.cosine_decay {
            let progress = it as f64 / config.iterations as f64;
            adam.learning_rate = (config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32;
        }
        let jitter = config.stratified.then_some(&mut jitter_rng);
        let loss = train_step(
            &mut model,
            &mut adam,
            &frame.record.pose,
            &frame.image,
            jitter,
            config.tv_weight,
        )
        .map_err(|e| match e {
            Error::NonFinite(what) => {
                Error::NonFinite(format!("{what} at iteration {it} on {}", frame.record.image.display()))
            }
            other => other,
        })?;
        log.push(LossRecord {
            iteration: it,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        let done = it + 1;
        if done % 100 == 0 || done == config.iterations {
            log::info!("iteration {done}/{}: loss {:.6}", config.iterations, running_loss(&log));
        }
        if config.validation_interval > 0 && done % config.validation_interval == 0 && !val.is_empty() {
            log::info!("iteration {done}: validation PSNR {:.2} dB", mean_psnr(&model, val)?);
        }
        if let Some(dir) = out_dir {
            if config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 && done < config.iterations {
                save_checkpoint(
                    &dir.join(format!("checkpoint_{done:06}.tkpc")),
                    &model,
                    &info_at(&log, done),
                )?;
            }
        }
    }

    let info = info_at(&log, config.iterations);
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("checkpoint.tkpc"), &model, &info)?;
        let path = dir.join("loss_log.csv");
        std::fs::write(&path, loss_log_csv(&log, true)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome { model, log, info })
}
