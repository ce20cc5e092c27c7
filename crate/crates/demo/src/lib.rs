//! Browser bindings for a few `tkplanes` building blocks: the synthetic
//! scene renderer, single-ray volume compositing and bilinear plane lookup.
//!
//! The plain functions are usable (and tested) natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use tkplanes::dataset::synthetic::{render_frame, GroundTexture};
use tkplanes::dataset::SyntheticSceneSpec;
use tkplanes::field::volumetric_accumulate;
use tkplanes::raster::to_rgb8;
use tkplanes::tensor::{Graph, Tensor};
use tkplanes::{Error, Result};

fn rgba(image: &Tensor<f32>) -> Result<Vec<u8>> {
    Ok(to_rgb8(image)?
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect())
}

/// A rendered frame: RGBA pixels plus one `[x_min, y_min, x_max, y_max]`
/// box per visible sprite, flattened.
#[wasm_bindgen]
pub struct SceneFrame {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    boxes: Vec<f64>,
}

#[wasm_bindgen]
impl SceneFrame {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn boxes(&self) -> Vec<f64> {
        self.boxes.clone()
    }
}

/// Desk scene for `seed` at time `t ∈ [0, 1]`, rendered at `size × size`.
pub fn scene_frame(seed: u64, t: f64, size: usize) -> Result<SceneFrame> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("time {t} outside [0, 1]")));
    }
    if !(8..=512).contains(&size) {
        return Err(Error::Contract(format!("size {size} outside 8..=512")));
    }
    let mut spec = SyntheticSceneSpec::desk(seed);
    spec.focal *= size as f64 / spec.width as f64;
    spec.width = size;
    spec.height = size;
    spec.validate()?;
    let camera = spec.camera_at(t);
    let image = render_frame(&spec, &GroundTexture::new(seed), &camera);
    let boxes = spec
        .sprites
        .iter()
        .filter_map(|s| s.project_box(&camera, t))
        .flat_map(|b| [b.x_min, b.y_min, b.x_max, b.y_max])
        .collect();
    Ok(SceneFrame {
        width: size,
        height: size,
        rgba: rgba(&image)?,
        boxes,
    })
}

/// One ray through a Gaussian density bump on depth `[0, 1]`, split into
/// `samples` equal steps. Returns four rows of length `samples`, flattened:
/// depth, density, transmittance before the sample, compositing weight.
pub fn ray_profile(center: f64, width: f64, peak: f64, samples: usize) -> Result<Vec<f64>> {
    if samples == 0 || samples > 4096 {
        return Err(Error::Contract(format!("{samples} samples outside 1..=4096")));
    }
    if !(width > 0.0) || !(peak >= 0.0) || !center.is_finite() {
        return Err(Error::Contract("width must be positive and peak non-negative".into()));
    }
    let delta = 1.0 / samples as f64;
    let depth: Vec<f64> = (0..samples).map(|i| (i as f64 + 0.5) * delta).collect();
    let sigma: Vec<f64> = depth
        .iter()
        .map(|t| peak * (-0.5 * ((t - center) / width).powi(2)).exp())
        .collect();
    let (_, weights) = volumetric_accumulate(&sigma, &[], &vec![delta; samples])?;
    let mut transmittance = Vec::with_capacity(samples);
    let mut optical = 0.0f64;
    for s in &sigma {
        transmittance.push((-optical).exp());
        optical += s * delta;
    }
    Ok([depth, sigma, transmittance, weights].concat())
}

/// A random `[3, resolution, resolution]` plane looked up bilinearly on an
/// `size × size` grid, as RGBA.
pub fn plane_preview(resolution: usize, seed: u64, size: usize) -> Result<Vec<u8>> {
    if !(2..=256).contains(&resolution) || !(1..=512).contains(&size) {
        return Err(Error::Contract(format!(
            "resolution {resolution} outside 2..=256 or size {size} outside 1..=512"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f32> = (0..3 * resolution * resolution)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let plane = Tensor::new(&[3, resolution, resolution], values)?;
    let mut coords = Vec::with_capacity(2 * size * size);
    let step = if size > 1 { 1.0 / (size - 1) as f32 } else { 0.0 };
    for row in 0..size {
        for col in 0..size {
            coords.extend([row as f32 * step, col as f32 * step]);
        }
    }
    let mut g = Graph::<f32>::new();
    let p = g.constant(plane);
    let out = g.grid_sample(p, Tensor::new(&[size * size, 2], coords)?)?;
    // [N, 3] rows back to a [3, H, W] image
    let t = g.transpose(out)?;
    let img = g.reshape(t, &[3, size, size])?;
    rgba(g.value(img))
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = sceneFrame)]
pub fn scene_frame_js(seed: u32, t: f64, size: usize) -> std::result::Result<SceneFrame, JsError> {
    scene_frame(u64::from(seed), t, size).map_err(js)
}

#[wasm_bindgen(js_name = rayProfile)]
pub fn ray_profile_js(center: f64, width: f64, peak: f64, samples: usize) -> std::result::Result<Vec<f64>, JsError> {
    ray_profile(center, width, peak, samples).map_err(js)
}

#[wasm_bindgen(js_name = planePreview)]
pub fn plane_preview_js(resolution: usize, seed: u32, size: usize) -> std::result::Result<Vec<u8>, JsError> {
    plane_preview(resolution, u64::from(seed), size).map_err(js)
}
