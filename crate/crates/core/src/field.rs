//! Density/feature heads and volumetric accumulation of per-tier feature maps.

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{generate_rays, normalize_to_scene, sample_uniform, CameraPose, Rays, SceneBounds};
use crate::error::{contract_err, dim_err, Result};
use crate::planes::{combine, sample_dynamic, sample_static, PlaneSet, SpacetimePoint};
use crate::tensor::{CustomOp, Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const HIDDEN_WIDTH: usize = 64;

/// Fully connected layer computing `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform weights with variance `gain / fan_in`, zero bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = (3.0 * gain / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| T::of(rng.random_range(-bound..=bound)))
            .collect();
        let weight = store.insert(format!("{name}/weight"), Tensor::new(&[fan_in, fan_out], w)?)?;
        let bias = store.insert(format!("{name}/bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(&self, graph: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = graph.param(self.weight);
        let b = graph.param(self.bias);
        let y = graph.matmul(x, w)?;
        graph.add(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Exponential,
}

/// Two relu hidden layers of width [`HIDDEN_WIDTH`] and an output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output: OutputActivation,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        activation: OutputActivation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let layers = vec![
            Linear::new(store, &format!("{name}/0"), input, HIDDEN_WIDTH, 2.0, rng)?,
            Linear::new(store, &format!("{name}/1"), HIDDEN_WIDTH, HIDDEN_WIDTH, 2.0, rng)?,
            Linear::new(store, &format!("{name}/2"), HIDDEN_WIDTH, output, 1.0, rng)?,
        ];
        Ok(Self {
            layers,
            output: activation,
        })
    }

    pub fn forward<T: Real>(&self, graph: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let width = graph.shape(x).get(1).copied().unwrap_or(0);
        if width != self.layers[0].fan_in {
            return Err(dim_err!(
                "mlp expects {} input features, got {width}",
                self.layers[0].fan_in
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(graph, h)?;
            if i < last {
                h = graph.relu(h)?;
            }
        }
        match self.output {
            OutputActivation::Identity => Ok(h),
            OutputActivation::Exponential => graph.exp(h),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

/// Per-tier density head (`D → 1`, exponential output) and feature head
/// (`D → F`, linear output), shared by the static and dynamic streams.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldHeads {
    pub density: Mlp,
    pub features: Mlp,
}

impl FieldHeads {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        tier: usize,
        feature_dim: usize,
        field_features: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            density: Mlp::new(
                store,
                &format!("tier{tier}/heads/density"),
                feature_dim,
                1,
                OutputActivation::Exponential,
                &mut rng,
            )?,
            features: Mlp::new(
                store,
                &format!("tier{tier}/heads/features"),
                feature_dim,
                field_features,
                OutputActivation::Identity,
                &mut rng,
            )?,
        })
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.density.params().chain(self.features.params())
    }
}

/// Runs both heads over every row of a combined batch: `(sigmas [M,1], features [M,F])`.
pub fn query_field<T: Real>(graph: &mut Graph<'_, T>, heads: &FieldHeads, combined: Var) -> Result<(Var, Var)> {
    let sigmas = heads.density.forward(graph, combined)?;
    let features = heads.features.forward(graph, combined)?;
    Ok((sigmas, features))
}

/// Accumulates one ray: `w_i = T_i (1 - exp(-σ_i δ_i))`,
/// `T_i = exp(-Σ_{j<i} σ_j δ_j)`, output `Σ w_i f_i`.
///
/// `features` holds `S` rows of width `F`. Returns `(pixel_feature, weights)`.
pub fn volumetric_accumulate<T: Real>(sigmas: &[T], features: &[T], deltas: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let s = sigmas.len();
    if deltas.len() != s || (s > 0 && !features.len().is_multiple_of(s)) || (s == 0 && !features.is_empty()) {
        return Err(dim_err!(
            "volumetric_accumulate: {} sigmas, {} deltas, {} feature values",
            s,
            deltas.len(),
            features.len()
        ));
    }
    if let Some(i) = sigmas.iter().position(|v| !(*v >= T::zero())) {
        return Err(contract_err!("negative or invalid density at sample {i}"));
    }
    if let Some(i) = deltas.iter().position(|v| !(*v > T::zero())) {
        return Err(contract_err!("non-positive step size at sample {i}"));
    }
    let f = features.len().checked_div(s).unwrap_or(0);
    let weights = ray_weights(sigmas, deltas);
    let mut out = vec![T::zero(); f];
    for (i, &w) in weights.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(&features[i * f..(i + 1) * f]) {
            *o += w * x;
        }
    }
    Ok((out, weights))
}

fn ray_weights<T: Real>(sigmas: &[T], deltas: &[T]) -> Vec<T> {
    let mut depth = T::zero();
    sigmas
        .iter()
        .zip(deltas)
        .map(|(&s, &d)| {
            let tau = s * d;
            let w = (-depth).exp() * (T::one() - (-tau).exp());
            depth += tau;
            w
        })
        .collect()
}

/// Batched accumulation over `rays` rays of `samples` samples each.
/// Inputs: sigmas `[R·S, 1]` and features `[R·S, F]`, rows ray-major.
/// Output: `[R, F]`.
pub struct VolumeRender<T> {
    pub rays: usize,
    pub samples: usize,
    pub deltas: Vec<T>,
}

impl<T: Real> CustomOp<T> for VolumeRender<T> {
    fn name(&self) -> &'static str {
        "volume_render"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let [sig, feat] = inputs else {
            return Err(contract_err!("volume_render takes sigmas and features"));
        };
        let n = self.rays * self.samples;
        if sig.numel() != n || self.deltas.len() != n || feat.shape().len() != 2 || feat.shape()[0] != n {
            return Err(dim_err!(
                "volume_render: {} rays x {} samples vs sigmas {:?}, features {:?}",
                self.rays,
                self.samples,
                sig.shape(),
                feat.shape()
            ));
        }
        let f = feat.shape()[1];
        let s = self.samples;
        let mut out = Vec::with_capacity(self.rays * f);
        for r in 0..self.rays {
            let (px, _) = volumetric_accumulate(
                &sig.data()[r * s..(r + 1) * s],
                &feat.data()[r * s * f..(r + 1) * s * f],
                &self.deltas[r * s..(r + 1) * s],
            )?;
            out.extend(px);
        }
        Tensor::new(&[self.rays, f], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &[T],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (sig, feat) = (inputs[0], inputs[1]);
        let f = feat.shape()[1];
        let s = self.samples;
        let mut g_sig = needs_grad[0].then(|| vec![T::zero(); sig.numel()]);
        let mut g_feat = needs_grad[1].then(|| vec![T::zero(); feat.numel()]);
        let mut gw = vec![T::zero(); s];
        for r in 0..self.rays {
            let sg = &sig.data()[r * s..(r + 1) * s];
            let dl = &self.deltas[r * s..(r + 1) * s];
            let fr = &feat.data()[r * s * f..(r + 1) * s * f];
            let go = &grad_output[r * f..(r + 1) * f];
            let w = ray_weights(sg, dl);
            if let Some(gf) = g_feat.as_mut() {
                let gf = &mut gf[r * s * f..(r + 1) * s * f];
                for i in 0..s {
                    for c in 0..f {
                        gf[i * f + c] = w[i] * go[c];
                    }
                }
            }
            if let Some(gs) = g_sig.as_mut() {
                // dL/dw_i, then dL/dσ_k = δ_k (g_k T_{k+1} - Σ_{i>k} g_i w_i).
                for i in 0..s {
                    gw[i] = (0..f).fold(T::zero(), |acc, c| acc + go[c] * fr[i * f + c]);
                }
                let mut depth = T::zero();
                let mut suffix: T = (0..s).fold(T::zero(), |acc, i| acc + gw[i] * w[i]);
                for k in 0..s {
                    depth += sg[k] * dl[k];
                    suffix -= gw[k] * w[k];
                    let t_next = (-depth).exp();
                    gs[r * s + k] = dl[k] * (gw[k] * t_next - suffix);
                }
            }
        }
        vec![g_sig, g_feat]
    }
}

/// Accumulates the static and dynamic halves of a combined batch into two
/// `[R, F]` tensors.
pub fn accumulate_streams<T: Real>(
    graph: &mut Graph<'_, T>,
    sigmas: Var,
    features: Var,
    rays: usize,
    samples: usize,
    deltas: &[T],
) -> Result<(Var, Var)> {
    let n = rays * samples;
    if graph.shape(sigmas)[0] != 2 * n {
        return Err(dim_err!(
            "expected {} combined rows, got {}",
            2 * n,
            graph.shape(sigmas)[0]
        ));
    }
    let mut streams = [None, None];
    for (k, slot) in streams.iter_mut().enumerate() {
        let s = graph.slice_rows(sigmas, k * n, (k + 1) * n)?;
        let f = graph.slice_rows(features, k * n, (k + 1) * n)?;
        let op = VolumeRender {
            rays,
            samples,
            deltas: deltas.to_vec(),
        };
        *slot = Some(graph.custom(Box::new(op), &[s, f])?);
    }
    let [Some(a), Some(b)] = streams else { unreachable!() };
    Ok((a, b))
}

/// Per-tier field: planes plus heads.
#[derive(Clone, Debug, PartialEq)]
pub struct TierField {
    pub planes: PlaneSet,
    pub heads: FieldHeads,
}

/// Static and dynamic `[F, h, w]` maps of one tier.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMaps {
    pub static_map: Var,
    pub dynamic_map: Var,
    pub height: usize,
    pub width: usize,
}

/// How samples are placed along rays.
pub struct Sampling<'a> {
    pub samples_per_ray: usize,
    /// Stratified jitter source; `None` places samples at sub-interval midpoints.
    pub jitter: Option<&'a mut ChaCha8Rng>,
}

/// Renders one tier's maps from rays already cast at that tier's resolution.
pub fn render_tier<T: Real>(
    graph: &mut Graph<'_, T>,
    field: &TierField,
    camera: &CameraPose,
    rays: &Rays,
    bounds: &SceneBounds,
    sampling: &mut Sampling<'_>,
) -> Result<FeatureMaps> {
    let ds = field.planes.spec.downsample;
    if rays.map_w * ds != camera.width || rays.map_h * ds != camera.height {
        return Err(contract_err!(
            "tier {} expects {}x{} rays for a {}x{} image, got {}x{}",
            field.planes.tier,
            camera.width / ds.max(1),
            camera.height / ds.max(1),
            camera.width,
            camera.height,
            rays.map_w,
            rays.map_h
        ));
    }
    let s = sampling.samples_per_ray;
    let r = rays.len();
    let mut points = Vec::with_capacity(r * s);
    let mut deltas = Vec::with_capacity(r * s);
    for (o, d) in rays.origins.iter().zip(&rays.directions) {
        let rs = sample_uniform(bounds.near, bounds.far, s, sampling.jitter.as_deref_mut())?;
        points.extend(rs.t.iter().map(|&t| Point3::from(o + d * t)));
        deltas.extend(rs.deltas.iter().map(|&d| T::of(d)));
    }
    let pts: Vec<SpacetimePoint> = normalize_to_scene(&points, camera.timestamp, bounds);
    let fs = sample_static(graph, &field.planes, &pts)?;
    let fd = sample_dynamic(graph, &field.planes, &pts)?;
    let combined = combine(graph, fs, fd)?;
    let (sigmas, feats) = query_field(graph, &field.heads, combined)?;
    let (st, dy) = accumulate_streams(graph, sigmas, feats, r, s, &deltas)?;
    let f = field.planes.spec.field_features;
    let to_map = |graph: &mut Graph<'_, T>, v: Var| -> Result<Var> {
        let t = graph.transpose(v)?;
        graph.reshape(t, &[f, rays.map_h, rays.map_w])
    };
    Ok(FeatureMaps {
        static_map: to_map(graph, st)?,
        dynamic_map: to_map(graph, dy)?,
        height: rays.map_h,
        width: rays.map_w,
    })
}

/// Casts each tier's rays at `image / downsample` resolution and renders its maps.
pub fn render_feature_maps<T: Real>(
    graph: &mut Graph<'_, T>,
    fields: &[TierField],
    camera: &CameraPose,
    bounds: &SceneBounds,
    sampling: &mut Sampling<'_>,
) -> Result<Vec<FeatureMaps>> {
    fields
        .iter()
        .map(|field| {
            let ds = field.planes.spec.downsample;
            if !camera.width.is_multiple_of(ds) || !camera.height.is_multiple_of(ds) {
                return Err(contract_err!(
                    "image {}x{} is not divisible by tier downsample {ds}",
                    camera.width,
                    camera.height
                ));
            }
            let rays = generate_rays(camera, camera.width / ds, camera.height / ds)?;
            render_tier(graph, field, camera, &rays, bounds, sampling)
        })
        .collect()
}
