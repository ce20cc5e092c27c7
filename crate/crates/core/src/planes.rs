//! Tiered factored feature planes.
//!
//! Each tier owns nine `[D, R_a, R_b]` planes: three static spatial planes
//! (xy, xz, yz), three dynamic spatial planes (xy, xz, yz) and three dynamic
//! spatio-temporal planes (xt, yt, zt). A point's static feature is the
//! Hadamard product of its three static samples; its dynamic feature is the
//! product of the six dynamic samples. The two are stacked along the batch
//! axis so downstream heads treat them as independent rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Query point with every component normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpacetimePoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub t: f64,
}

impl SpacetimePoint {
    pub fn clamped(self) -> Self {
        let c = |v: f64| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        Self {
            x: c(self.x),
            y: c(self.y),
            z: c(self.z),
            t: c(self.t),
        }
    }

    fn axis(&self, a: Axis) -> f64 {
        match a {
            Axis::X => self.x,
            Axis::Y => self.y,
            Axis::Z => self.z,
            Axis::T => self.t,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
    T,
}

impl Axis {
    fn letter(self) -> char {
        match self {
            Axis::X => 'x',
            Axis::Y => 'y',
            Axis::Z => 'z',
            Axis::T => 't',
        }
    }
}

pub const SPATIAL_PAIRS: [(Axis, Axis); 3] = [(Axis::X, Axis::Y), (Axis::X, Axis::Z), (Axis::Y, Axis::Z)];
pub const TEMPORAL_PAIRS: [(Axis, Axis); 3] = [(Axis::X, Axis::T), (Axis::Y, Axis::T), (Axis::Z, Axis::T)];

/// Resolution and width settings of one tier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TierSpec {
    /// Plane feature dimension `D`.
    pub feature_dim: usize,
    /// Spatial plane resolution `R`.
    pub spatial_resolution: usize,
    /// Temporal plane resolution `R_t`.
    pub temporal_resolution: usize,
    /// Image-to-feature-map downsample factor `d_s`.
    pub downsample: usize,
    /// Width `F` of the rendered feature vectors.
    pub field_features: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TierConfig {
    pub tiers: Vec<TierSpec>,
}

impl TierConfig {
    /// Desk-scale defaults: tier 0 renders at 1/16 resolution with `R = 64`
    /// and `F = 32`; each further tier doubles `R` and halves `d_s` and `F`.
    pub fn desk(n_tiers: usize, temporal_resolution: usize) -> Self {
        Self {
            tiers: (0..n_tiers)
                .map(|k| TierSpec {
                    feature_dim: 16,
                    spatial_resolution: 64 << k,
                    temporal_resolution,
                    downsample: 16 >> k,
                    field_features: (32 >> k).max(2),
                })
                .collect(),
        }
    }

    pub fn n_tiers(&self) -> usize {
        self.tiers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiers.is_empty() {
            return Err(Error::Config("at least one tier is required".into()));
        }
        for (k, t) in self.tiers.iter().enumerate() {
            let dims = [
                t.feature_dim,
                t.spatial_resolution,
                t.temporal_resolution,
                t.downsample,
                t.field_features,
            ];
            if dims.contains(&0) {
                return Err(Error::Config(format!("tier {k} has a zero dimension: {t:?}")));
            }
            if k > 0 && t.downsample * 2 != self.tiers[k - 1].downsample {
                return Err(Error::Config(format!(
                    "tier {k} downsample {} must be half of tier {} ({})",
                    t.downsample,
                    k - 1,
                    self.tiers[k - 1].downsample
                )));
            }
        }
        Ok(())
    }
}

/// Handles to the nine planes of one tier inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneSet {
    pub tier: usize,
    pub spec: TierSpec,
    pub static_planes: [ParamId; 3],
    pub dynamic_spatial_planes: [ParamId; 3],
    pub dynamic_temporal_planes: [ParamId; 3],
}

impl PlaneSet {
    pub fn all(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.static_planes
            .iter()
            .chain(&self.dynamic_spatial_planes)
            .chain(&self.dynamic_temporal_planes)
            .copied()
    }

    /// The six planes that carry time-varying content.
    pub fn dynamic(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.dynamic_spatial_planes
            .iter()
            .chain(&self.dynamic_temporal_planes)
            .copied()
    }
}

pub fn plane_name(tier: usize, group: &str, pair: (Axis, Axis)) -> String {
    format!("tier{tier}/{group}/{}{}", pair.0.letter(), pair.1.letter())
}

/// Half-width of the uniform initialization around 1.0 for spatial planes.
pub const SPATIAL_INIT_SPREAD: f64 = 0.1;
/// Half-width of the noise added to the all-ones temporal planes.
pub const TEMPORAL_INIT_NOISE: f64 = 0.01;

/// Registers the planes of every tier in `store`, initialized around the
/// multiplicative identity. Deterministic for a given `seed`.
pub fn init_planes<T: Real>(config: &TierConfig, seed: u64, store: &mut ParamStore<T>) -> Result<Vec<PlaneSet>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = Vec::with_capacity(config.n_tiers());
    for (k, spec) in config.tiers.iter().enumerate() {
        let (d, r, rt) = (spec.feature_dim, spec.spatial_resolution, spec.temporal_resolution);
        let mut make = |group: &str, pair: (Axis, Axis), spread: f64, rng: &mut ChaCha8Rng| {
            let rb = if pair.1 == Axis::T { rt } else { r };
            let data = (0..d * r * rb)
                .map(|_| T::of(1.0 + rng.random_range(-spread..=spread)))
                .collect();
            store.insert(plane_name(k, group, pair), Tensor::new(&[d, r, rb], data)?)
        };
        let mut group = |name: &str, pairs: [(Axis, Axis); 3], spread: f64| -> Result<[ParamId; 3]> {
            Ok([
                make(name, pairs[0], spread, &mut rng)?,
                make(name, pairs[1], spread, &mut rng)?,
                make(name, pairs[2], spread, &mut rng)?,
            ])
        };
        let static_planes = group("static", SPATIAL_PAIRS, SPATIAL_INIT_SPREAD)?;
        let dynamic_spatial_planes = group("dyn_spatial", SPATIAL_PAIRS, SPATIAL_INIT_SPREAD)?;
        let dynamic_temporal_planes = group("dyn_temporal", TEMPORAL_PAIRS, TEMPORAL_INIT_NOISE)?;
        sets.push(PlaneSet {
            tier: k,
            spec: *spec,
            static_planes,
            dynamic_spatial_planes,
            dynamic_temporal_planes,
        });
    }
    Ok(sets)
}

fn coords<T: Real>(points: &[SpacetimePoint], pair: (Axis, Axis)) -> Tensor<T> {
    let data = points
        .iter()
        .flat_map(|p| {
            let p = p.clamped();
            [T::of(p.axis(pair.0)), T::of(p.axis(pair.1))]
        })
        .collect();
    Tensor::new(&[points.len(), 2], data).expect("two coordinates per point")
}

fn hadamard<T: Real>(
    graph: &mut Graph<'_, T>,
    planes: &[ParamId],
    pairs: &[(Axis, Axis)],
    points: &[SpacetimePoint],
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (&id, &pair) in planes.iter().zip(pairs) {
        let p = graph.param(id);
        let s = graph.grid_sample(p, coords(points, pair))?;
        acc = Some(match acc {
            None => s,
            Some(a) => graph.mul(a, s)?,
        });
    }
    acc.ok_or_else(|| dim_err!("no planes to sample"))
}

/// Static feature per point: product of the xy, xz, yz static samples (`[N, D]`).
pub fn sample_static<T: Real>(graph: &mut Graph<'_, T>, set: &PlaneSet, points: &[SpacetimePoint]) -> Result<Var> {
    hadamard(graph, &set.static_planes, &SPATIAL_PAIRS, points)
}

/// Dynamic feature per point: product of the three dynamic spatial and the
/// three spatio-temporal samples (`[N, D]`).
pub fn sample_dynamic<T: Real>(graph: &mut Graph<'_, T>, set: &PlaneSet, points: &[SpacetimePoint]) -> Result<Var> {
    let planes: Vec<ParamId> = set.dynamic().collect();
    let pairs: Vec<(Axis, Axis)> = SPATIAL_PAIRS.iter().chain(&TEMPORAL_PAIRS).copied().collect();
    hadamard(graph, &planes, &pairs, points)
}

/// Stacks static rows `0..N` over dynamic rows `N..2N`.
pub fn combine<T: Real>(graph: &mut Graph<'_, T>, f_static: Var, f_dynamic: Var) -> Result<Var> {
    if graph.shape(f_static) != graph.shape(f_dynamic) || graph.shape(f_static).len() != 2 {
        return Err(dim_err!(
            "combine: static {:?} vs dynamic {:?}",
            graph.shape(f_static),
            graph.shape(f_dynamic)
        ));
    }
    graph.concat(&[f_static, f_dynamic], 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tiny(d: usize, r: usize, rt: usize) -> TierConfig {
        TierConfig {
            tiers: vec![TierSpec {
                feature_dim: d,
                spatial_resolution: r,
                temporal_resolution: rt,
                downsample: 16,
                field_features: 4,
            }],
        }
    }

    fn setup(d: usize, r: usize, rt: usize) -> (ParamStore<f64>, PlaneSet) {
        let mut store = ParamStore::new();
        let set = init_planes(&tiny(d, r, rt), 1, &mut store).unwrap().remove(0);
        (store, set)
    }

    fn fill(store: &mut ParamStore<f64>, id: ParamId, f: impl Fn(usize) -> f64) {
        let p = store.get_mut(id);
        let shape = p.value.shape().to_vec();
        let n = p.value.numel();
        p.value = Tensor::new(&shape, (0..n).map(f).collect()).unwrap();
    }

    fn eval(store: &ParamStore<f64>, f: impl FnOnce(&mut Graph<'_, f64>) -> Result<Var>) -> Tensor<f64> {
        let mut g = Graph::with_params(store);
        let v = f(&mut g).unwrap();
        g.value(v).clone()
    }

    fn pt(x: f64, y: f64, z: f64, t: f64) -> SpacetimePoint {
        SpacetimePoint { x, y, z, t }
    }

    #[test]
    fn ones_are_the_identity_and_zeros_absorb() {
        let (mut store, set) = setup(3, 4, 5);
        for id in set.all() {
            fill(&mut store, id, |_| 1.0);
        }
        let pts = [pt(0.1, 0.7, 0.3, 0.2), pt(1.0, 0.0, 0.5, 0.9)];
        let s = eval(&store, |g| sample_static(g, &set, &pts));
        assert!(s.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let d = eval(&store, |g| sample_dynamic(g, &set, &pts));
        assert!(d.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        fill(&mut store, set.static_planes[1], |_| 0.0);
        let s = eval(&store, |g| sample_static(g, &set, &pts));
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lattice_query_multiplies_stored_vectors() {
        // 2x2 planes with D=2; query (x,y,z) = (1,0,1) hits node a=1,b=0 on xy,
        // a=1,b=1 on xz and a=0,b=1 on yz.
        let (mut store, set) = setup(2, 2, 2);
        let [xy, xz, yz] = set.static_planes;
        fill(&mut store, xy, |i| i as f64 + 1.0); // [1..8]
        fill(&mut store, xz, |i| 0.5 * i as f64); // [0, .5, .. 3.5]
        fill(&mut store, yz, |i| 10.0 - i as f64); // [10..3]
        let s = eval(&store, |g| sample_static(g, &set, &[pt(1.0, 0.0, 1.0, 0.4)]));
        // channel c, node (a,b) is at index c*4 + a*2 + b
        let want0 = 3.0 * 1.5 * 9.0; // xy[0,1,0]=3, xz[0,1,1]=1.5, yz[0,0,1]=9
        let want1 = 7.0 * 3.5 * 5.0; // xy[1,1,0]=7, xz[1,1,1]=3.5, yz[1,0,1]=5
        assert_abs_diff_eq!(s.data()[0], want0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[1], want1, epsilon = 1e-12);
    }

    #[test]
    fn identity_temporal_factors_reduce_to_spatial_product() {
        let (mut store, set) = setup(2, 3, 4);
        for (i, id) in set.dynamic_spatial_planes.iter().enumerate() {
            fill(&mut store, *id, |j| 0.5 + ((i + j) % 5) as f64 * 0.1);
        }
        for id in set.dynamic_temporal_planes {
            fill(&mut store, id, |_| 1.0);
        }
        // copy the dynamic spatial planes into the static slots
        for (s, d) in set.static_planes.iter().zip(set.dynamic_spatial_planes) {
            let v = store.value(d).clone();
            store.get_mut(*s).value = v;
        }
        let pts = [pt(0.2, 0.4, 0.9, 0.1), pt(0.8, 0.3, 0.5, 0.7)];
        let s = eval(&store, |g| sample_static(g, &set, &pts));
        let d = eval(&store, |g| sample_dynamic(g, &set, &pts));
        for (a, b) in s.data().iter().zip(d.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn time_rows_of_xt_plane_change_the_dynamic_feature() {
        // D=1, R=2, R_t=2: xt plane rows differ only along t.
        let (mut store, set) = setup(1, 2, 2);
        for id in set.dynamic() {
            fill(&mut store, id, |_| 1.0);
        }
        // xt[a][b]: b indexes time. t=0 -> 2.0, t=1 -> 5.0 on both x nodes.
        fill(&mut store, set.dynamic_temporal_planes[0], |i| {
            if i % 2 == 0 {
                2.0
            } else {
                5.0
            }
        });
        let a = eval(&store, |g| sample_dynamic(g, &set, &[pt(0.3, 0.3, 0.3, 0.0)]));
        let b = eval(&store, |g| sample_dynamic(g, &set, &[pt(0.3, 0.3, 0.3, 1.0)]));
        assert_abs_diff_eq!(a.data()[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.data()[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn combine_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let b = g.constant(Tensor::from_f64(&[1, 2], &[3., 4.]).unwrap());
        let c = combine(&mut g, a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
        assert_eq!(g.shape(c), &[2, 2]);

        let e = g.constant(Tensor::zeros(&[0, 5]));
        let c = combine(&mut g, e, e).unwrap();
        assert_eq!(g.shape(c), &[0, 5]);

        let a = g.constant(Tensor::zeros(&[3, 4]));
        let c = combine(&mut g, a, a).unwrap();
        assert_eq!(g.shape(c), &[6, 4]);

        let b = g.constant(Tensor::zeros(&[2, 4]));
        assert!(combine(&mut g, a, b).is_err());
    }

    #[test]
    fn init_is_deterministic_and_centered() {
        let cfg = TierConfig::desk(2, 30);
        let mut s1 = ParamStore::<f32>::new();
        let mut s2 = ParamStore::<f32>::new();
        let sets = init_planes(&cfg, 42, &mut s1).unwrap();
        init_planes(&cfg, 42, &mut s2).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets.iter().flat_map(|s| s.all()).count(), 18);
        assert_eq!(s1.len(), 18);
        for ((_, a), (_, b)) in s1.iter().zip(s2.iter()) {
            assert_eq!(a.value, b.value);
            let mean: f64 = a.value.data().iter().map(|&v| v as f64).sum::<f64>() / a.value.numel() as f64;
            assert!((mean - 1.0).abs() < 0.05, "{} mean {mean}", a.name);
            assert!(a.value.data().iter().all(|&v| (0.9..=1.1).contains(&v)));
        }
        assert!(s1.id("tier1/dyn_temporal/zt").is_some());
        assert_eq!(s1.value(s1.id("tier0/dyn_temporal/xt").unwrap()).shape(), &[16, 64, 30]);

        let mut bad = cfg.clone();
        bad.tiers[0].feature_dim = 0;
        assert!(init_planes(&bad, 1, &mut ParamStore::<f32>::new()).is_err());
        let mut bad = cfg;
        bad.tiers[1].downsample = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gradients_touch_only_the_bilinear_footprint() {
        let (store, set) = setup(2, 8, 3);
        let mut g = Graph::with_params(&store);
        let f = sample_static(&mut g, &set, &[pt(0.3, 0.55, 0.9, 0.5)]).unwrap();
        let loss = g.sum(f).unwrap();
        let grads = g.backward(loss).unwrap();
        let xy = grads
            .param_grads()
            .find(|(id, _)| *id == set.static_planes[0])
            .unwrap()
            .1;
        let touched: Vec<usize> = xy
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i % 64)
            .collect();
        // x=0.3 -> 2.1 (nodes 2,3), y=0.55 -> 3.85 (nodes 3,4)
        let mut cells: Vec<usize> = touched.clone();
        cells.sort();
        cells.dedup();
        assert_eq!(cells, vec![2 * 8 + 3, 2 * 8 + 4, 3 * 8 + 3, 3 * 8 + 4]);
    }

    proptest! {
        #[test]
        fn static_features_ignore_time(x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0,
                                       t0 in 0.0f64..1.0, t1 in 0.0f64..1.0) {
            let (store, set) = setup(3, 5, 4);
            let a = eval(&store, |g| sample_static(g, &set, &[pt(x, y, z, t0)]));
            let b = eval(&store, |g| sample_static(g, &set, &[pt(x, y, z, t1)]));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn static_output_is_linear_in_each_plane(alpha in -3.0f64..3.0, x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let (mut store, set) = setup(3, 5, 4);
            let pts = [pt(x, y, 0.4, 0.0)];
            let before = eval(&store, |g| sample_static(g, &set, &pts));
            let id = set.static_planes[2];
            let scaled: Vec<f64> = store.value(id).data().iter().map(|v| v * alpha).collect();
            fill(&mut store, id, |i| scaled[i]);
            let after = eval(&store, |g| sample_static(g, &set, &pts));
            for (a, b) in before.data().iter().zip(after.data()) {
                prop_assert!((a * alpha - b).abs() < 1e-12);
            }
        }
    }
}
