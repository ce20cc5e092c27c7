//! Convolutional image decoder.
//!
//! Block `n` takes the tier-`n` feature map (when that tier exists) and/or
//! the previous block's output, channel-concatenated. Each block doubles the
//! spatial size and halves the channel count:
//!
//! ```text
//! out = conv1x1(up2(x)) + conv5x5(up2(relu(conv3x3(relu(conv3x3(x))))))
//! ```
//!
//! Static and dynamic streams run through the same blocks separately and are
//! concatenated only for the final block (N relu 3x3 convolutions, a 3x3
//! convolution to RGB, sigmoid).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Error, Result};
use crate::field::FeatureMaps;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let bound = (3.0 * gain / fan_in as f64).sqrt();
        let w = (0..cout * fan_in)
            .map(|_| T::of(rng.random_range(-bound..=bound)))
            .collect();
        let weight = store.insert(format!("{name}/weight"), Tensor::new(&[cout, cin, kernel, kernel], w)?)?;
        let bias = store.insert(format!("{name}/bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias,
            kernel,
            in_channels: cin,
            out_channels: cout,
        })
    }

    pub fn forward<T: Real>(&self, graph: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = graph.param(self.weight);
        let b = graph.param(self.bias);
        graph.conv2d(x, w, b, (self.kernel - 1) / 2)
    }

    fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub in_channels: usize,
    pub process: [Conv; 2],
    pub up_5x5: Conv,
    pub up_1x1: Conv,
}

impl DecoderBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, index: usize, cin: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let name = format!("decoder/block{index}");
        let cout = cin / 2;
        Ok(Self {
            in_channels: cin,
            process: [
                Conv::new(store, &format!("{name}/process0"), cin, cin, 3, 2.0, rng)?,
                Conv::new(store, &format!("{name}/process1"), cin, cin, 3, 2.0, rng)?,
            ],
            up_5x5: Conv::new(store, &format!("{name}/up5x5"), cin, cout, 5, 1.0, rng)?,
            up_1x1: Conv::new(store, &format!("{name}/up1x1"), cin, cout, 1, 1.0, rng)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels / 2
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.process
            .iter()
            .chain([&self.up_5x5, &self.up_1x1])
            .flat_map(Conv::params)
    }
}

/// Runs one block on the tier map and/or previous output.
pub fn decoder_block_forward<T: Real>(
    graph: &mut Graph<'_, T>,
    block: &DecoderBlock,
    tier_map: Option<Var>,
    prev: Option<Var>,
) -> Result<Var> {
    let input = match (tier_map, prev) {
        (None, None) => return Err(contract_err!("decoder block needs at least one input")),
        (Some(x), None) | (None, Some(x)) => x,
        (Some(m), Some(p)) => {
            let (sm, sp) = (graph.shape(m), graph.shape(p));
            if sm.len() != 3 || sp.len() != 3 || sm[1..] != sp[1..] {
                return Err(contract_err!(
                    "decoder block inputs disagree spatially: {sm:?} vs {sp:?}"
                ));
            }
            graph.concat(&[p, m], 0)?
        }
    };
    let mut p = input;
    for conv in &block.process {
        p = conv.forward(graph, p)?;
        p = graph.relu(p)?;
    }
    let up_p = graph.upsample2x(p)?;
    let main = block.up_5x5.forward(graph, up_p)?;
    let up_x = graph.upsample2x(input)?;
    let skip = block.up_1x1.forward(graph, up_x)?;
    graph.add(skip, main)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinalBlock {
    pub convs: Vec<Conv>,
    pub to_rgb: Conv,
}

impl FinalBlock {
    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.convs.iter().chain([&self.to_rgb]).flat_map(Conv::params)
    }
}

/// Decoder layout derived from the tier widths and the output size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Feature width `F` of each tier, tier 0 first.
    pub tier_channels: Vec<usize>,
    pub n_blocks: usize,
    /// Number of relu 3x3 convolutions in the final block.
    pub final_convs: usize,
}

impl DecoderConfig {
    /// Input channel count of every block.
    pub fn block_inputs(&self) -> Result<Vec<usize>> {
        if self.n_blocks < self.tier_channels.len() {
            return Err(Error::Config(format!(
                "{} tiers need at least as many decoder blocks, got {}",
                self.tier_channels.len(),
                self.n_blocks
            )));
        }
        let mut prev = 0;
        let mut out = Vec::with_capacity(self.n_blocks);
        for n in 0..self.n_blocks {
            let cin = prev + self.tier_channels.get(n).copied().unwrap_or(0);
            if cin < 2 || cin % 2 != 0 {
                return Err(Error::Config(format!(
                    "decoder block {n} has {cin} input channels; an even count of at least 2 is required"
                )));
            }
            out.push(cin);
            prev = cin / 2;
        }
        Ok(out)
    }
}

/// Number of doubling blocks taking a `map_h × map_w` tier-0 map to `height × width`.
pub fn blocks_for(map_h: usize, map_w: usize, height: usize, width: usize) -> Result<usize> {
    let bad = || {
        Error::Config(format!(
            "{height}x{width} is not a power-of-two multiple of the {map_h}x{map_w} tier-0 map"
        ))
    };
    if map_h == 0 || map_w == 0 || !height.is_multiple_of(map_h) || !width.is_multiple_of(map_w) {
        return Err(bad());
    }
    let (sy, sx) = (height / map_h, width / map_w);
    if sy != sx || !sy.is_power_of_two() || sy < 2 {
        return Err(bad());
    }
    Ok(sy.trailing_zeros() as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub blocks: Vec<DecoderBlock>,
    pub final_block: FinalBlock,
}

impl Decoder {
    pub fn new<T: Real>(config: DecoderConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        let inputs = config.block_inputs()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = inputs
            .iter()
            .enumerate()
            .map(|(n, &cin)| DecoderBlock::new(store, n, cin, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let c = 2 * blocks.last().map_or(0, DecoderBlock::out_channels);
        let convs = (0..config.final_convs)
            .map(|i| Conv::new(store, &format!("decoder/final/conv{i}"), c, c, 3, 2.0, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let to_rgb = Conv::new(store, "decoder/final/rgb", c, 3, 3, 1.0, &mut rng)?;
        Ok(Self {
            config,
            blocks,
            final_block: FinalBlock { convs, to_rgb },
        })
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.blocks
            .iter()
            .flat_map(|b| b.params().collect::<Vec<_>>())
            .chain(self.final_block.params())
    }

    /// Runs one stream (static or dynamic) through every block.
    pub fn run_stream<T: Real>(&self, graph: &mut Graph<'_, T>, tier_maps: &[Var]) -> Result<Var> {
        let mut prev = None;
        for (n, block) in self.blocks.iter().enumerate() {
            prev = Some(decoder_block_forward(graph, block, tier_maps.get(n).copied(), prev)?);
        }
        prev.ok_or_else(|| contract_err!("decoder has no blocks"))
    }

    /// Decodes per-tier static/dynamic maps into a `[3, H, W]` image in `(0, 1)`.
    pub fn decode_image<T: Real>(
        &self,
        graph: &mut Graph<'_, T>,
        maps: &[FeatureMaps],
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let first = maps
            .first()
            .ok_or_else(|| contract_err!("decode_image needs at least one tier"))?;
        let n = blocks_for(first.height, first.width, height, width)?;
        if n != self.blocks.len() {
            return Err(Error::Config(format!(
                "{height}x{width} output from {}x{} maps needs {n} blocks, decoder has {}",
                first.height,
                first.width,
                self.blocks.len()
            )));
        }
        if maps.len() != self.config.tier_channels.len() {
            return Err(contract_err!(
                "decoder built for {} tiers, got {} maps",
                self.config.tier_channels.len(),
                maps.len()
            ));
        }
        let statics: Vec<Var> = maps.iter().map(|m| m.static_map).collect();
        let dynamics: Vec<Var> = maps.iter().map(|m| m.dynamic_map).collect();
        let s = self.run_stream(graph, &statics)?;
        let d = self.run_stream(graph, &dynamics)?;
        let mut x = graph.concat(&[s, d], 0)?;
        for conv in &self.final_block.convs {
            x = conv.forward(graph, x)?;
            x = graph.relu(x)?;
        }
        let rgb = self.final_block.to_rgb.forward(graph, x)?;
        graph.sigmoid(rgb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map<T: Real>(graph: &mut Graph<'_, T>, c: usize, h: usize, w: usize, v: f64) -> Var {
        graph.constant(Tensor::full(&[c, h, w], T::of(v)))
    }

    fn zero_all<T: Real>(store: &mut ParamStore<T>, ids: impl Iterator<Item = ParamId>) {
        for id in ids.collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
    }

    #[test]
    fn okutama_first_block_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = DecoderBlock::new(&mut store, 0, 32, &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let x = map(&mut g, 32, 45, 80, 0.1);
        let y = decoder_block_forward(&mut g, &block, Some(x), None).unwrap();
        assert_eq!(g.shape(y), &[16, 90, 160]);
    }

    #[test]
    fn two_input_block_concatenates_channels() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = DecoderBlock::new(&mut store, 1, 32, &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let prev = map(&mut g, 16, 9, 16, 0.2);
        let tier = map(&mut g, 16, 9, 16, -0.1);
        let y = decoder_block_forward(&mut g, &block, Some(tier), Some(prev)).unwrap();
        assert_eq!(g.shape(y), &[16, 18, 32]);

        let bad = map(&mut g, 16, 8, 16, 0.0);
        assert!(decoder_block_forward(&mut g, &block, Some(bad), Some(prev)).is_err());
        assert!(decoder_block_forward(&mut g, &block, None, None).is_err());
    }

    #[test]
    fn zero_process_path_leaves_the_skip() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = DecoderBlock::new(&mut store, 0, 2, &mut rng).unwrap();
        zero_all(
            &mut store,
            block.process.iter().chain([&block.up_5x5]).flat_map(Conv::params),
        );
        // identity-like 1x1: output channel 0 copies input channel 0
        store.get_mut(block.up_1x1.weight).value = Tensor::from_f64(&[1, 2, 1, 1], &[1.0, 0.0]).unwrap();
        let input = Tensor::from_f64(&[2, 2, 2], &[1., 2., 3., 4., 9., 9., 9., 9.]).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(input.clone());
        let y = decoder_block_forward(&mut g, &block, Some(x), None).unwrap();
        let mut g2 = Graph::<f64>::new();
        let x2 = g2.constant(Tensor::new(&[1, 2, 2], input.data()[..4].to_vec()).unwrap());
        let up = g2.upsample2x(x2).unwrap();
        assert_eq!(g.value(y).data(), g2.value(up).data());
    }

    #[test]
    fn block_ladder_and_config_errors() {
        let cfg = DecoderConfig {
            tier_channels: vec![32, 16],
            n_blocks: 4,
            final_convs: 2,
        };
        assert_eq!(cfg.block_inputs().unwrap(), vec![32, 32, 16, 8]);
        assert_eq!(blocks_for(45, 80, 720, 1280).unwrap(), 4);
        assert_eq!(blocks_for(4, 4, 64, 64).unwrap(), 4);
        assert!(blocks_for(4, 4, 48, 48).is_err());
        assert!(blocks_for(4, 4, 64, 32).is_err());
        let odd = DecoderConfig {
            tier_channels: vec![6],
            n_blocks: 3,
            final_convs: 1,
        };
        assert!(odd.block_inputs().is_err());
    }

    fn desk_decoder(store: &mut ParamStore<f32>) -> Decoder {
        Decoder::new(
            DecoderConfig {
                tier_channels: vec![32, 16],
                n_blocks: 4,
                final_convs: 2,
            },
            store,
            7,
        )
        .unwrap()
    }

    fn maps(g: &mut Graph<'_, f32>, v: f64) -> Vec<FeatureMaps> {
        let (a, b) = (map(g, 32, 4, 4, v), map(g, 32, 4, 4, -v));
        let (c, d) = (map(g, 16, 8, 8, v), map(g, 16, 8, 8, 0.5 * v));
        vec![
            FeatureMaps {
                static_map: a,
                dynamic_map: b,
                height: 4,
                width: 4,
            },
            FeatureMaps {
                static_map: c,
                dynamic_map: d,
                height: 8,
                width: 8,
            },
        ]
    }

    #[test]
    fn desk_scale_image_shape_and_range() {
        let mut store = ParamStore::<f32>::new();
        let dec = desk_decoder(&mut store);
        let mut g = Graph::with_params(&store);
        let m = maps(&mut g, 0.8);
        let img = dec.decode_image(&mut g, &m, 64, 64).unwrap();
        assert_eq!(g.shape(img), &[3, 64, 64]);
        assert!(g.value(img).data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(dec.decode_image(&mut g, &m, 128, 128).is_err());
    }

    #[test]
    fn zero_input_zero_bias_is_uniform_gray() {
        let mut store = ParamStore::<f32>::new();
        let dec = desk_decoder(&mut store);
        let mut g = Graph::with_params(&store);
        let m = maps(&mut g, 0.0);
        let img = dec.decode_image(&mut g, &m, 64, 64).unwrap();
        assert!(g.value(img).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn streams_share_weights() {
        let mut store = ParamStore::<f32>::new();
        let dec = desk_decoder(&mut store);
        let mut g = Graph::with_params(&store);
        let a = map(&mut g, 32, 4, 4, 0.3);
        let b = map(&mut g, 16, 8, 8, -0.2);
        let s = dec.run_stream(&mut g, &[a, b]).unwrap();
        let d = dec.run_stream(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(s), g.value(d));
    }

    #[test]
    fn decoder_gradcheck() {
        use crate::tensor::gradcheck::{check_with_params, DEFAULT_STEP};
        let mut store = ParamStore::<f64>::new();
        let dec = Decoder::new(
            DecoderConfig {
                tier_channels: vec![4, 2],
                n_blocks: 2,
                final_convs: 1,
            },
            &mut store,
            11,
        )
        .unwrap();
        for id in dec.params().collect::<Vec<_>>() {
            if store.get(id).name.ends_with("bias") {
                let n = store.value(id).numel();
                let b: Vec<f64> = (0..n).map(|i| 0.05 * (i as f64 - 1.0)).collect();
                store.get_mut(id).value = Tensor::from_f64(&[n], &b).unwrap();
            }
        }
        let t = |shape: &[usize], k: f64| {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|i| (i as f64 * k).sin()).collect();
            Tensor::from_f64(shape, &v).unwrap()
        };
        let ins = [
            t(&[4, 2, 2], 1.3),
            t(&[4, 2, 2], 0.7),
            t(&[2, 4, 4], 2.1),
            t(&[2, 4, 4], 0.4),
        ];
        let weights = t(&[3, 8, 8], 0.9);
        let r = check_with_params(&store, &ins, DEFAULT_STEP, |g, v| {
            let maps = vec![
                FeatureMaps {
                    static_map: v[0],
                    dynamic_map: v[1],
                    height: 2,
                    width: 2,
                },
                FeatureMaps {
                    static_map: v[2],
                    dynamic_map: v[3],
                    height: 4,
                    width: 4,
                },
            ];
            let img = dec.decode_image(g, &maps, 8, 8)?;
            let w = g.constant(weights.clone());
            let p = g.mul(img, w)?;
            g.sum(p)
        })
        .unwrap();
        assert!(r.max_relative_error() < 1e-4, "{r:?}");
    }
}
