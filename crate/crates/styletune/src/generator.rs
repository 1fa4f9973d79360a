//! Mapping network z -> w and the skip-architecture synthesis network.
//!
//! Each style block runs at one resolution of the ladder 4, 8, ..., R and
//! emits an RGB image; block k's accumulated output is
//! `upsample2x(previous) + toRGB_k(features)`. The ordered accumulations are
//! kept in the trace because the structure loss consumes them per resolution.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    self, bind, equalized_linear, leaky, modulated_conv, noise_inject, ConvParams, ConvVars,
    LinearParams, LinearVars, StyleAffineParams, DEMOD_EPS,
};
use crate::tensor::{Scalar, Tensor};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Lowest resolution of the synthesis ladder.
pub const BASE_RESOLUTION: usize = 4;
/// Learning-rate multiplier of the mapping network layers.
pub const MAPPING_LR_MUL: f64 = 0.01;

/// Architecture configuration shared by generator and discriminator and
/// stored inside every checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output resolution; power of two in 8..=512.
    pub resolution: usize,
    /// Dimension of both z and w.
    pub w_dim: usize,
    /// Number of mapping-network layers.
    pub mapping_depth: usize,
    /// Channel count at resolution 4; halves per resolution step.
    pub channel_max: usize,
    /// Lower bound of the channel schedule.
    pub channel_floor: usize,
    /// Minibatch-stddev layer in the discriminator.
    pub mbstd: bool,
    /// Noise injection in the synthesis network.
    pub noise: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            w_dim: 128,
            mapping_depth: 4,
            channel_max: 256,
            channel_floor: 32,
            mbstd: true,
            noise: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || !(8..=512).contains(&self.resolution) {
            return Err(Error::Config(format!(
                "resolution must be a power of two in 8..=512, got {}",
                self.resolution
            )));
        }
        if self.w_dim == 0 || self.mapping_depth == 0 {
            return Err(Error::Config("w_dim and mapping_depth must be >= 1".into()));
        }
        if self.channel_floor == 0 || self.channel_floor > self.channel_max {
            return Err(Error::Config(format!(
                "channel schedule invalid: floor {} max {}",
                self.channel_floor, self.channel_max
            )));
        }
        Ok(())
    }

    /// Channels at a given resolution: halving from `channel_max` at res 4,
    /// clamped below by `channel_floor`.
    pub fn channels(&self, res: usize) -> usize {
        (self.channel_max * BASE_RESOLUTION / res).max(self.channel_floor)
    }

    /// Resolutions of the style-block ladder: 4, 8, ..., resolution.
    pub fn ladder(&self) -> Vec<usize> {
        let mut res = BASE_RESOLUTION;
        let mut out = Vec::new();
        while res <= self.resolution {
            out.push(res);
            res *= 2;
        }
        out
    }

    pub fn num_blocks(&self) -> usize {
        self.ladder().len()
    }
}

/// Input noise vector z (standard normal).
#[derive(Clone, Debug)]
pub struct LatentCode<T> {
    pub z: Tensor<T>,
}

impl<T: Scalar> LatentCode<T> {
    pub fn new(z: Tensor<T>) -> Result<Self> {
        if z.shape().len() != 1 || !z.all_finite() {
            return Err(Error::InvalidArgument(
                "latent code must be a finite vector".into(),
            ));
        }
        Ok(Self { z })
    }

    pub fn sample<R: RngCore>(dim: usize, rng: &mut R) -> Self {
        Self {
            z: Tensor::randn(&[dim], rng),
        }
    }
}

/// Mapped style vector w.
#[derive(Clone, Debug)]
pub struct StyleCode<T> {
    pub w: Tensor<T>,
}

/// Final image plus the ordered per-resolution RGB accumulations.
#[derive(Clone, Debug)]
pub struct SynthesisTrace<T> {
    /// `[B,3,R,R]`, nominal range [-1,1].
    pub image: Tensor<T>,
    /// Accumulated skip sums after each style block, at resolutions
    /// 4, 8, ..., R. The last entry equals `image` exactly.
    pub rgb_outputs: Vec<Tensor<T>>,
}

/// Graph-level synthesis outputs.
pub struct TraceVars {
    pub image: Var,
    pub rgb_outputs: Vec<Var>,
}

/// Noise behaviour of one synthesis pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// All-zero noise maps.
    Deterministic,
    /// Unit Gaussian maps drawn deterministically from the seed.
    Random(u64),
}

#[derive(Clone, Debug)]
struct ConvLayer<T> {
    conv: ConvParams<T>,
    affine: StyleAffineParams<T>,
    /// `[1]`
    noise_scale: Tensor<T>,
}

#[derive(Clone, Debug)]
struct SynthBlock<T> {
    res: usize,
    convs: Vec<ConvLayer<T>>,
    torgb: ConvParams<T>,
    torgb_affine: StyleAffineParams<T>,
}

/// Style-based generator: mapping network plus synthesis ladder.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    cfg: ModelConfig,
    mapping: Vec<LinearParams<T>>,
    /// Learned constant input `[C(4),4,4]`.
    input: Tensor<T>,
    blocks: Vec<SynthBlock<T>>,
}

impl<T: Scalar> Generator<T> {
    pub fn init(cfg: ModelConfig, rng: &mut impl RngCore) -> Result<Self> {
        cfg.validate()?;
        let mut gen = Self::skeleton(&cfg);
        for layer in &mut gen.mapping {
            *layer = LinearParams::init(cfg.w_dim, cfg.w_dim, MAPPING_LR_MUL, rng);
        }
        gen.input = Tensor::randn(&[cfg.channels(4), 4, 4], rng);
        for block in &mut gen.blocks {
            for layer in &mut block.convs {
                let (o, i, k) = (
                    layer.conv.out_ch(),
                    layer.conv.in_ch(),
                    layer.conv.kernel(),
                );
                layer.conv = ConvParams::init(o, i, k, rng);
                layer.affine = StyleAffineParams::init(i, cfg.w_dim, rng);
            }
            let (o, i) = (block.torgb.out_ch(), block.torgb.in_ch());
            block.torgb = ConvParams::init(o, i, 1, rng);
            block.torgb_affine = StyleAffineParams::init(i, cfg.w_dim, rng);
        }
        Ok(gen)
    }

    /// All-zero parameter scaffold with the right shapes (filled by loaders).
    pub fn skeleton(cfg: &ModelConfig) -> Self {
        let mapping = (0..cfg.mapping_depth)
            .map(|_| LinearParams {
                weight: Tensor::zeros(&[cfg.w_dim, cfg.w_dim]),
                bias: Tensor::zeros(&[cfg.w_dim]),
            })
            .collect();
        let blocks = cfg
            .ladder()
            .iter()
            .map(|&res| {
                let ch = cfg.channels(res);
                let in_ch = if res == BASE_RESOLUTION {
                    ch
                } else {
                    cfg.channels(res / 2)
                };
                let n_convs = if res == BASE_RESOLUTION { 1 } else { 2 };
                let convs = (0..n_convs)
                    .map(|j| {
                        let ci = if j == 0 { in_ch } else { ch };
                        ConvLayer {
                            conv: ConvParams {
                                weight: Tensor::zeros(&[ch, ci, 3, 3]),
                                bias: Tensor::zeros(&[ch]),
                            },
                            affine: StyleAffineParams {
                                weight: Tensor::zeros(&[ci, cfg.w_dim]),
                                bias: Tensor::zeros(&[ci]),
                            },
                            noise_scale: Tensor::zeros(&[1]),
                        }
                    })
                    .collect();
                SynthBlock {
                    res,
                    convs,
                    torgb: ConvParams {
                        weight: Tensor::zeros(&[3, ch, 1, 1]),
                        bias: Tensor::zeros(&[3]),
                    },
                    torgb_affine: StyleAffineParams {
                        weight: Tensor::zeros(&[ch, cfg.w_dim]),
                        bias: Tensor::zeros(&[ch]),
                    },
                }
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            mapping,
            input: Tensor::zeros(&[cfg.channels(4), 4, 4]),
            blocks,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Visit every trainable tensor with its stable name, in table order.
    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, layer) in self.mapping.iter().enumerate() {
            f(format!("mapping.l{i}.weight"), &layer.weight);
            f(format!("mapping.l{i}.bias"), &layer.bias);
        }
        f("synthesis.input".into(), &self.input);
        for block in &self.blocks {
            let r = block.res;
            for (j, layer) in block.convs.iter().enumerate() {
                f(format!("synthesis.b{r}.conv{j}.weight"), &layer.conv.weight);
                f(format!("synthesis.b{r}.conv{j}.bias"), &layer.conv.bias);
                f(
                    format!("synthesis.b{r}.affine{j}.weight"),
                    &layer.affine.weight,
                );
                f(format!("synthesis.b{r}.affine{j}.bias"), &layer.affine.bias);
                f(format!("synthesis.b{r}.noise{j}.scale"), &layer.noise_scale);
            }
            f(format!("synthesis.b{r}.torgb.weight"), &block.torgb.weight);
            f(format!("synthesis.b{r}.torgb.bias"), &block.torgb.bias);
            f(
                format!("synthesis.b{r}.torgb_affine.weight"),
                &block.torgb_affine.weight,
            );
            f(
                format!("synthesis.b{r}.torgb_affine.bias"),
                &block.torgb_affine.bias,
            );
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, layer) in self.mapping.iter_mut().enumerate() {
            f(format!("mapping.l{i}.weight"), &mut layer.weight);
            f(format!("mapping.l{i}.bias"), &mut layer.bias);
        }
        f("synthesis.input".into(), &mut self.input);
        for block in &mut self.blocks {
            let r = block.res;
            for (j, layer) in block.convs.iter_mut().enumerate() {
                f(
                    format!("synthesis.b{r}.conv{j}.weight"),
                    &mut layer.conv.weight,
                );
                f(format!("synthesis.b{r}.conv{j}.bias"), &mut layer.conv.bias);
                f(
                    format!("synthesis.b{r}.affine{j}.weight"),
                    &mut layer.affine.weight,
                );
                f(
                    format!("synthesis.b{r}.affine{j}.bias"),
                    &mut layer.affine.bias,
                );
                f(
                    format!("synthesis.b{r}.noise{j}.scale"),
                    &mut layer.noise_scale,
                );
            }
            f(format!("synthesis.b{r}.torgb.weight"), &mut block.torgb.weight);
            f(format!("synthesis.b{r}.torgb.bias"), &mut block.torgb.bias);
            f(
                format!("synthesis.b{r}.torgb_affine.weight"),
                &mut block.torgb_affine.weight,
            );
            f(
                format!("synthesis.b{r}.torgb_affine.bias"),
                &mut block.torgb_affine.bias,
            );
        }
    }

    /// Ordered named-parameter table (clones the tensors).
    pub fn list_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Build a generator from a name -> tensor table; every parameter must be
    /// present with the exact shape.
    pub fn from_table(
        cfg: &ModelConfig,
        table: &std::collections::HashMap<String, Tensor<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut gen = Self::skeleton(cfg);
        let mut missing = Vec::new();
        let mut bad_shape = Vec::new();
        gen.visit_mut(&mut |name, slot| match table.get(&name) {
            Some(t) if t.shape() == slot.shape() => *slot = t.clone(),
            Some(t) => bad_shape.push(format!("{name}: {:?} vs {:?}", t.shape(), slot.shape())),
            None => missing.push(name),
        });
        if !missing.is_empty() || !bad_shape.is_empty() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "missing: [{}], shape mismatch: [{}]",
                missing.join(", "),
                bad_shape.join(", ")
            )));
        }
        Ok(gen)
    }

    /// Noise maps for one synthesis pass in network order (one `[B,C,r,r]`
    /// map per modulated conv). Shared maps let two generators with the same
    /// config be compared on identical stochastic input.
    pub fn sample_noise(&self, batch: usize, mode: NoiseMode) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        let mut rng = match mode {
            NoiseMode::Deterministic => None,
            NoiseMode::Random(seed) => Some(ChaCha12Rng::seed_from_u64(seed)),
        };
        for block in &self.blocks {
            for layer in &block.convs {
                let shape = [batch, layer.conv.out_ch(), block.res, block.res];
                out.push(match (&mut rng, self.cfg.noise) {
                    (Some(r), true) => Tensor::randn(&shape, r),
                    _ => Tensor::zeros(&shape),
                });
            }
        }
        out
    }

    /// Bind every parameter into the graph, in `visit` order. The returned
    /// handle carries both the structured vars the forward passes need and
    /// the flat `params` list aligned with [`Generator::list_parameters`]
    /// (the alignment gradient extraction relies on).
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> BoundGenerator {
        let mut params = Vec::new();
        let mut track = |v: Var| {
            params.push(v);
            v
        };
        let mapping: Vec<LinearVars> = self
            .mapping
            .iter()
            .map(|l| LinearVars {
                weight: track(bind(g, &l.weight, trainable)),
                bias: track(bind(g, &l.bias, trainable)),
            })
            .collect();
        let input = track(bind(g, &self.input, trainable));
        let blocks: Vec<BoundSynthBlock> = self
            .blocks
            .iter()
            .map(|b| {
                let convs = b
                    .convs
                    .iter()
                    .map(|l| BoundConvLayer {
                        conv: ConvVars {
                            weight: track(bind(g, &l.conv.weight, trainable)),
                            bias: track(bind(g, &l.conv.bias, trainable)),
                        },
                        affine: LinearVars {
                            weight: track(bind(g, &l.affine.weight, trainable)),
                            bias: track(bind(g, &l.affine.bias, trainable)),
                        },
                        noise_scale: track(bind(g, &l.noise_scale, trainable)),
                    })
                    .collect();
                BoundSynthBlock {
                    convs,
                    torgb: ConvVars {
                        weight: track(bind(g, &b.torgb.weight, trainable)),
                        bias: track(bind(g, &b.torgb.bias, trainable)),
                    },
                    torgb_affine: LinearVars {
                        weight: track(bind(g, &b.torgb_affine.weight, trainable)),
                        bias: track(bind(g, &b.torgb_affine.bias, trainable)),
                    },
                }
            })
            .collect();
        BoundGenerator {
            mapping,
            input,
            blocks,
            params,
        }
    }

    /// Mapping network on a batch of latents `[B,z_dim]`: unit-norm input
    /// normalization followed by equalized linear + leaky layers.
    pub fn map_latent_graph(&self, g: &Graph<T>, z: Var, bound: &BoundGenerator) -> Result<Var> {
        let mut h = nn::normalize_rows(g, z);
        for layer in &bound.mapping {
            h = equalized_linear(g, h, layer.weight, layer.bias, T::from_f64(MAPPING_LR_MUL))?;
            h = leaky(g, h);
        }
        Ok(h)
    }

    /// Synthesis ladder on a batch of styles `[B,w_dim]` with pre-sampled
    /// noise maps (from [`Generator::sample_noise`]).
    pub fn synthesize_graph(
        &self,
        g: &Graph<T>,
        w: Var,
        noise: &[Tensor<T>],
        bound: &BoundGenerator,
    ) -> Result<TraceVars> {
        let ws = g.shape_of(w);
        if ws.len() != 2 || ws[1] != self.cfg.w_dim {
            return Err(Error::InvalidArgument(format!(
                "style batch must be [B,{}], got {:?}",
                self.cfg.w_dim, ws
            )));
        }
        let batch = ws[0];
        let expected_noise: usize = self.blocks.iter().map(|b| b.convs.len()).sum();
        if noise.len() != expected_noise {
            return Err(Error::InvalidArgument(format!(
                "expected {} noise maps, got {}",
                expected_noise,
                noise.len()
            )));
        }
        let eps = T::from_f64(DEMOD_EPS);
        let mut x = g.repeat_axis0(bound.input, batch);
        let mut rgb: Option<Var> = None;
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut noise_idx = 0;
        for (bi, (block, bb)) in self.blocks.iter().zip(&bound.blocks).enumerate() {
            if bi > 0 {
                x = g.upsample2x(x);
            }
            for bl in &bb.convs {
                let style = equalized_linear(g, w, bl.affine.weight, bl.affine.bias, T::ONE)?;
                x = modulated_conv(g, x, bl.conv, style, true, eps)?;
                if self.cfg.noise {
                    let n = g.constant(noise[noise_idx].clone());
                    x = noise_inject(g, x, bl.noise_scale, n);
                }
                noise_idx += 1;
                x = leaky(g, x);
            }
            let tstyle = equalized_linear(g, w, bb.torgb_affine.weight, bb.torgb_affine.bias, T::ONE)?;
            // toRGB is not demodulated; fold the equalized 1/sqrt(fan_in)
            // gain into its style so output magnitude stays sane.
            let gain = T::ONE / T::from_f64((block.torgb.in_ch() as f64).sqrt());
            let tstyle = g.scale(tstyle, gain);
            let rgb_block = modulated_conv(g, x, bb.torgb, tstyle, false, eps)?;
            let acc = match rgb {
                None => rgb_block,
                Some(prev) => g.add(g.upsample2x(prev), rgb_block),
            };
            rgb = Some(acc);
            outs.push(acc);
        }
        Ok(TraceVars {
            image: *outs.last().expect("ladder is non-empty"),
            rgb_outputs: outs,
        })
    }

    /// Map a single latent code to its style code.
    pub fn map_latent(&self, z: &LatentCode<T>) -> Result<StyleCode<T>> {
        if z.z.shape() != [self.cfg.w_dim] {
            return Err(Error::InvalidArgument(format!(
                "latent dim {:?} does not match z_dim {}",
                z.z.shape(),
                self.cfg.w_dim
            )));
        }
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let zv = g.constant(z.z.clone().reshaped(&[1, self.cfg.w_dim]));
        let w = self.map_latent_graph(&g, zv, &bound)?;
        Ok(StyleCode {
            w: g.value(w).reshaped(&[self.cfg.w_dim]),
        })
    }

    /// Map a batch of latents `[B,z_dim]` to styles `[B,w_dim]`.
    pub fn map_latent_batch(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let zv = g.constant(z.clone());
        let w = self.map_latent_graph(&g, zv, &bound)?;
        Ok(g.value(w))
    }

    /// Run the synthesis ladder for one style code.
    pub fn synthesize(&self, w: &StyleCode<T>, noise_mode: NoiseMode) -> Result<SynthesisTrace<T>> {
        self.synthesize_batch(&w.w.clone().reshaped(&[1, self.cfg.w_dim]), noise_mode)
    }

    /// Run the synthesis ladder for a batch of style codes `[B,w_dim]`.
    pub fn synthesize_batch(
        &self,
        w: &Tensor<T>,
        noise_mode: NoiseMode,
    ) -> Result<SynthesisTrace<T>> {
        let noise = self.sample_noise(w.shape()[0], noise_mode);
        self.synthesize_batch_with(w, &noise)
    }

    /// Run the synthesis ladder with explicit noise maps, letting two
    /// generators with the same config be evaluated on identical noise.
    pub fn synthesize_batch_with(
        &self,
        w: &Tensor<T>,
        noise: &[Tensor<T>],
    ) -> Result<SynthesisTrace<T>> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let wv = g.constant(w.clone());
        let trace = self.synthesize_graph(&g, wv, noise, &bound)?;
        Ok(SynthesisTrace {
            image: g.value(trace.image),
            rgb_outputs: trace.rgb_outputs.iter().map(|&v| g.value(v)).collect(),
        })
    }
}

/// Linear layer vars of a bound generator's conv stage.
struct BoundConvLayer {
    conv: ConvVars,
    affine: LinearVars,
    noise_scale: Var,
}

struct BoundSynthBlock {
    convs: Vec<BoundConvLayer>,
    torgb: ConvVars,
    torgb_affine: LinearVars,
}

/// Generator parameters bound into one graph. `params` is aligned with the
/// named parameter table.
pub struct BoundGenerator {
    mapping: Vec<LinearVars>,
    input: Var,
    blocks: Vec<BoundSynthBlock>,
    pub params: Vec<Var>,
}
