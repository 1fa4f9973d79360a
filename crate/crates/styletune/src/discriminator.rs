//! Convolutional discriminator with residual downsampling blocks, a
//! minibatch-stddev layer at the lowest resolution, and a linear head.
//! The resolution ladder mirrors the generator's so FreezeD plans can name
//! its highest-resolution blocks.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::generator::{ModelConfig, BASE_RESOLUTION};
use crate::nn::{self, bind, equalized_linear, leaky, ConvParams, ConvVars, LinearParams, LinearVars};
use crate::tensor::{Scalar, Tensor};
use rand::RngCore;

#[derive(Clone, Debug)]
struct DiscBlock<T> {
    res: usize,
    conv0: ConvParams<T>,
    conv1: ConvParams<T>,
    /// 1x1 residual projection `[out,in,1,1]`, no bias.
    skip: Tensor<T>,
}

/// Discriminator over `[B,3,R,R]` images producing raw (pre-sigmoid) logits.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    cfg: ModelConfig,
    fromrgb: ConvParams<T>,
    /// Residual blocks at resolutions R, R/2, ..., 8 (descending).
    blocks: Vec<DiscBlock<T>>,
    final_conv: ConvParams<T>,
    fc0: LinearParams<T>,
    fc1: LinearParams<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn init(cfg: ModelConfig, rng: &mut impl RngCore) -> Result<Self> {
        cfg.validate()?;
        let mut d = Self::skeleton(&cfg);
        d.fromrgb = ConvParams::init(cfg.channels(cfg.resolution), 3, 1, rng);
        for block in &mut d.blocks {
            let (cin, cout) = (cfg.channels(block.res), cfg.channels(block.res / 2));
            block.conv0 = ConvParams::init(cin, cin, 3, rng);
            block.conv1 = ConvParams::init(cout, cin, 3, rng);
            block.skip = Tensor::randn(&[cout, cin, 1, 1], rng);
        }
        let c4 = cfg.channels(BASE_RESOLUTION);
        let stats = if cfg.mbstd { 1 } else { 0 };
        d.final_conv = ConvParams::init(c4, c4 + stats, 3, rng);
        d.fc0 = LinearParams::init(c4, c4 * 16, 1.0, rng);
        d.fc1 = LinearParams::init(1, c4, 1.0, rng);
        Ok(d)
    }

    pub fn skeleton(cfg: &ModelConfig) -> Self {
        let mut blocks = Vec::new();
        let mut res = cfg.resolution;
        while res > BASE_RESOLUTION {
            let (cin, cout) = (cfg.channels(res), cfg.channels(res / 2));
            blocks.push(DiscBlock {
                res,
                conv0: ConvParams {
                    weight: Tensor::zeros(&[cin, cin, 3, 3]),
                    bias: Tensor::zeros(&[cin]),
                },
                conv1: ConvParams {
                    weight: Tensor::zeros(&[cout, cin, 3, 3]),
                    bias: Tensor::zeros(&[cout]),
                },
                skip: Tensor::zeros(&[cout, cin, 1, 1]),
            });
            res /= 2;
        }
        let c4 = cfg.channels(BASE_RESOLUTION);
        let stats = if cfg.mbstd { 1 } else { 0 };
        Self {
            cfg: cfg.clone(),
            fromrgb: ConvParams {
                weight: Tensor::zeros(&[cfg.channels(cfg.resolution), 3, 1, 1]),
                bias: Tensor::zeros(&[cfg.channels(cfg.resolution)]),
            },
            blocks,
            final_conv: ConvParams {
                weight: Tensor::zeros(&[c4, c4 + stats, 3, 3]),
                bias: Tensor::zeros(&[c4]),
            },
            fc0: LinearParams {
                weight: Tensor::zeros(&[c4, c4 * 16]),
                bias: Tensor::zeros(&[c4]),
            },
            fc1: LinearParams {
                weight: Tensor::zeros(&[1, c4]),
                bias: Tensor::zeros(&[1]),
            },
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Resolutions of the residual blocks, highest first.
    pub fn block_resolutions(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.res).collect()
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        let top = self.cfg.resolution;
        f(format!("disc.b{top}.fromrgb.weight"), &self.fromrgb.weight);
        f(format!("disc.b{top}.fromrgb.bias"), &self.fromrgb.bias);
        for block in &self.blocks {
            let r = block.res;
            f(format!("disc.b{r}.conv0.weight"), &block.conv0.weight);
            f(format!("disc.b{r}.conv0.bias"), &block.conv0.bias);
            f(format!("disc.b{r}.conv1.weight"), &block.conv1.weight);
            f(format!("disc.b{r}.conv1.bias"), &block.conv1.bias);
            f(format!("disc.b{r}.skip.weight"), &block.skip);
        }
        f("disc.final.conv.weight".into(), &self.final_conv.weight);
        f("disc.final.conv.bias".into(), &self.final_conv.bias);
        f("disc.final.fc0.weight".into(), &self.fc0.weight);
        f("disc.final.fc0.bias".into(), &self.fc0.bias);
        f("disc.final.fc1.weight".into(), &self.fc1.weight);
        f("disc.final.fc1.bias".into(), &self.fc1.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let top = self.cfg.resolution;
        f(
            format!("disc.b{top}.fromrgb.weight"),
            &mut self.fromrgb.weight,
        );
        f(format!("disc.b{top}.fromrgb.bias"), &mut self.fromrgb.bias);
        for block in &mut self.blocks {
            let r = block.res;
            f(format!("disc.b{r}.conv0.weight"), &mut block.conv0.weight);
            f(format!("disc.b{r}.conv0.bias"), &mut block.conv0.bias);
            f(format!("disc.b{r}.conv1.weight"), &mut block.conv1.weight);
            f(format!("disc.b{r}.conv1.bias"), &mut block.conv1.bias);
            f(format!("disc.b{r}.skip.weight"), &mut block.skip);
        }
        f("disc.final.conv.weight".into(), &mut self.final_conv.weight);
        f("disc.final.conv.bias".into(), &mut self.final_conv.bias);
        f("disc.final.fc0.weight".into(), &mut self.fc0.weight);
        f("disc.final.fc0.bias".into(), &mut self.fc0.bias);
        f("disc.final.fc1.weight".into(), &mut self.fc1.weight);
        f("disc.final.fc1.bias".into(), &mut self.fc1.bias);
    }

    pub fn list_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn from_table(
        cfg: &ModelConfig,
        table: &std::collections::HashMap<String, Tensor<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut d = Self::skeleton(cfg);
        let mut missing = Vec::new();
        let mut bad_shape = Vec::new();
        d.visit_mut(&mut |name, slot| match table.get(&name) {
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
        Ok(d)
    }

    /// Bind every parameter into the graph in `visit` order; the flat
    /// `params` list aligns with [`Discriminator::list_parameters`].
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> BoundDiscriminator {
        let mut params = Vec::new();
        let mut track = |v: Var| {
            params.push(v);
            v
        };
        let fromrgb = ConvVars {
            weight: track(bind(g, &self.fromrgb.weight, trainable)),
            bias: track(bind(g, &self.fromrgb.bias, trainable)),
        };
        let blocks: Vec<BoundDiscBlock> = self
            .blocks
            .iter()
            .map(|b| BoundDiscBlock {
                conv0: ConvVars {
                    weight: track(bind(g, &b.conv0.weight, trainable)),
                    bias: track(bind(g, &b.conv0.bias, trainable)),
                },
                conv1: ConvVars {
                    weight: track(bind(g, &b.conv1.weight, trainable)),
                    bias: track(bind(g, &b.conv1.bias, trainable)),
                },
                skip: track(bind(g, &b.skip, trainable)),
            })
            .collect();
        let final_conv = ConvVars {
            weight: track(bind(g, &self.final_conv.weight, trainable)),
            bias: track(bind(g, &self.final_conv.bias, trainable)),
        };
        let fc0 = LinearVars {
            weight: track(bind(g, &self.fc0.weight, trainable)),
            bias: track(bind(g, &self.fc0.bias, trainable)),
        };
        let fc1 = LinearVars {
            weight: track(bind(g, &self.fc1.weight, trainable)),
            bias: track(bind(g, &self.fc1.bias, trainable)),
        };
        BoundDiscriminator {
            fromrgb,
            blocks,
            final_conv,
            fc0,
            fc1,
            params,
        }
    }

    /// Equalized plain conv + bias: conv(x,w) * (1/sqrt(fan_in)) + b.
    fn conv_eq(&self, g: &Graph<T>, x: Var, vars: ConvVars) -> Var {
        let ws = g.shape_of(vars.weight);
        let fan = (ws[1] * ws[2] * ws[3]) as f64;
        let y = g.scale(g.conv2d(x, vars.weight), T::from_f64(1.0 / fan.sqrt()));
        nn::add_channel_bias(g, y, vars.bias)
    }

    /// Graph forward producing logits `[B]`.
    pub fn discriminate_graph(
        &self,
        g: &Graph<T>,
        image: Var,
        bound: &BoundDiscriminator,
    ) -> Result<Var> {
        let shape = g.shape_of(image);
        let r = self.cfg.resolution;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != r || shape[3] != r {
            return Err(Error::InvalidArgument(format!(
                "discriminator expects [B,3,{r},{r}], got {:?}",
                shape
            )));
        }
        let batch = shape[0];
        let mut x = leaky(g, self.conv_eq(g, image, bound.fromrgb));
        let inv_sqrt2 = T::from_f64(1.0 / std::f64::consts::SQRT_2);
        for (block, bb) in self.blocks.iter().zip(&bound.blocks) {
            let main = leaky(g, self.conv_eq(g, x, bb.conv0));
            let main = leaky(g, self.conv_eq(g, main, bb.conv1));
            let main = g.avgpool2(main);
            let fan = block.skip.shape()[1] as f64;
            let skip = g.scale(
                g.conv2d(g.avgpool2(x), bb.skip),
                T::from_f64(1.0 / fan.sqrt()),
            );
            x = g.scale(g.add(main, skip), inv_sqrt2);
        }
        if self.cfg.mbstd {
            x = nn::minibatch_stddev(g, x);
        }
        let x = leaky(g, self.conv_eq(g, x, bound.final_conv));
        let c4 = self.cfg.channels(BASE_RESOLUTION);
        let flat = g.reshape(x, &[batch, c4 * 16]);
        let h = leaky(
            g,
            equalized_linear(g, flat, bound.fc0.weight, bound.fc0.bias, T::ONE)?,
        );
        let logits = equalized_linear(g, h, bound.fc1.weight, bound.fc1.bias, T::ONE)?;
        Ok(g.reshape(logits, &[batch]))
    }

    /// Raw logits for an image batch.
    pub fn discriminate(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let x = g.constant(image.clone());
        let logits = self.discriminate_graph(&g, x, &bound)?;
        Ok(g.value(logits))
    }
}

struct BoundDiscBlock {
    conv0: ConvVars,
    conv1: ConvVars,
    skip: Var,
}

/// Discriminator parameters bound into one graph; `params` aligns with the
/// named parameter table.
pub struct BoundDiscriminator {
    fromrgb: ConvVars,
    blocks: Vec<BoundDiscBlock>,
    final_conv: ConvVars,
    fc0: LinearVars,
    fc1: LinearVars,
    pub params: Vec<Var>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diag::check_gradients;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn toy_cfg(mbstd: bool) -> ModelConfig {
        ModelConfig {
            resolution: 16,
            w_dim: 8,
            mapping_depth: 2,
            channel_max: 8,
            channel_floor: 4,
            mbstd,
            noise: true,
        }
    }

    #[test]
    fn identical_images_get_identical_logits_without_mbstd() {
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let d = Discriminator::<f32>::init(toy_cfg(false), &mut rng).unwrap();
        let one = Tensor::<f32>::randn(&[1, 3, 16, 16], &mut rng);
        let mut batch = Tensor::zeros(&[2, 3, 16, 16]);
        batch.data_mut()[..one.numel()].copy_from_slice(one.data());
        batch.data_mut()[one.numel()..].copy_from_slice(one.data());
        let logits = d.discriminate(&batch).unwrap();
        assert_eq!(logits.data()[0], logits.data()[1]);
    }

    #[test]
    fn logits_finite_for_unit_range_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let d = Discriminator::<f32>::init(toy_cfg(true), &mut rng).unwrap();
        let x = Tensor::<f32>::randn(&[4, 3, 16, 16], &mut rng).map(|v| v.clamp(-1.0, 1.0));
        let logits = d.discriminate(&x).unwrap();
        assert_eq!(logits.shape(), &[4]);
        assert!(logits.all_finite());
    }

    #[test]
    fn resolution_mismatch_is_invalid_argument() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let d = Discriminator::<f32>::init(toy_cfg(true), &mut rng).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        assert_eq!(d.discriminate(&x).unwrap_err().class(), "invalid-argument");
    }

    #[test]
    fn parameter_names_follow_contract() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let d = Discriminator::<f32>::init(toy_cfg(true), &mut rng).unwrap();
        let names: Vec<String> = d.list_parameters().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"disc.b16.fromrgb.weight".to_string()));
        assert!(names.contains(&"disc.b16.conv0.weight".to_string()));
        assert!(names.contains(&"disc.b8.skip.weight".to_string()));
        assert!(names.contains(&"disc.final.fc1.bias".to_string()));
        assert_eq!(d.block_resolutions(), vec![16, 8]);
    }

    #[test]
    fn table_roundtrip_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let d = Discriminator::<f32>::init(toy_cfg(true), &mut rng).unwrap();
        let table: std::collections::HashMap<_, _> = d.list_parameters().into_iter().collect();
        let rebuilt = Discriminator::from_table(d.config(), &table).unwrap();
        for ((n1, t1), (n2, t2)) in d.list_parameters().iter().zip(rebuilt.list_parameters()) {
            assert_eq!(*n1, n2);
            assert!(t1.bit_eq(&t2));
        }
    }

    #[test]
    fn bound_params_align_with_the_named_table() {
        let mut rng = ChaCha12Rng::seed_from_u64(26);
        let d = Discriminator::<f32>::init(toy_cfg(true), &mut rng).unwrap();
        let g = crate::autodiff::Graph::new();
        let bound = d.bind(&g, true);
        let table = d.list_parameters();
        assert_eq!(bound.params.len(), table.len());
        for ((name, tensor), var) in table.iter().zip(&bound.params) {
            assert!(g.value(*var).bit_eq(tensor), "misaligned at {name}");
        }
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(25);
        let cfg = ModelConfig {
            resolution: 8,
            w_dim: 4,
            mapping_depth: 1,
            channel_max: 6,
            channel_floor: 3,
            mbstd: true,
            noise: false,
        };
        let d = Discriminator::<f64>::init(cfg, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[2, 3, 8, 8], &mut rng);
        let check = check_gradients(&[x], &|g, vars| {
            let bound = d.bind(g, false);
            let logits = d.discriminate_graph(g, vars[0], &bound).unwrap();
            g.sum_all(g.mul(logits, logits))
        });
        assert!(check.passes(1e-4), "{:?}", check);
    }
}
