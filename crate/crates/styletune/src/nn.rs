//! Differentiable building blocks of the style-based generator and the
//! discriminator: modulated convolution with demodulation, equalized-scale
//! linear maps, fixed bilinear upsampling, leaky rectifier, noise injection
//! and minibatch standard deviation.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::RngCore;

/// Negative slope of the leaky rectifier used throughout.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Activation gain applied after the leaky rectifier inside networks.
pub const ACT_GAIN: f64 = std::f64::consts::SQRT_2;
/// Default demodulation epsilon.
pub const DEMOD_EPS: f64 = 1e-8;

/// Convolution weight and bias. Kernel is square with odd size so that
/// same-padding preserves spatial extents.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    /// `[out_ch, in_ch, k, k]`
    pub weight: Tensor<T>,
    /// `[out_ch]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn init<R: RngCore>(out_ch: usize, in_ch: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1 && k >= 1, "kernel size must be odd and >= 1");
        Self {
            weight: Tensor::randn(&[out_ch, in_ch, k, k], rng),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn out_ch(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_ch(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weight.shape();
        if s.len() != 4 || s[2] != s[3] || s[2] % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv weight must be [O,I,k,k] with odd k, got {:?}",
                s
            )));
        }
        if self.bias.shape() != [s[0]] {
            return Err(Error::InvalidArgument(format!(
                "conv bias must be [{}], got {:?}",
                s[0],
                self.bias.shape()
            )));
        }
        if !self.weight.all_finite() || !self.bias.all_finite() {
            return Err(Error::InvalidArgument("non-finite conv parameters".into()));
        }
        Ok(())
    }
}

/// Per-block style projection: maps the mapped latent w to one multiplier per
/// input channel of the modulated convolution it feeds. Bias starts at one so
/// the style is the identity for w = 0.
#[derive(Clone, Debug)]
pub struct StyleAffineParams<T> {
    /// `[in_ch, w_dim]`
    pub weight: Tensor<T>,
    /// `[in_ch]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> StyleAffineParams<T> {
    pub fn init<R: RngCore>(in_ch: usize, w_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[in_ch, w_dim], rng),
            bias: Tensor::full(&[in_ch], T::ONE),
        }
    }
}

/// Fully-connected weight and bias used by mapping layers and the
/// discriminator head. Weights are stored divided by the lr multiplier so
/// the runtime equalized scale restores unit-variance outputs.
#[derive(Clone, Debug)]
pub struct LinearParams<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn init<R: RngCore>(out: usize, inp: usize, lr_multiplier: f64, rng: &mut R) -> Self {
        let inv = T::from_f64(1.0 / lr_multiplier);
        Self {
            weight: Tensor::randn(&[out, inp], rng).map(|v| v * inv),
            bias: Tensor::zeros(&[out]),
        }
    }
}

/// Conv weight/bias bound into a graph.
#[derive(Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

/// Linear weight/bias bound into a graph.
#[derive(Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

pub fn bind_conv<T: Scalar>(g: &Graph<T>, p: &ConvParams<T>, trainable: bool) -> ConvVars {
    ConvVars {
        weight: bind(g, &p.weight, trainable),
        bias: bind(g, &p.bias, trainable),
    }
}

pub fn bind_linear<T: Scalar>(g: &Graph<T>, p: &LinearParams<T>, trainable: bool) -> LinearVars {
    LinearVars {
        weight: bind(g, &p.weight, trainable),
        bias: bind(g, &p.bias, trainable),
    }
}

pub fn bind<T: Scalar>(g: &Graph<T>, t: &Tensor<T>, trainable: bool) -> Var {
    if trainable {
        g.variable(t.clone())
    } else {
        g.constant(t.clone())
    }
}

/// Style-modulated convolution. Weights are scaled per input channel by the
/// style; with `demodulate` each output filter is rescaled to unit norm
/// (up to `eps`). Bias is added per output channel afterwards. The style is
/// either one vector `[in_ch]` shared over the batch or per-sample `[B,in_ch]`.
pub fn modulated_conv<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    conv: ConvVars,
    style: Var,
    demodulate: bool,
    eps: T,
) -> Result<Var> {
    if eps <= T::ZERO {
        return Err(Error::InvalidArgument("demodulation eps must be > 0".into()));
    }
    let xs = g.shape_of(x);
    if xs.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "modulated_conv input must be [B,C,H,W], got {:?}",
            xs
        )));
    }
    let (batch, in_ch) = (xs[0], xs[1]);
    let ws = g.shape_of(conv.weight);
    let (out_ch, k) = (ws[0], ws[2]);
    if ws[1] != in_ch {
        return Err(Error::InvalidArgument(format!(
            "conv expects {} input channels, feature map has {}",
            ws[1], in_ch
        )));
    }
    let style = match g.shape_of(style).as_slice() {
        [n] if *n == in_ch => g.reshape(style, &[1, in_ch]),
        [1, n] | [_, n] if *n == in_ch => style,
        other => {
            return Err(Error::InvalidArgument(format!(
                "style shape {:?} does not match in_ch {}",
                other, in_ch
            )));
        }
    };
    if !g.value(style).all_finite() {
        return Err(Error::InvalidArgument("style entries must be finite".into()));
    }
    let style_b = if g.shape_of(style)[0] == batch {
        style
    } else if g.shape_of(style)[0] == 1 {
        let row = g.reshape(style, &[in_ch]);
        g.repeat_axis0(row, batch)
    } else {
        return Err(Error::InvalidArgument(format!(
            "style batch {} does not match input batch {}",
            g.shape_of(style)[0],
            batch
        )));
    };
    // w'[b,o,i,p,q] = w[o,i,p,q] * style[b,i]
    let wb = g.repeat_axis0(conv.weight, batch);
    let modulated = g.mul(wb, g.expand_in(style_b, out_ch, k));
    let weights = if demodulate {
        let norms = g.reduce_out(g.mul(modulated, modulated));
        let demod = g.rsqrt(g.add_const(norms, eps));
        g.mul(modulated, g.expand_out(demod, in_ch, k))
    } else {
        modulated
    };
    let y = g.conv2d_batched(x, weights);
    Ok(add_channel_bias(g, y, conv.bias))
}

/// y = (w x) * (lr_mul / sqrt(fan_in)) + b for a batch of row vectors.
pub fn equalized_linear<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    weight: Var,
    bias: Var,
    lr_multiplier: T,
) -> Result<Var> {
    let xs = g.shape_of(x);
    let ws = g.shape_of(weight);
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::InvalidArgument(format!(
            "equalized_linear dims disagree: x {:?} vs weight {:?}",
            xs, ws
        )));
    }
    if g.shape_of(bias) != [ws[0]] {
        return Err(Error::InvalidArgument(format!(
            "equalized_linear bias must be [{}], got {:?}",
            ws[0],
            g.shape_of(bias)
        )));
    }
    let scale = lr_multiplier / T::from_f64((ws[1] as f64).sqrt());
    let y = g.scale(g.matmul_nt(x, weight), scale);
    let b = g.bcast_axis(bias, &[xs[0], ws[0]], 1);
    Ok(g.add(y, b))
}

/// Add a `[C]` bias across the channel axis of `[B,C,H,W]`.
pub fn add_channel_bias<T: Scalar>(g: &Graph<T>, x: Var, bias: Var) -> Var {
    let shape = g.shape_of(x);
    let b = g.bcast_axis(bias, &shape, 1);
    g.add(x, b)
}

/// Leaky rectifier with the network activation gain.
pub fn leaky<T: Scalar>(g: &Graph<T>, x: Var) -> Var {
    let a = g.leaky_relu(x, T::from_f64(LEAKY_SLOPE));
    g.scale(a, T::from_f64(ACT_GAIN))
}

/// x + scale * noise, with a learnable scalar scale and a fixed noise map of
/// the same shape as x.
pub fn noise_inject<T: Scalar>(g: &Graph<T>, x: Var, scale: Var, noise: Var) -> Var {
    let shape = g.shape_of(x);
    let s = g.bcast_scalar(scale, &shape);
    g.add(x, g.mul(s, noise))
}

/// Minibatch standard deviation over the whole batch (one summary channel
/// appended), the stabilizer used at the discriminator's lowest resolution.
pub fn minibatch_stddev<T: Scalar>(g: &Graph<T>, x: Var) -> Var {
    let shape = g.shape_of(x);
    let batch = shape[0];
    let inv_b = T::ONE / T::from_f64(batch as f64);
    let mean = g.scale(g.sum_axis0(x), inv_b);
    let centered = g.sub(x, g.repeat_axis0(mean, batch));
    let var = g.scale(g.sum_axis0(g.mul(centered, centered)), inv_b);
    let std = g.sqrt(g.add_const(var, T::from_f64(1e-8)));
    let avg = g.mean_all(std);
    let feat = g.bcast_scalar(avg, &[batch, 1, shape[2], shape[3]]);
    g.concat_ch(x, feat)
}

/// Normalize each row of `[B,D]` to unit Euclidean norm (epsilon-guarded).
pub fn normalize_rows<T: Scalar>(g: &Graph<T>, x: Var) -> Var {
    let shape = g.shape_of(x);
    let sumsq = g.sum_except(g.mul(x, x), 0);
    let inv = g.rsqrt(g.add_const(sumsq, T::from_f64(1e-8)));
    g.mul(x, g.bcast_axis(inv, &shape, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diag::check_gradients;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn graph_eval<T: Scalar>(f: impl Fn(&Graph<T>) -> Var) -> Tensor<T> {
        let g = Graph::new();
        let v = f(&g);
        g.value(v)
    }

    #[test]
    fn all_ones_kernel_with_style_two_demodulates_to_box_third() {
        // weight all-ones [1,1,3,3], style [2]: w' = 2, demod 2/sqrt(9*4) = 1/3,
        // so output is one third of the 3x3 box sum.
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng);
        let out = graph_eval(|g| {
            let conv = ConvVars {
                weight: g.constant(Tensor::full(&[1, 1, 3, 3], 1.0)),
                bias: g.constant(Tensor::zeros(&[1])),
            };
            let style = g.constant(Tensor::new(&[1], vec![2.0]));
            let xv = g.constant(x.clone());
            modulated_conv(g, xv, conv, style, true, 1e-12).unwrap()
        });
        let box_sum = crate::tensor::conv2d(&x, &Tensor::full(&[1, 1, 3, 3], 1.0));
        for (o, b) in out.data().iter().zip(box_sum.data()) {
            assert!((o - b / 3.0).abs() < 1e-9, "{} vs {}", o, b / 3.0);
        }
    }

    #[test]
    fn identity_style_without_demodulation_is_plain_convolution() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut rng);
        let w = Tensor::<f64>::randn(&[2, 3, 3, 3], &mut rng);
        let out = graph_eval(|g| {
            let conv = ConvVars {
                weight: g.constant(w.clone()),
                bias: g.constant(Tensor::zeros(&[2])),
            };
            let style = g.constant(Tensor::full(&[3], 1.0));
            let xv = g.constant(x.clone());
            modulated_conv(g, xv, conv, style, false, 1e-8).unwrap()
        });
        let plain = crate::tensor::conv2d(&x, &w);
        assert!(out.value_eq(&plain));
    }

    #[test]
    fn random_case_matches_brute_force_oracle() {
        // Naive loop nest implementing modulation, demodulation and the
        // convolution directly, independent of the graph kernels.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[1, 2, 4, 4], &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], &mut rng);
        let style = Tensor::<f64>::randn(&[2], &mut rng).map(|v| v + 2.0);
        let bias = Tensor::<f64>::randn(&[3], &mut rng);
        let eps = 1e-8;

        let out = graph_eval(|g| {
            let conv = ConvVars {
                weight: g.constant(w.clone()),
                bias: g.constant(bias.clone()),
            };
            let s = g.constant(style.clone());
            let xv = g.constant(x.clone());
            modulated_conv(g, xv, conv, s, true, eps).unwrap()
        });

        let (oc, ic, k) = (3usize, 2usize, 3usize);
        let mut wmod = vec![0.0f64; oc * ic * k * k];
        for o in 0..oc {
            for i in 0..ic {
                for p in 0..k * k {
                    wmod[(o * ic + i) * k * k + p] =
                        w.data()[(o * ic + i) * k * k + p] * style.data()[i];
                }
            }
        }
        for o in 0..oc {
            let ssq: f64 = wmod[o * ic * k * k..(o + 1) * ic * k * k]
                .iter()
                .map(|v| v * v)
                .sum();
            let d = 1.0 / (ssq + eps).sqrt();
            for v in &mut wmod[o * ic * k * k..(o + 1) * ic * k * k] {
                *v *= d;
            }
        }
        let (h, wd) = (4usize, 4usize);
        for o in 0..oc {
            for u in 0..h {
                for v in 0..wd {
                    let mut acc = bias.data()[o];
                    for i in 0..ic {
                        for p in 0..k {
                            for q in 0..k {
                                let sy = u as isize + p as isize - 1;
                                let sx = v as isize + q as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[(i * h + sy as usize) * wd + sx as usize]
                                    * wmod[(o * ic + i) * k * k + p * k + q];
                            }
                        }
                    }
                    let got = out.data()[(o * h + u) * wd + v];
                    let denom = (acc.abs() + got.abs()).max(1.0);
                    assert!(
                        ((acc - got) / denom).abs() < 1e-6,
                        "{} vs {}",
                        got,
                        acc
                    );
                }
            }
        }
    }

    #[test]
    fn demodulated_filters_have_unit_norm() {
        // Recover the effective weights by feeding unit impulses per input
        // channel; the per-filter sum of squares must be 1 up to eps.
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let w = Tensor::<f64>::randn(&[2, 3, 3, 3], &mut rng);
        let style = Tensor::<f64>::randn(&[3], &mut rng).map(|v| v + 1.5);
        let mut impulses = Tensor::zeros(&[3, 3, 5, 5]);
        for i in 0..3 {
            impulses.data_mut()[(i * 3 + i) * 25 + 12] = 1.0; // batch i, channel i, center
        }
        let out = graph_eval(|g| {
            let conv = ConvVars {
                weight: g.constant(w.clone()),
                bias: g.constant(Tensor::zeros(&[2])),
            };
            let s = g.constant(style.clone());
            let xv = g.constant(impulses.clone());
            modulated_conv(g, xv, conv, s, true, 1e-12).unwrap()
        });
        for o in 0..2 {
            let mut ssq = 0.0;
            for b in 0..3 {
                for p in 0..25 {
                    let v = out.data()[(b * 2 + o) * 25 + p];
                    ssq += v * v;
                }
            }
            assert!((ssq - 1.0).abs() < 1e-9, "filter {} norm^2 = {}", o, ssq);
        }
    }

    #[test]
    fn style_length_mismatch_is_invalid_argument() {
        let g = Graph::new();
        let conv = ConvVars {
            weight: g.constant(Tensor::<f64>::zeros(&[1, 2, 3, 3])),
            bias: g.constant(Tensor::zeros(&[1])),
        };
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let style = g.constant(Tensor::zeros(&[3]));
        let err = modulated_conv(&g, x, conv, style, true, 1e-8).unwrap_err();
        assert_eq!(err.class(), "invalid-argument");
    }

    #[test]
    fn equalized_linear_zero_input_returns_bias() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let w = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let b = Tensor::new(&[3], vec![0.5, -1.0, 2.0]);
        let out = graph_eval(|g| {
            let x = g.constant(Tensor::zeros(&[1, 4]));
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            equalized_linear(g, x, wv, bv, 1.0).unwrap()
        });
        assert_eq!(out.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn equalized_linear_identity_case() {
        let out = graph_eval(|g| {
            let x = g.constant(Tensor::new(&[1, 1], vec![3.25f64]));
            let w = g.constant(Tensor::new(&[1, 1], vec![1.0]));
            let b = g.constant(Tensor::zeros(&[1]));
            equalized_linear(g, x, w, b, 1.0).unwrap()
        });
        assert_eq!(out.data(), &[3.25]);
    }

    #[test]
    fn equalized_linear_matches_scalar_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[2, 5], &mut rng);
        let w = Tensor::<f64>::randn(&[3, 5], &mut rng);
        let b = Tensor::<f64>::randn(&[3], &mut rng);
        let lr = 0.01;
        let out = graph_eval(|g| {
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            equalized_linear(g, xv, wv, bv, lr).unwrap()
        });
        let scale = lr / 5.0f64.sqrt();
        for m in 0..2 {
            for o in 0..3 {
                let mut acc = 0.0;
                for i in 0..5 {
                    acc += x.data()[m * 5 + i] * w.data()[o * 5 + i];
                }
                let expect = acc * scale + b.data()[o];
                let got = out.data()[m * 3 + o];
                let denom = (expect.abs() + got.abs()).max(1.0);
                assert!(((expect - got) / denom).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn equalized_linear_dim_mismatch_is_invalid_argument() {
        let g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(&[1, 4]));
        let w = g.constant(Tensor::zeros(&[3, 5]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert_eq!(
            equalized_linear(&g, x, w, b, 1.0).unwrap_err().class(),
            "invalid-argument"
        );
    }

    #[test]
    fn modulated_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[2, 2, 3, 3], &mut rng);
        let w = Tensor::<f64>::randn(&[2, 2, 3, 3], &mut rng);
        let b = Tensor::<f64>::randn(&[2], &mut rng);
        let style = Tensor::<f64>::randn(&[2, 2], &mut rng);
        let check = check_gradients(&[x, w, b, style], &|g, vars| {
            let conv = ConvVars {
                weight: vars[1],
                bias: vars[2],
            };
            let y = modulated_conv(g, vars[0], conv, vars[3], true, 1e-8).unwrap();
            g.sum_all(g.mul(y, y))
        });
        assert!(check.passes(1e-4), "{:?}", check);
    }

    #[test]
    fn equalized_linear_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn(&[2, 3], &mut rng);
        let w = Tensor::<f64>::randn(&[4, 3], &mut rng);
        let b = Tensor::<f64>::randn(&[4], &mut rng);
        let check = check_gradients(&[x, w, b], &|g, vars| {
            let y = equalized_linear(g, vars[0], vars[1], vars[2], 0.01).unwrap();
            g.mean_all(g.mul(y, y))
        });
        assert!(check.passes(1e-4), "{:?}", check);
    }

    #[test]
    fn minibatch_stddev_appends_shared_channel() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[4, 2, 2, 2], &mut rng);
        let out = graph_eval(|g| {
            let xv = g.constant(x.clone());
            minibatch_stddev(g, xv)
        });
        assert_eq!(out.shape(), &[4, 3, 2, 2]);
        let first = out.data()[2 * 4]; // batch 0, channel 2, pixel 0
        for b in 0..4 {
            for p in 0..4 {
                assert_eq!(out.data()[(b * 3 + 2) * 4 + p], first);
            }
        }
    }

    #[test]
    fn normalize_rows_gives_unit_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let x = Tensor::<f64>::randn(&[3, 8], &mut rng);
        let out = graph_eval(|g| {
            let xv = g.constant(x.clone());
            normalize_rows(g, xv)
        });
        for r in 0..3 {
            let norm: f64 = out.data()[r * 8..(r + 1) * 8].iter().map(|v| v * v).sum();
            assert!((norm.sqrt() - 1.0).abs() < 1e-7);
        }
        // zero row maps to zero, not NaN
        let z = graph_eval(|g| {
            let xv = g.constant(Tensor::<f64>::zeros(&[1, 4]));
            normalize_rows(g, xv)
        });
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
