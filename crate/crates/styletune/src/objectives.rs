//! Loss functions: non-saturating adversarial losses with a literal
//! minimax-value reporter, the per-resolution structure loss between two
//! synthesis traces, the combined generator objective, and the R1 gradient
//! penalty.

use crate::autodiff::{Graph, Var};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::SynthesisTrace;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// How many low-resolution RGB layers the structure loss covers and how much
/// it weighs in the generator objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StructureLossConfig {
    /// Count n of low-resolution RGB layers included (starting at 4x4).
    pub layers: usize,
    /// Weight of the structure term in the generator objective.
    pub weight: f64,
}

impl Default for StructureLossConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            weight: 1.0,
        }
    }
}

impl StructureLossConfig {
    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if self.layers == 0 || self.layers > num_blocks {
            return Err(Error::InvalidArgument(format!(
                "structure layers must be in 1..={num_blocks}, got {}",
                self.layers
            )));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "structure weight must be >= 0, got {}",
                self.weight
            )));
        }
        Ok(())
    }
}

/// Per-step loss summary; serialized as one JSON line in the run log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub structure_loss: f64,
    pub r1_penalty: f64,
    pub per_layer: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (1.0 + (-x.abs()).exp()).ln()
}

/// Practical non-saturating training losses from raw logits:
/// d = E[softplus(fake)] + E[softplus(-real)], g = E[softplus(-fake)].
pub fn adversarial_losses<T: Scalar>(
    real_logits: &Tensor<T>,
    fake_logits: &Tensor<T>,
) -> (f64, f64) {
    let d = mean_of(fake_logits, softplus) + mean_of(real_logits, |v| softplus(-v));
    let g = mean_of(fake_logits, |v| softplus(-v));
    (d, g)
}

/// Evaluation-only reporter of the literal minimax objective
/// E[log D(x)] + E[log(1 - D(G(z)))] using sigmoid probabilities.
pub fn adversarial_literal<T: Scalar>(real_logits: &Tensor<T>, fake_logits: &Tensor<T>) -> f64 {
    // log sigmoid(x) = -softplus(-x); log(1 - sigmoid(x)) = -softplus(x)
    mean_of(real_logits, |v| -softplus(-v)) + mean_of(fake_logits, |v| -softplus(v))
}

fn mean_of<T: Scalar>(t: &Tensor<T>, f: impl Fn(f64) -> f64) -> f64 {
    t.data().iter().map(|v| f(v.to_f64())).sum::<f64>() / t.numel() as f64
}

/// Graph-level training losses; returns (d_loss, g_loss) scalars.
pub fn adversarial_losses_graph<T: Scalar>(
    g: &Graph<T>,
    real_logits: Var,
    fake_logits: Var,
) -> (Var, Var) {
    let d_fake = g.mean_all(g.softplus(fake_logits));
    let d_real = g.mean_all(g.softplus(g.neg(real_logits)));
    let d = g.add(d_fake, d_real);
    let g_loss = g.mean_all(g.softplus(g.neg(fake_logits)));
    (d, g_loss)
}

/// Summed per-resolution MSE between the first n RGB outputs of two traces.
pub fn structure_loss<T: Scalar>(
    source: &SynthesisTrace<T>,
    target: &SynthesisTrace<T>,
    cfg: &StructureLossConfig,
) -> Result<(f64, Vec<f64>)> {
    if source.rgb_outputs.len() != target.rgb_outputs.len() {
        return Err(Error::InvalidArgument(format!(
            "trace ladder lengths differ: {} vs {}",
            source.rgb_outputs.len(),
            target.rgb_outputs.len()
        )));
    }
    cfg.validate(source.rgb_outputs.len())?;
    let mut per_layer = Vec::with_capacity(cfg.layers);
    for k in 0..cfg.layers {
        let (s, t) = (&source.rgb_outputs[k], &target.rgb_outputs[k]);
        if s.shape() != t.shape() {
            return Err(Error::InvalidArgument(format!(
                "rgb output {k} shapes differ: {:?} vs {:?}",
                s.shape(),
                t.shape()
            )));
        }
        let mut acc = 0.0;
        for (a, b) in s.data().iter().zip(t.data()) {
            let d = a.to_f64() - b.to_f64();
            acc += d * d;
        }
        per_layer.push(acc / s.numel() as f64);
    }
    Ok((per_layer.iter().sum(), per_layer))
}

/// Graph-level structure loss against fixed source RGB outputs.
pub fn structure_loss_graph<T: Scalar>(
    g: &Graph<T>,
    source_rgb: &[Tensor<T>],
    target_rgb: &[Var],
    cfg: &StructureLossConfig,
) -> Result<(Var, Vec<Var>)> {
    if source_rgb.len() != target_rgb.len() {
        return Err(Error::InvalidArgument(format!(
            "trace ladder lengths differ: {} vs {}",
            source_rgb.len(),
            target_rgb.len()
        )));
    }
    cfg.validate(source_rgb.len())?;
    let mut per_layer = Vec::with_capacity(cfg.layers);
    for k in 0..cfg.layers {
        let s = g.constant(source_rgb[k].clone());
        let diff = g.sub(s, target_rgb[k]);
        per_layer.push(g.mean_all(g.mul(diff, diff)));
    }
    let mut total = per_layer[0];
    for v in &per_layer[1..] {
        total = g.add(total, *v);
    }
    Ok((total, per_layer))
}

/// L_G = g_adv + weight * structure_total.
pub fn generator_objective(g_adv: f64, structure_total: f64, cfg: &StructureLossConfig) -> f64 {
    g_adv + cfg.weight * structure_total
}

/// Graph-level combined generator objective.
pub fn generator_objective_graph<T: Scalar>(
    g: &Graph<T>,
    g_adv: Var,
    structure_total: Var,
    cfg: &StructureLossConfig,
) -> Var {
    g.add(g_adv, g.scale(structure_total, T::from_f64(cfg.weight)))
}

/// R1 penalty (gamma/2) * E_batch[|grad_x D(x)|^2] as a graph value, given
/// logits computed from the image leaf `images`. Returns a zero constant when
/// gamma is zero or no gradient path exists.
pub fn r1_penalty_graph<T: Scalar>(g: &Graph<T>, logits: Var, images: Var, gamma: f64) -> Var {
    if gamma == 0.0 {
        return g.constant(Tensor::scalar(T::ZERO));
    }
    let batch = g.shape_of(images)[0];
    let sum_logits = g.sum_all(logits);
    match g.grad(sum_logits, &[images])[0] {
        Some(gx) => {
            let sq = g.sum_all(g.mul(gx, gx));
            g.scale(sq, T::from_f64(gamma / (2.0 * batch as f64)))
        }
        None => g.constant(Tensor::scalar(T::ZERO)),
    }
}

/// Value-level R1 penalty of a discriminator on real images.
pub fn r1_penalty<T: Scalar>(
    disc: &Discriminator<T>,
    real_images: &Tensor<T>,
    gamma: f64,
) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "r1 gamma must be >= 0, got {gamma}"
        )));
    }
    if gamma == 0.0 {
        return Ok(0.0);
    }
    let g = Graph::new();
    let x = g.variable(real_images.clone());
    let bound = disc.bind(&g, false);
    let logits = disc.discriminate_graph(&g, x, &bound)?;
    let penalty = r1_penalty_graph(&g, logits, x, gamma);
    Ok(g.scalar_value(penalty).to_f64())
}
