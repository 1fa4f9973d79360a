//! Finite-difference gradient checking.
//!
//! The checker only ever calls the forward pass, so it stays independent of
//! the reverse-mode implementation it is used to validate.

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// Perturbation used for central differences (64-bit arithmetic).
pub const FD_EPS: f64 = 1e-5;

/// Relative error with an absolute floor so that near-zero gradients are
/// compared on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Report of a finite-difference check over a set of parameter tensors.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (parameter index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences, element by element, over every given parameter.
///
/// `build` must construct the scalar loss from fresh leaf variables bound to
/// the provided parameter values, and must be deterministic.
pub fn check_gradients(
    params: &[Tensor<f64>],
    build: &dyn Fn(&Graph<f64>, &[Var]) -> Var,
) -> GradCheck {
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.variable(t.clone())).collect();
        let loss = build(&g, &vars);
        g.scalar_value(loss)
    };

    // Analytic gradients once.
    let graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| graph.variable(t.clone())).collect();
    let loss = build(&graph, &vars);
    let grads = graph.grad(loss, &vars);

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = (0, 0);
    let mut checked = 0;
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads[pi]
            .map(|v| graph.value(v))
            .unwrap_or_else(|| Tensor::zeros(param.shape()));
        for ei in 0..param.numel() {
            let orig = param.data()[ei];
            work[pi].data_mut()[ei] = orig + FD_EPS;
            let up = eval(&work);
            work[pi].data_mut()[ei] = orig - FD_EPS;
            let down = eval(&work);
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let err = rel_err(analytic.data()[ei], numeric);
            checked += 1;
            if err > max_rel {
                max_rel = err;
                worst = (pi, ei);
            }
        }
    }
    GradCheck {
        max_rel_err: max_rel,
        worst,
        checked,
    }
}
