//! RBF kernel and the derivative-feature inner products.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::models::SdeModel;

/// A C² reproducing kernel with derivative evaluations.
pub trait Kernel: Send + Sync {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64;
    /// `∇_y k(x, y)`.
    fn grad_second_arg(&self, x: &[f64], y: &[f64]) -> Vec<f64>;
    /// `∇_x k(x, y)`.
    fn grad_first_arg(&self, x: &[f64], y: &[f64]) -> Vec<f64>;
    /// Entry `(l', l)` is `∂²k / ∂x_{l'} ∂y_l`.
    fn mixed_hessian(&self, x: &[f64], y: &[f64]) -> Mat<f64>;
    fn describe(&self) -> serde_json::Value;

    /// Component `k` is `s_k(x_j)ᵀ ∇_y k(x_i, x_j)`.
    fn feat_dirichlet_inner(&self, model: &dyn SdeModel, xi: &[f64], xj: &[f64]) -> Vec<f64> {
        let g = self.grad_second_arg(xi, xj);
        let s = model.dirichlet_coeff(xj);
        (0..s.ncols()).map(|k| (0..s.nrows()).map(|l| s[(l, k)] * g[l]).sum()).collect()
    }

    /// Entry `(k, l)` is `s_k(x_i)ᵀ 𝔇k(x_i, x_j) s_l(x_j)`.
    fn dirichlet_dirichlet_inner(&self, model: &dyn SdeModel, xi: &[f64], xj: &[f64]) -> Mat<f64> {
        let h = self.mixed_hessian(xi, xj);
        let si = model.dirichlet_coeff(xi);
        let sj = model.dirichlet_coeff(xj);
        si.transpose() * &h * &sj
    }
}

/// `k(x, y) = exp(-κ‖x - y‖²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfKernel {
    pub kappa: f64,
}

impl RbfKernel {
    pub fn new(kappa: f64) -> Self {
        assert!(kappa > 0.0, "kernel bandwidth must be positive");
        Self { kappa }
    }

    /// `κ = 1 / (2ℓ²)`.
    pub fn from_lengthscale(lengthscale: f64) -> Self {
        assert!(lengthscale > 0.0, "lengthscale must be positive");
        Self::new(1.0 / (2.0 * lengthscale * lengthscale))
    }

    pub fn lengthscale(&self) -> f64 {
        (0.5 / self.kappa).sqrt()
    }

    fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
        let xx: f64 = x.iter().map(|v| v * v).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let xy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let d = xx + yy - 2.0 * xy;
        // the expansion loses accuracy when x ≈ y; fall back to the direct sum there
        if d < 1e-8 * (xx + yy).max(1.0) {
            x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().max(0.0)
        } else {
            d
        }
    }
}

impl Kernel for RbfKernel {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (-self.kappa * Self::sq_dist(x, y)).exp()
    }

    fn grad_second_arg(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let k = self.eval(x, y);
        x.iter().zip(y).map(|(a, b)| 2.0 * self.kappa * (a - b) * k).collect()
    }

    fn grad_first_arg(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.grad_second_arg(x, y).into_iter().map(|v| -v).collect()
    }

    fn mixed_hessian(&self, x: &[f64], y: &[f64]) -> Mat<f64> {
        let k = self.eval(x, y);
        let kap = self.kappa;
        let d = x.len();
        Mat::from_fn(d, d, |lp, l| {
            let diag = if lp == l { 2.0 * kap * k } else { 0.0 };
            diag - 4.0 * kap * kap * (x[lp] - y[lp]) * (x[l] - y[l]) * k
        })
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "family": "rbf",
            "kappa": self.kappa,
            "lengthscale": self.lengthscale(),
            "convention": "k(x,y) = exp(-kappa |x-y|^2), kappa = 1/(2 lengthscale^2)",
        })
    }
}
