//! Diffusion processes with a gradient Dirichlet form.
//!
//! Every model exposes the drift `a`, the diffusion `b`, the Dirichlet
//! coefficient `s` (so that `Lf = ∇·(s sᵀ ∇f)` in the π-weighted sense) and,
//! when known, the unnormalized log invariant density.

use std::f64::consts::LN_2;
use std::sync::Arc;

use faer::Mat;
use serde::{Deserialize, Serialize};
use serde_json::json;
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::error::{Error, Result};
use crate::sampling::SampleSet;

/// Axis-aligned box holding effectively all of the invariant mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len(), "box bounds must have equal length");
        assert!(lo.iter().zip(&hi).all(|(l, h)| l < h), "empty box");
        Self { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    /// Box with the same center and each side scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let (lo, hi) = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| {
                let c = 0.5 * (l + h);
                let r = 0.5 * (h - l) * factor;
                (c - r, c + r)
            })
            .unzip();
        Self { lo, hi }
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }
}

/// A diffusion `dX = a(X)dt + b(X)dW` with gradient Dirichlet form.
pub trait SdeModel: Send + Sync {
    fn name(&self) -> &str;
    fn dim_state(&self) -> usize;
    fn dim_noise(&self) -> usize;
    fn drift(&self, x: &[f64]) -> Vec<f64>;
    /// `d × p` diffusion matrix.
    fn diffusion(&self, x: &[f64]) -> Mat<f64>;
    /// `d × p` Dirichlet coefficient; column `k` is `s_k(x)`.
    fn dirichlet_coeff(&self, x: &[f64]) -> Mat<f64>;
    /// Unnormalized log invariant density, if known in closed form.
    fn log_density(&self, _x: &[f64]) -> Option<f64> {
        None
    }
    fn domain_box(&self) -> &DomainBox;
    /// Parameters echoed into output metadata.
    fn params(&self) -> serde_json::Value;

    fn invariant_density(&self, x: &[f64]) -> Option<f64> {
        self.log_density(x).map(f64::exp)
    }

    fn has_density(&self) -> bool {
        let lo = self.domain_box().lo.clone();
        let mid: Vec<f64> =
            lo.iter().zip(&self.domain_box().hi).map(|(l, h)| 0.5 * (l + h)).collect();
        self.log_density(&mid).is_some()
    }

    fn as_cir(&self) -> Option<&CirModel> {
        None
    }
}

/// Potential energy for overdamped Langevin dynamics.
pub trait Potential: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn params(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

/// One-dimensional potential with two principal wells, each split in two.
#[derive(Clone, Copy, Debug, Default)]
pub struct FourWellPotential;

impl Potential for FourWellPotential {
    fn name(&self) -> &str {
        "four_well"
    }
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, x: &[f64]) -> f64 {
        let x = x[0];
        4.0 * (x.powi(8)
            + 0.8 * (-80.0 * x * x).exp()
            + 0.2 * (-80.0 * (x - 0.5).powi(2)).exp()
            + 0.5 * (-40.0 * (x + 0.5).powi(2)).exp())
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let x = x[0];
        vec![
            4.0 * (8.0 * x.powi(7)
                - 128.0 * x * (-80.0 * x * x).exp()
                - 32.0 * (x - 0.5) * (-80.0 * (x - 0.5).powi(2)).exp()
                - 40.0 * (x + 0.5) * (-40.0 * (x + 0.5).powi(2)).exp()),
        ]
    }
}

/// Müller-Brown surface in the standard parameterization, multiplied by
/// `energy_scale`.
#[derive(Clone, Debug)]
pub struct MullerBrownPotential {
    pub energy_scale: f64,
}

impl MullerBrownPotential {
    pub const A: [f64; 4] = [-200.0, -100.0, -170.0, 15.0];
    pub const LA: [f64; 4] = [-1.0, -1.0, -6.5, 0.7];
    pub const LB: [f64; 4] = [0.0, 0.0, 11.0, 0.6];
    pub const LC: [f64; 4] = [-10.0, -10.0, -6.5, 0.7];
    pub const X0: [f64; 4] = [1.0, 0.0, -0.5, -1.0];
    pub const Y0: [f64; 4] = [0.0, 0.5, 1.5, 1.0];

    pub fn new(energy_scale: f64) -> Self {
        Self { energy_scale }
    }

    fn terms(&self, x: &[f64]) -> impl Iterator<Item = (usize, f64, f64, f64)> + '_ {
        let (px, py) = (x[0], x[1]);
        (0..4).map(move |i| {
            let dx = px - Self::X0[i];
            let dy = py - Self::Y0[i];
            let e = Self::A[i]
                * (Self::LA[i] * dx * dx + Self::LB[i] * dx * dy + Self::LC[i] * dy * dy).exp();
            (i, dx, dy, e)
        })
    }
}

impl Potential for MullerBrownPotential {
    fn name(&self) -> &str {
        "muller_brown"
    }
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.energy_scale * self.terms(x).map(|(_, _, _, e)| e).sum::<f64>()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; 2];
        for (i, dx, dy, e) in self.terms(x) {
            g[0] += e * (2.0 * Self::LA[i] * dx + Self::LB[i] * dy);
            g[1] += e * (Self::LB[i] * dx + 2.0 * Self::LC[i] * dy);
        }
        g.iter_mut().for_each(|v| *v *= self.energy_scale);
        g
    }
    fn params(&self) -> serde_json::Value {
        json!({
            "energy_scale": self.energy_scale,
            "A": Self::A, "a": Self::LA, "b": Self::LB, "c": Self::LC,
            "x0": Self::X0, "y0": Self::Y0,
        })
    }
}

/// `V(x) = ½ Σ_l c_l x_l²`; the Ornstein-Uhlenbeck potential.
#[derive(Clone, Debug)]
pub struct QuadraticPotential {
    pub stiffness: Vec<f64>,
}

impl Potential for QuadraticPotential {
    fn name(&self) -> &str {
        "quadratic"
    }
    fn dim(&self) -> usize {
        self.stiffness.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        0.5 * x.iter().zip(&self.stiffness).map(|(v, c)| c * v * v).sum::<f64>()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.stiffness).map(|(v, c)| c * v).collect()
    }
    fn params(&self) -> serde_json::Value {
        json!({ "stiffness": self.stiffness })
    }
}

/// `V ≡ 0`; with reflecting walls this is free diffusion on the box.
#[derive(Clone, Debug)]
pub struct FlatPotential {
    pub dim: usize,
}

impl Potential for FlatPotential {
    fn name(&self) -> &str {
        "flat"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn gradient(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim]
    }
}

/// Overdamped Langevin dynamics `dX = -∇V dt + √(2 k_bT) dW`.
pub struct LangevinModel {
    name: String,
    pub kbt: f64,
    pub potential: Box<dyn Potential>,
    domain: DomainBox,
}

impl LangevinModel {
    pub fn new(kbt: f64, potential: Box<dyn Potential>, domain: DomainBox) -> Result<Self> {
        if !(kbt > 0.0) {
            return Err(Error::invalid("k_bT must be positive"));
        }
        if potential.dim() != domain.dim() {
            return Err(Error::invalid("potential and domain dimensions differ"));
        }
        Ok(Self { name: format!("langevin_{}", potential.name()), kbt, potential, domain })
    }

    pub fn four_well(kbt: f64) -> Result<Self> {
        let mut m = Self::new(kbt, Box::new(FourWellPotential), DomainBox::new(vec![-1.2], vec![1.2]))?;
        m.name = "four_well".into();
        Ok(m)
    }

    pub fn muller_brown(kbt: f64, energy_scale: f64) -> Result<Self> {
        if !(energy_scale > 0.0) {
            return Err(Error::invalid("energy_scale must be positive"));
        }
        let mut m = Self::new(
            kbt,
            Box::new(MullerBrownPotential::new(energy_scale)),
            DomainBox::new(vec![-1.5, -0.5], vec![1.2, 2.0]),
        )?;
        m.name = "muller_brown".into();
        Ok(m)
    }
}

impl SdeModel for LangevinModel {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim_state(&self) -> usize {
        self.domain.dim()
    }
    fn dim_noise(&self) -> usize {
        self.domain.dim()
    }
    fn drift(&self, x: &[f64]) -> Vec<f64> {
        self.potential.gradient(x).into_iter().map(|g| -g).collect()
    }
    fn diffusion(&self, _x: &[f64]) -> Mat<f64> {
        let d = self.dim_state();
        Mat::from_fn(d, d, |i, j| if i == j { (2.0 * self.kbt).sqrt() } else { 0.0 })
    }
    fn dirichlet_coeff(&self, _x: &[f64]) -> Mat<f64> {
        let d = self.dim_state();
        Mat::from_fn(d, d, |i, j| if i == j { self.kbt.sqrt() } else { 0.0 })
    }
    fn log_density(&self, x: &[f64]) -> Option<f64> {
        Some(-self.potential.value(x) / self.kbt)
    }
    fn domain_box(&self) -> &DomainBox {
        &self.domain
    }
    fn params(&self) -> serde_json::Value {
        json!({
            "model": self.name,
            "kbt": self.kbt,
            "potential": self.potential.name(),
            "potential_params": self.potential.params(),
            "domain_box": self.domain,
        })
    }
}

/// Cox-Ingersoll-Ross process `dX = (a + bX)dt + σ√X dW`.
#[derive(Clone, Debug)]
pub struct CirModel {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    domain: DomainBox,
}

impl CirModel {
    /// Lower edge of the state box; keeps `√x` away from its singularity.
    pub const LOWER_EDGE: f64 = 1e-6;
    /// Upper edge is the stationary quantile at `1 - UPPER_TAIL`.
    pub const UPPER_TAIL: f64 = 1e-12;

    pub fn new(a: f64, b: f64, sigma: f64) -> Result<Self> {
        if !(b < 0.0) {
            return Err(Error::invalid("CIR mean-reversion parameter b must be negative"));
        }
        if !(sigma > 0.0) {
            return Err(Error::invalid("CIR sigma must be positive"));
        }
        if !(a > 0.0) {
            return Err(Error::invalid("CIR drift offset a must be positive"));
        }
        let (shape, rate) = (2.0 * a / (sigma * sigma), 2.0 * b.abs() / (sigma * sigma));
        let upper = gamma_upper_quantile(shape, rate, Self::UPPER_TAIL);
        Ok(Self { a, b, sigma, domain: DomainBox::new(vec![Self::LOWER_EDGE], vec![upper]) })
    }

    /// Shape of the stationary Gamma law.
    pub fn gamma_shape(&self) -> f64 {
        2.0 * self.a / (self.sigma * self.sigma)
    }

    /// Rate of the stationary Gamma law.
    pub fn gamma_rate(&self) -> f64 {
        2.0 * self.b.abs() / (self.sigma * self.sigma)
    }

    pub fn stationary_mean(&self) -> f64 {
        self.a / self.b.abs()
    }

    pub fn stationary_variance(&self) -> f64 {
        self.gamma_shape() / self.gamma_rate().powi(2)
    }

    /// Half-life of the mean reversion, `ln 2 / |b|`.
    pub fn half_life(&self) -> f64 {
        LN_2 / self.b.abs()
    }
}

/// Smallest `x` with `P(X > x) <= tail` for `X ~ Gamma(shape, rate)`.
fn gamma_upper_quantile(shape: f64, rate: f64, tail: f64) -> f64 {
    let g = Gamma::new(shape, rate).expect("valid gamma parameters");
    let mut hi = shape / rate + 10.0 * shape.sqrt() / rate;
    while g.sf(hi) > tail {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g.sf(mid) > tail {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

impl SdeModel for CirModel {
    fn name(&self) -> &str {
        "cir"
    }
    fn dim_state(&self) -> usize {
        1
    }
    fn dim_noise(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64]) -> Vec<f64> {
        vec![self.a + self.b * x[0]]
    }
    fn diffusion(&self, x: &[f64]) -> Mat<f64> {
        Mat::from_fn(1, 1, |_, _| self.sigma * x[0].max(0.0).sqrt())
    }
    fn dirichlet_coeff(&self, x: &[f64]) -> Mat<f64> {
        Mat::from_fn(1, 1, |_, _| self.sigma * x[0].max(0.0).sqrt() / 2f64.sqrt())
    }
    fn log_density(&self, x: &[f64]) -> Option<f64> {
        let x = x[0];
        if x <= 0.0 {
            return Some(f64::NEG_INFINITY);
        }
        Some((self.gamma_shape() - 1.0) * x.ln() - self.gamma_rate() * x)
    }
    fn domain_box(&self) -> &DomainBox {
        &self.domain
    }
    fn params(&self) -> serde_json::Value {
        json!({
            "model": "cir", "a": self.a, "b": self.b, "sigma": self.sigma,
            "stationary_shape": self.gamma_shape(), "stationary_rate": self.gamma_rate(),
            "domain_box": self.domain,
        })
    }
    fn as_cir(&self) -> Option<&CirModel> {
        Some(self)
    }
}

/// Wraps a model and multiplies its Dirichlet coefficient by `factor`.
///
/// `factor = 0` gives the degenerate Dirichlet form used in several checks.
pub struct ScaledDirichlet {
    pub inner: Arc<dyn SdeModel>,
    pub factor: f64,
    name: String,
}

impl ScaledDirichlet {
    pub fn new(inner: Arc<dyn SdeModel>, factor: f64) -> Self {
        let name = format!("{}_dirichlet_x{}", inner.name(), factor);
        Self { inner, factor, name }
    }
}

impl SdeModel for ScaledDirichlet {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim_state(&self) -> usize {
        self.inner.dim_state()
    }
    fn dim_noise(&self) -> usize {
        self.inner.dim_noise()
    }
    fn drift(&self, x: &[f64]) -> Vec<f64> {
        self.inner.drift(x)
    }
    fn diffusion(&self, x: &[f64]) -> Mat<f64> {
        self.inner.diffusion(x)
    }
    fn dirichlet_coeff(&self, x: &[f64]) -> Mat<f64> {
        let s = self.inner.dirichlet_coeff(x);
        Mat::from_fn(s.nrows(), s.ncols(), |i, j| self.factor * s[(i, j)])
    }
    fn log_density(&self, x: &[f64]) -> Option<f64> {
        self.inner.log_density(x)
    }
    fn domain_box(&self) -> &DomainBox {
        self.inner.domain_box()
    }
    fn params(&self) -> serde_json::Value {
        json!({ "inner": self.inner.params(), "dirichlet_factor": self.factor })
    }
}

type VecFn = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type MatFn = Box<dyn Fn(&[f64]) -> Mat<f64> + Send + Sync>;
type ScalarFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Model assembled from closures, for tests and ad-hoc experiments.
pub struct CustomModel {
    name: String,
    dim_state: usize,
    dim_noise: usize,
    drift: VecFn,
    diffusion: MatFn,
    dirichlet: MatFn,
    log_density: Option<ScalarFn>,
    domain: DomainBox,
}

impl CustomModel {
    pub fn new(
        name: &str,
        dim_noise: usize,
        domain: DomainBox,
        drift: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        diffusion: impl Fn(&[f64]) -> Mat<f64> + Send + Sync + 'static,
        dirichlet: impl Fn(&[f64]) -> Mat<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.to_string(),
            dim_state: domain.dim(),
            dim_noise,
            drift: Box::new(drift),
            diffusion: Box::new(diffusion),
            dirichlet: Box::new(dirichlet),
            log_density: None,
            domain,
        }
    }

    pub fn with_log_density(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.log_density = Some(Box::new(f));
        self
    }
}

impl SdeModel for CustomModel {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim_state(&self) -> usize {
        self.dim_state
    }
    fn dim_noise(&self) -> usize {
        self.dim_noise
    }
    fn drift(&self, x: &[f64]) -> Vec<f64> {
        (self.drift)(x)
    }
    fn diffusion(&self, x: &[f64]) -> Mat<f64> {
        (self.diffusion)(x)
    }
    fn dirichlet_coeff(&self, x: &[f64]) -> Mat<f64> {
        (self.dirichlet)(x)
    }
    fn log_density(&self, x: &[f64]) -> Option<f64> {
        self.log_density.as_ref().map(|f| f(x))
    }
    fn domain_box(&self) -> &DomainBox {
        &self.domain
    }
    fn params(&self) -> serde_json::Value {
        json!({ "model": self.name, "domain_box": self.domain })
    }
}

/// A scalar function of the state with first and second derivatives.
///
/// The default derivatives are central differences.
pub trait Observable {
    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        let mut y = x.to_vec();
        (0..x.len())
            .map(|l| {
                y[l] = x[l] + h;
                let fp = self.value(&y);
                y[l] = x[l] - h;
                let fm = self.value(&y);
                y[l] = x[l];
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn hessian(&self, x: &[f64]) -> Mat<f64> {
        let h = 1e-4;
        let d = x.len();
        let mut y = x.to_vec();
        let mut eval = |dl: usize, sl: f64, dm: usize, sm: f64| {
            y.copy_from_slice(x);
            y[dl] += sl * h;
            y[dm] += sm * h;
            self.value(&y)
        };
        let mut hess = Mat::zeros(d, d);
        for l in 0..d {
            for m in l..d {
                let v = if l == m {
                    (eval(l, 1.0, l, 0.0) - 2.0 * self.value(x) + eval(l, -1.0, l, 0.0)) / (h * h)
                } else {
                    (eval(l, 1.0, m, 1.0) - eval(l, 1.0, m, -1.0) - eval(l, -1.0, m, 1.0)
                        + eval(l, -1.0, m, -1.0))
                        / (4.0 * h * h)
                };
                hess[(l, m)] = v;
                hess[(m, l)] = v;
            }
        }
        hess
    }
}

/// Observable backed by a closure; derivatives by central differences.
pub struct FnObservable<F>(pub F);

impl<F: Fn(&[f64]) -> f64> Observable for FnObservable<F> {
    fn value(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// `(Lf)(x) = ∇f·a + ½ Tr[bᵀ ∇²f b]`.
pub fn generator_apply(model: &dyn SdeModel, f: &dyn Observable, x: &[f64]) -> Result<f64> {
    if !model.domain_box().contains(x) {
        return Err(Error::Domain { point: x.to_vec() });
    }
    let grad = f.gradient(x);
    let hess = f.hessian(x);
    let a = model.drift(x);
    let b = model.diffusion(x);
    let first: f64 = grad.iter().zip(&a).map(|(g, a)| g * a).sum();
    let mut second = 0.0;
    for k in 0..b.ncols() {
        for l in 0..b.nrows() {
            for m in 0..b.nrows() {
                second += b[(l, k)] * hess[(l, m)] * b[(m, k)];
            }
        }
    }
    Ok(first + 0.5 * second)
}

/// Tensor-product grid with composite trapezoid weights over a box.
#[derive(Clone, Debug)]
pub struct QuadratureGrid {
    pub axes: Vec<Vec<f64>>,
    axis_weights: Vec<Vec<f64>>,
}

impl QuadratureGrid {
    pub fn uniform(domain: &DomainBox, counts: &[usize]) -> Result<Self> {
        if counts.len() != domain.dim() || counts.iter().any(|&c| c < 2) {
            return Err(Error::invalid("quadrature needs at least two nodes per axis"));
        }
        let mut axes = Vec::new();
        let mut axis_weights = Vec::new();
        for (ax, &m) in counts.iter().enumerate() {
            let h = domain.width(ax) / (m - 1) as f64;
            axes.push((0..m).map(|i| domain.lo[ax] + h * i as f64).collect());
            axis_weights.push(
                (0..m).map(|i| if i == 0 || i == m - 1 { 0.5 * h } else { h }).collect(),
            );
        }
        Ok(Self { axes, axis_weights })
    }

    /// Default resolution: 4001 nodes in 1D, 201 × 201 in 2D.
    pub fn default_for(domain: &DomainBox) -> Result<Self> {
        match domain.dim() {
            1 => Self::uniform(domain, &[4001]),
            2 => Self::uniform(domain, &[201, 201]),
            d => Err(Error::Unsupported(format!("quadrature in dimension {d}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node `idx` in row-major order (last axis fastest).
    pub fn node(&self, mut idx: usize) -> (Vec<f64>, f64) {
        let d = self.axes.len();
        let mut x = vec![0.0; d];
        let mut w = 1.0;
        for ax in (0..d).rev() {
            let m = self.axes[ax].len();
            let i = idx % m;
            idx /= m;
            x[ax] = self.axes[ax][i];
            w *= self.axis_weights[ax][i];
        }
        (x, w)
    }

    /// Normalized π-weights of the nodes.
    pub fn pi_weights(&self, model: &dyn SdeModel) -> Result<Vec<f64>> {
        let mut logs = Vec::with_capacity(self.len());
        let mut base = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let (x, w) = self.node(i);
            let lp = model.log_density(&x).ok_or_else(|| {
                Error::Unsupported(format!("model {} has no invariant density", model.name()))
            })?;
            logs.push(lp);
            base.push(w);
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> =
            logs.iter().zip(&base).map(|(l, w)| w * (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(weights)
    }
}

/// How the expectation over π is taken in [`energy_form`].
pub enum Integration<'a> {
    Grid(&'a QuadratureGrid),
    Samples(&'a SampleSet),
}

fn dirichlet_integrand(model: &dyn SdeModel, f: &dyn Observable, g: &dyn Observable, x: &[f64]) -> f64 {
    let s = model.dirichlet_coeff(x);
    let gf = f.gradient(x);
    let gg = g.gradient(x);
    (0..s.ncols())
        .map(|k| {
            let sf: f64 = (0..s.nrows()).map(|l| s[(l, k)] * gf[l]).sum();
            let sg: f64 = (0..s.nrows()).map(|l| s[(l, k)] * gg[l]).sum();
            sf * sg
        })
        .sum()
}

/// Dirichlet energy `E_π[(sᵀ∇f)·(sᵀ∇g)]`.
pub fn energy_form(
    model: &dyn SdeModel,
    f: &dyn Observable,
    g: &dyn Observable,
    integration: Integration<'_>,
) -> Result<f64> {
    match integration {
        Integration::Grid(grid) => {
            let w = grid.pi_weights(model)?;
            Ok((0..grid.len())
                .filter(|&i| w[i] > 0.0)
                .map(|i| w[i] * dirichlet_integrand(model, f, g, &grid.node(i).0))
                .sum())
        }
        Integration::Samples(samples) => {
            if samples.n() == 0 {
                return Err(Error::Unsupported("empty sample set".into()));
            }
            Ok(samples.iter().map(|x| dirichlet_integrand(model, f, g, x)).sum::<f64>()
                / samples.n() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn constant_observable_is_annihilated() {
        let m = LangevinModel::four_well(1.0).unwrap();
        let f = FnObservable(|_: &[f64]| 3.5);
        assert!(generator_apply(&m, &f, &[0.2]).unwrap().abs() < 1e-6);
    }

    #[test]
    fn cir_generator_on_identity() {
        let m = CirModel::new(1.0, -1.0, 1.0).unwrap();
        let f = FnObservable(|x: &[f64]| x[0]);
        let v = generator_apply(&m, &f, &[2.0]).unwrap();
        assert!((v + 1.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn four_well_generator_on_square() {
        let m = LangevinModel::four_well(1.0).unwrap();
        let pot = FourWellPotential;
        let x = 0.3;
        let h = 1e-6;
        let dv = central_diff(|y| pot.value(&[y]), x, h);
        let expected = -2.0 * x * dv + 2.0;
        let f = FnObservable(|y: &[f64]| y[0] * y[0]);
        let got = generator_apply(&m, &f, &[x]).unwrap();
        assert!((got - expected).abs() < 1e-5 * expected.abs().max(1.0), "{got} vs {expected}");
    }

    #[test]
    fn generator_rejects_points_outside_box() {
        let m = LangevinModel::four_well(1.0).unwrap();
        let f = FnObservable(|y: &[f64]| y[0]);
        assert!(matches!(generator_apply(&m, &f, &[1.5]), Err(Error::Domain { .. })));
    }

    #[test]
    fn potential_gradients_match_finite_differences() {
        let fw = FourWellPotential;
        for &x in &[-1.1, -0.5, -0.05, 0.0, 0.31, 0.5, 0.9] {
            let fd = central_diff(|y| fw.value(&[y]), x, 1e-6);
            let g = fw.gradient(&[x])[0];
            assert!((fd - g).abs() < 1e-5 * g.abs().max(1.0), "x={x}: {fd} vs {g}");
        }
        let mb = MullerBrownPotential::new(1.0);
        for p in [[-0.55, 1.44], [0.62, 0.03], [0.0, 0.5], [-1.0, 0.0], [0.8, 1.7]] {
            let g = mb.gradient(&p);
            for l in 0..2 {
                let fd = central_diff(
                    |y| {
                        let mut q = p;
                        q[l] = y;
                        mb.value(&q)
                    },
                    p[l],
                    1e-6,
                );
                assert!((fd - g[l]).abs() < 1e-5 * g[l].abs().max(1.0));
            }
        }
    }

    #[test]
    fn muller_brown_has_its_known_minimum() {
        let mb = MullerBrownPotential::new(1.0);
        let v = mb.value(&[-0.558, 1.442]);
        assert!((v + 146.7).abs() < 0.1, "{v}");
    }

    #[test]
    fn dirichlet_coefficients_match_diffusion_on_grid() {
        let lv = LangevinModel::muller_brown(2.0, 0.1).unwrap();
        let cir = CirModel::new(1.0, -1.0, 0.5).unwrap();
        for i in 0..50 {
            let t = i as f64 / 49.0;
            let x = [-1.5 + 2.7 * t, -0.5 + 2.5 * (1.0 - t)];
            let s = lv.dirichlet_coeff(&x);
            let b = lv.diffusion(&x);
            for l in 0..2 {
                assert!((s[(l, l)] - 2f64.sqrt()).abs() < 1e-14);
                assert!((b[(l, l)] - 2.0).abs() < 1e-14);
                assert_eq!(s[(l, 1 - l)], 0.0);
            }
            let y = [cir.domain_box().lo[0] + t * cir.domain_box().width(0)];
            let s = cir.dirichlet_coeff(&y)[(0, 0)];
            let b = cir.diffusion(&y)[(0, 0)];
            assert!((s - 0.5 * y[0].sqrt() / 2f64.sqrt()).abs() < 1e-14);
            assert!((b - 0.5 * y[0].sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn densities_are_finite_and_nonnegative() {
        let models: Vec<Box<dyn SdeModel>> = vec![
            Box::new(LangevinModel::four_well(1.0).unwrap()),
            Box::new(LangevinModel::muller_brown(2.0, 0.1).unwrap()),
            Box::new(CirModel::new(1.0, -1.0, 0.5).unwrap()),
        ];
        for m in &models {
            let grid = QuadratureGrid::uniform(m.domain_box(), &vec![41; m.dim_state()]).unwrap();
            let w = grid.pi_weights(m.as_ref()).unwrap();
            assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
            for i in 0..grid.len() {
                let d = m.invariant_density(&grid.node(i).0).unwrap();
                assert!(d.is_finite() && d >= 0.0);
            }
        }
    }

    #[test]
    fn cir_box_covers_the_stationary_law() {
        let m = CirModel::new(1.0, -1.0, 0.5).unwrap();
        let g = Gamma::new(m.gamma_shape(), m.gamma_rate()).unwrap();
        let hi = m.domain_box().hi[0];
        assert!(g.sf(hi) <= CirModel::UPPER_TAIL * 1.0001);
        assert!((m.stationary_mean() - 1.0).abs() < 1e-15);
        assert!((m.half_life() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn energy_of_constant_vanishes_and_identity_gives_kbt() {
        let m = LangevinModel::four_well(1.3).unwrap();
        let grid = QuadratureGrid::default_for(m.domain_box()).unwrap();
        let c = FnObservable(|_: &[f64]| 2.0);
        let id = FnObservable(|x: &[f64]| x[0]);
        assert!(energy_form(&m, &c, &id, Integration::Grid(&grid)).unwrap().abs() < 1e-10);
        let e = energy_form(&m, &id, &id, Integration::Grid(&grid)).unwrap();
        assert!((e - 1.3).abs() < 1e-6, "{e}");
    }

    #[test]
    fn energy_form_is_symmetric() {
        let m = LangevinModel::four_well(1.0).unwrap();
        let grid = QuadratureGrid::uniform(m.domain_box(), &[801]).unwrap();
        let f = FnObservable(|x: &[f64]| 0.3 * x[0].powi(3) - x[0] + 2.0);
        let g = FnObservable(|x: &[f64]| x[0].powi(2) + 0.7 * x[0].powi(4));
        let fg = energy_form(&m, &f, &g, Integration::Grid(&grid)).unwrap();
        let gf = energy_form(&m, &g, &f, Integration::Grid(&grid)).unwrap();
        assert!((fg - gf).abs() <= 1e-12 * fg.abs());
    }

    #[test]
    fn energy_form_needs_density_for_grid() {
        let m = CustomModel::new(
            "nodensity",
            1,
            DomainBox::new(vec![0.0], vec![1.0]),
            |x| vec![-x[0]],
            |_| Mat::from_fn(1, 1, |_, _| 1.0),
            |_| Mat::from_fn(1, 1, |_, _| 1.0),
        );
        let grid = QuadratureGrid::uniform(m.domain_box(), &[11]).unwrap();
        let f = FnObservable(|x: &[f64]| x[0]);
        assert!(matches!(
            energy_form(&m, &f, &f, Integration::Grid(&grid)),
            Err(Error::Unsupported(_))
        ));
    }
}
