//! Finite-volume reference spectra and the analytic CIR conditional mean.
//!
//! The Dirichlet form is discretized on cell centers with fluxes
//! `c(x_f) π(x_f) / h²` across each interior face (`c = (s sᵀ)_{ll}` along the
//! face normal), which keeps the operator π-self-adjoint with an exact zero
//! eigenvalue and reflecting walls.

use std::path::Path;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, sym_eigen};
use crate::models::{CirModel, SdeModel};
use crate::sampling::rng_from_seed;

/// Modes returned by the 1D oracle.
pub const MODES_1D: usize = 8;
/// Modes returned by the 2D oracle.
pub const MODES_2D: usize = 6;
/// Largest unknown count solved with the dense eigensolver.
pub const DENSE_LIMIT: usize = 2000;
/// Cells whose log-density lies this far below the maximum are dropped.
const LOG_DENSITY_CUTOFF: f64 = -700.0;

/// Cell-centered tensor grid.
#[derive(Clone, Debug, Serialize)]
pub struct OracleGrid {
    /// Cell centers along each axis.
    pub axes: Vec<Vec<f64>>,
}

impl OracleGrid {
    fn cell_centered(lo: &[f64], hi: &[f64], counts: &[usize]) -> Self {
        let axes = counts
            .iter()
            .enumerate()
            .map(|(a, &m)| {
                let h = (hi[a] - lo[a]) / m as f64;
                (0..m).map(|i| lo[a] + (i as f64 + 0.5) * h).collect()
            })
            .collect();
        Self { axes }
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node `idx`, last axis fastest.
    pub fn node(&self, idx: usize) -> Vec<f64> {
        match self.axes.len() {
            1 => vec![self.axes[0][idx]],
            _ => {
                let ny = self.axes[1].len();
                vec![self.axes[0][idx / ny], self.axes[1][idx % ny]]
            }
        }
    }

    fn spacing(&self, axis: usize) -> f64 {
        let a = &self.axes[axis];
        if a.len() > 1 {
            a[1] - a[0]
        } else {
            1.0
        }
    }
}

/// Reference eigenpairs on a grid, slowest first (`λ₁ = 0`).
#[derive(Clone, Debug, Serialize)]
pub struct OracleSpectrum {
    pub eigenvalues: Vec<f64>,
    /// `grid.len() × m`, π-orthonormal under `weights`.
    #[serde(skip)]
    pub eigenfunctions: Mat<f64>,
    pub grid: OracleGrid,
    /// Normalized π quadrature weights of the grid cells.
    pub weights: Vec<f64>,
    pub solver: String,
}

impl OracleSpectrum {
    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Eigenfunction `mode` at `x`: cubic (1D) or bilinear (2D) interpolation.
    pub fn interpolate(&self, mode: usize, x: &[f64]) -> f64 {
        let f = |idx: usize| self.eigenfunctions[(idx, mode)];
        match self.grid.axes.len() {
            1 => cubic(&self.grid.axes[0], x[0], f),
            _ => {
                let (ax, ay) = (&self.grid.axes[0], &self.grid.axes[1]);
                let ny = ay.len();
                let (i, tx) = bracket(ax, x[0]);
                let (j, ty) = bracket(ay, x[1]);
                let v = |a: usize, b: usize| f(a * ny + b);
                (1.0 - tx) * (1.0 - ty) * v(i, j)
                    + tx * (1.0 - ty) * v(i + 1, j)
                    + (1.0 - tx) * ty * v(i, j + 1)
                    + tx * ty * v(i + 1, j + 1)
            }
        }
    }

    /// Long-format CSV: grid coordinates, π weight, then `oracle_1..oracle_m`.
    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for c in comments {
            writeln!(f, "# {c}")?;
        }
        let d = self.grid.axes.len();
        let mut head: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
        head.push("pi_weight".into());
        head.extend((1..=self.n_modes()).map(|k| format!("oracle_{k}")));
        writeln!(f, "{}", head.join(","))?;
        for g in 0..self.grid.len() {
            let mut row: Vec<String> = self.grid.node(g).iter().map(|v| v.to_string()).collect();
            row.push(self.weights[g].to_string());
            row.extend((0..self.n_modes()).map(|m| self.eigenfunctions[(g, m)].to_string()));
            writeln!(f, "{}", row.join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Index `i` and fraction `t` with `x` between nodes `i` and `i + 1` (clamped).
fn bracket(axis: &[f64], x: f64) -> (usize, f64) {
    let m = axis.len();
    let h = axis[1] - axis[0];
    let s = ((x - axis[0]) / h).clamp(0.0, (m - 1) as f64);
    let i = (s.floor() as usize).min(m - 2);
    (i, s - i as f64)
}

/// Four-point Lagrange interpolation on a uniform axis.
fn cubic(axis: &[f64], x: f64, f: impl Fn(usize) -> f64) -> f64 {
    let m = axis.len();
    if m < 4 {
        let (i, t) = bracket(axis, x);
        return (1.0 - t) * f(i) + t * f(i + 1);
    }
    let h = axis[1] - axis[0];
    let s = ((x - axis[0]) / h).clamp(0.0, (m - 1) as f64);
    let base = (s.floor() as isize - 1).clamp(0, m as isize - 4) as usize;
    let mut acc = 0.0;
    for a in 0..4 {
        let mut w = 1.0;
        for b in 0..4 {
            if a != b {
                w *= (s - (base + b) as f64) / (a as f64 - b as f64);
            }
        }
        acc += w * f(base + a);
    }
    acc
}

/// Flux-form generator `L = D⁻¹A` on the kept cells of a grid.
#[derive(Clone, Debug)]
pub struct FvOperator {
    pub grid: OracleGrid,
    /// Global cell index of each unknown.
    pub cells: Vec<usize>,
    /// Relative density at each unknown (max 1).
    pub pi: Vec<f64>,
    /// Symmetric off-diagonal couplings `(a, b, w)` with `a < b`, in unknown indices.
    pub couplings: Vec<(usize, usize, f64)>,
}

impl FvOperator {
    pub fn build(model: &dyn SdeModel, counts: &[usize]) -> Result<Self> {
        if !model.has_density() {
            return Err(Error::Unsupported(format!("model {} has no invariant density", model.name())));
        }
        let bx = model.domain_box();
        let grid = OracleGrid::cell_centered(&bx.lo, &bx.hi, counts);
        let total = grid.len();
        let logs: Vec<f64> = (0..total)
            .map(|g| model.log_density(&grid.node(g)).unwrap_or(f64::NEG_INFINITY))
            .collect();
        let lmax = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut index = vec![usize::MAX; total];
        let mut cells = Vec::new();
        let mut pi = Vec::new();
        for g in 0..total {
            if logs[g] - lmax >= LOG_DENSITY_CUTOFF {
                index[g] = cells.len();
                cells.push(g);
                pi.push((logs[g] - lmax).exp());
            }
        }
        let d = counts.len();
        let strides: Vec<usize> = if d == 1 { vec![1] } else { vec![counts[1], 1] };
        let mut couplings = Vec::new();
        for (u, &g) in cells.iter().enumerate() {
            let x = grid.node(g);
            for ax in 0..d {
                let pos = if d == 1 { g } else if ax == 0 { g / counts[1] } else { g % counts[1] };
                if pos + 1 >= counts[ax] {
                    continue;
                }
                let nb = g + strides[ax];
                if index[nb] == usize::MAX {
                    continue;
                }
                let h = grid.spacing(ax);
                let mut xf = x.clone();
                xf[ax] += 0.5 * h;
                let s = model.dirichlet_coeff(&xf);
                let c: f64 = (0..s.ncols()).map(|k| s[(ax, k)] * s[(ax, k)]).sum();
                let lf = model.log_density(&xf).unwrap_or(f64::NEG_INFINITY) - lmax;
                let w = c * lf.exp() / (h * h);
                if w > 0.0 {
                    couplings.push((u, index[nb], w));
                }
            }
        }
        Ok(Self { grid, cells, pi, couplings })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// `(Lf)_a = Σ_b w_ab (f_b − f_a) / π_a` on the kept cells.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for &(a, b, w) in &self.couplings {
            let flux = w * (f[b] - f[a]);
            out[a] += flux;
            out[b] -= flux;
        }
        out.iter_mut().zip(&self.pi).for_each(|(o, p)| *o /= p);
        out
    }

    /// Triplets of `-D^{-1/2} A D^{-1/2}` plus `shift·I` (positive semidefinite for `shift = 0`).
    fn neg_sym_triplets(&self, shift: f64) -> Vec<Triplet<usize, usize, f64>> {
        let mut diag = vec![shift; self.len()];
        let mut t = Vec::with_capacity(self.len() + 2 * self.couplings.len());
        for &(a, b, w) in &self.couplings {
            diag[a] += w / self.pi[a];
            diag[b] += w / self.pi[b];
            let v = -w / (self.pi[a] * self.pi[b]).sqrt();
            t.push(Triplet::new(a, b, v));
            t.push(Triplet::new(b, a, v));
        }
        t.extend(diag.iter().enumerate().map(|(i, v)| Triplet::new(i, i, *v)));
        t
    }

    fn neg_sym_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.len(), self.len());
        for t in self.neg_sym_triplets(0.0) {
            m[(t.row, t.col)] += t.val;
        }
        m
    }
}

/// Lowest `m` eigenpairs `(θ ascending, vectors)` of the PSD operator `-S`.
fn lowest_modes(op: &FvOperator, m: usize) -> Result<(Vec<f64>, Mat<f64>, String)> {
    let n = op.len();
    let m = m.min(n);
    if n <= DENSE_LIMIT {
        let (vals, vecs) = sym_eigen(op.neg_sym_dense().as_ref(), "finite-volume operator")?;
        return Ok((vals[..m].to_vec(), vecs.subcols(0, m).to_owned(), "dense".into()));
    }
    shift_invert_subspace(op, m)
}

/// Block shift-invert subspace iteration with Rayleigh-Ritz on the sparse operator.
fn shift_invert_subspace(op: &FvOperator, m: usize) -> Result<(Vec<f64>, Mat<f64>, String)> {
    let n = op.len();
    let trips = op.neg_sym_triplets(0.0);
    let max_diag = trips.iter().filter(|t| t.row == t.col).map(|t| t.val).fold(0.0, f64::max);
    let shift = 1e-8 * max_diag.max(f64::MIN_POSITIVE);
    let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trips)
        .map_err(|_| Error::EigenSolver("sparse operator assembly"))?;
    let shifted = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &op.neg_sym_triplets(shift))
        .map_err(|_| Error::EigenSolver("sparse operator assembly"))?;
    let llt = shifted.sp_cholesky(Side::Lower).map_err(|_| Error::Factorization {
        matrix: "shifted finite-volume operator",
        min_eigenvalue: f64::NAN,
    })?;

    let b = (2 * m).max(m + 8).min(n);
    let mut rng = rng_from_seed(0x5EED_0F0C);
    let mut x = Mat::from_fn(n, b, |i, c| {
        if c == 0 {
            op.pi[i].sqrt()
        } else {
            rng.random::<f64>() - 0.5
        }
    });
    x = orthonormalize(&x);
    let tol = 1e-10 * max_diag;
    let mut theta = vec![0.0; b];
    for _iter in 0..500 {
        let y = llt.solve(&x);
        let q = orthonormalize(&y);
        let aq = &a * &q;
        let h = linalg::symmetrize((q.transpose() * &aq).as_ref());
        let (th, z) = sym_eigen(h.as_ref(), "Rayleigh-Ritz")?;
        x = &q * &z;
        let ax = &aq * &z;
        let res = (0..m)
            .map(|c| {
                (0..n).map(|i| (ax[(i, c)] - th[c] * x[(i, c)]).powi(2)).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max);
        let stalled = th[..m]
            .iter()
            .zip(&theta[..m])
            .all(|(a, b)| (a - b).abs() <= 1e-13 * (a.abs() + 1.0));
        theta = th;
        if res <= tol || stalled {
            return Ok((theta[..m].to_vec(), x.subcols(0, m).to_owned(), "shift_invert_subspace".into()));
        }
    }
    log::warn!("subspace iteration reached 500 iterations");
    Ok((theta[..m].to_vec(), x.subcols(0, m).to_owned(), "shift_invert_subspace".into()))
}

fn orthonormalize(y: &Mat<f64>) -> Mat<f64> {
    y.qr().compute_thin_Q()
}

fn assemble_spectrum(op: &FvOperator, m: usize) -> Result<OracleSpectrum> {
    let (theta, y, solver) = lowest_modes(op, m)?;
    let total = op.grid.len();
    let z: f64 = op.pi.iter().sum();
    let mut weights = vec![0.0; total];
    for (u, &g) in op.cells.iter().enumerate() {
        weights[g] = op.pi[u] / z;
    }
    let mut funcs = Mat::zeros(total, theta.len());
    for c in 0..theta.len() {
        // f = √Z D^{-1/2} y is π-normalized under the cell weights
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for (u, &g) in op.cells.iter().enumerate() {
            let v = z.sqrt() * y[(u, c)] / op.pi[u].sqrt();
            funcs[(g, c)] = v;
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        for g in 0..total {
            funcs[(g, c)] *= sign;
        }
    }
    Ok(OracleSpectrum {
        eigenvalues: theta.iter().map(|t| -t.max(0.0)).collect(),
        eigenfunctions: funcs,
        grid: op.grid.clone(),
        weights,
        solver,
    })
}

/// Reference spectrum of a one-dimensional model on `grid_n` cells; 8 slowest modes.
pub fn fd_generator_1d(model: &dyn SdeModel, grid_n: usize) -> Result<OracleSpectrum> {
    if model.dim_state() != 1 {
        return Err(Error::Unsupported("fd_generator_1d needs a one-dimensional model".into()));
    }
    if grid_n < 100 {
        return Err(Error::Resolution(grid_n));
    }
    let op = FvOperator::build(model, &[grid_n])?;
    assemble_spectrum(&op, MODES_1D)
}

/// Reference spectrum of a two-dimensional model on `nx × ny` cells; 6 slowest modes.
pub fn fd_generator_2d(model: &dyn SdeModel, nx: usize, ny: usize) -> Result<OracleSpectrum> {
    if model.dim_state() != 2 {
        return Err(Error::Unsupported("fd_generator_2d needs a two-dimensional model".into()));
    }
    if nx.saturating_mul(ny) > 1_000_000 {
        return Err(Error::MemoryGuard(nx.saturating_mul(ny)));
    }
    if nx < 2 || ny < 2 {
        return Err(Error::Resolution(nx.min(ny)));
    }
    let op = FvOperator::build(model, &[nx, ny])?;
    assemble_spectrum(&op, MODES_2D)
}

/// `E[X_t | X_0 = x0] = x0 e^{bt} − (a/b)(1 − e^{bt})`.
pub fn cir_conditional_mean(model: &CirModel, x0: f64, t: f64) -> f64 {
    let e = (model.b * t).exp();
    x0 * e - (model.a / model.b) * (1.0 - e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DomainBox, FlatPotential, LangevinModel, QuadraticPotential};
    use std::f64::consts::{LN_2, PI};

    fn flat(len: f64) -> LangevinModel {
        LangevinModel::new(1.0, Box::new(FlatPotential { dim: 1 }), DomainBox::new(vec![0.0], vec![len]))
            .unwrap()
    }

    #[test]
    fn neumann_laplacian() {
        let len = 2.0;
        let o = fd_generator_1d(&flat(len), 4000).unwrap();
        assert_eq!(o.solver, "shift_invert_subspace");
        assert!(o.eigenvalues[0].abs() < 1e-6);
        for k in 1..6 {
            let want = -(PI * k as f64 / len).powi(2);
            assert!((o.eigenvalues[k] - want).abs() <= 0.01 * want.abs(), "{k}: {}", o.eigenvalues[k]);
        }
    }

    #[test]
    fn sparse_and_dense_paths_agree() {
        let m = LangevinModel::four_well(1.0).unwrap();
        let dense = fd_generator_1d(&m, 1500).unwrap();
        let op = FvOperator::build(&m, &[1500]).unwrap();
        let (th, _, _) = shift_invert_subspace(&op, 8).unwrap();
        assert_eq!(dense.solver, "dense");
        for k in 0..8 {
            let l = -th[k].max(0.0);
            assert!((dense.eigenvalues[k] - l).abs() <= 1e-7 * (1.0 + l.abs()), "{k}");
        }
    }

    #[test]
    fn cir_spectrum_is_integer_spaced() {
        let m = CirModel::new(1.0, -1.0, 0.5).unwrap();
        let o = fd_generator_1d(&m, 4000).unwrap();
        for k in 0..3 {
            assert!((o.eigenvalues[k] + k as f64).abs() <= 0.02 * (k as f64).max(1e-3) + 1e-6, "{:?}", o.eigenvalues);
        }
    }

    #[test]
    fn grid_refinement_converges() {
        let m = LangevinModel::four_well(1.0).unwrap();
        let a = fd_generator_1d(&m, 2000).unwrap();
        let b = fd_generator_1d(&m, 4000).unwrap();
        for k in 1..4 {
            assert!((a.eigenvalues[k] - b.eigenvalues[k]).abs() <= 0.005 * b.eigenvalues[k].abs());
        }
    }

    #[test]
    fn spectrum_invariants() {
        let m = LangevinModel::four_well(1.0).unwrap();
        let o = fd_generator_1d(&m, 1000).unwrap();
        assert!(o.eigenvalues[0] <= 0.0 && o.eigenvalues[0] >= -1e-6);
        assert!(o.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        let f0: Vec<f64> = (0..o.grid.len()).map(|g| o.eigenfunctions[(g, 0)]).collect();
        let mean: f64 = f0.iter().zip(&o.weights).map(|(f, w)| f * w).sum();
        let var: f64 = f0.iter().zip(&o.weights).map(|(f, w)| w * (f - mean).powi(2)).sum();
        assert!(var.sqrt() / mean.abs() < 1e-3);
        for a in 0..o.n_modes() {
            for b in 0..o.n_modes() {
                let ip: f64 = (0..o.grid.len())
                    .map(|g| o.weights[g] * o.eigenfunctions[(g, a)] * o.eigenfunctions[(g, b)])
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((ip - want).abs() < 1e-8, "{a},{b}: {ip}");
            }
        }
    }

    #[test]
    fn operator_is_pi_self_adjoint() {
        let m = LangevinModel::muller_brown(2.0, 0.1).unwrap();
        let op = FvOperator::build(&m, &[40, 30]).unwrap();
        let f: Vec<f64> = (0..op.len()).map(|i| ((i * 37) % 17) as f64 - 8.0).collect();
        let g: Vec<f64> = (0..op.len()).map(|i| ((i * 11) % 13) as f64 * 0.3).collect();
        let lf = op.apply(&f);
        let lg = op.apply(&g);
        let a: f64 = (0..op.len()).map(|i| op.pi[i] * lf[i] * g[i]).sum();
        let b: f64 = (0..op.len()).map(|i| op.pi[i] * f[i] * lg[i]).sum();
        assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()));
    }

    #[test]
    fn ornstein_uhlenbeck_2d() {
        let m = LangevinModel::new(
            1.0,
            Box::new(QuadraticPotential { stiffness: vec![1.0, 1.0] }),
            DomainBox::new(vec![-6.0, -6.0], vec![6.0, 6.0]),
        )
        .unwrap();
        let o = fd_generator_2d(&m, 201, 201).unwrap();
        let want = [0.0, -1.0, -1.0, -2.0, -2.0, -2.0];
        for k in 0..6 {
            assert!((o.eigenvalues[k] - want[k]).abs() <= 0.02 * want[k].abs() + 1e-6, "{:?}", o.eigenvalues);
        }
    }

    #[test]
    fn eigenfunction_parity_follows_the_potential() {
        let m = LangevinModel::new(
            1.0,
            Box::new(QuadraticPotential { stiffness: vec![1.0, 2.5] }),
            DomainBox::new(vec![-6.0, -4.0], vec![6.0, 4.0]),
        )
        .unwrap();
        let o = fd_generator_2d(&m, 121, 81).unwrap();
        // mode 2 is x (odd in x, even in y); mode 4 is y (even in x, odd in y)
        let f = |k: usize, x: f64, y: f64| o.interpolate(k, &[x, y]);
        for &(x, y) in &[(1.0, 0.35), (0.4, -0.7), (2.0, 1.1)] {
            let s = f(1, x, y).abs();
            assert!((f(1, x, y) + f(1, -x, y)).abs() < 1e-8 * s);
            assert!((f(1, x, y) - f(1, x, -y)).abs() < 1e-8 * s);
            let s = f(3, x, y).abs();
            assert!((f(3, x, y) - f(3, -x, y)).abs() < 1e-8 * s);
            assert!((f(3, x, y) + f(3, x, -y)).abs() < 1e-8 * s);
        }
    }

    #[test]
    fn guards() {
        let m = LangevinModel::four_well(1.0).unwrap();
        assert!(matches!(fd_generator_1d(&m, 50), Err(Error::Resolution(50))));
        let mb = LangevinModel::muller_brown(2.0, 0.1).unwrap();
        assert!(matches!(fd_generator_2d(&mb, 2000, 1000), Err(Error::MemoryGuard(_))));
    }

    #[test]
    fn cir_mean_closed_form() {
        let m = CirModel::new(1.0, -1.0, 0.5).unwrap();
        assert_eq!(cir_conditional_mean(&m, 2.0, 0.0), 2.0);
        assert!((cir_conditional_mean(&m, 2.0, LN_2) - 1.5).abs() < 1e-15);
        assert!((cir_conditional_mean(&m, 5.0, 100.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_reproduces_cubics() {
        let axis: Vec<f64> = (0..20).map(|i| 0.1 * i as f64 + 0.05).collect();
        let p = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x * x;
        let got = cubic(&axis, 0.731, |i| p(axis[i]));
        assert!((got - p(0.731)).abs() < 1e-12);
    }
}
