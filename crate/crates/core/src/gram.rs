//! Kernel and derivative Gram matrices, and the regularized system `J`.
//!
//! Blocks are noise-channel-major: column `k·n + j` of `N` (and row/column
//! `k·n + i` of `M`) holds the derivative feature of channel `k` at `x_j`.

use std::path::Path;
use std::sync::Arc;

use faer::linalg::solvers::{Llt, Solve};
use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};
use crate::kernel::{Kernel, RbfKernel};
use crate::linalg::{self, frobenius};
use crate::models::SdeModel;
use crate::sampling::SampleSet;

pub struct GramSystem {
    pub n: usize,
    pub p: usize,
    pub mu: f64,
    pub gamma: f64,
    pub kernel: RbfKernel,
    pub k: Mat<f64>,
    pub nmat: Mat<f64>,
    pub m: Mat<f64>,
    /// `(M + γμI)⁻¹ Nᵀ`.
    pub minv_nt: Mat<f64>,
    pub j: Mat<f64>,
    j_llt: Llt<f64>,
    m_reg_llt: Llt<f64>,
    /// Set when `1e-12·I` had to be added to `K` to factor `J`.
    pub jitter_applied: bool,
    pub samples: SampleSet,
    /// `s(x_j)` at every sample, `d × p`.
    pub s_samples: Vec<Mat<f64>>,
    pub model: Arc<dyn SdeModel>,
}

/// Outcome of the structural checks on an assembled system.
#[derive(Clone, Debug, serde::Serialize)]
pub struct GramInvariants {
    pub k_min_eig: f64,
    pub m_min_eig: f64,
    pub f_mu_min_eig: f64,
    pub j_min_eig: f64,
    pub k_psd: bool,
    pub m_psd: bool,
    pub f_mu_psd: bool,
    pub j_bound_ok: bool,
    pub k_diag_ok: bool,
    pub schur_rel_err: f64,
}

impl GramInvariants {
    pub fn all_ok(&self) -> bool {
        self.k_psd && self.m_psd && self.f_mu_psd && self.j_bound_ok && self.k_diag_ok
            && self.schur_rel_err <= 1e-8
    }
}

fn add_diag(a: &Mat<f64>, c: f64) -> Mat<f64> {
    let mut b = a.clone();
    for i in 0..b.nrows() {
        b[(i, i)] += c;
    }
    b
}

impl GramSystem {
    pub fn assemble(
        samples: &SampleSet,
        model: Arc<dyn SdeModel>,
        kernel: RbfKernel,
        mu: f64,
        gamma: f64,
    ) -> Result<Self> {
        if !(mu > 0.0) || !(gamma > 0.0) {
            return Err(Error::invalid("mu and gamma must be positive"));
        }
        if samples.n() == 0 {
            return Err(Error::invalid("empty sample set"));
        }
        if samples.dim() != model.dim_state() {
            return Err(Error::invalid("sample dimension does not match the model"));
        }
        let n = samples.n();
        let d = model.dim_state();
        let p = model.dim_noise();
        let inv_n = 1.0 / n as f64;
        let s_samples: Vec<Mat<f64>> = samples.iter().map(|x| model.dirichlet_coeff(x)).collect();

        let mut k = Mat::zeros(n, n);
        let mut nmat = Mat::zeros(n, p * n);
        let mut m = Mat::zeros(p * n, p * n);
        for i in 0..n {
            let xi = samples.point(i);
            let si = &s_samples[i];
            for j in 0..n {
                let xj = samples.point(j);
                let sj = &s_samples[j];
                if j >= i {
                    let kv = kernel.eval(xi, xj) * inv_n;
                    k[(i, j)] = kv;
                    k[(j, i)] = kv;
                }
                let g = kernel.grad_second_arg(xi, xj);
                for c in 0..p {
                    let v: f64 = (0..d).map(|l| sj[(l, c)] * g[l]).sum();
                    nmat[(i, c * n + j)] = v * inv_n;
                }
                if j >= i {
                    let h = kernel.mixed_hessian(xi, xj);
                    for a in 0..p {
                        for b in 0..p {
                            let mut v = 0.0;
                            for lp in 0..d {
                                for l in 0..d {
                                    v += si[(lp, a)] * h[(lp, l)] * sj[(l, b)];
                                }
                            }
                            v *= inv_n;
                            m[(a * n + i, b * n + j)] = v;
                            m[(b * n + j, a * n + i)] = v;
                        }
                    }
                }
            }
        }

        let m_reg = add_diag(&m, gamma * mu);
        let m_reg_llt = m_reg.llt(Side::Lower).map_err(|_| Error::Factorization {
            matrix: "M + gamma*mu*I",
            min_eigenvalue: linalg::min_eigenvalue(m_reg.as_ref(), "M + gamma*mu*I")
                .unwrap_or(f64::NAN),
        })?;
        let minv_nt = m_reg_llt.solve(nmat.transpose());

        let build_j = |k: &Mat<f64>| {
            let mut j = k - &nmat * &minv_nt;
            for i in 0..n {
                j[(i, i)] += gamma;
            }
            linalg::symmetrize(j.as_ref())
        };
        let mut j = build_j(&k);
        let mut jitter_applied = false;
        let j_llt = match j.llt(Side::Lower) {
            Ok(l) => l,
            Err(_) => {
                log::warn!("J factorization failed; adding 1e-12 I to K");
                k = add_diag(&k, 1e-12);
                jitter_applied = true;
                j = build_j(&k);
                j.llt(Side::Lower).map_err(|_| Error::Factorization {
                    matrix: "J",
                    min_eigenvalue: linalg::min_eigenvalue(j.as_ref(), "J").unwrap_or(f64::NAN),
                })?
            }
        };

        Ok(Self {
            n,
            p,
            mu,
            gamma,
            kernel,
            k,
            nmat,
            m,
            minv_nt,
            j,
            j_llt,
            m_reg_llt,
            jitter_applied,
            samples: samples.clone(),
            s_samples,
            model,
        })
    }

    /// `J⁻¹ B`.
    pub fn solve_j(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        self.j_llt.solve(b)
    }

    /// `(M + γμI)⁻¹ B`.
    pub fn solve_m_reg(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        self.m_reg_llt.solve(b)
    }

    /// Explicit `F_μ = [μK, √μN; √μNᵀ, M]`.
    pub fn f_mu(&self) -> Mat<f64> {
        let (n, pn) = (self.n, self.p * self.n);
        let sm = self.mu.sqrt();
        Mat::from_fn(n + pn, n + pn, |a, b| match (a < n, b < n) {
            (true, true) => self.mu * self.k[(a, b)],
            (true, false) => sm * self.nmat[(a, b - n)],
            (false, true) => sm * self.nmat[(b, a - n)],
            (false, false) => self.m[(a - n, b - n)],
        })
    }

    /// `F_μ X` without forming `F_μ`.
    pub fn f_mu_mul(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        let n = self.n;
        let sm = self.mu.sqrt();
        let top = x.subrows(0, n);
        let bot = x.subrows(n, self.p * n);
        let up = &self.k * top * self.mu + &self.nmat * bot * sm;
        let lo = self.nmat.transpose() * top * sm + &self.m * bot;
        let mut out = Mat::zeros(x.nrows(), x.ncols());
        out.as_mut().subrows_mut(0, n).copy_from(&up);
        out.as_mut().subrows_mut(n, self.p * n).copy_from(&lo);
        out
    }

    /// `‖μJ − S‖_F / ‖μJ‖_F`, with `S` the Schur complement of `F_{μ,γ}`
    /// computed through an independent LU route.
    pub fn schur_check(&self) -> f64 {
        let m_reg = add_diag(&self.m, self.gamma * self.mu);
        let lu = m_reg.partial_piv_lu();
        let x = lu.solve(self.nmat.transpose());
        let mut s = (&self.k - &self.nmat * &x) * self.mu;
        for i in 0..self.n {
            s[(i, i)] += self.mu * self.gamma;
        }
        let mj = &self.j * self.mu;
        frobenius((&mj - &s).as_ref()) / frobenius(mj.as_ref())
    }

    /// Structural checks; `F_μ` is formed explicitly so this is meant for moderate `n`.
    pub fn check_invariants(&self) -> Result<GramInvariants> {
        let k_min_eig = linalg::min_eigenvalue(self.k.as_ref(), "K")?;
        let m_min_eig = linalg::min_eigenvalue(self.m.as_ref(), "M")?;
        let f = self.f_mu();
        let f_mu_min_eig = linalg::min_eigenvalue(f.as_ref(), "F_mu")?;
        let j_min_eig = linalg::min_eigenvalue(self.j.as_ref(), "J")?;
        let tol = |a: &Mat<f64>| -1e-10 * linalg::trace(a.as_ref()).abs();
        let diag = 1.0 / self.n as f64;
        let k_diag_ok = self.jitter_applied
            || (0..self.n).all(|i| (self.k[(i, i)] - diag).abs() <= 1e-15 * diag.max(1.0));
        Ok(GramInvariants {
            k_min_eig,
            m_min_eig,
            f_mu_min_eig,
            j_min_eig,
            k_psd: k_min_eig >= tol(&self.k),
            m_psd: m_min_eig >= tol(&self.m),
            f_mu_psd: f_mu_min_eig >= tol(&f),
            j_bound_ok: j_min_eig >= self.gamma - 1e-10,
            k_diag_ok,
            schur_rel_err: self.schur_check(),
        })
    }

    /// Writes `K.csv`, `N.csv`, `M.csv` and `J.csv` into `dir`.
    pub fn dump_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let note = vec![format!(
            "n={} p={} mu={} gamma={} kappa={}; derivative blocks are noise-channel-major (index k*n+j)",
            self.n, self.p, self.mu, self.gamma, self.kernel.kappa
        )];
        linalg::write_matrix_csv(&dir.join("K.csv"), self.k.as_ref(), &note)?;
        linalg::write_matrix_csv(&dir.join("N.csv"), self.nmat.as_ref(), &note)?;
        linalg::write_matrix_csv(&dir.join("M.csv"), self.m.as_ref(), &note)?;
        linalg::write_matrix_csv(&dir.join("J.csv"), self.j.as_ref(), &note)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{CirModel, LangevinModel, ScaledDirichlet};
    use crate::sampling::{sample_invariant, SamplingMethod};

    fn fw() -> Arc<dyn SdeModel> {
        Arc::new(LangevinModel::four_well(1.0).unwrap())
    }

    #[test]
    fn single_point_system() {
        let s = SampleSet::new(1, vec![0.37], 0, SamplingMethod::ExactInverseCdf).unwrap();
        let kap = 2.5;
        let g = GramSystem::assemble(&s, fw(), RbfKernel::new(kap), 5.0, 1e-3).unwrap();
        assert_eq!(g.k[(0, 0)], 1.0);
        assert_eq!(g.nmat[(0, 0)], 0.0);
        assert!((g.m[(0, 0)] - 2.0 * kap).abs() < 1e-14);
        assert!((g.j[(0, 0)] - 1.001).abs() < 1e-14);
    }

    #[test]
    fn zero_dirichlet_gives_ridge_system() {
        let model: Arc<dyn SdeModel> = Arc::new(ScaledDirichlet::new(fw(), 0.0));
        let s = sample_invariant(model.as_ref(), 30, 1, SamplingMethod::ExactInverseCdf).unwrap();
        let g = GramSystem::assemble(&s, model, RbfKernel::from_lengthscale(0.2), 2.0, 1e-4).unwrap();
        assert_eq!(frobenius(g.nmat.as_ref()), 0.0);
        assert_eq!(frobenius(g.m.as_ref()), 0.0);
        for i in 0..30 {
            for j in 0..30 {
                let want = g.k[(i, j)] + if i == j { 1e-4 } else { 0.0 };
                assert!((g.j[(i, j)] - want).abs() < 1e-16);
            }
        }
        assert!(g.schur_check() < 1e-14);
    }

    #[test]
    fn schur_identity_on_cir_and_four_well() {
        let cir: Arc<dyn SdeModel> = Arc::new(CirModel::new(1.0, -1.0, 0.5).unwrap());
        let s = sample_invariant(cir.as_ref(), 25, 3, SamplingMethod::ExactGamma).unwrap();
        let g = GramSystem::assemble(&s, cir, RbfKernel::from_lengthscale(0.5), 5.0, 1e-5).unwrap();
        assert!(g.schur_check() <= 1e-8);
        let s = sample_invariant(fw().as_ref(), 50, 3, SamplingMethod::ExactInverseCdf).unwrap();
        let g = GramSystem::assemble(&s, fw(), RbfKernel::from_lengthscale(0.05), 5.0, 1e-5).unwrap();
        let inv = g.check_invariants().unwrap();
        assert!(inv.all_ok(), "{inv:?}");
    }

    #[test]
    fn f_mu_product_matches_explicit() {
        let mb: Arc<dyn SdeModel> = Arc::new(LangevinModel::muller_brown(2.0, 0.1).unwrap());
        let s = sample_invariant(mb.as_ref(), 15, 8, SamplingMethod::ExactInverseCdf).unwrap();
        let g = GramSystem::assemble(&s, mb, RbfKernel::from_lengthscale(0.6), 1.0, 1e-5).unwrap();
        let x = Mat::from_fn(45, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let a = g.f_mu() * &x;
        let b = g.f_mu_mul(x.as_ref());
        assert!(frobenius((&a - &b).as_ref()) <= 1e-13 * frobenius(a.as_ref()));
    }

    #[test]
    fn dirichlet_scaling_scales_blocks() {
        let c = 1.7;
        let scaled: Arc<dyn SdeModel> = Arc::new(ScaledDirichlet::new(fw(), c));
        let s = sample_invariant(fw().as_ref(), 20, 5, SamplingMethod::ExactInverseCdf).unwrap();
        let ker = RbfKernel::from_lengthscale(0.1);
        let a = GramSystem::assemble(&s, fw(), ker, 5.0, 1e-3).unwrap();
        let b = GramSystem::assemble(&s, scaled, ker, 5.0, 1e-3).unwrap();
        let dn = &b.nmat - &a.nmat * c;
        let dm = &b.m - &a.m * (c * c);
        assert!(frobenius(dn.as_ref()) <= 1e-13 * frobenius(b.nmat.as_ref()));
        assert!(frobenius(dm.as_ref()) <= 1e-13 * frobenius(b.m.as_ref()));
    }

    #[test]
    fn duplicate_points_still_factor() {
        let s = SampleSet::new(1, vec![0.1, 0.1, 0.3], 0, SamplingMethod::ExactInverseCdf).unwrap();
        let g = GramSystem::assemble(&s, fw(), RbfKernel::new(1.0), 1.0, 1e-6).unwrap();
        assert!(linalg::min_eigenvalue(g.j.as_ref(), "J").unwrap() >= 1e-6 - 1e-10);
    }

    #[test]
    fn csv_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample_invariant(fw().as_ref(), 6, 5, SamplingMethod::ExactInverseCdf).unwrap();
        let g = GramSystem::assemble(&s, fw(), RbfKernel::new(3.0), 5.0, 1e-3).unwrap();
        g.dump_csv(dir.path()).unwrap();
        let k = linalg::read_matrix_csv(&dir.path().join("K.csv")).unwrap();
        assert_eq!(k, g.k);
    }
}
