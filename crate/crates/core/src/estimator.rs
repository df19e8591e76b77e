//! Reduced-rank (RRR) and ridge (KRR) estimators of the resolvent.

use std::path::Path;
use std::sync::Arc;

use faer::{Mat, MatRef};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gram::GramSystem;
use crate::kernel::{Kernel, RbfKernel};
use crate::linalg::{self, sym_eigen, symmetrize};
use crate::models::SdeModel;
use crate::sampling::SampleSet;

/// Modes with `σ̂²` below this are discarded.
pub const SIGMA_SQ_FLOOR: f64 = 1e-12;
/// Relative floor on the eigenvalues of `K` before taking its square root.
pub const K_EIG_FLOOR: f64 = 1e-12;

/// Leading solutions of `μ⁻¹(J − γI)K v = σ² J v` with `vᵀKv = 1`.
#[derive(Clone, Debug)]
pub struct GepSolution {
    pub sigma_sq: Vec<f64>,
    pub v: Mat<f64>,
    /// `J⁻¹ K^{1/2} u` for each mode, scaled like `v`.
    pub(crate) j_inv_kh_u: Mat<f64>,
    pub requested_rank: usize,
}

impl GepSolution {
    pub fn rank(&self) -> usize {
        self.sigma_sq.len()
    }
}

/// Solves the generalized eigenproblem through the symmetric matrix
/// `μ⁻¹ K^{1/2}(I − γJ⁻¹)K^{1/2}`.
pub fn solve_gep(gs: &GramSystem, r: usize) -> Result<GepSolution> {
    let n = gs.n;
    if r == 0 || r > n {
        return Err(Error::invalid(format!("rank {r} must lie in 1..={n}")));
    }
    let (kl, q) = sym_eigen(gs.k.as_ref(), "K")?;
    let kmax = kl.iter().cloned().fold(0.0, f64::max);
    let floor = K_EIG_FLOOR * kmax;
    let sq: Vec<f64> = kl.iter().map(|v| v.max(floor).sqrt()).collect();
    let qs = Mat::from_fn(n, n, |i, c| q[(i, c)] * sq[c]);
    let kh = symmetrize((&qs * q.transpose()).as_ref());
    let j_inv_kh = gs.solve_j(kh.as_ref());
    let a = (&kh * &kh - &kh * &j_inv_kh * gs.gamma) * (1.0 / gs.mu);
    let (al, au) = sym_eigen(symmetrize(a.as_ref()).as_ref(), "GEP")?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| al[y].total_cmp(&al[x]).then(x.cmp(&y)));
    let kept: Vec<usize> =
        order.into_iter().take(r).filter(|&i| al[i] >= SIGMA_SQ_FLOOR).collect();
    if kept.len() < r {
        log::warn!("reduced rank: requested {r}, achieved {}", kept.len());
    }
    if kept.is_empty() {
        return Err(Error::DegenerateSpectrum("no mode above the validity floor".into()));
    }
    let rr = kept.len();
    let u = Mat::from_fn(n, rr, |i, c| au[(i, kept[c])]);
    let kh_u = &kh * &u;
    let mut b = gs.solve_j(kh_u.as_ref());
    let mut v = Mat::zeros(n, rr);
    let mut sigma_sq = Vec::with_capacity(rr);
    for c in 0..rr {
        let s2 = al[kept[c]];
        let scale = 1.0 / (gs.mu * s2);
        for i in 0..n {
            v[(i, c)] = scale * (kh_u[(i, c)] - gs.gamma * b[(i, c)]);
        }
        let kv = &gs.k * v.col(c);
        let norm = (v.col(c).transpose() * &kv).sqrt();
        for i in 0..n {
            v[(i, c)] /= norm;
            b[(i, c)] /= norm;
        }
        sigma_sq.push(s2);
    }
    Ok(GepSolution { sigma_sq, v, j_inv_kh_u: b, requested_rank: r })
}

/// Eigen-triplets of the fitted estimator.
#[derive(Clone, Debug, Serialize)]
pub struct SpectralEstimate {
    pub requested_rank: usize,
    pub rank_r: usize,
    pub mu: f64,
    pub gamma: f64,
    pub sigma_hat_sq: Vec<f64>,
    pub nu: Vec<f64>,
    pub lambda_hat: Vec<f64>,
    #[serde(skip)]
    pub v: Mat<f64>,
    #[serde(skip)]
    pub u: Mat<f64>,
    #[serde(skip)]
    pub w_left: Mat<f64>,
    #[serde(skip)]
    pub w_right: Mat<f64>,
    pub kernel: serde_json::Value,
    pub model: serde_json::Value,
    pub n_samples: usize,
    pub sample_seed: u64,
    pub warnings: Vec<String>,
}

/// Builds `(ν, w^ℓ, w^r)`, `λ̂ = μ − 1/ν` and `U_r` from a GEP solution.
///
/// `Σ VᵀV Σ` is symmetric, so with its orthonormal eigenvectors `Z` the pair
/// `W_r = Σ⁻¹Z`, `W_ℓ = ΣZ` diagonalizes `VᵀVΣ²` and is biorthonormal.
pub fn eigendecompose(gs: &GramSystem, gep: &GepSolution) -> Result<SpectralEstimate> {
    let r = gep.rank();
    let n = gs.n;
    let sig: Vec<f64> = gep.sigma_sq.iter().map(|s| s.sqrt()).collect();
    let vtv = gep.v.transpose() * &gep.v;
    let s = Mat::from_fn(r, r, |a, b| sig[a] * vtv[(a, b)] * sig[b]);
    let (th, z) = sym_eigen(symmetrize(s.as_ref()).as_ref(), "V^T V Sigma^2")?;
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&x, &y| th[y].total_cmp(&th[x]).then(x.cmp(&y)));
    let nu: Vec<f64> = order.iter().map(|&i| th[i]).collect();
    if let Some(bad) = nu.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::DegenerateSpectrum(format!(
            "mode {bad} has non-positive resolvent eigenvalue {}; try a smaller rank",
            nu[bad]
        )));
    }
    let mut w_right = Mat::from_fn(r, r, |a, c| z[(a, order[c])] / sig[a]);
    let mut w_left = Mat::from_fn(r, r, |a, c| z[(a, order[c])] * sig[a]);

    let sm = gs.mu.sqrt();
    let lower = &gs.minv_nt * &gep.j_inv_kh_u;
    let pn = gs.p * n;
    let u = Mat::from_fn(n + pn, r, |i, c| {
        if i < n {
            gep.j_inv_kh_u[(i, c)] / (sm * gs.mu)
        } else {
            -lower[(i - n, c)] / gs.mu
        }
    });

    let uw = &u * &w_right;
    for c in 0..r {
        let (mut best, mut val) = (0.0, 0.0);
        for i in 0..uw.nrows() {
            if uw[(i, c)].abs() > best {
                best = uw[(i, c)].abs();
                val = uw[(i, c)];
            }
        }
        if val < 0.0 {
            for a in 0..r {
                w_right[(a, c)] = -w_right[(a, c)];
                w_left[(a, c)] = -w_left[(a, c)];
            }
        }
    }

    let bi = w_left.transpose() * &w_right;
    let defect = linalg::frobenius((&bi - Mat::<f64>::identity(r, r)).as_ref());
    if defect > 1e-8 {
        return Err(Error::DegenerateSpectrum(format!(
            "left/right eigenvectors are not biorthonormal (defect {defect:e}); try a different rank"
        )));
    }

    let lambda_hat: Vec<f64> = nu.iter().map(|v| gs.mu - 1.0 / v).collect();
    let mut warnings = Vec::new();
    if r < gep.requested_rank {
        warnings.push(format!("reduced rank: requested {}, achieved {r}", gep.requested_rank));
    }
    let positive = lambda_hat.iter().filter(|l| **l > 1e-6 * gs.mu).count();
    if positive > 0 {
        warnings.push(format!("{positive} eigenvalue(s) with positive real part"));
    }
    Ok(SpectralEstimate {
        requested_rank: gep.requested_rank,
        rank_r: r,
        mu: gs.mu,
        gamma: gs.gamma,
        sigma_hat_sq: gep.sigma_sq.clone(),
        nu,
        lambda_hat,
        v: gep.v.clone(),
        u,
        w_left,
        w_right,
        kernel: gs.kernel.describe(),
        model: gs.model.params(),
        n_samples: n,
        sample_seed: gs.samples.seed,
        warnings,
    })
}

/// A fitted estimator together with the Gram system it was built from.
pub struct Fit {
    pub gram: GramSystem,
    pub estimate: SpectralEstimate,
}

pub fn fit_rrr(
    samples: &SampleSet,
    model: Arc<dyn SdeModel>,
    kernel: RbfKernel,
    mu: f64,
    gamma: f64,
    r: usize,
) -> Result<Fit> {
    let gram = GramSystem::assemble(samples, model, kernel, mu, gamma)?;
    let gep = solve_gep(&gram, r)?;
    let estimate = eigendecompose(&gram, &gep)?;
    Ok(Fit { gram, estimate })
}

/// Full-rank estimator; identical to [`fit_rrr`] with `r = n`.
pub fn fit_krr(
    samples: &SampleSet,
    model: Arc<dyn SdeModel>,
    kernel: RbfKernel,
    mu: f64,
    gamma: f64,
) -> Result<Fit> {
    fit_rrr(samples, model, kernel, mu, gamma, samples.n())
}

/// Largest `‖μ⁻¹(J − γI)K v − σ² J v‖ / (‖J‖ ‖v‖)` over the retained modes.
pub fn gep_residual(gs: &GramSystem, sigma_sq: &[f64], v: MatRef<'_, f64>) -> f64 {
    let jn = linalg::frobenius(gs.j.as_ref());
    let kv = &gs.k * v;
    let jkv = &gs.j * &kv;
    let jv = &gs.j * v;
    (0..v.ncols())
        .map(|c| {
            let mut res = 0.0;
            for i in 0..gs.n {
                let lhs = (jkv[(i, c)] - gs.gamma * kv[(i, c)]) / gs.mu;
                res += (lhs - sigma_sq[c] * jv[(i, c)]).powi(2);
            }
            res.sqrt() / (jn * linalg::norm(&linalg::column(v, c)))
        })
        .fold(0.0, f64::max)
}

impl SpectralEstimate {
    /// `eigs.json` plus `V.csv`, `U.csv`, `W_left.csv`, `W_right.csv`.
    pub fn write_dir(&self, dir: &Path, extra: &serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut json = serde_json::to_value(self)?;
        json["sigma_hat"] = self.sigma_hat_sq.iter().map(|s| s.sqrt()).collect();
        if let (Some(obj), Some(extra)) = (json.as_object_mut(), extra.as_object()) {
            for (k, v) in extra {
                obj.insert(k.clone(), v.clone());
            }
        }
        std::fs::write(dir.join("eigs.json"), serde_json::to_string_pretty(&json)? + "\n")?;
        let layout = format!(
            "U rows: 0..n value features sqrt(mu)-scaled, then p blocks of n derivative features (channel-major index k*n+j), n={}",
            self.n_samples
        );
        let tag = extra.get("config_hash").and_then(|v| v.as_str()).map(|h| format!("config_hash={h}"));
        let head = |s: &str| -> Vec<String> { tag.iter().cloned().chain([s.to_string()]).collect() };
        linalg::write_matrix_csv(&dir.join("V.csv"), self.v.as_ref(), &head("V_r: n x r, columns K-orthonormal"))?;
        linalg::write_matrix_csv(&dir.join("U.csv"), self.u.as_ref(), &head(&layout))?;
        linalg::write_matrix_csv(&dir.join("W_left.csv"), self.w_left.as_ref(), &head("left eigenvectors (columns)"))?;
        linalg::write_matrix_csv(&dir.join("W_right.csv"), self.w_right.as_ref(), &head("right eigenvectors (columns)"))?;
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

    fn small_fit(r: usize) -> Fit {
        let s = sample_invariant(fw().as_ref(), 60, 4, SamplingMethod::ExactInverseCdf).unwrap();
        fit_rrr(&s, fw(), RbfKernel::from_lengthscale(0.1), 5.0, 1e-4, r).unwrap()
    }

    #[test]
    fn scalar_problem() {
        let s = SampleSet::new(1, vec![0.2], 0, SamplingMethod::ExactInverseCdf).unwrap();
        let gamma = 1e-3;
        let f = fit_rrr(&s, fw(), RbfKernel::new(2.0), 5.0, gamma, 1).unwrap();
        let want = 1.0 / (5.0 * (1.0 + gamma));
        assert!((f.estimate.sigma_hat_sq[0] - want).abs() < 1e-12 * want);
        let nu = f.estimate.nu[0];
        let v = f.estimate.v[(0, 0)];
        assert!((nu - v * v * want).abs() < 1e-12);
        let k = fit_krr(&s, fw(), RbfKernel::new(2.0), 5.0, gamma).unwrap();
        assert_eq!(k.estimate.lambda_hat, f.estimate.lambda_hat);
    }

    #[test]
    fn rank_one_nu_is_norm_times_sigma() {
        let f = small_fit(1);
        let v = linalg::column(f.estimate.v.as_ref(), 0);
        let want = linalg::dot(&v, &v) * f.estimate.sigma_hat_sq[0];
        assert!((f.estimate.nu[0] - want).abs() < 1e-12 * want);
        assert!((f.estimate.lambda_hat[0] - (5.0 - 1.0 / want)).abs() < 1e-9);
    }

    #[test]
    fn zero_dirichlet_matches_ridge_formula() {
        let model: Arc<dyn SdeModel> = Arc::new(ScaledDirichlet::new(fw(), 0.0));
        let s = sample_invariant(model.as_ref(), 100, 2, SamplingMethod::ExactInverseCdf).unwrap();
        let (mu, gamma) = (2.0, 1e-3);
        let gs = GramSystem::assemble(&s, model, RbfKernel::from_lengthscale(0.3), mu, gamma).unwrap();
        let gep = solve_gep(&gs, 5).unwrap();
        let mut kappa = linalg::sym_eigenvalues(gs.k.as_ref(), "K").unwrap();
        kappa.sort_by(|a, b| b.total_cmp(a));
        for (i, s2) in gep.sigma_sq.iter().enumerate() {
            // J = K + γI turns the problem into μ⁻¹K²v = σ²(K + γI)v
            let want = kappa[i] * kappa[i] / (mu * (kappa[i] + gamma));
            assert!((s2 - want).abs() <= 1e-9 * want, "{i}: {s2} vs {want}");
        }
    }

    #[test]
    fn estimate_invariants() {
        let f = small_fit(4);
        let e = &f.estimate;
        let g = &f.gram;
        assert!(e.sigma_hat_sq.windows(2).all(|w| w[0] >= w[1]));
        assert!(e.sigma_hat_sq.iter().all(|s| *s >= 0.0 && *s <= 1.0 / e.mu + 1e-9));
        let vkv = e.v.transpose() * &g.k * &e.v;
        assert!(linalg::frobenius((&vkv - Mat::<f64>::identity(4, 4)).as_ref()) < 1e-8);
        let bi = e.w_left.transpose() * &e.w_right;
        assert!(linalg::frobenius((&bi - Mat::<f64>::identity(4, 4)).as_ref()) < 1e-8);
        assert!(gep_residual(g, &e.sigma_hat_sq, e.v.as_ref()) <= 1e-8);
        // [√μK | N] U = V Σ²
        let top = Mat::from_fn(g.n, g.n * (1 + g.p), |i, j| {
            if j < g.n { e.mu.sqrt() * g.k[(i, j)] } else { g.nmat[(i, j - g.n)] }
        });
        let lhs = &top * &e.u;
        let rhs = Mat::from_fn(g.n, 4, |i, c| e.v[(i, c)] * e.sigma_hat_sq[c]);
        assert!(linalg::frobenius((&lhs - &rhs).as_ref()) <= 1e-10 * linalg::frobenius(rhs.as_ref()));
    }

    #[test]
    fn truncations_are_prefixes() {
        let s = sample_invariant(fw().as_ref(), 40, 9, SamplingMethod::ExactInverseCdf).unwrap();
        let gs = GramSystem::assemble(&s, fw(), RbfKernel::from_lengthscale(0.1), 5.0, 1e-4).unwrap();
        let a = solve_gep(&gs, 3).unwrap();
        let b = solve_gep(&gs, 8).unwrap();
        for i in 0..3 {
            assert!((a.sigma_sq[i] - b.sigma_sq[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn full_rank_equals_krr() {
        let s = sample_invariant(fw().as_ref(), 30, 1, SamplingMethod::ExactInverseCdf).unwrap();
        let ker = RbfKernel::from_lengthscale(0.2);
        let a = fit_rrr(&s, fw(), ker, 5.0, 1e-3, 30).unwrap();
        let b = fit_krr(&s, fw(), ker, 5.0, 1e-3).unwrap();
        assert_eq!(a.estimate.lambda_hat, b.estimate.lambda_hat);
    }

    #[test]
    fn cir_eigenvalues_are_nonpositive() {
        let m: Arc<dyn SdeModel> = Arc::new(CirModel::new(1.0, -1.0, 0.5).unwrap());
        let s = sample_invariant(m.as_ref(), 200, 1, SamplingMethod::ExactGamma).unwrap();
        let f = fit_rrr(&s, m, RbfKernel::from_lengthscale(1.0), 5.0, 1e-5, 4).unwrap();
        assert!(f.estimate.lambda_hat.iter().all(|l| *l <= 1e-6 * 5.0), "{:?}", f.estimate.lambda_hat);
        assert!(f.estimate.lambda_hat[0].abs() < 0.05);
    }

    #[test]
    fn rejects_bad_rank() {
        let s = sample_invariant(fw().as_ref(), 10, 1, SamplingMethod::ExactInverseCdf).unwrap();
        let gs = GramSystem::assemble(&s, fw(), RbfKernel::new(1.0), 1.0, 1e-3).unwrap();
        assert!(solve_gep(&gs, 0).is_err());
        assert!(solve_gep(&gs, 11).is_err());
    }
}
