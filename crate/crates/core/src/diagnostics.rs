//! Metric distortion, spectral bias, eigenfunction evaluation and oracle
//! comparison.

use std::path::Path;

use faer::Mat;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::SpectralEstimate;
use crate::gram::GramSystem;
use crate::kernel::Kernel;
use crate::linalg;
use crate::oracle::OracleSpectrum;

/// Coefficient of variation below which a mode counts as constant.
pub const CONSTANT_MODE_CV: f64 = 0.05;

/// `η̂_i = √(uᵀF_μu) / ‖F_μu‖` with `u = U_r w^r_i`.
pub fn metric_distortion(est: &SpectralEstimate, gs: &GramSystem) -> Result<Vec<f64>> {
    let uw = &est.u * &est.w_right;
    let fu = gs.f_mu_mul(uw.as_ref());
    (0..uw.ncols())
        .map(|c| {
            let num: f64 = (0..uw.nrows()).map(|i| uw[(i, c)] * fu[(i, c)]).sum();
            let den = linalg::norm(&linalg::column(fu.as_ref(), c));
            if den < 1e-14 {
                return Err(Error::DegenerateMode { mode: c, norm: den });
            }
            Ok(num.max(0.0).sqrt() / den)
        })
        .collect()
}

/// `ŝ_i = σ̂_i η̂_i`.
pub fn spectral_bias(est: &SpectralEstimate, gs: &GramSystem) -> Result<Vec<f64>> {
    Ok(metric_distortion(est, gs)?
        .into_iter()
        .zip(&est.sigma_hat_sq)
        .map(|(eta, s2)| s2.sqrt() * eta)
        .collect())
}

/// Row of feature inner products `[(√μ/√n) k(x, x_j) | (1/√n) s_k(x_j)ᵀ∇_y k(x, x_j)]`.
fn feature_row(gs: &GramSystem, x: &[f64]) -> Vec<f64> {
    let n = gs.n;
    let d = gs.samples.dim();
    let scale = 1.0 / (n as f64).sqrt();
    let sm = gs.mu.sqrt();
    let mut row = vec![0.0; (1 + gs.p) * n];
    for j in 0..n {
        let xj = gs.samples.point(j);
        row[j] = sm * scale * gs.kernel.eval(x, xj);
        let g = gs.kernel.grad_second_arg(x, xj);
        let s = &gs.s_samples[j];
        for k in 0..gs.p {
            let v: f64 = (0..d).map(|l| s[(l, k)] * g[l]).sum();
            row[(1 + k) * n + j] = scale * v;
        }
    }
    row
}

/// `ĥ_i(x)`; requires `x` inside the model's domain box.
pub fn eval_eigenfunction(est: &SpectralEstimate, gs: &GramSystem, x: &[f64], i: usize) -> Result<f64> {
    Ok(eval_eigenfunctions(est, gs, &[x.to_vec()])?[(0, i)])
}

/// `ĥ_1..ĥ_r` at each point; rows are points.
pub fn eval_eigenfunctions(est: &SpectralEstimate, gs: &GramSystem, points: &[Vec<f64>]) -> Result<Mat<f64>> {
    let uw = &est.u * &est.w_right;
    let bx = gs.model.domain_box();
    let mut out = Mat::zeros(points.len(), uw.ncols());
    for (a, x) in points.iter().enumerate() {
        if !bx.contains(x) {
            return Err(Error::Domain { point: x.clone() });
        }
        let row = feature_row(gs, x);
        for c in 0..uw.ncols() {
            out[(a, c)] = (0..row.len()).map(|t| row[t] * uw[(t, c)]).sum();
        }
    }
    Ok(out)
}

/// `ĥ_i(x_j)` at the training samples via `√n [√μK | N] U_r w^r`.
pub fn sample_values(est: &SpectralEstimate, gs: &GramSystem) -> Mat<f64> {
    let uw = &est.u * &est.w_right;
    let n = gs.n;
    let top = uw.subrows(0, n);
    let bot = uw.subrows(n, gs.p * n);
    (&gs.k * top * gs.mu.sqrt() + &gs.nmat * bot) * (n as f64).sqrt()
}

/// Divides by the empirical `L²(π̂)` norm and makes the largest-magnitude entry positive.
pub fn normalize_l2pi(values: &[f64]) -> Result<Vec<f64>> {
    let n = values.len() as f64;
    let norm = (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    if !(norm > 0.0) {
        return Err(Error::ZeroVector);
    }
    let peak = values.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
    let sign = if peak < 0.0 { -1.0 } else { 1.0 };
    Ok(values.iter().map(|v| sign * v / norm).collect())
}

pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean.abs()
}

/// `|⟨a, b⟩| / (‖a‖ ‖b‖)` in the empirical inner product.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let d = linalg::dot(a, b).abs();
    let den = linalg::norm(a) * linalg::norm(b);
    if den > 0.0 {
        (d / den).min(1.0)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeMatch {
    pub estimated_mode: usize,
    pub oracle_mode: usize,
    pub lambda_hat: f64,
    pub lambda_oracle: f64,
    pub relative_error: f64,
    pub cosine_similarity: f64,
    /// `|λ − λ̂| / (|μ − λ| |μ − λ̂|)`.
    pub resolvent_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsReport {
    pub lambda_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub eta_hat: Vec<f64>,
    pub s_hat: Vec<f64>,
    /// Coefficient of variation of each `f̂_i` over the samples.
    pub sample_cv: Vec<f64>,
    pub trivial_mode: Option<usize>,
    pub matches: Vec<ModeMatch>,
    pub unmatched_modes: Vec<usize>,
    pub config: serde_json::Value,
}

impl DiagnosticsReport {
    /// Match for an oracle mode (0-based, 1 is the first nontrivial one).
    pub fn match_for_oracle(&self, oracle_mode: usize) -> Option<&ModeMatch> {
        self.matches.iter().find(|m| m.oracle_mode == oracle_mode)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Index of the constant mode: λ̂ closest to 0 among modes with CV below the threshold.
pub fn find_trivial_mode(lambda_hat: &[f64], cvs: &[f64]) -> Option<usize> {
    (0..lambda_hat.len())
        .filter(|&i| cvs[i] < CONSTANT_MODE_CV)
        .min_by(|&a, &b| lambda_hat[a].abs().total_cmp(&lambda_hat[b].abs()))
}

/// Per-mode diagnostics; when an oracle is given, nontrivial modes are
/// greedily matched to its nonconstant modes by eigenvalue proximity.
pub fn compare_to_oracle(
    est: &SpectralEstimate,
    gs: &GramSystem,
    oracle: Option<&OracleSpectrum>,
    config: serde_json::Value,
) -> Result<DiagnosticsReport> {
    let eta = metric_distortion(est, gs)?;
    let sigma: Vec<f64> = est.sigma_hat_sq.iter().map(|s| s.sqrt()).collect();
    let s_hat: Vec<f64> = eta.iter().zip(&sigma).map(|(e, s)| e * s).collect();
    let vals = sample_values(est, gs);
    let r = est.rank_r;
    let cols: Vec<Vec<f64>> = (0..r).map(|c| linalg::column(vals.as_ref(), c)).collect();
    let cvs: Vec<f64> = cols.iter().map(|c| coefficient_of_variation(c)).collect();
    let trivial = find_trivial_mode(&est.lambda_hat, &cvs);

    let mut matches = Vec::new();
    let mut unmatched = Vec::new();
    if let Some(o) = oracle {
        let oracle_cols: Vec<Vec<f64>> = (0..o.n_modes())
            .map(|m| gs.samples.iter().map(|x| o.interpolate(m, x)).collect())
            .collect();
        let mut pairs = Vec::new();
        for i in (0..r).filter(|i| Some(*i) != trivial) {
            for m in 1..o.n_modes() {
                pairs.push(((est.lambda_hat[i] - o.eigenvalues[m]).abs(), i, m));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used_est = vec![false; r];
        let mut used_or = vec![false; o.n_modes()];
        for (_, i, m) in pairs {
            if used_est[i] || used_or[m] {
                continue;
            }
            used_est[i] = true;
            used_or[m] = true;
            let (lh, lo) = (est.lambda_hat[i], o.eigenvalues[m]);
            matches.push(ModeMatch {
                estimated_mode: i,
                oracle_mode: m,
                lambda_hat: lh,
                lambda_oracle: lo,
                relative_error: (lh - lo).abs() / lo.abs(),
                cosine_similarity: cosine_similarity(&cols[i], &oracle_cols[m]),
                resolvent_error: (lh - lo).abs() / ((est.mu - lo).abs() * (est.mu - lh).abs()),
            });
        }
        matches.sort_by_key(|m| m.oracle_mode);
        unmatched = (0..r).filter(|i| !used_est[*i] && Some(*i) != trivial).collect();
    }
    Ok(DiagnosticsReport {
        lambda_hat: est.lambda_hat.clone(),
        sigma_hat: sigma,
        eta_hat: eta,
        s_hat,
        sample_cv: cvs,
        trivial_mode: trivial,
        matches,
        unmatched_modes: unmatched,
        config,
    })
}

/// Eigenfunctions on a grid, normalized with the sample-based `L²(π̂)` norm:
/// columns are the grid coordinates, `f_hat_1..f_hat_r`, then `oracle_1..oracle_m`.
pub fn write_eigenfunction_grid(
    path: &Path,
    est: &SpectralEstimate,
    gs: &GramSystem,
    grid: &[Vec<f64>],
    oracle: Option<&OracleSpectrum>,
    comments: &[String],
) -> Result<()> {
    use std::io::Write;
    let vals = sample_values(est, gs);
    let r = est.rank_r;
    let mut scale = vec![1.0; r];
    for (c, sc) in scale.iter_mut().enumerate() {
        let col = linalg::column(vals.as_ref(), c);
        let normed = normalize_l2pi(&col)?;
        *sc = normed[0] / col[0];
        if !sc.is_finite() {
            let norm = (col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64).sqrt();
            *sc = 1.0 / norm;
        }
    }
    let h = eval_eigenfunctions(est, gs, grid)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in comments {
        writeln!(f, "# {c}")?;
    }
    let d = grid.first().map(Vec::len).unwrap_or(0);
    let m = oracle.map(|o| o.n_modes()).unwrap_or(0);
    let mut head: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    head.extend((1..=r).map(|k| format!("f_hat_{k}")));
    head.extend((1..=m).map(|k| format!("oracle_{k}")));
    writeln!(f, "{}", head.join(","))?;
    for (a, x) in grid.iter().enumerate() {
        let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        row.extend((0..r).map(|c| (h[(a, c)] * scale[c]).to_string()));
        if let Some(o) = oracle {
            row.extend((0..m).map(|k| o.interpolate(k, x).to_string()));
        }
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Uniform evaluation grid over the model box (1D: `m` points, 2D: `m × m`).
pub fn evaluation_grid(gs: &GramSystem, m: usize) -> Vec<Vec<f64>> {
    let bx = gs.model.domain_box();
    let ax = |a: usize, i: usize| (bx.lo[a] + bx.width(a) * i as f64 / (m - 1) as f64).min(bx.hi[a]);
    match bx.dim() {
        1 => (0..m).map(|i| vec![ax(0, i)]).collect(),
        _ => (0..m * m).map(|t| vec![ax(0, t / m), ax(1, t % m)]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::fit_rrr;
    use crate::kernel::RbfKernel;
    use crate::models::{LangevinModel, SdeModel};
    use crate::sampling::{sample_invariant, SamplingMethod};
    use std::sync::Arc;

    fn fit(n: usize, r: usize) -> crate::estimator::Fit {
        let m: Arc<dyn SdeModel> = Arc::new(LangevinModel::four_well(2.0).unwrap());
        let s = sample_invariant(m.as_ref(), n, 3, SamplingMethod::ExactInverseCdf).unwrap();
        fit_rrr(&s, m, RbfKernel::from_lengthscale(0.05), 5.0, 1e-5, r).unwrap()
    }

    #[test]
    fn normalization() {
        let c = normalize_l2pi(&[-3.0; 7]).unwrap();
        assert!(c.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let v = [0.3, -2.0, 1.1, 0.7];
        let a = normalize_l2pi(&v).unwrap();
        let b = normalize_l2pi(&a).unwrap();
        assert_eq!(a, b);
        let norm = (a.iter().map(|x| x * x).sum::<f64>() / 4.0).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(matches!(normalize_l2pi(&[0.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn pointwise_evaluation_matches_gram_reconstruction() {
        let f = fit(80, 4);
        let pts: Vec<Vec<f64>> = f.gram.samples.iter().map(|x| x.to_vec()).collect();
        let a = eval_eigenfunctions(&f.estimate, &f.gram, &pts).unwrap();
        let b = sample_values(&f.estimate, &f.gram);
        assert!(linalg::frobenius((&a - &b).as_ref()) <= 1e-10 * linalg::frobenius(b.as_ref()));
    }

    #[test]
    fn zero_coefficients_evaluate_to_zero() {
        let mut f = fit(30, 2);
        f.estimate.u = Mat::zeros(f.estimate.u.nrows(), 2);
        let v = eval_eigenfunction(&f.estimate, &f.gram, &[0.1], 1).unwrap();
        assert_eq!(v, 0.0);
        assert!(eval_eigenfunction(&f.estimate, &f.gram, &[5.0], 0).is_err());
    }

    #[test]
    fn eta_of_an_f_mu_eigenvector() {
        let mut f = fit(20, 1);
        let fm = f.gram.f_mu();
        let (vals, vecs) = linalg::sym_eigen(fm.as_ref(), "F").unwrap();
        let k = vals.len() - 1;
        f.estimate.u = vecs.subcols(k, 1).to_owned();
        f.estimate.w_right = Mat::identity(1, 1);
        let eta = metric_distortion(&f.estimate, &f.gram).unwrap();
        assert!((eta[0] - 1.0 / vals[k].sqrt()).abs() < 1e-10 * eta[0]);
    }

    #[test]
    fn eta_ignores_sign_flips() {
        let mut f = fit(40, 3);
        let a = metric_distortion(&f.estimate, &f.gram).unwrap();
        for i in 0..3 {
            f.estimate.w_right[(i, 1)] = -f.estimate.w_right[(i, 1)];
        }
        let b = metric_distortion(&f.estimate, &f.gram).unwrap();
        assert_eq!(a, b);
        let s = spectral_bias(&f.estimate, &f.gram).unwrap();
        assert!(s.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn trivial_mode_selection() {
        assert_eq!(find_trivial_mode(&[-0.01, -3.0, 0.001], &[0.01, 0.5, 0.2]), Some(0));
        assert_eq!(find_trivial_mode(&[-0.01, -3.0], &[0.3, 0.5]), None);
    }

    #[test]
    fn evaluation_grid_stays_in_the_box() {
        let f = fit(10, 1);
        let bx = f.gram.model.domain_box().clone();
        for m in [2, 3, 7, 101, 401] {
            let g = evaluation_grid(&f.gram, m);
            assert_eq!(g.len(), m);
            assert!(g.iter().all(|x| bx.contains(x)));
            assert_eq!(g[m - 1][0], bx.hi[0]);
        }
    }

    #[test]
    fn cosine_is_sign_blind() {
        let a = [1.0, 2.0, -1.0];
        let b = [-1.0, -2.0, 1.0];
        assert!((cosine_similarity(&a, &b) - 1.0).abs() < 1e-15);
    }
}
