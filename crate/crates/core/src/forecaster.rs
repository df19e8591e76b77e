//! Conditional-expectation forecasts from the learned spectral decomposition
//! and RMSE curves against the analytic CIR mean.

use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::diagnostics;
use crate::error::{Error, Result};
use crate::estimator::{fit_rrr, SpectralEstimate};
use crate::gram::GramSystem;
use crate::kernel::RbfKernel;
use crate::models::{CirModel, SdeModel};
use crate::oracle::cir_conditional_mean;
use crate::parallel;
use crate::sampling::{derive_seed, sample_invariant, SampleSet, SamplingMethod};

/// Stream index used to derive the held-out initial states.
pub const HELD_OUT_STREAM: u64 = 0xF0CA_57;
pub const HELD_OUT_SIZE: usize = 100;

#[derive(Clone, Debug, Serialize)]
pub struct Forecast {
    pub horizon: f64,
    pub initial_states: Vec<Vec<f64>>,
    pub predicted: Vec<f64>,
    pub observable: String,
}

/// `⟨ĝ_i, h⟩ = ν_i⁻¹ (V_r w^ℓ_i)ᵀ (n^{-1/2} h(x_1..x_n))`.
pub fn observable_coeffs(est: &SpectralEstimate, gs: &GramSystem, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != gs.n {
        return Err(Error::invalid(format!("observable has {} values for {} samples", h.len(), gs.n)));
    }
    let vw = &est.v * &est.w_left;
    let scale = 1.0 / (gs.n as f64).sqrt();
    Ok((0..est.rank_r)
        .map(|i| {
            let p: f64 = (0..gs.n).map(|j| vw[(j, i)] * h[j]).sum();
            scale * p / est.nu[i]
        })
        .collect())
}

/// `Σ_i e^{λ̂_i t} ⟨ĝ_i, h⟩ ĥ_i(x)`.
pub fn predict(est: &SpectralEstimate, gs: &GramSystem, h: &[f64], x: &[f64], t: f64) -> Result<f64> {
    Ok(predict_many(est, gs, h, &[x.to_vec()], t)?[0])
}

pub fn predict_many(
    est: &SpectralEstimate,
    gs: &GramSystem,
    h: &[f64],
    xs: &[Vec<f64>],
    t: f64,
) -> Result<Vec<f64>> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("horizon must be finite and nonnegative, got {t}")));
    }
    let c = observable_coeffs(est, gs, h)?;
    let hx = diagnostics::eval_eigenfunctions(est, gs, xs)?;
    Ok((0..xs.len())
        .map(|a| (0..est.rank_r).map(|i| (est.lambda_hat[i] * t).exp() * c[i] * hx[(a, i)]).sum())
        .collect())
}

pub fn forecast(
    est: &SpectralEstimate,
    gs: &GramSystem,
    h: &[f64],
    observable: &str,
    xs: &[Vec<f64>],
    t: f64,
) -> Result<Forecast> {
    Ok(Forecast {
        horizon: t,
        initial_states: xs.to_vec(),
        predicted: predict_many(est, gs, h, xs, t)?,
        observable: observable.to_string(),
    })
}

/// `h(x) = x_1` on the training samples.
pub fn identity_observable(samples: &SampleSet) -> Vec<f64> {
    samples.iter().map(|x| x[0]).collect()
}

/// 100 stationary draws from a stream independent of every training seed.
pub fn held_out_states(model: &dyn SdeModel, base_seed: u64) -> Result<Vec<Vec<f64>>> {
    let s = sample_invariant(model, HELD_OUT_SIZE, derive_seed(base_seed, HELD_OUT_STREAM), SamplingMethod::ExactGamma)?;
    Ok(s.iter().map(|x| x.to_vec()).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct RmseCell {
    pub n: usize,
    pub seed: u64,
    /// `None` when the fit failed; the message is kept in `error`.
    pub rmse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RmseSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub successes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RmseTable {
    pub horizon: f64,
    pub cells: Vec<RmseCell>,
    pub summary: Vec<RmseSummary>,
    pub log_log_slope: f64,
}

#[derive(Clone, Debug)]
pub struct RmseSettings {
    pub kernel: RbfKernel,
    pub mu: f64,
    pub gamma: f64,
    pub r: usize,
    pub horizon: f64,
    /// Base seed for the held-out initial states.
    pub held_out_seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

fn rmse_for(model: &CirModel, arc: &Arc<dyn SdeModel>, st: &RmseSettings, held: &[Vec<f64>], n: usize, seed: u64) -> Result<f64> {
    let samples = sample_invariant(model, n, seed, SamplingMethod::ExactGamma)?;
    let fit = fit_rrr(&samples, arc.clone(), st.kernel, st.mu, st.gamma, st.r)?;
    let h = identity_observable(&samples);
    let pred = predict_many(&fit.estimate, &fit.gram, &h, held, st.horizon)?;
    let mse = held
        .iter()
        .zip(&pred)
        .map(|(x, p)| (p - cir_conditional_mean(model, x[0], st.horizon)).powi(2))
        .sum::<f64>()
        / held.len() as f64;
    Ok(mse.sqrt())
}

/// Fits one estimator per `(n, seed)` on fresh exact samples and scores the
/// identity-observable forecast against the analytic conditional mean.
pub fn prediction_rmse_curve(model: &CirModel, n_list: &[usize], seeds: &[u64], st: &RmseSettings) -> Result<RmseTable> {
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("n_list must be strictly ascending"));
    }
    let held = held_out_states(model, st.held_out_seed)?;
    let arc: Arc<dyn SdeModel> = Arc::new(model.clone());
    let jobs: Vec<(usize, u64)> = n_list.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    let results = parallel::par_map(&jobs, st.threads, |&(n, s)| rmse_for(model, &arc, st, &held, n, s));
    let cells: Vec<RmseCell> = jobs
        .iter()
        .zip(results)
        .map(|(&(n, seed), r)| match r {
            Ok(v) => RmseCell { n, seed, rmse: Some(v), error: None },
            Err(e) => RmseCell { n, seed, rmse: None, error: Some(e.to_string()) },
        })
        .collect();
    let summary: Vec<RmseSummary> = n_list
        .iter()
        .map(|&n| {
            let v: Vec<f64> = cells.iter().filter(|c| c.n == n).filter_map(|c| c.rmse).collect();
            let k = v.len() as f64;
            let mean = v.iter().sum::<f64>() / k;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k).sqrt();
            RmseSummary { n, mean, std, successes: v.len() }
        })
        .collect();
    let xs: Vec<f64> = summary.iter().map(|s| (s.n as f64).ln()).collect();
    let ys: Vec<f64> = summary.iter().map(|s| s.mean.ln()).collect();
    Ok(RmseTable { horizon: st.horizon, cells, summary, log_log_slope: least_squares_slope(&xs, &ys) })
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

impl RmseTable {
    pub fn is_nonincreasing(&self) -> bool {
        self.summary.windows(2).all(|w| w[1].mean <= w[0].mean)
    }

    /// Long-format CSV `n,seed,rmse`; failed cells are written as `NaN`.
    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for c in comments {
            writeln!(f, "# {c}")?;
        }
        writeln!(f, "n,seed,rmse")?;
        for c in &self.cells {
            writeln!(f, "{},{},{}", c.n, c.seed, c.rmse.unwrap_or(f64::NAN))?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_summary_json(&self, path: &Path, extra: &serde_json::Value) -> Result<()> {
        let v = serde_json::json!({
            "horizon": self.horizon,
            "summary": self.summary,
            "log_log_slope": self.log_log_slope,
            "failures": self.cells.iter().filter(|c| c.error.is_some()).collect::<Vec<_>>(),
            "config": extra,
        });
        std::fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
        Ok(())
    }
}
