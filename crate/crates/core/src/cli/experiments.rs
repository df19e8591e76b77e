//! Seed-repeated studies behind `repro`, and their threshold checks.

use std::sync::Arc;

use serde::Serialize;

use super::config::{ExperimentConfig, ModelConfig};
use crate::diagnostics::{self, DiagnosticsReport};
use crate::error::Result;
use crate::estimator::{fit_krr, fit_rrr, Fit};
use crate::forecaster::{prediction_rmse_curve, RmseSettings, RmseTable};
use crate::kernel::RbfKernel;
use crate::models::SdeModel;
use crate::oracle::{fd_generator_1d, fd_generator_2d, OracleSpectrum};
use crate::parallel;

/// Eigenvalue window counted as spurious for the rank contrast.
pub const SPURIOUS_WINDOW: (f64, f64) = (-0.5, 0.0);
pub const CONSTANT_RATIO: f64 = 0.05;
pub const CONSTANT_CV: f64 = 0.05;
pub const EIGENVALUE_REL_TOL: f64 = 0.15;
pub const FOURWELL_COSINE: f64 = 0.95;
pub const MULLER_BROWN_COSINE: f64 = 0.85;
pub const CONSTANT_FRACTION: f64 = 0.9;
pub const SPURIOUS_FRACTION: f64 = 0.9;
pub const BIAS_SELECTION_FRACTION: f64 = 0.8;
pub const RMSE_SLOPE: f64 = -0.2;

#[derive(Clone, Debug, Serialize)]
pub struct AltLengthscale {
    pub lengthscale: f64,
    pub s_hat: Vec<f64>,
    pub f2_cosine: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: DiagnosticsReport,
    pub rrr_spurious: usize,
    pub krr_spurious: Option<usize>,
    pub alt: Option<AltLengthscale>,
}

impl SeedRun {
    pub fn f2_cosine(&self) -> Option<f64> {
        self.report.match_for_oracle(1).map(|m| m.cosine_similarity)
    }

    /// `|λ̂₁| ≤ 0.05 |λ̂₂|` and the top mode is flat over the samples.
    pub fn constant_mode_ok(&self) -> bool {
        let l = &self.report.lambda_hat;
        l.len() >= 2 && l[0].abs() <= CONSTANT_RATIO * l[1].abs() && self.report.sample_cv[0] < CONSTANT_CV
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn spurious_count(lambda: &[f64]) -> usize {
    lambda.iter().filter(|l| **l > SPURIOUS_WINDOW.0 && **l <= SPURIOUS_WINDOW.1).count()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Reference spectrum at the configured resolution.
pub fn build_oracle(cfg: &ExperimentConfig, model: &dyn SdeModel) -> Result<OracleSpectrum> {
    match model.dim_state() {
        1 => fd_generator_1d(model, cfg.oracle.grid_n),
        _ => fd_generator_2d(model, cfg.oracle.nx, cfg.oracle.ny),
    }
}

/// One repetition: main fit, optional full-rank and second-lengthscale fits
/// on the same samples.
pub fn run_seed(
    cfg: &ExperimentConfig,
    model: &Arc<dyn SdeModel>,
    oracle: Option<&OracleSpectrum>,
    seed: u64,
    extra: &serde_json::Value,
) -> Result<(Fit, SeedRun)> {
    let samples = cfg.sample(model.as_ref(), seed)?;
    let e = &cfg.estimator;
    let fit = fit_rrr(&samples, model.clone(), cfg.kernel(), e.mu, e.gamma, e.rank)?;
    let report = diagnostics::compare_to_oracle(&fit.estimate, &fit.gram, oracle, extra.clone())?;
    let krr_spurious = if e.krr_contrast {
        let k = fit_krr(&samples, model.clone(), cfg.kernel(), e.mu, e.gamma)?;
        Some(spurious_count(&k.estimate.lambda_hat))
    } else {
        None
    };
    let alt = match cfg.kernel.compare_lengthscale {
        Some(l) => {
            let f = fit_rrr(&samples, model.clone(), RbfKernel::from_lengthscale(l), e.mu, e.gamma, e.rank)?;
            let rep = diagnostics::compare_to_oracle(&f.estimate, &f.gram, oracle, serde_json::Value::Null)?;
            Some(AltLengthscale {
                lengthscale: l,
                s_hat: rep.s_hat.clone(),
                f2_cosine: rep.match_for_oracle(1).map(|m| m.cosine_similarity),
            })
        }
        None => None,
    };
    let run = SeedRun { seed, rrr_spurious: spurious_count(&report.lambda_hat), report, krr_spurious, alt };
    Ok((fit, run))
}

pub struct Study {
    pub oracle: Option<OracleSpectrum>,
    /// Fit of the first seed, used for the single-run artifacts.
    pub first_fit: Fit,
    pub runs: Vec<SeedRun>,
    pub rmse: Option<RmseTable>,
}

pub fn run_study(cfg: &ExperimentConfig, extra: &serde_json::Value) -> Result<Study> {
    let model = cfg.build_model()?;
    let oracle = if cfg.oracle.enabled { Some(build_oracle(cfg, model.as_ref())?) } else { None };
    let seeds = cfg.repetition_seeds();
    let results = parallel::par_map(&seeds, cfg.threads, |&s| {
        let mut ex = extra.clone();
        ex["seed"] = serde_json::json!(s);
        run_seed(cfg, &model, oracle.as_ref(), s, &ex)
    });
    let mut first_fit = None;
    let mut runs = Vec::with_capacity(seeds.len());
    for r in results {
        let (fit, run) = r?;
        if first_fit.is_none() {
            first_fit = Some(fit);
        }
        runs.push(run);
    }
    let rmse = rmse_curve(cfg)?;
    Ok(Study { oracle, first_fit: first_fit.expect("at least one seed"), runs, rmse })
}

pub fn rmse_curve(cfg: &ExperimentConfig) -> Result<Option<RmseTable>> {
    let (Some(p), Some(cir)) = (&cfg.predict, cfg.cir_model()?) else {
        return Ok(None);
    };
    if p.n_list.is_empty() {
        return Ok(None);
    }
    let st = RmseSettings {
        kernel: cfg.kernel(),
        mu: cfg.estimator.mu,
        gamma: cfg.estimator.gamma,
        r: cfg.estimator.rank,
        horizon: p.horizon,
        held_out_seed: p.held_out_seed,
        threads: cfg.threads,
    };
    Ok(Some(prediction_rmse_curve(&cir, &p.n_list, &cfg.repetition_seeds(), &st)?))
}

fn required(total: usize, fraction: f64) -> usize {
    (fraction * total as f64 - 1e-9).ceil() as usize
}

fn count_check(name: &str, hits: usize, total: usize, fraction: f64) -> Check {
    let need = required(total, fraction);
    Check { name: name.into(), passed: hits >= need, detail: format!("{hits}/{total} seeds (need {need})") }
}

fn eigenvalue_check(study: &Study, modes: &[usize]) -> Vec<Check> {
    modes
        .iter()
        .map(|&m| {
            let errs: Vec<f64> = study
                .runs
                .iter()
                .map(|r| r.report.match_for_oracle(m).map(|x| x.relative_error).unwrap_or(f64::INFINITY))
                .collect();
            let med = median(&errs);
            let target = study.oracle.as_ref().map(|o| o.eigenvalues[m]).unwrap_or(f64::NAN);
            Check {
                name: format!("lambda_{} relative error", m + 1),
                passed: med <= EIGENVALUE_REL_TOL,
                detail: format!("median {med:.4} vs oracle {target:.5} (tol {EIGENVALUE_REL_TOL})"),
            }
        })
        .collect()
}

fn cosine_check(study: &Study, floor: f64) -> Check {
    let cos: Vec<f64> = study.runs.iter().map(|r| r.f2_cosine().unwrap_or(0.0)).collect();
    let med = median(&cos);
    Check { name: "f_2 cosine similarity".into(), passed: med >= floor, detail: format!("median {med:.4} (floor {floor})") }
}

/// Acceptance thresholds relevant to the configured preset.
pub fn evaluate_checks(cfg: &ExperimentConfig, study: &Study) -> Vec<Check> {
    let total = study.runs.len();
    let mut out = Vec::new();
    let constant = study.runs.iter().filter(|r| r.constant_mode_ok()).count();
    let has_oracle = study.oracle.is_some();
    match cfg.model {
        ModelConfig::FourWell { .. } => {
            out.push(count_check("constant mode", constant, total, CONSTANT_FRACTION));
            if has_oracle {
                out.extend(eigenvalue_check(study, &[1, 2, 3]));
                out.push(cosine_check(study, FOURWELL_COSINE));
            }
            if cfg.estimator.krr_contrast {
                let hits = study.runs.iter().filter(|r| r.krr_spurious.unwrap_or(0) > r.rrr_spurious).count();
                out.push(count_check("full rank has more spurious eigenvalues", hits, total, SPURIOUS_FRACTION));
            }
            if has_oracle && cfg.kernel.compare_lengthscale.is_some() {
                let hits = study
                    .runs
                    .iter()
                    .filter(|r| {
                        let alt = r.alt.as_ref().expect("alt fit");
                        let (c0, c1) = (r.f2_cosine().unwrap_or(0.0), alt.f2_cosine.unwrap_or(0.0));
                        (r.report.s_hat[0] < alt.s_hat[0]) == (c0 > c1)
                    })
                    .count();
                out.push(count_check("spectral bias selects the better lengthscale", hits, total, BIAS_SELECTION_FRACTION));
            }
        }
        ModelConfig::Cir { .. } => {
            out.push(count_check("constant mode", constant, total, CONSTANT_FRACTION));
            if has_oracle {
                out.extend(eigenvalue_check(study, &[1, 2]));
            }
            if let Some(t) = &study.rmse {
                let means: Vec<String> = t.summary.iter().map(|s| format!("{:.4}", s.mean)).collect();
                out.push(Check {
                    name: "prediction RMSE nonincreasing in n".into(),
                    passed: t.is_nonincreasing(),
                    detail: format!("means [{}]", means.join(", ")),
                });
                out.push(Check {
                    name: "prediction RMSE log-log slope".into(),
                    passed: t.log_log_slope <= RMSE_SLOPE,
                    detail: format!("slope {:.3} (need <= {RMSE_SLOPE})", t.log_log_slope),
                });
            }
        }
        ModelConfig::MullerBrown { .. } => {
            if has_oracle {
                out.push(cosine_check(study, MULLER_BROWN_COSINE));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians_and_counts() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(required(20, 0.9), 18);
        assert_eq!(required(20, 0.8), 16);
        assert_eq!(required(1, 0.9), 1);
        assert_eq!(spurious_count(&[0.0, -0.1, -0.5, -3.0, 0.2]), 2);
    }
}
