//! Subcommand bodies and the run-directory layout.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use super::config::ExperimentConfig;
use super::experiments::{self, Check};
use crate::diagnostics;
use crate::error::Result;
use crate::estimator::{fit_rrr, Fit};
use crate::forecaster;
use crate::models::SdeModel;
use crate::oracle::{cir_conditional_mean, OracleSpectrum};

pub const OUTPUT_ROOT_ENV: &str = "GENLEARN_OUTPUT_ROOT";

/// A configured run writing into one directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
}

impl Run {
    /// Resolves the run directory from `out`, else the output root
    /// (`$GENLEARN_OUTPUT_ROOT`, default `runs`) joined with `output.dir` or the name.
    pub fn new(cfg: ExperimentConfig, out: Option<&Path>) -> Result<Self> {
        let dir = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| "runs".into());
                root.join(cfg.output.dir.clone().unwrap_or_else(|| cfg.name.clone()))
            }
        };
        std::fs::create_dir_all(&dir)?;
        let hash = cfg.hash();
        Ok(Self { cfg, hash, dir })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Comment lines heading every CSV artifact.
    pub fn comments(&self) -> Vec<String> {
        vec![
            format!("config_hash={}", self.hash),
            format!("config={}", serde_json::to_string(&self.cfg).expect("config serializes")),
        ]
    }

    /// Fields merged into every JSON artifact.
    pub fn stamp(&self) -> Value {
        json!({ "config_hash": self.hash, "config": self.cfg })
    }

    fn write_json(&self, file: &str, mut body: Value) -> Result<()> {
        if let (Some(obj), Some(stamp)) = (body.as_object_mut(), self.stamp().as_object()) {
            for (k, v) in stamp {
                obj.insert(k.clone(), v.clone());
            }
        }
        std::fs::write(self.path(file), serde_json::to_string_pretty(&body)? + "\n")?;
        Ok(())
    }

    pub fn write_config(&self) -> Result<()> {
        self.write_json("config.json", json!({}))
    }

    /// The only artifact with wall-clock content.
    pub fn write_sidecar(&self, command: &str, started: SystemTime) -> Result<()> {
        let secs = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let body = json!({
            "command": command,
            "config_hash": self.hash,
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix": secs(started),
            "finished_unix": secs(SystemTime::now()),
        });
        std::fs::write(self.path("run.json"), serde_json::to_string_pretty(&body)? + "\n")?;
        Ok(())
    }

    fn model(&self) -> Result<std::sync::Arc<dyn SdeModel>> {
        self.cfg.build_model()
    }

    fn first_seed(&self) -> u64 {
        self.cfg.repetition_seeds()[0]
    }

    fn fit(&self) -> Result<Fit> {
        let model = self.model()?;
        let samples = self.cfg.sample(model.as_ref(), self.first_seed())?;
        samples.write_csv(&self.path("samples.csv"), &model.params(), &self.comments())?;
        let e = &self.cfg.estimator;
        log::info!("fitting n={} r={} on {}", samples.n(), e.rank, model.name());
        fit_rrr(&samples, model, self.cfg.kernel(), e.mu, e.gamma, e.rank)
    }

    fn oracle(&self) -> Result<Option<OracleSpectrum>> {
        if !self.cfg.oracle.enabled {
            return Ok(None);
        }
        let model = self.model()?;
        log::info!("building reference spectrum");
        Ok(Some(experiments::build_oracle(&self.cfg, model.as_ref())?))
    }

    fn write_eigenfunctions(&self, fit: &Fit, oracle: Option<&OracleSpectrum>) -> Result<()> {
        let grid = diagnostics::evaluation_grid(&fit.gram, self.cfg.output.eval_points);
        diagnostics::write_eigenfunction_grid(
            &self.path("eigenfunctions.csv"),
            &fit.estimate,
            &fit.gram,
            &grid,
            oracle,
            &self.comments(),
        )
    }

    pub fn simulate(&self) -> Result<()> {
        let model = self.model()?;
        let samples = self.cfg.sample(model.as_ref(), self.first_seed())?;
        samples.write_csv(&self.path("samples.csv"), &model.params(), &self.comments())?;
        self.write_config()
    }

    pub fn fit_cmd(&self) -> Result<Fit> {
        let fit = self.fit()?;
        fit.estimate.write_dir(&self.dir, &self.stamp())?;
        self.write_config()?;
        Ok(fit)
    }

    pub fn eigs(&self) -> Result<()> {
        let fit = self.fit_cmd()?;
        let oracle = self.oracle()?;
        self.write_eigenfunctions(&fit, oracle.as_ref())
    }

    pub fn diagnose(&self) -> Result<diagnostics::DiagnosticsReport> {
        let fit = self.fit_cmd()?;
        let oracle = self.oracle()?;
        let report = diagnostics::compare_to_oracle(&fit.estimate, &fit.gram, oracle.as_ref(), self.stamp())?;
        report.write_json(&self.path("diagnostics.json"))?;
        Ok(report)
    }

    pub fn oracle_cmd(&self) -> Result<OracleSpectrum> {
        let model = self.model()?;
        let o = experiments::build_oracle(&self.cfg, model.as_ref())?;
        o.write_csv(&self.path("oracle.csv"), &self.comments())?;
        self.write_json("oracle.json", json!({ "eigenvalues": o.eigenvalues, "solver": o.solver }))?;
        self.write_config()?;
        Ok(o)
    }

    /// Identity-observable forecast on the evaluation grid, plus the RMSE
    /// curve when `predict.n_list` is set.
    pub fn predict(&self) -> Result<()> {
        let p = self.cfg.predict.clone().ok_or_else(|| crate::Error::Config {
            path: "predict".into(),
            message: "section required by the predict command".into(),
        })?;
        let fit = self.fit_cmd()?;
        let h = forecaster::identity_observable(&fit.gram.samples);
        let grid = diagnostics::evaluation_grid(&fit.gram, self.cfg.output.eval_points);
        let fc = forecaster::forecast(&fit.estimate, &fit.gram, &h, "x1", &grid, p.horizon)?;
        let cir = self.cfg.cir_model()?;
        let mut lines = self.comments().iter().map(|c| format!("# {c}")).collect::<Vec<_>>();
        let d = grid[0].len();
        let mut head: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
        head.push("predicted".into());
        if cir.is_some() {
            head.push("analytic".into());
        }
        lines.push(head.join(","));
        for (x, v) in fc.initial_states.iter().zip(&fc.predicted) {
            let mut row: Vec<String> = x.iter().map(|t| t.to_string()).collect();
            row.push(v.to_string());
            if let Some(m) = &cir {
                row.push(cir_conditional_mean(m, x[0], p.horizon).to_string());
            }
            lines.push(row.join(","));
        }
        std::fs::write(self.path("forecast.csv"), lines.join("\n") + "\n")?;
        if let Some(t) = experiments::rmse_curve(&self.cfg)? {
            self.write_rmse(&t)?;
        }
        Ok(())
    }

    fn write_rmse(&self, t: &forecaster::RmseTable) -> Result<()> {
        t.write_csv(&self.path("rmse.csv"), &self.comments())?;
        t.write_summary_json(&self.path("rmse.json"), &self.stamp())
    }

    /// Full bundle over all seeds; returns the threshold checks.
    pub fn repro(&self) -> Result<Vec<Check>> {
        let study = experiments::run_study(&self.cfg, &self.stamp())?;
        let fit = &study.first_fit;
        fit.gram.samples.write_csv(&self.path("samples.csv"), &fit.gram.model.params(), &self.comments())?;
        fit.estimate.write_dir(&self.dir, &self.stamp())?;
        self.write_eigenfunctions(fit, study.oracle.as_ref())?;
        if let Some(o) = &study.oracle {
            o.write_csv(&self.path("oracle.csv"), &self.comments())?;
        }
        if let Some(t) = &study.rmse {
            self.write_rmse(t)?;
        }
        let checks = experiments::evaluate_checks(&self.cfg, &study);
        let runs: Vec<Value> = study
            .runs
            .iter()
            .map(|r| {
                let mut v = serde_json::to_value(r).expect("run serializes");
                v["report"].as_object_mut().map(|o| o.remove("config"));
                v
            })
            .collect();
        self.write_json(
            "diagnostics.json",
            json!({
                "oracle_eigenvalues": study.oracle.as_ref().map(|o| o.eigenvalues.clone()),
                "runs": runs,
                "checks": checks,
            }),
        )?;
        self.write_config()?;
        Ok(checks)
    }
}
