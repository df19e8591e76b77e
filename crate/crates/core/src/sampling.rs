//! Invariant-measure samplers and Euler-Maruyama trajectories.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::models::SdeModel;

/// Name of the generator recorded in output metadata.
pub const RNG_ALGORITHM: &str = "ChaCha20 (rand_chacha), seeded via seed_from_u64";

/// Nodes used to tabulate the 1D cumulative distribution.
pub const CDF_GRID_POINTS: usize = 100_000;
/// Cells per axis of the 2D tabulated sampler.
pub const GRID_SAMPLER_CELLS: usize = 800;

pub fn rng_from_seed(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Derives an independent seed for stream `stream` of `base` (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    ExactInverseCdf,
    ExactGamma,
    TrajectorySubsample,
}

impl fmt::Display for SamplingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMethod::ExactInverseCdf => "exact_inverse_cdf",
            SamplingMethod::ExactGamma => "exact_gamma",
            SamplingMethod::TrajectorySubsample => "trajectory_subsample",
        })
    }
}

impl FromStr for SamplingMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_inverse_cdf" => Ok(SamplingMethod::ExactInverseCdf),
            "exact_gamma" => Ok(SamplingMethod::ExactGamma),
            "trajectory_subsample" => Ok(SamplingMethod::TrajectorySubsample),
            other => Err(Error::invalid(format!("unknown sampling method `{other}`"))),
        }
    }
}

/// Settings for [`SamplingMethod::TrajectorySubsample`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryOptions {
    pub dt: f64,
    pub burn_in: usize,
    pub stride: usize,
}

impl TrajectoryOptions {
    /// Burn-in of 1e5 steps and a stride of one model time unit.
    pub fn with_dt(dt: f64) -> Self {
        Self { dt, burn_in: 100_000, stride: ((1.0 / dt).round() as usize).max(1) }
    }
}

/// Row-major `n × d` sample matrix with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    dim: usize,
    points: Vec<f64>,
    pub seed: u64,
    pub method: SamplingMethod,
}

impl SampleSet {
    pub fn new(dim: usize, points: Vec<f64>, seed: u64, method: SamplingMethod) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::invalid("point buffer length is not a multiple of the dimension"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sample points must be finite"));
        }
        Ok(Self { dim, points, seed, method })
    }

    pub fn from_rows(rows: &[Vec<f64>], seed: u64, method: SamplingMethod) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("ragged sample rows"));
        }
        Self::new(dim, rows.concat(), seed, method)
    }

    pub fn n(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    /// First `n` points, keeping provenance.
    pub fn head(&self, n: usize) -> Self {
        Self { dim: self.dim, points: self.points[..n * self.dim].to_vec(), ..self.clone() }
    }

    /// Checks the dataset invariants against a model.
    pub fn validate(&self, model: &dyn SdeModel) -> Result<()> {
        if self.n() < 2 {
            return Err(Error::invalid("a sample set needs at least two points"));
        }
        if self.dim != model.dim_state() {
            return Err(Error::invalid("sample dimension does not match the model"));
        }
        match self.iter().find(|x| !model.domain_box().contains(x)) {
            Some(x) => Err(Error::Domain { point: x.to_vec() }),
            None => Ok(()),
        }
    }

    /// Writes `x1..xd` CSV, preceded by `# ` comment lines, plus a JSON
    /// sidecar next to it (`<path>.json`).
    pub fn write_csv(&self, path: &Path, model_params: &serde_json::Value, comments: &[String]) -> Result<()> {
        let mut file = File::create(path)?;
        for c in comments {
            writeln!(file, "# {c}")?;
        }
        let mut w = csv::Writer::from_writer(file);
        w.write_record((1..=self.dim).map(|k| format!("x{k}")))?;
        for x in self.iter() {
            w.write_record(x.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        let sidecar = json!({
            "n": self.n(),
            "dim": self.dim,
            "seed": self.seed,
            "method": self.method.to_string(),
            "rng": RNG_ALGORITHM,
            "model": model_params,
            "comments": comments,
        });
        let mut f = File::create(sidecar_path(path))?;
        writeln!(f, "{}", serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Reads a CSV written by [`SampleSet::write_csv`], taking seed and method from the sidecar.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let dim = r.headers()?.len();
        let mut points = Vec::new();
        for rec in r.records() {
            for field in rec?.iter() {
                points.push(field.trim().parse::<f64>().map_err(|e| {
                    Error::invalid(format!("bad number `{field}` in {}: {e}", path.display()))
                })?);
            }
        }
        let meta: serde_json::Value =
            serde_json::from_reader(File::open(sidecar_path(path))?)?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let method = meta["method"].as_str().unwrap_or("exact_inverse_cdf").parse()?;
        Self::new(dim, points, seed, method)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// `(n_steps + 1) × d` trajectory, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub states: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }
}

/// Euler-Maruyama integrator. For CIR the coefficients are evaluated at
/// `max(x, 0)` and the new state is clamped at 0 (full truncation).
pub fn euler_maruyama(
    model: &dyn SdeModel,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity((n_steps + 1) * x0.len());
    em_visit(model, x0, dt, n_steps, seed, |_, x| states.extend_from_slice(x))?;
    Ok(Trajectory { dim: x0.len(), states })
}

fn em_visit(
    model: &dyn SdeModel,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
    seed: u64,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    if !model.domain_box().contains(x0) {
        return Err(Error::Domain { point: x0.to_vec() });
    }
    let positive = model.as_cir().is_some();
    let safety = model.domain_box().scaled(2.0);
    let d = model.dim_state();
    let p = model.dim_noise();
    let mut rng = rng_from_seed(seed);
    let sqdt = dt.sqrt();
    let mut x = x0.to_vec();
    let mut xi = vec![0.0; p];
    visit(0, &x);
    for step in 1..=n_steps {
        let xe: Vec<f64> = if positive { x.iter().map(|v| v.max(0.0)).collect() } else { x.clone() };
        let a = model.drift(&xe);
        let b = model.diffusion(&xe);
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for l in 0..d {
            let noise: f64 = (0..p).map(|k| b[(l, k)] * xi[k]).sum();
            x[l] += a[l] * dt + noise * sqdt;
            if positive {
                x[l] = x[l].max(0.0);
            }
        }
        if !x.iter().all(|v| v.is_finite()) || !safety.contains(&x) {
            return Err(Error::Divergence { step });
        }
        visit(step, &x);
    }
    Ok(())
}

/// Draws `n` points from the invariant law of `model`.
pub fn sample_invariant(
    model: &dyn SdeModel,
    n: usize,
    seed: u64,
    method: SamplingMethod,
) -> Result<SampleSet> {
    let opts = TrajectoryOptions::with_dt(1e-3);
    sample_invariant_with(model, n, seed, method, &opts)
}

pub fn sample_invariant_with(
    model: &dyn SdeModel,
    n: usize,
    seed: u64,
    method: SamplingMethod,
    traj: &TrajectoryOptions,
) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    let mismatch = || Error::MethodMismatch { method: method.to_string(), model: model.name().to_string() };
    let mut rng = rng_from_seed(seed);
    let bx = model.domain_box();
    let points = match method {
        SamplingMethod::ExactGamma => {
            let cir = model.as_cir().ok_or_else(mismatch)?;
            let g = Gamma::new(cir.gamma_shape(), 1.0 / cir.gamma_rate())
                .map_err(|e| Error::invalid(e.to_string()))?;
            let mut pts = Vec::with_capacity(n);
            while pts.len() < n {
                let v: f64 = g.sample(&mut rng);
                if bx.contains(&[v]) {
                    pts.push(v);
                }
            }
            pts
        }
        SamplingMethod::ExactInverseCdf => {
            if !model.has_density() {
                return Err(mismatch());
            }
            match model.dim_state() {
                1 => {
                    let table = Cdf1d::tabulate(model, CDF_GRID_POINTS);
                    (0..n).map(|_| table.invert(rng.random::<f64>())).collect()
                }
                2 => {
                    let table = CellTable2d::tabulate(model, GRID_SAMPLER_CELLS);
                    let mut pts = Vec::with_capacity(2 * n);
                    for _ in 0..n {
                        pts.extend(table.draw(&mut rng));
                    }
                    pts
                }
                _ => return Err(mismatch()),
            }
        }
        SamplingMethod::TrajectorySubsample => {
            if traj.stride == 0 {
                return Err(Error::invalid("stride must be positive"));
            }
            let x0 = start_point(model);
            let total = traj.burn_in + traj.stride * (n - 1);
            let mut pts = Vec::with_capacity(n * model.dim_state());
            em_visit(model, &x0, traj.dt, total, seed, |k, x| {
                if k >= traj.burn_in && (k - traj.burn_in) % traj.stride == 0 {
                    pts.extend_from_slice(x);
                }
            })?;
            pts
        }
    };
    let set = SampleSet::new(model.dim_state(), points, seed, method)?;
    set.validate(model)?;
    Ok(set)
}

/// Starting state for trajectories: the box point of highest density on a
/// coarse grid, or the box center without a density.
fn start_point(model: &dyn SdeModel) -> Vec<f64> {
    let bx = model.domain_box();
    let center: Vec<f64> = bx.lo.iter().zip(&bx.hi).map(|(l, h)| 0.5 * (l + h)).collect();
    if !model.has_density() || bx.dim() > 2 {
        return center;
    }
    let m: usize = 101;
    let mut best = (f64::NEG_INFINITY, center);
    let count = m.pow(bx.dim() as u32);
    for idx in 0..count {
        let mut rem = idx;
        let x: Vec<f64> = (0..bx.dim())
            .map(|ax| {
                let i = rem % m;
                rem /= m;
                bx.lo[ax] + bx.width(ax) * i as f64 / (m - 1) as f64
            })
            .collect();
        let lp = model.log_density(&x).unwrap_or(f64::NEG_INFINITY);
        if lp > best.0 {
            best = (lp, x);
        }
    }
    best.1
}

fn normalized_weights(logs: &[f64], base: impl Fn(usize) -> f64) -> Vec<f64> {
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    logs.iter().enumerate().map(|(i, l)| base(i) * (l - max).exp()).collect()
}

/// Trapezoid-integrated CDF on a uniform grid, inverted by linear interpolation.
struct Cdf1d {
    grid: Vec<f64>,
    cdf: Vec<f64>,
}

impl Cdf1d {
    fn tabulate(model: &dyn SdeModel, m: usize) -> Self {
        let bx = model.domain_box();
        let h = bx.width(0) / (m - 1) as f64;
        let grid: Vec<f64> = (0..m).map(|i| bx.lo[0] + h * i as f64).collect();
        let logs: Vec<f64> = grid
            .iter()
            .map(|x| model.log_density(&[*x]).unwrap_or(f64::NEG_INFINITY))
            .collect();
        let dens = normalized_weights(&logs, |_| 1.0);
        let mut cdf = vec![0.0; m];
        for i in 1..m {
            cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i - 1] + dens[i]);
        }
        let total = cdf[m - 1];
        cdf.iter_mut().for_each(|c| *c /= total);
        Self { grid, cdf }
    }

    fn invert(&self, u: f64) -> f64 {
        let j = self.cdf.partition_point(|c| *c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[j - 1], self.cdf[j]);
        let t = if c1 > c0 { ((u - c0) / (c1 - c0)).clamp(0.0, 1.0) } else { 0.5 };
        self.grid[j - 1] + t * (self.grid[j] - self.grid[j - 1])
    }
}

/// Piecewise-constant density on a cell grid: pick a cell by its mass, then
/// a uniform point inside it.
struct CellTable2d {
    lo: [f64; 2],
    h: [f64; 2],
    m: usize,
    cum: Vec<f64>,
}

impl CellTable2d {
    fn tabulate(model: &dyn SdeModel, m: usize) -> Self {
        let bx = model.domain_box();
        let h = [bx.width(0) / m as f64, bx.width(1) / m as f64];
        let lo = [bx.lo[0], bx.lo[1]];
        let mut logs = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                let x = [lo[0] + (i as f64 + 0.5) * h[0], lo[1] + (j as f64 + 0.5) * h[1]];
                logs.push(model.log_density(&x).unwrap_or(f64::NEG_INFINITY));
            }
        }
        let mass = normalized_weights(&logs, |_| 1.0);
        let mut cum = Vec::with_capacity(m * m);
        let mut acc = 0.0;
        for w in mass {
            acc += w;
            cum.push(acc);
        }
        cum.iter_mut().for_each(|c| *c /= acc);
        Self { lo, h, m, cum }
    }

    fn draw(&self, rng: &mut ChaCha20Rng) -> [f64; 2] {
        let u: f64 = rng.random();
        let idx = self.cum.partition_point(|c| *c < u).min(self.cum.len() - 1);
        let (i, j) = (idx / self.m, idx % self.m);
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        [self.lo[0] + (i as f64 + a) * self.h[0], self.lo[1] + (j as f64 + b) * self.h[1]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{CirModel, CustomModel, DomainBox, LangevinModel};
    use faer::Mat;

    #[test]
    fn deterministic_euler_step() {
        let m = CustomModel::new(
            "linear",
            1,
            DomainBox::new(vec![-2.0], vec![2.0]),
            |x| vec![-x[0]],
            |_| Mat::zeros(1, 1),
            |_| Mat::zeros(1, 1),
        );
        let t = euler_maruyama(&m, &[1.0], 0.1, 1, 7).unwrap();
        assert_eq!(t.len(), 2);
        assert!((t.state(1)[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn trajectories_repeat_with_the_same_seed() {
        let m = LangevinModel::four_well(1.0).unwrap();
        let a = euler_maruyama(&m, &[0.1], 1e-4, 500, 11).unwrap();
        let b = euler_maruyama(&m, &[0.1], 1e-4, 500, 11).unwrap();
        let c = euler_maruyama(&m, &[0.1], 1e-4, 500, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn divergence_reports_the_step() {
        let m = CustomModel::new(
            "explode",
            1,
            DomainBox::new(vec![-1.0], vec![1.0]),
            |x| vec![10.0 * x[0]],
            |_| Mat::zeros(1, 1),
            |_| Mat::zeros(1, 1),
        );
        let err = euler_maruyama(&m, &[0.5], 0.1, 10, 0).unwrap_err();
        // 0.5 * 2^k leaves [-2, 2] at k = 3
        assert!(matches!(err, Error::Divergence { step: 3 }), "{err}");
    }

    #[test]
    fn cir_trajectory_stays_nonnegative_and_has_gamma_mean() {
        let m = CirModel::new(1.0, -1.0, 0.5).unwrap();
        let dt = 1e-2;
        let t = euler_maruyama(&m, &[1.0], dt, 400_000, 3).unwrap();
        assert!(t.states.iter().all(|v| *v >= 0.0));
        // batch means over windows much longer than the relaxation time 1/|b|
        let burn = 1000;
        let batch = 5000;
        let means: Vec<f64> = t.states[burn..]
            .chunks_exact(batch)
            .map(|c| c.iter().sum::<f64>() / batch as f64)
            .collect();
        let k = means.len() as f64;
        let mean = means.iter().sum::<f64>() / k;
        let se = (means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se + 5e-3, "mean {mean} se {se}");
    }

    #[test]
    fn exact_gamma_mean() {
        let m = CirModel::new(2.0, -1.0, 1.0).unwrap();
        let s = sample_invariant(&m, 100_000, 5, SamplingMethod::ExactGamma).unwrap();
        let n = s.n() as f64;
        let mean = s.as_slice().iter().sum::<f64>() / n;
        // Gamma(shape 4, rate 2): mean 2, variance 1
        let se = (1.0 / n).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn inverse_cdf_on_uniform_density_passes_ks() {
        let m = CustomModel::new(
            "uniform",
            1,
            DomainBox::new(vec![0.0], vec![1.0]),
            |_| vec![0.0],
            |_| Mat::zeros(1, 1),
            |_| Mat::zeros(1, 1),
        )
        .with_log_density(|_| 0.0);
        let n = 10_000;
        let s = sample_invariant(&m, n, 9, SamplingMethod::ExactInverseCdf).unwrap();
        let mut v = s.as_slice().to_vec();
        v.sort_by(f64::total_cmp);
        let d = v
            .iter()
            .enumerate()
            .map(|(i, x)| ((i + 1) as f64 / n as f64 - x).abs().max((x - i as f64 / n as f64).abs()))
            .fold(0.0, f64::max);
        // 99% Kolmogorov quantile 1.628 / sqrt(n)
        assert!(d <= 1.628 / (n as f64).sqrt(), "{d}");
    }

    #[test]
    fn method_mismatch_is_reported() {
        let m = LangevinModel::four_well(1.0).unwrap();
        assert!(matches!(
            sample_invariant(&m, 10, 0, SamplingMethod::ExactGamma),
            Err(Error::MethodMismatch { .. })
        ));
        assert!(sample_invariant(&m, 0, 0, SamplingMethod::ExactInverseCdf).is_err());
    }

    #[test]
    fn subsample_without_burn_in_or_stride_is_the_trajectory_head() {
        let m = LangevinModel::four_well(1.0).unwrap();
        let opts = TrajectoryOptions { dt: 1e-4, burn_in: 0, stride: 1 };
        let s = sample_invariant_with(&m, 50, 4, SamplingMethod::TrajectorySubsample, &opts).unwrap();
        let t = euler_maruyama(&m, s.point(0), 1e-4, 49, 4).unwrap();
        assert_eq!(s.as_slice(), &t.states[..]);
    }

    #[test]
    fn grid_sampler_stays_in_box_and_repeats() {
        let m = LangevinModel::muller_brown(2.0, 0.1).unwrap();
        let a = sample_invariant(&m, 500, 1, SamplingMethod::ExactInverseCdf).unwrap();
        let b = sample_invariant(&m, 500, 1, SamplingMethod::ExactInverseCdf).unwrap();
        assert_eq!(a, b);
        a.validate(&m).unwrap();
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let m = LangevinModel::muller_brown(2.0, 0.1).unwrap();
        let s = sample_invariant(&m, 20, 2, SamplingMethod::ExactInverseCdf).unwrap();
        s.write_csv(&path, &m.params(), &["config_hash=abc".into()]).unwrap();
        let back = SampleSet::read_csv(&path).unwrap();
        assert_eq!(s, back);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("# config_hash=abc\nx1,x2\n"));
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|k| derive_seed(42, k)).collect();
        assert_eq!(s.len(), 1000);
    }
}
