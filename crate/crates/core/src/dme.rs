//! Distributed mean estimation: synthetic client data, end-to-end
//! simulation of table and baseline mechanisms, CSV output and the
//! budget-versus-variance sweep.
//!
//! Clients inside a trial run in parallel, each with its own random stream
//! `substream(derive_seed(seed, trial), client)`. Partial sums are formed
//! over fixed-size chunks and combined in index order, so results are
//! bit-identical regardless of thread count.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::designer::{design_mvu_with_warm_starts, DesignResult, SolverOptions};
use crate::error::{Error, Result};
use crate::lattice::{dither_with_gamma, lp_norm, worst_case_gamma, DitherGrid, NormPreservingConfig};
use crate::mechanisms::{
    decode, decode_vector, gaussian_mechanism, gaussian_sigma, laplace_mechanism, privatize_index, privatize_vector,
    VectorSpec,
};
use crate::rng::{derive_seed, substream};
use crate::tables::{MechanismTable, PrivacySpec};

/// Recorded in every CSV header.
pub const MSE_CONVENTION: &str = "mse = mean over coordinates of (estimate - true mean)^2";

const CHUNK: usize = 1024;
// Stream tag for synthetic data, kept apart from the trial streams.
const DATA_TAG: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DmeMode {
    Scalar,
    VectorL1,
    VectorL2,
}

impl DmeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Scalar => "scalar",
            Self::VectorL1 => "vector-l1",
            Self::VectorL2 => "vector-l2",
        }
    }

    /// Norm of the client ball in vector modes.
    pub fn norm_order(&self) -> f64 {
        match self {
            Self::VectorL2 => 2.0,
            _ => 1.0,
        }
    }
}

/// Shared settings of one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmeRun {
    pub mode: DmeMode,
    pub n: usize,
    pub dim: usize,
    pub trials: usize,
    pub seed: u64,
}

impl DmeRun {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.trials == 0 || self.dim == 0 {
            return Err(Error::InvalidParameter("n, dim and trials must all be at least 1".into()));
        }
        Ok(())
    }

    /// Client data for vector modes, drawn from a stream reserved for data.
    pub fn data(&self) -> Vec<Vec<f64>> {
        let mut rng = substream(self.seed, DATA_TAG);
        match self.mode {
            DmeMode::VectorL2 => gen_l2_sector_data(self.n, self.dim, &mut rng),
            _ => gen_l1_data(self.n, self.dim, &mut rng),
        }
    }
}

/// Uniform on `[0,1]^d`, each row rescaled to unit L1 norm.
pub fn gen_l1_data<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut row: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / d as f64);
            }
            row
        })
        .collect()
}

/// Uniform on the non-negative part of the unit sphere.
pub fn gen_l2_sector_data<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let mut row: Vec<f64> = (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z.abs()
                })
                .collect();
            let s = lp_norm(&row, 2.0);
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
                break row;
            }
        })
        .collect()
}

/// Per-trial squared errors of one mechanism at one privacy level.
#[derive(Debug, Clone, PartialEq)]
pub struct DmeResult {
    pub mechanism: String,
    pub epsilon: f64,
    pub delta: Option<f64>,
    /// `None` for uncompressed baselines.
    pub bits_per_coord: Option<u32>,
    pub errors: Vec<f64>,
}

impl DmeResult {
    pub fn mean(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }

    /// Sample standard deviation across trials; absent for a single trial.
    pub fn std(&self) -> Option<f64> {
        let t = self.errors.len();
        if t < 2 {
            return None;
        }
        let m = self.mean();
        Some((self.errors.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (t - 1) as f64).sqrt())
    }

    pub fn stderr(&self) -> Option<f64> {
        self.std().map(|s| s / (self.errors.len() as f64).sqrt())
    }
}

/// Sum per-client contributions of width `width` over `n` clients.
fn parallel_sum<F>(n: usize, width: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    let partials = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            for i in c * CHUNK..n.min((c + 1) * CHUNK) {
                f(i, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![0.0; width];
    for part in partials {
        total.iter_mut().zip(part).for_each(|(t, p)| *t += p);
    }
    Ok(total)
}

/// `n` decoded outputs for input `u ∈ [0, 1]`, client `i` using stream
/// `substream(seed, i)`.
pub fn scalar_outputs(table: &MechanismTable, u: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            decode(table, privatize_index(table, u, &mut rng)?)
        })
        .collect()
}

fn scalar_label(table: &MechanismTable) -> String {
    table
        .provenance()
        .get("method")
        .and_then(|v| v.as_str())
        .unwrap_or("table")
        .to_string()
}

/// Every client holds `x ∈ [-1, 1]`; the server averages the decoded
/// outputs. Records `(estimate - x)²` per trial.
pub fn run_scalar_dme(table: &MechanismTable, x: f64, n: usize, trials: usize, seed: u64) -> Result<DmeResult> {
    run_scalar_dme_multi(table, &[x], n, trials, seed)
}

/// As [`run_scalar_dme`], averaging the squared error over several inputs.
pub fn run_scalar_dme_multi(table: &MechanismTable, xs: &[f64], n: usize, trials: usize, seed: u64) -> Result<DmeResult> {
    if n == 0 || trials == 0 || xs.is_empty() {
        return Err(Error::InvalidParameter("n, trials and the input list must be non-empty".into()));
    }
    for &x in xs {
        if !(-1.0..=1.0).contains(&x) {
            return Err(Error::OutOfRange { value: x, lo: -1.0, hi: 1.0 });
        }
    }
    let mut errors = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut sq = 0.0;
        for (k, &x) in xs.iter().enumerate() {
            let u = (x + 1.0) / 2.0;
            let s = derive_seed(derive_seed(seed, t as u64), k as u64);
            let sum = parallel_sum(n, 1, |i, acc| {
                let mut rng = substream(s, i as u64);
                acc[0] += decode(table, privatize_index(table, u, &mut rng)?)?;
                Ok(())
            })?;
            let estimate = 2.0 * sum[0] / n as f64 - 1.0;
            sq += (estimate - x).powi(2);
        }
        errors.push(sq / xs.len() as f64);
    }
    Ok(DmeResult {
        mechanism: scalar_label(table),
        epsilon: table.privacy().epsilon(),
        delta: None,
        bits_per_coord: Some(table.b_out()),
        errors,
    })
}

/// A mechanism applied to each client vector.
#[derive(Debug, Clone, Copy)]
pub enum VectorMechanism<'a> {
    /// Norm-preserving dither onto the table's input grid over `[-R, R]`,
    /// then coordinate-wise privatization. `dither_delta` sets the failure
    /// probability of the shrink factor.
    Table {
        table: &'a MechanismTable,
        dither_delta: f64,
    },
    Laplace {
        epsilon: f64,
    },
    Gaussian {
        epsilon: f64,
        delta: f64,
    },
}

/// Guarantee of the table pipeline over whole vectors under
/// zero-vector adjacency: metric tables give `ε·(1/2)^p`, pure tables
/// compose over coordinates.
pub fn table_vector_epsilon(table: &MechanismTable, spec: &VectorSpec) -> f64 {
    match table.privacy() {
        PrivacySpec::Metric { epsilon, .. } => spec.composite_epsilon(*epsilon),
        PrivacySpec::PureLdp { epsilon } => epsilon * spec.dim as f64,
    }
}

/// Table-level metric-DP parameter that yields vector-level `target`.
pub fn table_epsilon_for(target: f64, p: f64) -> f64 {
    target * 2f64.powf(p)
}

/// Shrink factor the table pipeline applies before quantization.
pub fn table_gamma(table: &MechanismTable, spec: &VectorSpec, dither_delta: f64) -> Result<f64> {
    let grid = DitherGrid::symmetric(table.input_levels(), spec.sensitivity)?;
    let cfg = NormPreservingConfig::new(spec.sensitivity, dither_delta).with_norm_order(spec.norm_order);
    worst_case_gamma(spec.dim, &grid, &cfg)
}

/// Run `trials` rounds over fixed client data. Squared error is averaged
/// over coordinates.
pub fn run_vector_dme(
    data: &[Vec<f64>],
    spec: &VectorSpec,
    mech: &VectorMechanism,
    trials: usize,
    seed: u64,
) -> Result<DmeResult> {
    spec.validate()?;
    if data.is_empty() || trials == 0 {
        return Err(Error::InvalidParameter("need at least one client and one trial".into()));
    }
    for row in data {
        spec.check_norm(row)?;
    }
    let n = data.len();
    let d = spec.dim;
    let mut truth = vec![0.0; d];
    for row in data {
        truth.iter_mut().zip(row).for_each(|(t, v)| *t += v);
    }
    truth.iter_mut().for_each(|t| *t /= n as f64);

    let r = spec.sensitivity;
    let p = spec.norm_order;
    let l1 = r * (d as f64).powf(1.0 - 1.0 / p);
    let l2 = r * (d as f64).powf((0.5 - 1.0 / p).max(0.0));

    let (label, epsilon, delta, bits) = match mech {
        VectorMechanism::Table { table, .. } => (
            format!("mvu-{}", scalar_label(table)),
            table_vector_epsilon(table, spec),
            None,
            Some(table.b_out()),
        ),
        VectorMechanism::Laplace { epsilon } => ("laplace".to_string(), *epsilon, None, None),
        VectorMechanism::Gaussian { epsilon, delta } => {
            gaussian_sigma(l2, *epsilon, *delta)?;
            ("gaussian".to_string(), *epsilon, Some(*delta), None)
        }
    };

    let table_setup = match mech {
        VectorMechanism::Table { table, dither_delta } => {
            let grid = DitherGrid::symmetric(table.input_levels(), r)?;
            let cfg = NormPreservingConfig::new(r, *dither_delta).with_norm_order(p);
            let gamma = worst_case_gamma(d, &grid, &cfg)?;
            Some((grid, cfg, gamma))
        }
        _ => None,
    };

    let mut errors = Vec::with_capacity(trials);
    for t in 0..trials {
        let s = derive_seed(seed, t as u64);
        let sum = parallel_sum(n, d, |i, acc| {
            let mut rng = substream(s, i as u64);
            let x = &data[i];
            let out = match (mech, &table_setup) {
                (VectorMechanism::Table { table, .. }, Some((grid, cfg, gamma))) => {
                    let q = dither_with_gamma(x, *gamma, grid, cfg, &mut rng)?;
                    let payload = privatize_vector(table, &q.dithered.values, spec, &mut rng)?;
                    let mut v = decode_vector(table, &payload, spec)?;
                    v.iter_mut().for_each(|c| *c /= gamma);
                    v
                }
                (VectorMechanism::Laplace { epsilon }, _) => laplace_mechanism(x, l1, *epsilon, &mut rng)?,
                (VectorMechanism::Gaussian { epsilon, delta }, _) => {
                    gaussian_mechanism(x, l2, *epsilon, *delta, &mut rng)?
                }
                _ => unreachable!("table setup exists exactly for table mechanisms"),
            };
            acc.iter_mut().zip(out).for_each(|(a, o)| *a += o);
            Ok(())
        })?;
        let mse = sum
            .iter()
            .zip(&truth)
            .map(|(s, m)| (s / n as f64 - m).powi(2))
            .sum::<f64>()
            / d as f64;
        errors.push(mse);
    }
    Ok(DmeResult {
        mechanism: label,
        epsilon,
        delta,
        bits_per_coord: bits,
        errors,
    })
}

/// Design metric tables for vector-level targets `epsilons` (ascending),
/// each warm-started from the previous, so objectives are non-increasing.
pub fn design_vector_tables(
    epsilons: &[f64],
    p: f64,
    b_in: u32,
    b_out: u32,
    opts: &SolverOptions,
) -> Result<Vec<DesignResult>> {
    let mut order: Vec<usize> = (0..epsilons.len()).collect();
    order.sort_by(|&a, &b| epsilons[a].total_cmp(&epsilons[b]));
    let mut done: Vec<Option<DesignResult>> = vec![None; epsilons.len()];
    let mut warm: Vec<MechanismTable> = Vec::new();
    for k in order {
        let spec = PrivacySpec::metric(table_epsilon_for(epsilons[k], p), p);
        let res = design_mvu_with_warm_starts(spec, b_in, b_out, opts, &warm)?;
        warm = vec![res.table.clone()];
        done[k] = Some(res);
    }
    Ok(done.into_iter().map(|r| r.expect("every index designed")).collect())
}

/// Write results as CSV preceded by `#` comment lines.
pub fn write_csv<W: Write>(w: &mut W, run: &DmeRun, header: &[(String, String)], results: &[DmeResult]) -> Result<()> {
    writeln!(w, "# {MSE_CONVENTION}")?;
    writeln!(w, "# mode={} n={} d={} trials={} seed={}", run.mode.as_str(), run.n, run.dim, run.trials, run.seed)?;
    for (k, v) in header {
        writeln!(w, "# {k}={v}")?;
    }
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["mode", "mechanism", "epsilon", "delta", "bits_per_coord", "trial", "mse", "stderr", "seed"])
        .map_err(std::io::Error::other)?;
    for r in results {
        let stderr = r.stderr().map(|s| s.to_string()).unwrap_or_default();
        let delta = r.delta.map(|d| d.to_string()).unwrap_or_default();
        let bits = r.bits_per_coord.map(|b| b.to_string()).unwrap_or_else(|| "inf".into());
        for (t, e) in r.errors.iter().enumerate() {
            csv.write_record([
                run.mode.as_str().to_string(),
                r.mechanism.clone(),
                r.epsilon.to_string(),
                delta.clone(),
                bits.clone(),
                t.to_string(),
                e.to_string(),
                stderr.clone(),
                run.seed.to_string(),
            ])
            .map_err(std::io::Error::other)?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Monte Carlo settings for [`budget_sweep`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSimulation {
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub b_out: u32,
    pub objective: f64,
    pub converged: bool,
    /// Squared error of the mean of `n` uniform inputs on `[0, 1]`,
    /// averaged over trials.
    pub mse: Option<f64>,
    pub diagnostic: Option<String>,
    pub table: Option<MechanismTable>,
}

/// Design one table per output budget at fixed `b_in`. Budgets are solved
/// in increasing order and each design is warm-started from the smaller
/// ones, which makes the objective non-increasing in `b_out`. A failed
/// cell is reported with `converged == false`.
pub fn budget_sweep(
    spec: PrivacySpec,
    b_in: u32,
    b_outs: &[u32],
    opts: &SolverOptions,
    sim: Option<&SweepSimulation>,
) -> Result<Vec<SweepCell>> {
    spec.validate()?;
    let mut order: Vec<usize> = (0..b_outs.len()).collect();
    order.sort_by_key(|&k| b_outs[k]);
    let mut cells: Vec<Option<SweepCell>> = vec![None; b_outs.len()];
    let mut warm: Vec<MechanismTable> = Vec::new();
    for k in order {
        let b_out = b_outs[k];
        let cell = match design_mvu_with_warm_starts(spec, b_in, b_out, opts, &warm) {
            Ok(res) => {
                let mse = match sim {
                    Some(s) => Some(simulate_uniform_mean(&res.table, s)?),
                    None => None,
                };
                if res.report.valid {
                    warm.push(res.table.clone());
                }
                SweepCell {
                    b_out,
                    objective: res.objective,
                    converged: res.converged,
                    mse,
                    diagnostic: res.diagnostic,
                    table: Some(res.table),
                }
            }
            Err(e) => SweepCell {
                b_out,
                objective: f64::NAN,
                converged: false,
                mse: None,
                diagnostic: Some(e.to_string()),
                table: None,
            },
        };
        cells[k] = Some(cell);
    }
    Ok(cells.into_iter().map(|c| c.expect("every budget visited")).collect())
}

fn simulate_uniform_mean(table: &MechanismTable, sim: &SweepSimulation) -> Result<f64> {
    if sim.n == 0 || sim.trials == 0 {
        return Err(Error::InvalidParameter("n and trials must be at least 1".into()));
    }
    let mut total = 0.0;
    for t in 0..sim.trials {
        let s = derive_seed(sim.seed, t as u64);
        let sums = parallel_sum(sim.n, 2, |i, acc| {
            let mut rng = substream(s, i as u64);
            let x: f64 = rng.random();
            acc[0] += x;
            acc[1] += decode(table, privatize_index(table, x, &mut rng)?)?;
            Ok(())
        })?;
        total += ((sums[1] - sums[0]) / sim.n as f64).powi(2);
    }
    Ok(total / sim.trials as f64)
}
