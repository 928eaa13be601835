//! Offline construction of mechanism tables.

mod closed_form;
pub(crate) mod qp;
mod solver;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use closed_form::{build_bitwise_rr, build_generalized_rr, BIT_WEIGHT_CONVENTION, MAX_ALPHABET_MAGNITUDE};

use crate::error::{Error, Result};
use crate::lattice::levels_for_bits;
use crate::tables::{check_feasibility, FeasibilityReport, MechanismTable, PrivacySpec, Tolerances};
use solver::{no_start, Candidate, Problem, RunConfig, SINGULAR_ALPHABET, SINGULAR_CONDITION};

/// Constraint handling for unbiasedness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    /// Unbiasedness enforced to the declared bias tolerance.
    Hard,
    /// Unbiasedness relaxed to a quadratic penalty whose weight doubles
    /// every outer iteration.
    Penalty,
}

/// Starting point of the local search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Initialization {
    /// Dithering onto the output grid followed by generalized RR. Always
    /// feasible, so the result never does worse than generalized RR.
    DitherThenGrr,
    /// All rows uniform with the grid as alphabet; infeasible at the start.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub method: SolverMethod,
    /// Initial penalty weight λ (penalty mode).
    pub penalty_weight: f64,
    pub max_penalty_weight: f64,
    pub max_outer_iterations: usize,
    /// Alternations between the `P` and `A` steps per outer iteration.
    pub inner_iterations: usize,
    /// Relative objective change treated as converged.
    pub tolerance: f64,
    pub initialization: Initialization,
    /// Extra runs from perturbed starts, seeded from `seed`.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: SolverMethod::Hard,
            penalty_weight: 1e3,
            max_penalty_weight: 1e6,
            max_outer_iterations: 60,
            inner_iterations: 5,
            tolerance: 1e-6,
            initialization: Initialization::DitherThenGrr,
            restarts: 3,
            seed: 0,
        }
    }
}

impl SolverOptions {
    pub fn penalty() -> Self {
        Self {
            method: SolverMethod::Penalty,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iterations == 0 || self.inner_iterations == 0 {
            return Err(Error::InvalidParameter("iteration counts must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.method == SolverMethod::Penalty
            && !(self.penalty_weight > 0.0 && self.max_penalty_weight >= self.penalty_weight)
        {
            return Err(Error::InvalidParameter(format!(
                "penalty weights must satisfy 0 < {} <= {}",
                self.penalty_weight, self.max_penalty_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DesignResult {
    pub table: MechanismTable,
    /// `Σ p_ij (x_i - a_j)²` of the returned table.
    pub objective: f64,
    pub report: FeasibilityReport,
    pub iterations: usize,
    pub converged: bool,
    /// Why `converged` is false, if it is.
    pub diagnostic: Option<String>,
}

/// Search for the minimum-variance unbiased table under `spec`.
///
/// Hard mode keeps the best table that passes every tolerance, starting
/// with the feasible dithered-RR initializations. If none passes, or the
/// unbiasedness system is numerically singular, the best-effort table comes
/// back with `converged == false`.
pub fn design_mvu(spec: PrivacySpec, b_in: u32, b_out: u32, opts: &SolverOptions) -> Result<DesignResult> {
    design_mvu_with_warm_starts(spec, b_in, b_out, opts, &[])
}

/// [`design_mvu`] seeded with existing tables over the same input grid and
/// no more outputs, e.g. the design at a smaller `b_out`. Since such a table
/// embeds into the larger output space, the result is never worse than the
/// best feasible warm start.
pub fn design_mvu_with_warm_starts(
    spec: PrivacySpec,
    b_in: u32,
    b_out: u32,
    opts: &SolverOptions,
    warm_starts: &[MechanismTable],
) -> Result<DesignResult> {
    spec.validate()?;
    opts.validate()?;
    let bi = levels_for_bits(b_in)?;
    let bo = levels_for_bits(b_out)?;
    let prob = Problem::new(spec, bi, bo);
    let hard = opts.method == SolverMethod::Hard;
    let cfg = RunConfig {
        outer: opts.max_outer_iterations,
        inner: opts.inner_iterations,
        tolerance: opts.tolerance,
        penalty: (!hard).then_some((opts.penalty_weight, opts.max_penalty_weight)),
    };

    let mut inits = prob.initial_candidates();
    inits.extend(
        warm_starts
            .iter()
            .filter_map(|t| prob.embed(t.probs(), t.alphabet()))
            .filter(|c| prob.is_feasible(c, &Tolerances::default())),
    );
    let start = match opts.initialization {
        Initialization::DitherThenGrr => inits
            .iter()
            .min_by(|a, b| a.objective().total_cmp(&b.objective()))
            .cloned()
            .ok_or_else(|| no_start(&spec))?,
        Initialization::Uniform => Candidate {
            p: nalgebra::DMatrix::from_element(bi, bo, 1.0 / bo as f64),
            a: nalgebra::DVector::from_fn(bo, |j, _| crate::tables::input_point(j, bo)),
        },
    };
    if b_in > COARSE_BITS && b_in > b_out {
        return design_coarse_to_fine(&prob, spec, b_in, b_out, opts, inits);
    }
    let mut starts = vec![start.clone()];
    if opts.initialization == Initialization::DitherThenGrr {
        starts.extend(inits.iter().filter(|c| c.objective() != start.objective()).cloned());
    }
    starts.extend((0..opts.restarts).map(|r| prob.perturbed(&start, opts.seed, r as u64)));

    let mut pool: Vec<(Candidate, Tolerances)> = Vec::new();
    if hard {
        pool.extend(inits.into_iter().map(|c| (c, Tolerances::default())));
    }
    let mut iterations = 0;
    let mut failures = Vec::new();
    for s in starts {
        let out = match prob.run(s, &cfg) {
            Ok(out) => out,
            Err(e) => {
                failures.push(e.to_string());
                continue;
            }
        };
        iterations += out.iterations;
        if hard {
            match prob.polish_hard(&out.candidate) {
                Ok(c) => pool.push((c, Tolerances::default())),
                Err(e) => failures.push(e.to_string()),
            }
        } else {
            let c = prob.polish_penalty(&out.candidate, out.weight);
            let bias = c.max_residual(&prob.x);
            let tol = Tolerances {
                bias: Tolerances::default().bias.max(bias * 1.01),
                ..Tolerances::default()
            };
            pool.push((c, tol));
        }
    }

    finish(&prob, spec, b_in, b_out, opts, pool, iterations, failures)
}

/// Input widths above this are designed on a coarser input grid first.
pub const COARSE_BITS: u32 = 5;

/// Budget for the coarse design such that interpolating between adjacent
/// coarse rows stays within the fine grid's allowance: the log-ratio slope
/// of a linear mix is at most `e^{ε' h_c^p} - 1` per coarse step.
fn coarse_spec(spec: PrivacySpec, fine: usize, coarse: usize) -> PrivacySpec {
    match spec {
        PrivacySpec::PureLdp { .. } => spec,
        PrivacySpec::Metric { epsilon, p } => {
            let hf = 1.0 / (fine - 1) as f64;
            let hc = 1.0 / (coarse - 1) as f64;
            let eps = (epsilon * hf.powf(p - 1.0) * hc).ln_1p() / hc.powf(p);
            PrivacySpec::Metric { epsilon: eps.min(epsilon), p }
        }
    }
}

fn design_coarse_to_fine(
    prob: &Problem,
    spec: PrivacySpec,
    b_in: u32,
    b_out: u32,
    opts: &SolverOptions,
    inits: Vec<Candidate>,
) -> Result<DesignResult> {
    let coarse = design_mvu(coarse_spec(spec, prob.bi, 1 << COARSE_BITS), COARSE_BITS, b_out, opts)?;
    let lifted = prob.lift(coarse.table.probs(), coarse.table.alphabet());
    let hard = opts.method == SolverMethod::Hard;
    let tol = if hard {
        Tolerances::default()
    } else {
        *coarse.table.tolerances()
    };
    let mut pool: Vec<(Candidate, Tolerances)> = Vec::new();
    let mut failures = Vec::new();
    if hard {
        pool.extend(inits.into_iter().map(|c| (c, tol)));
        match prob.polish_hard(&lifted) {
            Ok(c) => pool.push((c, tol)),
            Err(e) => failures.push(e.to_string()),
        }
    }
    pool.push((lifted, tol));
    finish(prob, spec, b_in, b_out, opts, pool, coarse.iterations, failures)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    prob: &Problem,
    spec: PrivacySpec,
    b_in: u32,
    b_out: u32,
    opts: &SolverOptions,
    pool: Vec<(Candidate, Tolerances)>,
    iterations: usize,
    failures: Vec<String>,
) -> Result<DesignResult> {
    let hard = opts.method == SolverMethod::Hard;
    let penalty_weight = if hard { 0.0 } else { opts.max_penalty_weight };
    let score = |c: &Candidate| c.objective() + penalty_weight * c.max_residual(&prob.x).powi(2);
    let feasible = |c: &Candidate, tol: &Tolerances| prob.is_feasible(c, tol);
    let pick = |only_feasible: bool| {
        pool.iter()
            .filter(|(c, t)| !only_feasible || feasible(c, t))
            .min_by(|(a, _), (b, _)| {
                score(a)
                    .total_cmp(&score(b))
                    .then_with(|| a.p.as_slice().partial_cmp(b.p.as_slice()).unwrap_or(std::cmp::Ordering::Equal))
            })
            .cloned()
    };
    let (best, tol, found_feasible) = match pick(true) {
        Some((c, t)) => (c, t, true),
        None => {
            let (c, t) = pick(false).ok_or_else(|| Error::Solver(failures.join("; ")))?;
            (c, t, false)
        }
    };

    let cond = prob.condition_number(&best.p);
    let magnitude = best.a.amax();
    let mut diagnostics = Vec::new();
    if !found_feasible {
        diagnostics.push("no candidate met the declared tolerances".to_string());
    }
    if cond > SINGULAR_CONDITION || magnitude > SINGULAR_ALPHABET {
        diagnostics.push(format!(
            "unbiasedness system is near-singular (condition number {cond:.3e}, max |a| {magnitude:.3e})"
        ));
    }
    let converged = diagnostics.is_empty();
    let objective = best.objective();
    let table = MechanismTable::new(b_in, b_out, best.rows(), best.a.iter().copied().collect(), spec)?
        .with_tolerances(tol)
        .with_provenance("method", "mvu")
        .with_provenance(
            "solver",
            if hard { "augmented-lagrangian" } else { "quadratic-penalty" },
        )
        .with_provenance("options", json!(opts))
        .with_provenance("objective", objective)
        .with_provenance("iterations", iterations)
        .with_provenance("converged", converged)
        .with_provenance("condition_number", if cond.is_finite() { json!(cond) } else { json!("inf") });
    let report = check_feasibility(&table, &tol);
    Ok(DesignResult {
        objective: table.variance_objective(),
        report,
        iterations,
        converged,
        diagnostic: (!converged).then(|| diagnostics.join("; ")),
        table,
    })
}

/// [`design_mvu`] under `(ε/2)`-metric DP for the L1 distance.
pub fn design_mvu_metric_l1_halved(epsilon: f64, b_in: u32, b_out: u32, opts: &SolverOptions) -> Result<DesignResult> {
    design_mvu(PrivacySpec::metric(epsilon / 2.0, 1.0), b_in, b_out, opts)
}
