//! Minimum-variance unbiased table search.
//!
//! The objective `Σ p_ij (x_i - a_j)²` is bilinear in `(P, A)`. We run an
//! augmented Lagrangian on the unbiasedness rows `P a = x` and alternate two
//! convex steps: a proximal QP in `P` with the DP constraints kept exact, and
//! a closed-form linear solve in `A`. A polishing pass then restores the
//! constraints to the declared tolerances.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::closed_form::grr_parts;
use super::qp::QuadraticProgram;
use crate::error::{Error, Result};
use crate::lattice::DitherGrid;
use crate::rng::substream;
use crate::tables::{check_feasibility_raw, input_point, PrivacySpec, Tolerances};

/// Columns whose largest entry falls below this are removed.
const DEAD_COLUMN: f64 = 1e-7;
/// Proximal weight keeping consecutive P-steps close.
const PROXIMAL: f64 = 1e-3;
const MAX_RHO: f64 = 1e6;
/// Condition number of `P` above which the unbiasedness system is treated
/// as singular.
pub(crate) const SINGULAR_CONDITION: f64 = 1e10;
pub(crate) const SINGULAR_ALPHABET: f64 = 1e6;

/// Feasible region and objective data shared by every step.
pub(crate) struct Problem {
    pub bi: usize,
    pub bo: usize,
    pub x: Vec<f64>,
    pub spec: PrivacySpec,
    /// Ratio rows `p_ij <= e * p_kj` for metric specs, as `(i, k, e)`.
    pairs: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone)]
pub(crate) struct Candidate {
    pub p: DMatrix<f64>,
    pub a: DVector<f64>,
}

impl Candidate {
    pub fn objective(&self) -> f64 {
        let mut total = 0.0;
        for i in 0..self.p.nrows() {
            let x = input_point(i, self.p.nrows());
            for j in 0..self.p.ncols() {
                total += self.p[(i, j)] * (x - self.a[j]).powi(2);
            }
        }
        total
    }

    pub fn max_residual(&self, x: &[f64]) -> f64 {
        let r = &self.p * &self.a;
        r.iter().zip(x).map(|(r, x)| (r - x).abs()).fold(0.0, f64::max)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.p.nrows())
            .map(|i| self.p.row(i).iter().copied().collect())
            .collect()
    }
}

/// Settings of one augmented-Lagrangian run.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RunConfig {
    pub outer: usize,
    pub inner: usize,
    pub tolerance: f64,
    /// `Some((λ0, λmax))` switches to a pure quadratic penalty with no
    /// multiplier updates.
    pub penalty: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub(crate) struct RunOutcome {
    pub candidate: Candidate,
    pub iterations: usize,
    /// Final quadratic weight: `ρ/2` in hard mode, `λ` in penalty mode.
    pub weight: f64,
}

impl Problem {
    pub fn new(spec: PrivacySpec, bi: usize, bo: usize) -> Self {
        let x = (0..bi).map(|i| input_point(i, bi)).collect();
        let mut pairs = Vec::new();
        if let PrivacySpec::Metric { .. } = spec {
            for i in 0..bi {
                for k in 0..bi {
                    // Adjacent constraints chain to all others: for p >= 1
                    // the distance of n steps is at least n times one step.
                    if i.abs_diff(k) == 1 {
                        pairs.push((i, k, spec.log_ratio_bound(i, k, bi).exp()));
                    }
                }
            }
        }
        Self { bi, bo, x, spec, pairs }
    }

    fn n_probs(&self) -> usize {
        self.bi * self.bo
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.bo + j
    }

    /// Row sums, non-negativity and DP rows over the variables of `P`, plus
    /// per-column bounds for pure LDP. `extra` trailing variables are
    /// appended for the caller.
    fn base_program(&self, extra: usize) -> (QuadraticProgram, usize) {
        let np = self.n_probs();
        let pure = matches!(self.spec, PrivacySpec::PureLdp { .. });
        let aux = if pure { np + 2 * self.bo } else { np };
        let mut qp = QuadraticProgram::new(aux + extra);
        for i in 0..self.bi {
            qp.equal((0..self.bo).map(|j| (self.idx(i, j), 1.0)).collect(), 1.0);
        }
        for k in 0..np {
            qp.less_equal(vec![(k, -1.0)], 0.0);
        }
        match self.spec {
            PrivacySpec::PureLdp { epsilon } => {
                // lo_j <= p_ij <= hi_j <= e^ε lo_j
                let e = epsilon.exp();
                for j in 0..self.bo {
                    let lo = np + j;
                    let hi = np + self.bo + j;
                    for i in 0..self.bi {
                        qp.less_equal(vec![(self.idx(i, j), 1.0), (hi, -1.0)], 0.0);
                        qp.less_equal(vec![(lo, 1.0), (self.idx(i, j), -1.0)], 0.0);
                    }
                    qp.less_equal(vec![(hi, 1.0), (lo, -e)], 0.0);
                }
            }
            PrivacySpec::Metric { .. } => {
                for &(i, k, e) in &self.pairs {
                    for j in 0..self.bo {
                        qp.less_equal(vec![(self.idx(i, j), 1.0), (self.idx(k, j), -e)], 0.0);
                    }
                }
            }
        }
        (qp, aux)
    }

    fn read_probs(&self, sol: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.bi, self.bo, |i, j| sol[self.idx(i, j)].max(0.0))
    }

    /// Proximal augmented-Lagrangian step in `P` for fixed `a`:
    /// `Σ c_ij p_ij + μᵀr + ρ/2 ‖r‖² + τ/2 ‖P - P_k‖²` with `r = P a - x`
    /// carried as explicit variables so the Hessian stays diagonal.
    fn p_step(&self, prev: &DMatrix<f64>, a: &DVector<f64>, mu: &[f64], rho: f64) -> Result<DMatrix<f64>> {
        let (mut qp, r0) = self.base_program(self.bi);
        for i in 0..self.bi {
            let mut row: Vec<(usize, f64)> = (0..self.bo).map(|j| (self.idx(i, j), a[j])).collect();
            row.push((r0 + i, -1.0));
            qp.equal(row, self.x[i]);
            qp.add_hessian(r0 + i, r0 + i, rho);
            qp.add_linear(r0 + i, mu[i]);
            for j in 0..self.bo {
                let k = self.idx(i, j);
                qp.add_hessian(k, k, PROXIMAL);
                qp.add_linear(k, (self.x[i] - a[j]).powi(2) - PROXIMAL * prev[(i, j)]);
            }
        }
        Ok(self.read_probs(&qp.solve()?))
    }

    /// Exact LP in `P` with the alphabet fixed and unbiasedness enforced.
    fn lp_fixed_alphabet(&self, a: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (mut qp, _) = self.base_program(0);
        for i in 0..self.bi {
            for j in 0..self.bo {
                qp.add_linear(self.idx(i, j), (self.x[i] - a[j]).powi(2));
            }
            qp.equal((0..self.bo).map(|j| (self.idx(i, j), a[j])).collect(), self.x[i]);
        }
        Ok(self.read_probs(&qp.solve()?))
    }

    /// Minimizer in `a` of `Σ s_j a_j² - 2 aᵀPᵀx + μᵀ(Pa - x) + ρ/2 ‖Pa - x‖²`.
    fn a_step(&self, p: &DMatrix<f64>, mu: &[f64], rho: f64) -> DVector<f64> {
        let x = DVector::from_column_slice(&self.x);
        let mu = DVector::from_column_slice(mu);
        let s = p.row_sum();
        let mut m = p.transpose() * p * rho;
        let scale = 1.0 + s.max() + rho;
        for j in 0..self.bo {
            m[(j, j)] += 2.0 * s[j] + 1e-12 * scale;
        }
        let rhs = p.transpose() * (&x * (2.0 + rho) - mu);
        match m.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => m.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(self.bo)),
        }
    }

    /// Alphabet minimizing `Σ s_j a_j²` subject to `P a = x` exactly, or
    /// `None` when `P` lacks full row rank on its live columns.
    fn min_variance_alphabet(&self, p: &DMatrix<f64>) -> Option<DVector<f64>> {
        let s = p.row_sum();
        let live: Vec<usize> = (0..self.bo).filter(|&j| s[j] > 0.0).collect();
        if live.len() < self.bi {
            return None;
        }
        let pl = DMatrix::from_fn(self.bi, live.len(), |i, c| p[(i, live[c])]);
        let inv_s = DVector::from_iterator(live.len(), live.iter().map(|&j| 1.0 / s[j]));
        let scaled = DMatrix::from_fn(self.bi, live.len(), |i, c| pl[(i, c)] * inv_s[c]);
        let gram = &scaled * pl.transpose();
        let x = DVector::from_column_slice(&self.x);
        let y = gram.cholesky()?.solve(&x);
        let al = scaled.transpose() * y;
        let mut a = DVector::zeros(self.bo);
        for (c, &j) in live.iter().enumerate() {
            a[j] = al[c];
        }
        if a.iter().all(|v| v.is_finite()) {
            Some(a)
        } else {
            None
        }
    }

    /// Clip negatives, drop dead columns and renormalize rows.
    fn clean(&self, p: &mut DMatrix<f64>) {
        p.iter_mut().for_each(|v| {
            if *v < 1e-12 {
                *v = 0.0;
            }
        });
        for j in 0..self.bo {
            if p.column(j).max() < DEAD_COLUMN {
                p.column_mut(j).fill(0.0);
            }
        }
        for i in 0..self.bi {
            let sum: f64 = p.row(i).sum();
            if sum > 0.0 {
                p.row_mut(i).scale_mut(1.0 / sum);
            } else {
                p.row_mut(i).fill(1.0 / self.bo as f64);
            }
        }
    }

    /// Restore the ratio constraints by mixing every row with the average
    /// row, using the smallest mixing weight that works.
    fn repair_dp(&self, p: &mut DMatrix<f64>) {
        let avg: Vec<f64> = (0..self.bo).map(|j| p.column(j).mean()).collect();
        let mut t = 0.0_f64;
        let mut need = |v: f64, r: f64, e: f64| {
            if v > 0.0 {
                t = t.max(v / (v + r * (e - 1.0)));
            }
        };
        match self.spec {
            PrivacySpec::PureLdp { epsilon } => {
                let e = epsilon.exp();
                for j in 0..self.bo {
                    let col = p.column(j);
                    need(col.max() - e * col.min(), avg[j], e);
                }
            }
            PrivacySpec::Metric { .. } => {
                for &(i, k, e) in &self.pairs {
                    for j in 0..self.bo {
                        need(p[(i, j)] - e * p[(k, j)], avg[j], e);
                    }
                }
            }
        }
        if t > 0.0 {
            let t = (t * (1.0 + 1e-9) + 1e-15).min(1.0);
            for i in 0..self.bi {
                for j in 0..self.bo {
                    p[(i, j)] = (1.0 - t) * p[(i, j)] + t * avg[j];
                }
            }
        }
    }

    /// Bring a solver iterate to a table meeting the hard constraints.
    pub fn polish_hard(&self, c: &Candidate) -> Result<Candidate> {
        let mut p = c.p.clone();
        self.clean(&mut p);
        self.repair_dp(&mut p);
        if self.bi <= self.bo {
            if let Some(a) = self.min_variance_alphabet(&p) {
                return Ok(Candidate { p, a });
            }
        }
        let mut p = self.lp_fixed_alphabet(&c.a)?;
        self.clean(&mut p);
        self.repair_dp(&mut p);
        Ok(Candidate { p, a: c.a.clone() })
    }

    /// Penalty-mode polish: feasible `P`, alphabet minimizing the penalized
    /// objective.
    pub fn polish_penalty(&self, c: &Candidate, lambda: f64) -> Candidate {
        let mut p = c.p.clone();
        self.clean(&mut p);
        self.repair_dp(&mut p);
        let a = self.a_step(&p, &vec![0.0; self.bi], 2.0 * lambda);
        Candidate { p, a }
    }

    pub fn run(&self, start: Candidate, cfg: &RunConfig) -> Result<RunOutcome> {
        let mut cur = start;
        let mut mu = vec![0.0; self.bi];
        let (mut rho, lambda_max) = match cfg.penalty {
            Some((l0, lmax)) => (2.0 * l0, 2.0 * lmax),
            None => (10.0, MAX_RHO),
        };
        let mut last = cur.objective();
        let mut iterations = 0;
        let mut prev_residual = f64::INFINITY;
        for it in 0..cfg.outer {
            iterations = it + 1;
            for _ in 0..cfg.inner {
                let p = self.p_step(&cur.p, &cur.a, &mu, rho)?;
                let a = self.a_step(&p, &mu, rho);
                cur = Candidate { p, a };
            }
            let r = &cur.p * &cur.a;
            let mut residual = 0.0_f64;
            for i in 0..self.bi {
                let ri = r[i] - self.x[i];
                residual = f64::max(residual, ri.abs());
                if cfg.penalty.is_none() {
                    mu[i] += rho * ri;
                }
            }
            let obj = cur.objective();
            let settled = (last - obj).abs() <= cfg.tolerance * obj.max(1.0);
            last = obj;
            match cfg.penalty {
                None => {
                    if residual > 1e-6 && residual > 0.25 * prev_residual {
                        rho = (rho * 2.0).min(lambda_max);
                    }
                    prev_residual = residual;
                    if settled && residual < 1e-6 && it >= 4 {
                        break;
                    }
                }
                Some(_) => {
                    let at_max = rho >= lambda_max;
                    rho = (rho * 2.0).min(lambda_max);
                    if settled && at_max {
                        break;
                    }
                }
            }
        }
        Ok(RunOutcome {
            candidate: cur,
            iterations,
            weight: rho / 2.0,
        })
    }

    /// Dithering law from this problem's input grid onto `levels` points.
    fn dither_matrix(&self, levels: usize) -> DMatrix<f64> {
        let grid = DitherGrid::unit(levels).expect("levels >= 2");
        let mut w = DMatrix::zeros(self.bi, levels);
        for i in 0..self.bi {
            let law = grid.law(self.x[i]).expect("grid covers [0, 1]");
            for (k, q) in law.outcomes() {
                w[(i, k)] += q;
            }
        }
        w
    }

    /// Dither onto a `2^bits`-point grid, then apply generalized RR at
    /// `eps`. Narrower outputs are spread over the `b_out` columns and the
    /// rest left unused.
    fn dithered_grr(&self, bits: u32, eps: f64) -> Result<Candidate> {
        let levels = 1usize << bits;
        let (q, qa) = grr_parts(eps, levels)?;
        let w = self.dither_matrix(levels);
        let q = DMatrix::from_fn(levels, levels, |i, j| q[i][j]);
        let small = w * q;
        let column = |k: usize| ((k * (self.bo - 1)) as f64 / (levels - 1) as f64).round() as usize;
        let mut p = DMatrix::zeros(self.bi, self.bo);
        let mut a = DVector::from_fn(self.bo, |j, _| input_point(j, self.bo));
        for k in 0..levels {
            a[column(k)] = qa[k];
            for i in 0..self.bi {
                p[(i, column(k))] = small[(i, k)];
            }
        }
        Ok(Candidate { p, a })
    }

    /// Rows of a table over a coarser input grid, mixed by the dithering law
    /// from this grid onto the coarse one, then pulled inside the ratio
    /// constraints. Unbiasedness carries over since dithering is unbiased.
    pub fn lift(&self, probs: &[Vec<f64>], alphabet: &[f64]) -> Candidate {
        let coarse = probs.len();
        let w = self.dither_matrix(coarse);
        let q = DMatrix::from_fn(coarse, self.bo, |k, j| probs[k][j]);
        let mut p = w * q;
        self.repair_dp(&mut p);
        Candidate {
            p,
            a: DVector::from_column_slice(alphabet),
        }
    }

    /// A table with the same input grid and at most as many outputs, spread
    /// over this problem's output columns.
    pub fn embed(&self, probs: &[Vec<f64>], alphabet: &[f64]) -> Option<Candidate> {
        let levels = alphabet.len();
        if probs.len() != self.bi || levels > self.bo || levels < 2 {
            return None;
        }
        let column = |k: usize| ((k * (self.bo - 1)) as f64 / (levels - 1) as f64).round() as usize;
        let mut p = DMatrix::zeros(self.bi, self.bo);
        let mut a = DVector::from_fn(self.bo, |j, _| input_point(j, self.bo));
        for k in 0..levels {
            a[column(k)] = alphabet[k];
            for i in 0..self.bi {
                p[(i, column(k))] = probs[i][k];
            }
        }
        Some(Candidate { p, a })
    }

    pub fn is_feasible(&self, c: &Candidate, tol: &Tolerances) -> bool {
        check_feasibility_raw(&c.rows(), c.a.as_slice(), &self.spec, tol)
            .map(|r| r.valid)
            .unwrap_or(false)
    }

    /// Feasible starting tables: dithered generalized RR at every output
    /// width up to `b_out`. Metric specs search for the largest RR budget
    /// that passes the exact check.
    pub fn initial_candidates(&self) -> Vec<Candidate> {
        let tol = Tolerances::default();
        let bits_out = self.bo.trailing_zeros();
        let eps = self.spec.epsilon();
        let mut out = Vec::new();
        for bits in (1..=bits_out).rev() {
            let c = match self.spec {
                PrivacySpec::PureLdp { .. } => self.dithered_grr(bits, eps).ok(),
                PrivacySpec::Metric { .. } => self.largest_feasible_grr(bits, eps, &tol),
            };
            if let Some(c) = c.filter(|c| self.is_feasible(c, &tol)) {
                out.push(c);
            }
        }
        out
    }

    fn largest_feasible_grr(&self, bits: u32, eps: f64, tol: &Tolerances) -> Option<Candidate> {
        // Leave the declared slack unused so later steps have headroom.
        let tol = &Tolerances { dp: 1e-12, ..*tol };
        let mut ok = None;
        let (mut lo, mut hi) = (0.0, eps);
        if let Ok(c) = self.dithered_grr(bits, hi) {
            if self.is_feasible(&c, tol) {
                return Some(c);
            }
        }
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            match self.dithered_grr(bits, mid) {
                Ok(c) if self.is_feasible(&c, tol) => {
                    lo = mid;
                    ok = Some(c);
                }
                Ok(_) => hi = mid,
                Err(_) => lo = mid,
            }
        }
        ok
    }

    /// A perturbed copy of `base` for random restarts: rows mixed with
    /// Dirichlet draws, then pulled back inside the ratio constraints.
    pub fn perturbed(&self, base: &Candidate, seed: u64, index: u64) -> Candidate {
        let mut rng = substream(seed, index);
        let gamma = Gamma::new(1.0, 1.0).expect("valid shape");
        let weight: f64 = 0.3 + 0.4 * rng.random::<f64>();
        let mut p = base.p.clone();
        for i in 0..self.bi {
            let draw: Vec<f64> = (0..self.bo).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draw.iter().sum();
            for j in 0..self.bo {
                p[(i, j)] = (1.0 - weight) * p[(i, j)] + weight * draw[j] / total;
            }
        }
        self.repair_dp(&mut p);
        Candidate { p, a: base.a.clone() }
    }

    /// Condition number of `P` over its live columns, after merging
    /// proportional columns (they act as a single output symbol).
    pub fn condition_number(&self, p: &DMatrix<f64>) -> f64 {
        let mut merged: Vec<DVector<f64>> = Vec::new();
        for j in 0..self.bo {
            let col = p.column(j).into_owned();
            let norm = col.norm();
            if norm == 0.0 {
                continue;
            }
            let unit = &col / norm;
            match merged.iter_mut().find(|m| m.normalize().dot(&unit) > 1.0 - 1e-9) {
                Some(m) => *m += col,
                None => merged.push(col),
            }
        }
        if merged.is_empty() {
            return f64::INFINITY;
        }
        let pl = DMatrix::from_columns(&merged);
        let sv = pl.svd(false, false).singular_values;
        let min = sv.min();
        if min > 0.0 {
            sv.max() / min
        } else {
            f64::INFINITY
        }
    }
}

/// Error for requests the designer cannot even start.
pub(crate) fn no_start(spec: &PrivacySpec) -> Error {
    Error::Infeasible(format!("no feasible starting table for {spec:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dithered_grr_is_feasible_for_wider_input() {
        let prob = Problem::new(PrivacySpec::pure(1.0), 16, 4);
        let inits = prob.initial_candidates();
        assert_eq!(inits.len(), 2);
        for c in &inits {
            assert!(prob.is_feasible(c, &Tolerances::default()));
        }
    }

    #[test]
    fn metric_init_passes_exact_check() {
        let prob = Problem::new(PrivacySpec::metric(2.0, 1.0), 8, 4);
        assert!(!prob.initial_candidates().is_empty());
        let prob = Problem::new(PrivacySpec::metric(2.0, 2.0), 8, 8);
        assert!(!prob.initial_candidates().is_empty());
    }

    #[test]
    fn repair_restores_ratio_constraints() {
        let prob = Problem::new(PrivacySpec::pure(0.5), 4, 4);
        let mut p = DMatrix::identity(4, 4);
        prob.repair_dp(&mut p);
        let c = Candidate { p, a: DVector::zeros(4) };
        let r = check_feasibility_raw(&c.rows(), c.a.as_slice(), &prob.spec, &Tolerances::default()).unwrap();
        assert!(r.max_dp_violation <= 1e-9, "{r:?}");
        assert!(r.max_row_sum_deviation <= 1e-12);
    }

    #[test]
    fn min_variance_alphabet_is_unbiased() {
        let prob = Problem::new(PrivacySpec::pure(1.0), 4, 8);
        let c = prob.dithered_grr(3, 1.0).unwrap();
        let a = prob.min_variance_alphabet(&c.p).unwrap();
        let improved = Candidate { p: c.p.clone(), a };
        assert!(improved.max_residual(&prob.x) < 1e-12);
        assert!(improved.objective() <= c.objective() + 1e-12);
    }

    #[test]
    fn a_step_without_penalty_is_posterior_mean() {
        // With ρ = 0 and μ = 0, a_j = Σ_i p_ij x_i / Σ_i p_ij.
        let prob = Problem::new(PrivacySpec::pure(1.0), 2, 2);
        let p = DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.25, 0.75]);
        let a = prob.a_step(&p, &[0.0, 0.0], 0.0);
        assert!((a[0] - 0.25).abs() < 1e-9 && (a[1] - 0.75).abs() < 1e-9);
    }
}
