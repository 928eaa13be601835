//! Thin builder over Clarabel for the convex subproblems of the designer.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use crate::error::{Error, Result};

/// `min ½ xᵀHx + qᵀx` subject to sparse equality and `≤` rows.
#[derive(Debug, Clone)]
pub(crate) struct QuadraticProgram {
    n: usize,
    // Upper-triangular entries of H.
    hessian: Vec<(usize, usize, f64)>,
    linear: Vec<f64>,
    eq_rows: Vec<Vec<(usize, f64)>>,
    eq_rhs: Vec<f64>,
    le_rows: Vec<Vec<(usize, f64)>>,
    le_rhs: Vec<f64>,
}

impl QuadraticProgram {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            hessian: Vec::new(),
            linear: vec![0.0; n],
            eq_rows: Vec::new(),
            eq_rhs: Vec::new(),
            le_rows: Vec::new(),
            le_rhs: Vec::new(),
        }
    }

    /// Add `v` to `H[r][c]` (and its mirror); only `r <= c` is stored.
    pub fn add_hessian(&mut self, r: usize, c: usize, v: f64) {
        if v != 0.0 {
            let (r, c) = if r <= c { (r, c) } else { (c, r) };
            self.hessian.push((r, c, v));
        }
    }

    pub fn add_linear(&mut self, k: usize, v: f64) {
        self.linear[k] += v;
    }

    pub fn equal(&mut self, row: Vec<(usize, f64)>, rhs: f64) {
        self.eq_rows.push(row);
        self.eq_rhs.push(rhs);
    }

    pub fn less_equal(&mut self, row: Vec<(usize, f64)>, rhs: f64) {
        self.le_rows.push(row);
        self.le_rhs.push(rhs);
    }

    pub fn solve(&self) -> Result<Vec<f64>> {
        let n = self.n;
        let (hr, hc, hv) = unzip3(&self.hessian);
        let h = CscMatrix::new_from_triplets(n, n, hr, hc, hv);
        let m = self.eq_rows.len() + self.le_rows.len();
        let mut ar = Vec::new();
        let mut ac = Vec::new();
        let mut av = Vec::new();
        for (r, row) in self.eq_rows.iter().chain(&self.le_rows).enumerate() {
            for &(c, v) in row {
                ar.push(r);
                ac.push(c);
                av.push(v);
            }
        }
        let a = CscMatrix::new_from_triplets(m, n, ar, ac, av);
        let b: Vec<f64> = self.eq_rhs.iter().chain(&self.le_rhs).copied().collect();
        let mut cones = Vec::new();
        if !self.eq_rows.is_empty() {
            cones.push(SupportedConeT::ZeroConeT(self.eq_rows.len()));
        }
        if !self.le_rows.is_empty() {
            cones.push(SupportedConeT::NonnegativeConeT(self.le_rows.len()));
        }
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(400)
            .tol_gap_abs(1e-9)
            .tol_gap_rel(1e-9)
            .tol_feas(1e-9)
            .build()
            .map_err(|e| Error::Solver(format!("settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&h, &self.linear, &a, &b, &cones, settings)
            .map_err(|e| Error::Solver(e.to_string()))?;
        solver.solve();
        match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => Ok(solver.solution.x.clone()),
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                Err(Error::Infeasible("subproblem is primal infeasible".into()))
            }
            other => Err(Error::Solver(format!("subproblem terminated with {other:?}"))),
        }
    }
}

fn unzip3(t: &[(usize, usize, f64)]) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut a = Vec::with_capacity(t.len());
    let mut b = Vec::with_capacity(t.len());
    let mut c = Vec::with_capacity(t.len());
    for &(x, y, z) in t {
        a.push(x);
        b.push(y);
        c.push(z);
    }
    (a, b, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_qp() {
        // min x² + y² - x - 4y  s.t. x + y = 1, x >= 0, y >= 0 → (0, 1)
        let mut qp = QuadraticProgram::new(2);
        qp.add_hessian(0, 0, 2.0);
        qp.add_hessian(1, 1, 2.0);
        qp.add_linear(0, -1.0);
        qp.add_linear(1, -4.0);
        qp.equal(vec![(0, 1.0), (1, 1.0)], 1.0);
        qp.less_equal(vec![(0, -1.0)], 0.0);
        qp.less_equal(vec![(1, -1.0)], 0.0);
        let x = qp.solve().unwrap();
        assert!((x[0] - 0.0).abs() < 1e-7 && (x[1] - 1.0).abs() < 1e-7, "{x:?}");
    }

    #[test]
    fn infeasible_lp() {
        let mut qp = QuadraticProgram::new(1);
        qp.add_linear(0, 1.0);
        qp.less_equal(vec![(0, 1.0)], -1.0);
        qp.less_equal(vec![(0, -1.0)], 0.0);
        assert!(matches!(qp.solve(), Err(Error::Infeasible(_))));
    }
}
