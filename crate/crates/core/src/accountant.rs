//! Rényi-DP accounting for repeated coordinate-wise use of a mechanism
//! table.
//!
//! For a vector of `d` coordinates the per-step loss at order `α` is the
//! largest total divergence `Σ_l D^α[i_l][i'_l]` over input pairs whose
//! index distance satisfies `Σ_l |i_l - i'_l|^p <= budget`. Three values
//! are offered: the exact integer optimum (small `d` only), the LP
//! relaxation and the greedy ratio bound, in increasing order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tables::{float_repr, MechanismTable};

/// Largest enumeration `(B_in²)^d` accepted by [`rdp_exact`].
pub const EXACT_SEARCH_LIMIT: f64 = 1e7;

/// Orders `1.25, 1.5, 2, 3, ..., 64`.
pub fn default_orders() -> Vec<f64> {
    let mut v = vec![1.25, 1.5];
    v.extend((2..=64).map(f64::from));
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RdpMethod {
    Exact,
    Lp,
    Greedy,
}

/// `D[i][k] = 1/(α-1) · ln Σ_j p_ij^α / p_kj^(α-1)`, computed in log space.
/// A row putting mass where the other row has none gives `+∞`.
pub fn renyi_matrix(probs: &[Vec<f64>], alpha: f64) -> Result<Vec<Vec<f64>>> {
    if !(alpha > 1.0) || alpha.is_nan() {
        return Err(Error::InvalidParameter(format!("Rényi order must exceed 1, got {alpha}")));
    }
    let n = probs.len();
    let logs: Vec<Vec<f64>> = probs.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            if i == k {
                continue;
            }
            let mut terms = Vec::with_capacity(probs[i].len());
            let mut infinite = false;
            for (j, &p) in probs[i].iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                if probs[k][j] <= 0.0 {
                    infinite = true;
                    break;
                }
                terms.push(alpha * logs[i][j] - (alpha - 1.0) * logs[k][j]);
            }
            out[i][k] = if infinite {
                f64::INFINITY
            } else {
                let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
                // Rényi divergence between distributions is non-negative.
                (lse / (alpha - 1.0)).max(0.0)
            };
        }
    }
    Ok(out)
}

/// `C[i][k] = |i - k|^p`.
pub fn cost_matrix(levels: usize, p: f64) -> Vec<Vec<f64>> {
    (0..levels)
        .map(|i| (0..levels).map(|k| (i.abs_diff(k) as f64).powf(p)).collect())
        .collect()
}

/// Index-unit budget `(B_in - 1)^p · Δ^p` for scaled sensitivity `Δ`.
pub fn budget(levels: usize, p: f64, sensitivity: f64) -> f64 {
    ((levels - 1) as f64 * sensitivity).powf(p)
}

/// A group of input pairs sharing one cost, represented by its best pair.
#[derive(Debug, Clone, Copy)]
struct Item {
    cost: f64,
    value: f64,
    pair: (usize, usize),
}

fn check_shapes(d: &[Vec<f64>], c: &[Vec<f64>]) -> Result<()> {
    let n = d.len();
    if n == 0 || c.len() != n || d.iter().chain(c).any(|r| r.len() != n) {
        return Err(Error::Dimension("divergence and cost matrices must be square and equal in size".into()));
    }
    if c.iter().flatten().any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidParameter("costs must be non-negative".into()));
    }
    Ok(())
}

fn items(d: &[Vec<f64>], c: &[Vec<f64>]) -> Vec<Item> {
    let mut all: Vec<Item> = Vec::new();
    for (i, (dr, cr)) in d.iter().zip(c).enumerate() {
        for (k, (&value, &cost)) in dr.iter().zip(cr).enumerate() {
            all.push(Item { cost, value, pair: (i, k) });
        }
    }
    all.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(b.value.total_cmp(&a.value)));
    all.dedup_by(|b, a| a.cost == b.cost);
    all
}

fn within(cost: f64, budget: f64) -> bool {
    cost <= budget + 1e-12 * budget.max(1.0)
}

/// Exact optimum by enumeration over multisets of cost classes.
pub fn rdp_exact(d_alpha: &[Vec<f64>], cost: &[Vec<f64>], budget: f64, dim: usize) -> Result<f64> {
    check_shapes(d_alpha, cost)?;
    if !(budget >= 0.0) {
        return Err(Error::InvalidParameter(format!("budget must be non-negative, got {budget}")));
    }
    let n = d_alpha.len() as f64;
    let required = (n * n).powf(dim as f64);
    if required > EXACT_SEARCH_LIMIT {
        return Err(Error::SearchTooLarge {
            required,
            limit: EXACT_SEARCH_LIMIT,
        });
    }
    let classes = items(d_alpha, cost);

    fn search(classes: &[Item], start: usize, left: usize, spent: f64, budget: f64) -> f64 {
        if left == 0 {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for k in start..classes.len() {
            let spend = spent + classes[k].cost;
            // Classes are sorted by cost, so later ones cannot fit either.
            if !within(spend, budget) {
                break;
            }
            best = best.max(classes[k].value + search(classes, k, left - 1, spend, budget));
        }
        best
    }
    Ok(search(&classes, 0, dim, 0.0, budget).max(0.0))
}

/// Optimum of the LP relaxation, with the support of an optimal
/// per-coordinate mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub value: f64,
    /// Input pairs `(i, i')` and their weights; at most two entries.
    pub support: Vec<((usize, usize), f64)>,
}

/// LP relaxation of the per-coordinate knapsack. All coordinate blocks are
/// identical, so an optimum with equal block distributions exists and the
/// problem reduces to the upper concave envelope of the (cost, divergence)
/// points evaluated at `budget / d`.
pub fn rdp_lp_solution(d_alpha: &[Vec<f64>], cost: &[Vec<f64>], budget: f64, dim: usize) -> Result<LpSolution> {
    check_shapes(d_alpha, cost)?;
    if !(budget >= 0.0) {
        return Err(Error::InvalidParameter(format!("budget must be non-negative, got {budget}")));
    }
    if dim == 0 {
        return Err(Error::InvalidParameter("dimension must be at least 1".into()));
    }
    let cap = budget / dim as f64;
    let classes = items(d_alpha, cost);
    if budget > 0.0 {
        if let Some(it) = classes.iter().find(|it| it.value == f64::INFINITY) {
            let w = if it.cost > cap { cap / it.cost } else { 1.0 };
            return Ok(LpSolution {
                value: f64::INFINITY,
                support: vec![(it.pair, w)],
            });
        }
    }

    // Upper hull, scanning left to right.
    let mut hull: Vec<Item> = Vec::new();
    for &it in classes.iter().filter(|it| it.value.is_finite()) {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (b.cost - a.cost) * (it.value - a.value) - (b.value - a.value) * (it.cost - a.cost);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(it);
    }

    let mut best = LpSolution {
        value: f64::NEG_INFINITY,
        support: Vec::new(),
    };
    for (k, v) in hull.iter().enumerate() {
        if within(v.cost, cap) {
            if v.value > best.value {
                best = LpSolution {
                    value: v.value,
                    support: vec![(v.pair, 1.0)],
                };
            }
        } else if k > 0 {
            let u = hull[k - 1];
            let t = (cap - u.cost) / (v.cost - u.cost);
            let value = u.value + t * (v.value - u.value);
            if value > best.value {
                best = LpSolution {
                    value,
                    support: vec![(u.pair, 1.0 - t), (v.pair, t)],
                };
            }
            break;
        } else {
            break;
        }
    }
    if best.support.is_empty() {
        return Ok(LpSolution {
            value: 0.0,
            support: Vec::new(),
        });
    }
    best.value = (best.value * dim as f64).max(0.0);
    Ok(best)
}

pub fn rdp_lp_bound(d_alpha: &[Vec<f64>], cost: &[Vec<f64>], budget: f64, dim: usize) -> Result<f64> {
    rdp_lp_solution(d_alpha, cost, budget, dim).map(|s| s.value)
}

/// Greedy bound: spend the whole budget on the pair with the best
/// divergence-to-cost ratio. Independent of `d`.
pub fn rdp_greedy_bound(d_alpha: &[Vec<f64>], cost: &[Vec<f64>], budget: f64) -> Result<f64> {
    check_shapes(d_alpha, cost)?;
    if !(budget >= 0.0) {
        return Err(Error::InvalidParameter(format!("budget must be non-negative, got {budget}")));
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for (i, (dr, cr)) in d_alpha.iter().zip(cost).enumerate() {
        for (k, (&dv, &cv)) in dr.iter().zip(cr).enumerate() {
            if i == k || cv <= 0.0 {
                continue;
            }
            let ratio = dv / cv;
            if best.is_none_or(|(r, _, _)| ratio > r) {
                best = Some((ratio, dv, cv));
            }
        }
    }
    let (ratio, dv, cv) =
        best.ok_or_else(|| Error::InvalidParameter("no off-diagonal pair has positive cost".into()))?;
    if ratio == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    Ok(budget / cv * dv)
}

/// Result of composing `T` steps and converting to `(ε, δ)`-DP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conversion {
    pub epsilon: f64,
    pub order: f64,
}

/// `ε = min_α [T·ε(α) + ln(1/δ)/(α-1)]`.
pub fn compose_and_convert(orders: &[f64], per_step: &[f64], steps: u64, delta: f64) -> Result<Conversion> {
    if orders.is_empty() {
        return Err(Error::InvalidParameter("order grid is empty".into()));
    }
    if orders.len() != per_step.len() {
        return Err(Error::Dimension("one per-step value is needed per order".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0, 1), got {delta}")));
    }
    if steps == 0 {
        return Err(Error::InvalidParameter("at least one step is required".into()));
    }
    let log_inv = (1.0 / delta).ln();
    orders
        .iter()
        .zip(per_step)
        .map(|(&a, &e)| Conversion {
            epsilon: steps as f64 * e + log_inv / (a - 1.0),
            order: a,
        })
        .min_by(|x, y| x.epsilon.total_cmp(&y.epsilon))
        .ok_or_else(|| Error::InvalidParameter("order grid is empty".into()))
}

/// Per-order divergence matrices and per-step bounds for one table.
#[derive(Debug, Clone)]
pub struct RenyiProfile {
    pub orders: Vec<f64>,
    pub divergences: Vec<Vec<Vec<f64>>>,
    pub cost: Vec<Vec<f64>>,
    pub budget: f64,
    pub dim: usize,
    pub method: RdpMethod,
    pub epsilons: Vec<f64>,
}

impl RenyiProfile {
    /// `sensitivity` is the `L_p` distance between neighbouring inputs after
    /// scaling into `[0, 1]^d`.
    pub fn new(
        table: &MechanismTable,
        metric_p: f64,
        sensitivity: f64,
        dim: usize,
        orders: &[f64],
        method: RdpMethod,
    ) -> Result<Self> {
        if !(metric_p >= 1.0) {
            return Err(Error::InvalidParameter(format!("metric order must be >= 1, got {metric_p}")));
        }
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(Error::InvalidParameter(format!("sensitivity must be positive, got {sensitivity}")));
        }
        if orders.is_empty() {
            return Err(Error::InvalidParameter("order grid is empty".into()));
        }
        let levels = table.input_levels();
        let cost = cost_matrix(levels, metric_p);
        let budget = budget(levels, metric_p, sensitivity);
        let per_order: Vec<(Vec<Vec<f64>>, f64)> = orders
            .par_iter()
            .map(|&a| {
                let d = renyi_matrix(table.probs(), a)?;
                let e = match method {
                    RdpMethod::Exact => rdp_exact(&d, &cost, budget, dim)?,
                    RdpMethod::Lp => rdp_lp_bound(&d, &cost, budget, dim)?,
                    RdpMethod::Greedy => rdp_greedy_bound(&d, &cost, budget)?,
                };
                Ok((d, e))
            })
            .collect::<Result<_>>()?;
        let (divergences, epsilons) = per_order.into_iter().unzip();
        Ok(Self {
            orders: orders.to_vec(),
            divergences,
            cost,
            budget,
            dim,
            method,
            epsilons,
        })
    }

    pub fn compose(&self, steps: u64, delta: f64) -> Result<AccountLedger> {
        let conv = compose_and_convert(&self.orders, &self.epsilons, steps, delta)?;
        Ok(AccountLedger {
            steps,
            delta,
            method: self.method,
            dim: self.dim,
            budget: self.budget,
            orders: self
                .orders
                .iter()
                .zip(&self.epsilons)
                .map(|(&alpha, &e)| OrderEntry {
                    alpha,
                    per_step: e,
                    composed: steps as f64 * e,
                })
                .collect(),
            epsilon: conv.epsilon,
            best_order: conv.order,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderEntry {
    pub alpha: f64,
    #[serde(with = "float_repr")]
    pub per_step: f64,
    #[serde(with = "float_repr")]
    pub composed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccountLedger {
    pub steps: u64,
    pub delta: f64,
    pub method: RdpMethod,
    pub dim: usize,
    pub budget: f64,
    pub orders: Vec<OrderEntry>,
    #[serde(with = "float_repr")]
    pub epsilon: f64,
    pub best_order: f64,
}
