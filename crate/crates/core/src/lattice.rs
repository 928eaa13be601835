//! Dithered quantization onto uniform grids.
//!
//! A value between two neighbouring grid points is rounded up with probability
//! proportional to its distance from the lower point, which makes the rounding
//! unbiased with per-point variance at most `spacing² / 4`. Vectors are
//! dithered coordinate-wise; [`norm_preserving_dither`] additionally shrinks the
//! input and rejects draws so that the quantized vector stays inside a norm ball.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs this close to a grid point are treated as lying on it.
pub const SNAP_TOLERANCE: f64 = 1e-12;

/// `levels` equally spaced points covering `[lo, hi]`, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DitherGrid {
    levels: usize,
    lo: f64,
    hi: f64,
    spacing: f64,
}

/// Exact two-point law of dithering a single value.
///
/// The outcome is grid index `lower` with probability `1 - upper_prob` and
/// `lower + 1` with probability `upper_prob`. On-grid inputs have
/// `upper_prob == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DitherLaw {
    pub lower: usize,
    pub upper_prob: f64,
}

impl DitherGrid {
    pub fn new(levels: usize, lo: f64, hi: f64) -> Result<Self> {
        if levels < 2 {
            return Err(Error::InvalidParameter(format!(
                "a dither grid needs at least 2 levels, got {levels}"
            )));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParameter(format!(
                "grid range [{lo}, {hi}] is empty or not finite"
            )));
        }
        Ok(Self {
            levels,
            lo,
            hi,
            spacing: (hi - lo) / (levels - 1) as f64,
        })
    }

    /// Grid on `[0, 1]`.
    pub fn unit(levels: usize) -> Result<Self> {
        Self::new(levels, 0.0, 1.0)
    }

    /// Grid on `[-half_width, half_width]`.
    pub fn symmetric(levels: usize, half_width: f64) -> Result<Self> {
        Self::new(levels, -half_width, half_width)
    }

    /// Grid with `2^bits` levels on `[0, 1]`.
    pub fn with_bits(bits: u32) -> Result<Self> {
        Self::unit(levels_for_bits(bits)?)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    /// The `k`-th grid point. The last point is `hi` exactly.
    pub fn point(&self, k: usize) -> f64 {
        debug_assert!(k < self.levels);
        if k + 1 == self.levels {
            self.hi
        } else {
            self.lo + k as f64 * self.spacing
        }
    }

    /// Map a value of this grid's range affinely onto `[0, 1]`.
    pub fn to_unit(&self, x: f64) -> f64 {
        (x - self.lo) / (self.hi - self.lo)
    }

    /// Inverse of [`DitherGrid::to_unit`].
    pub fn from_unit(&self, u: f64) -> f64 {
        self.lo + u * (self.hi - self.lo)
    }

    fn snap_tolerance(&self) -> f64 {
        SNAP_TOLERANCE * (self.hi - self.lo).max(1.0)
    }

    /// Exact dithering law of `x`.
    pub fn law(&self, x: f64) -> Result<DitherLaw> {
        let tol = self.snap_tolerance();
        if !(x >= self.lo - tol && x <= self.hi + tol) {
            return Err(Error::OutOfRange {
                value: x,
                lo: self.lo,
                hi: self.hi,
            });
        }
        let t = ((x - self.lo) / self.spacing).max(0.0);
        let k = (t.floor() as usize).min(self.levels - 2);
        if (x - self.point(k)).abs() <= tol {
            return Ok(DitherLaw {
                lower: k,
                upper_prob: 0.0,
            });
        }
        if (x - self.point(k + 1)).abs() <= tol {
            return Ok(DitherLaw {
                lower: k + 1,
                upper_prob: 0.0,
            });
        }
        let upper_prob = (t - k as f64).clamp(0.0, 1.0);
        Ok(DitherLaw {
            lower: k,
            upper_prob,
        })
    }
}

pub(crate) fn levels_for_bits(bits: u32) -> Result<usize> {
    if bits == 0 || bits > 24 {
        return Err(Error::InvalidParameter(format!(
            "bit width must be in 1..=24, got {bits}"
        )));
    }
    Ok(1usize << bits)
}

impl DitherLaw {
    /// `(index, probability)` pairs with positive probability.
    pub fn outcomes(&self) -> impl Iterator<Item = (usize, f64)> {
        let lower = (self.lower, 1.0 - self.upper_prob);
        let upper = (self.lower + 1, self.upper_prob);
        std::iter::once(lower)
            .chain(std::iter::once(upper))
            .filter(|&(_, p)| p > 0.0)
    }

    pub fn mean(&self, grid: &DitherGrid) -> f64 {
        self.outcomes().map(|(k, p)| p * grid.point(k)).sum()
    }

    pub fn variance(&self, grid: &DitherGrid) -> f64 {
        let m = self.mean(grid);
        self.outcomes()
            .map(|(k, p)| p * (grid.point(k) - m).powi(2))
            .sum()
    }

    pub fn is_deterministic(&self) -> bool {
        self.upper_prob == 0.0
    }

    /// Draw a grid index. Deterministic laws consume no randomness.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.is_deterministic() {
            return self.lower;
        }
        if rng.random::<f64>() < self.upper_prob {
            self.lower + 1
        } else {
            self.lower
        }
    }
}

/// Dither one value; returns the grid point and its index.
pub fn dither_scalar<R: Rng + ?Sized>(x: f64, grid: &DitherGrid, rng: &mut R) -> Result<(f64, usize)> {
    let k = grid.law(x)?.sample(rng);
    Ok((grid.point(k), k))
}

/// A dithered vector: grid values and the matching indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dithered {
    pub values: Vec<f64>,
    pub indices: Vec<usize>,
}

/// Coordinate-wise dithering with independent randomness per coordinate.
pub fn dither_vector<R: Rng + ?Sized>(v: &[f64], grid: &DitherGrid, rng: &mut R) -> Result<Dithered> {
    let laws = vector_laws(v, grid)?;
    Ok(sample_laws(&laws, grid, rng))
}

fn vector_laws(v: &[f64], grid: &DitherGrid) -> Result<Vec<DitherLaw>> {
    v.iter()
        .enumerate()
        .map(|(index, &x)| {
            grid.law(x).map_err(|_| Error::CoordinateOutOfRange {
                index,
                value: x,
                lo: grid.lo(),
                hi: grid.hi(),
            })
        })
        .collect()
}

fn sample_laws<R: Rng + ?Sized>(laws: &[DitherLaw], grid: &DitherGrid, rng: &mut R) -> Dithered {
    let indices: Vec<usize> = laws.iter().map(|l| l.sample(rng)).collect();
    let values = indices.iter().map(|&k| grid.point(k)).collect();
    Dithered { values, indices }
}

/// `‖v‖_p` for `p >= 1`; `p = ∞` gives the max norm.
pub fn lp_norm(v: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return v.iter().fold(0.0, |m, x| m.max(x.abs()));
    }
    if p == 1.0 {
        return v.iter().map(|x| x.abs()).sum();
    }
    if p == 2.0 {
        return v.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
}

/// High-probability upper bound on `‖Dither(v)‖₂²` for a vector of dimension
/// `dim` with `‖v‖₂ = norm`, grid spacing `spacing` and failure probability
/// `delta`:
///
/// `norm² + √2·norm·Δ·ln(4/δ) + dim·Δ²/4 + √(2·dim)·Δ·ln(4/δ)`.
///
/// The expression is evaluated for any `δ` in `(0, 4]`; it is a probability
/// statement only for `δ < 1`.
pub fn norm_growth_bound(norm: f64, dim: usize, spacing: f64, delta: f64) -> Result<f64> {
    if !(norm >= 0.0 && norm.is_finite()) || !(spacing > 0.0) || dim == 0 {
        return Err(Error::InvalidParameter(format!(
            "norm growth bound needs norm >= 0, spacing > 0, dim >= 1 (got {norm}, {spacing}, {dim})"
        )));
    }
    if !(delta > 0.0 && delta <= 4.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0, 4], got {delta}")));
    }
    let log_term = (4.0 / delta).ln();
    let d = dim as f64;
    Ok(norm * norm
        + std::f64::consts::SQRT_2 * norm * spacing * log_term
        + d * spacing * spacing / 4.0
        + (2.0 * d).sqrt() * spacing * log_term)
}

/// Settings for [`norm_preserving_dither`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormPreservingConfig {
    /// Norm bound `R` the quantized vector must respect.
    pub bound: f64,
    /// Failure probability used when choosing the shrink factor.
    pub delta: f64,
    pub max_attempts: usize,
    /// Resolution of the binary search over the shrink factor.
    pub tolerance: f64,
    /// Norm order; 1 and 2 are supported.
    pub norm_order: f64,
}

impl NormPreservingConfig {
    pub fn new(bound: f64, delta: f64) -> Self {
        Self {
            bound,
            delta,
            max_attempts: 1000,
            tolerance: 1e-6,
            norm_order: 2.0,
        }
    }

    pub fn with_norm_order(mut self, p: f64) -> Self {
        self.norm_order = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(Error::InvalidParameter(format!("norm bound must be positive, got {}", self.bound)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidParameter("max_attempts must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter("binary search tolerance must be positive".into()));
        }
        if self.norm_order != 1.0 && self.norm_order != 2.0 {
            return Err(Error::InvalidParameter(format!(
                "norm-preserving dithering supports L1 and L2, got p = {}",
                self.norm_order
            )));
        }
        Ok(())
    }
}

/// Result of [`norm_preserving_dither`]. The output estimates `gamma · v`,
/// not `v`, and rejection adds a further small bias.
#[derive(Debug, Clone, PartialEq)]
pub struct NormPreserving {
    pub dithered: Dithered,
    pub gamma: f64,
    pub attempts: usize,
}

impl NormPreserving {
    pub fn acceptance_rate(&self) -> f64 {
        1.0 / self.attempts as f64
    }
}

/// Dither `gamma · v` so the result stays inside the norm ball of radius
/// `cfg.bound`.
///
/// `gamma` is the largest value in `[0, 1]` (to `cfg.tolerance`) for which an
/// analytic bound certifies `‖Dither(gamma · v)‖ <= R` with probability at
/// least `1 - delta`. Draws outside the ball are rejected and redrawn.
pub fn norm_preserving_dither<R: Rng + ?Sized>(
    v: &[f64],
    grid: &DitherGrid,
    cfg: &NormPreservingConfig,
    rng: &mut R,
) -> Result<NormPreserving> {
    cfg.validate()?;
    let p = cfg.norm_order;
    let norm = lp_norm(v, p);
    let slack = cfg.bound * 1e-12;
    if norm > cfg.bound + slack {
        return Err(Error::NormViolation {
            norm,
            bound: cfg.bound,
        });
    }
    vector_laws(v, grid)?;

    let feasible = |gamma: f64| -> Result<bool> {
        let scaled: Vec<f64> = v.iter().map(|x| gamma * x).collect();
        let laws = vector_laws(&scaled, grid)?;
        if laws.iter().all(DitherLaw::is_deterministic) {
            let exact: Vec<f64> = laws.iter().map(|l| grid.point(l.lower)).collect();
            return Ok(lp_norm(&exact, p) <= cfg.bound + slack);
        }
        let bound = if p == 2.0 {
            norm_growth_bound(gamma * norm, v.len(), grid.spacing(), cfg.delta)?.sqrt()
        } else {
            l1_growth_bound(&laws, grid, cfg.delta)
        };
        Ok(bound <= cfg.bound)
    };

    let gamma = if feasible(1.0)? {
        1.0
    } else {
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        while hi - lo > cfg.tolerance {
            let mid = 0.5 * (lo + hi);
            if feasible(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };

    sample_within(v, gamma, grid, cfg, rng)
}

/// Like [`norm_preserving_dither`] with a caller-chosen shrink factor, for
/// instance the data-independent one from [`worst_case_gamma`].
pub fn dither_with_gamma<R: Rng + ?Sized>(
    v: &[f64],
    gamma: f64,
    grid: &DitherGrid,
    cfg: &NormPreservingConfig,
    rng: &mut R,
) -> Result<NormPreserving> {
    cfg.validate()?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidParameter(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    let norm = lp_norm(v, cfg.norm_order);
    if norm > cfg.bound * (1.0 + 1e-12) {
        return Err(Error::NormViolation {
            norm,
            bound: cfg.bound,
        });
    }
    sample_within(v, gamma, grid, cfg, rng)
}

fn sample_within<R: Rng + ?Sized>(
    v: &[f64],
    gamma: f64,
    grid: &DitherGrid,
    cfg: &NormPreservingConfig,
    rng: &mut R,
) -> Result<NormPreserving> {
    let p = cfg.norm_order;
    let slack = cfg.bound * 1e-12;
    let scaled: Vec<f64> = v.iter().map(|x| gamma * x).collect();
    let laws = vector_laws(&scaled, grid)?;
    let mut last_norm = f64::NAN;
    for attempt in 1..=cfg.max_attempts {
        let draw = sample_laws(&laws, grid, rng);
        last_norm = lp_norm(&draw.values, p);
        if last_norm <= cfg.bound + slack {
            return Ok(NormPreserving {
                dithered: draw,
                gamma,
                attempts: attempt,
            });
        }
    }
    Err(Error::SamplingFailure {
        attempts: cfg.max_attempts,
        last_norm,
    })
}

/// Shrink factor that satisfies the growth bound for every vector in the
/// ball of radius `cfg.bound`, so it can be published and undone by the
/// server.
///
/// For L1 a coordinate's expected absolute value after dithering is `|u|`
/// when zero is a grid point and at most `|u| + Δ/2` otherwise, which
/// bounds `E‖Dither(γv)‖₁` by `γR` plus `d` such offsets.
pub fn worst_case_gamma(dim: usize, grid: &DitherGrid, cfg: &NormPreservingConfig) -> Result<f64> {
    cfg.validate()?;
    if dim == 0 {
        return Err(Error::InvalidParameter("dimension must be at least 1".into()));
    }
    let r = cfg.bound;
    let h = grid.spacing();
    let d = dim as f64;
    let k0 = -grid.lo() / h;
    let zero_on_grid = grid.lo() <= 0.0 && grid.hi() >= 0.0 && (k0 - k0.round()).abs() < 1e-9;
    let offset = if zero_on_grid { 0.0 } else { h / 2.0 };
    let bound = |gamma: f64| -> Result<f64> {
        if cfg.norm_order == 2.0 {
            Ok(norm_growth_bound(gamma * r, dim, h, cfg.delta)?.sqrt())
        } else {
            Ok(gamma * r + d * offset + h * (d * (1.0 / cfg.delta).ln() / 2.0).sqrt())
        }
    };
    if bound(1.0)? <= r {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > cfg.tolerance {
        let mid = 0.5 * (lo + hi);
        if bound(mid)? <= r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo == 0.0 {
        return Err(Error::InvalidParameter(format!(
            "grid spacing {h} is too coarse for dimension {dim} inside radius {r}"
        )));
    }
    Ok(lo)
}

/// `E‖Dither(v)‖₁ + Δ·sqrt(d·ln(1/δ)/2)`: exact mean plus a Hoeffding
/// deviation, each coordinate's absolute value ranging over an interval of
/// width at most Δ.
fn l1_growth_bound(laws: &[DitherLaw], grid: &DitherGrid, delta: f64) -> f64 {
    let mean: f64 = laws
        .iter()
        .map(|l| l.outcomes().map(|(k, q)| q * grid.point(k).abs()).sum::<f64>())
        .sum();
    let random = laws.iter().filter(|l| !l.is_deterministic()).count() as f64;
    mean + grid.spacing() * (random * (1.0 / delta).ln() / 2.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_relative_eq;

    #[test]
    fn grid_points_hit_endpoints_exactly() {
        let g = DitherGrid::symmetric(32, 1.0).unwrap();
        assert_eq!(g.point(0), -1.0);
        assert_eq!(g.point(31), 1.0);
        assert_relative_eq!(g.spacing(), 2.0 / 31.0);
        assert!(DitherGrid::unit(1).is_err());
        assert!(DitherGrid::new(4, 1.0, 1.0).is_err());
    }

    #[test]
    fn worst_case_gamma_covers_every_vector() {
        let grid = DitherGrid::symmetric(512, 1.0).unwrap();
        let cfg = NormPreservingConfig::new(1.0, 0.01).with_norm_order(1.0);
        let g = worst_case_gamma(128, &grid, &cfg).unwrap();
        assert!(g > 0.3 && g < 1.0, "{g}");
        let mut rng = substream(11, 0);
        for k in 0..20 {
            let mut v: Vec<f64> = (0..128).map(|_| rng.random::<f64>() - 0.5).collect();
            let n = lp_norm(&v, 1.0);
            v.iter_mut().for_each(|x| *x /= n * (1.0 + k as f64 / 10.0));
            let own = norm_preserving_dither(&v, &grid, &cfg, &mut rng).unwrap();
            assert!(own.gamma >= g - 1e-6);
            let fixed = dither_with_gamma(&v, g, &grid, &cfg, &mut rng).unwrap();
            assert!(lp_norm(&fixed.dithered.values, 1.0) <= 1.0 + 1e-12);
        }
        let coarse = DitherGrid::symmetric(4, 1.0).unwrap();
        assert!(worst_case_gamma(128, &coarse, &cfg).is_err());
        let l2 = NormPreservingConfig::new(1.0, 0.01);
        let g2 = worst_case_gamma(64, &grid, &l2).unwrap();
        let b = norm_growth_bound(g2, 64, grid.spacing(), 0.01).unwrap().sqrt();
        assert!(b <= 1.0 && b > 0.999);
        assert!(dither_with_gamma(&[0.1], 0.0, &grid, &cfg, &mut rng).is_err());
    }

    #[test]
    fn on_grid_input_is_deterministic() {
        let g = DitherGrid::unit(8).unwrap();
        let mut rng = substream(1, 0);
        for k in 0..8 {
            let x = k as f64 / 7.0;
            for _ in 0..20 {
                assert_eq!(dither_scalar(x, &g, &mut rng).unwrap(), (g.point(k), k));
            }
        }
    }

    #[test]
    fn quarter_on_two_point_grid() {
        let g = DitherGrid::unit(2).unwrap();
        let law = g.law(0.25).unwrap();
        assert_eq!(law.lower, 0);
        assert_relative_eq!(law.upper_prob, 0.25);
        let half = g.law(0.5).unwrap();
        assert_relative_eq!(half.upper_prob, 0.5);
    }

    #[test]
    fn snapping_absorbs_rounding_noise() {
        let g = DitherGrid::unit(8).unwrap();
        let law = g.law(3.0 / 7.0 + 1e-14).unwrap();
        assert!(law.is_deterministic());
        assert_eq!(law.lower, 3);
        let law = g.law(1.0 + 1e-13).unwrap();
        assert_eq!((law.lower, law.upper_prob), (7, 0.0));
    }

    #[test]
    fn out_of_range_is_rejected() {
        let g = DitherGrid::unit(4).unwrap();
        let mut rng = substream(0, 0);
        assert!(matches!(dither_scalar(1.1, &g, &mut rng), Err(Error::OutOfRange { .. })));
        assert!(matches!(dither_scalar(f64::NAN, &g, &mut rng), Err(Error::OutOfRange { .. })));
        match dither_vector(&[0.5, -0.2, 0.1], &g, &mut rng) {
            Err(Error::CoordinateOutOfRange { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn two_coordinate_joint_law_is_product() {
        // Enumerate the four outcomes of dithering (0.25, 0.75) on {0, 1}.
        let g = DitherGrid::unit(2).unwrap();
        let expected = [
            ([0, 0], 0.75 * 0.25),
            ([0, 1], 0.75 * 0.75),
            ([1, 0], 0.25 * 0.25),
            ([1, 1], 0.25 * 0.75),
        ];
        let mut rng = substream(11, 0);
        let n = 200_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let d = dither_vector(&[0.25, 0.75], &g, &mut rng).unwrap();
            counts[d.indices[0] * 2 + d.indices[1]] += 1;
        }
        for (slot, (idx, p)) in expected.iter().enumerate() {
            assert_eq!(slot, idx[0] * 2 + idx[1]);
            let freq = counts[slot] as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() < 4.0 * se, "outcome {idx:?}: {freq} vs {p}");
        }
    }

    #[test]
    fn growth_bound_closed_form() {
        // ln(4/δ) = 1 at δ = 4/e: 1 + √2 + 1 + 2√2.
        let b = norm_growth_bound(1.0, 4, 1.0, 4.0 / std::f64::consts::E).unwrap();
        assert_relative_eq!(b, 2.0 + 3.0 * std::f64::consts::SQRT_2, epsilon = 1e-12);
        let tiny = norm_growth_bound(0.7, 16, 1e-12, 0.1).unwrap();
        assert_relative_eq!(tiny, 0.49, epsilon = 1e-9);
        assert!(norm_growth_bound(1.0, 4, 0.1, 4.5).is_err());
    }

    #[test]
    fn zero_vector_on_grid_containing_zero() {
        let g = DitherGrid::symmetric(33, 1.0).unwrap();
        let cfg = NormPreservingConfig::new(1.0, 0.01);
        let mut rng = substream(2, 0);
        let out = norm_preserving_dither(&[0.0; 16], &g, &cfg, &mut rng).unwrap();
        assert_eq!(out.gamma, 1.0);
        assert_eq!(out.attempts, 1);
        assert!(out.dithered.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn on_grid_vector_accepted_unchanged() {
        let g = DitherGrid::symmetric(9, 1.0).unwrap();
        let v = [g.point(6), g.point(3), g.point(4)];
        let cfg = NormPreservingConfig::new(1.0, 0.01);
        let mut rng = substream(3, 0);
        let out = norm_preserving_dither(&v, &g, &cfg, &mut rng).unwrap();
        assert_eq!(out.gamma, 1.0);
        assert_eq!(out.attempts, 1);
        assert_eq!(out.dithered.values, v.to_vec());
    }

    #[test]
    fn norm_violation_is_reported() {
        let g = DitherGrid::symmetric(16, 1.0).unwrap();
        let cfg = NormPreservingConfig::new(1.0, 0.01);
        let mut rng = substream(3, 0);
        let err = norm_preserving_dither(&[0.9, 0.9], &g, &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NormViolation { .. }));
    }

    #[test]
    fn exhausted_rejection_carries_last_norm() {
        // On an even grid zero is not a grid point, so every coordinate of the
        // zero vector dithers to ±Δ/2 and the L1 norm is always d·Δ/2 > R.
        let g = DitherGrid::symmetric(4, 1.0).unwrap();
        let mut cfg = NormPreservingConfig::new(0.5, 0.1).with_norm_order(1.0);
        cfg.max_attempts = 5;
        let mut rng = substream(4, 0);
        match norm_preserving_dither(&[0.0; 8], &g, &cfg, &mut rng) {
            Err(Error::SamplingFailure { attempts, last_norm }) => {
                assert_eq!(attempts, 5);
                assert_relative_eq!(last_norm, 8.0 / 3.0, epsilon = 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn l1_mode_respects_bound() {
        let g = DitherGrid::symmetric(512, 1.0).unwrap();
        let cfg = NormPreservingConfig::new(1.0, 0.01).with_norm_order(1.0);
        let mut rng = substream(5, 0);
        let v: Vec<f64> = (0..128).map(|i| (i % 7) as f64).collect();
        let s: f64 = v.iter().sum();
        let v: Vec<f64> = v.iter().map(|x| x / s).collect();
        for _ in 0..200 {
            let out = norm_preserving_dither(&v, &g, &cfg, &mut rng).unwrap();
            assert!(lp_norm(&out.dithered.values, 1.0) <= 1.0 + 1e-12);
            assert!(out.gamma > 0.8 && out.gamma < 1.0);
        }
    }

    #[test]
    fn lp_norms() {
        let v = [3.0, -4.0];
        assert_eq!(lp_norm(&v, 1.0), 7.0);
        assert_eq!(lp_norm(&v, 2.0), 5.0);
        assert_eq!(lp_norm(&v, f64::INFINITY), 4.0);
        assert_relative_eq!(lp_norm(&v, 3.0), (27.0f64 + 64.0).powf(1.0 / 3.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn law_is_unbiased_with_bounded_variance(levels in 2usize..64, u in 0.0f64..=1.0) {
                let g = DitherGrid::unit(levels).unwrap();
                let law = g.law(u).unwrap();
                prop_assert!((law.mean(&g) - u).abs() <= 1e-12);
                prop_assert!(law.variance(&g) <= g.spacing().powi(2) / 4.0 + 1e-15);
                // support is the bracketing pair
                for (k, _) in law.outcomes() {
                    prop_assert!((g.point(k) - u).abs() <= g.spacing() + 1e-12);
                }
            }

            #[test]
            fn affine_maps_invert(lo in -5.0f64..0.0, width in 0.1f64..10.0, u in 0.0f64..=1.0) {
                let g = DitherGrid::new(16, lo, lo + width).unwrap();
                prop_assert!((g.to_unit(g.from_unit(u)) - u).abs() <= 1e-12);
            }
        }
    }
}
