//! Mechanism tables: the sampling matrix `P`, the output alphabet `A` and the
//! privacy guarantee they are meant to satisfy, plus feasibility checking and
//! the versioned JSON file format shared by clients and server.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::lattice::levels_for_bits;

/// Probabilities below this are stored as exact zeros.
pub const FLUSH_THRESHOLD: f64 = 1e-12;

/// Current table file schema version.
pub const SCHEMA_VERSION: u32 = 1;

/// The privacy notion a table is designed for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PrivacySpec {
    /// ε-local DP: every pair of inputs is ε-indistinguishable.
    PureLdp { epsilon: f64 },
    /// ε-metric DP with respect to `d(y, y') = |y - y'|^p` on `[0, 1]`.
    Metric { epsilon: f64, p: f64 },
}

impl PrivacySpec {
    pub fn pure(epsilon: f64) -> Self {
        PrivacySpec::PureLdp { epsilon }
    }

    pub fn metric(epsilon: f64, p: f64) -> Self {
        PrivacySpec::Metric { epsilon, p }
    }

    pub fn epsilon(&self) -> f64 {
        match *self {
            PrivacySpec::PureLdp { epsilon } | PrivacySpec::Metric { epsilon, .. } => epsilon,
        }
    }

    pub fn metric_order(&self) -> Option<f64> {
        match *self {
            PrivacySpec::PureLdp { .. } => None,
            PrivacySpec::Metric { p, .. } => Some(p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let eps = self.epsilon();
        if !(eps > 0.0) || eps.is_nan() {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {eps}")));
        }
        if let Some(p) = self.metric_order() {
            if !(p >= 1.0 && p.is_finite()) {
                return Err(Error::InvalidParameter(format!("metric order must be >= 1, got {p}")));
            }
        }
        Ok(())
    }

    /// Distance between two points of `[0, 1]`; 1 for distinct points under
    /// pure LDP.
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        match *self {
            PrivacySpec::PureLdp { .. } => {
                if x == y {
                    0.0
                } else {
                    1.0
                }
            }
            PrivacySpec::Metric { p, .. } => (x - y).abs().powf(p),
        }
    }

    /// Allowed log-likelihood ratio between inputs `i` and `k` of a grid with
    /// `levels` points.
    pub fn log_ratio_bound(&self, i: usize, k: usize, levels: usize) -> f64 {
        let scale = (levels - 1) as f64;
        self.epsilon() * self.distance(i as f64 / scale, k as f64 / scale)
    }
}

/// Acceptance tolerances declared alongside a table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Slack on every log-likelihood ratio constraint.
    pub dp: f64,
    pub row_sum: f64,
    pub bias: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            dp: 1e-6,
            row_sum: 1e-9,
            bias: 1e-4,
        }
    }
}

/// Worst-case constraint residuals of a table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub max_row_sum_deviation: f64,
    pub min_entry: f64,
    /// Largest excess of a log-likelihood ratio over its allowance; `+inf`
    /// when a column mixes zero and positive entries.
    #[serde(with = "float_repr")]
    pub max_dp_violation: f64,
    pub max_bias_residual: f64,
    /// Smallest ε the table satisfies for its privacy kind.
    #[serde(with = "float_repr")]
    pub realized_epsilon: f64,
    pub valid: bool,
}

/// A sampling matrix with its output alphabet.
///
/// Row `i` of `P` is the output law for the quantized input `i / (B_in - 1)`;
/// a transmitted index `j` is decoded as `A[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanismTable {
    b_in: u32,
    b_out: u32,
    probs: Vec<Vec<f64>>,
    alphabet: Vec<f64>,
    privacy: PrivacySpec,
    tolerances: Tolerances,
    provenance: Map<String, Value>,
}

impl MechanismTable {
    /// Build a table, checking shapes and finiteness. Entries below
    /// [`FLUSH_THRESHOLD`] are flushed to zero.
    pub fn new(
        b_in: u32,
        b_out: u32,
        probs: Vec<Vec<f64>>,
        alphabet: Vec<f64>,
        privacy: PrivacySpec,
    ) -> Result<Self> {
        let rows = levels_for_bits(b_in)?;
        let cols = levels_for_bits(b_out)?;
        privacy.validate()?;
        check_shape(&probs, &alphabet, rows, cols)?;
        for (i, row) in probs.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                if !p.is_finite() {
                    return Err(Error::Schema {
                        path: format!("P[{i}][{j}]"),
                        message: format!("non-finite probability {p}"),
                    });
                }
            }
        }
        if let Some((j, a)) = alphabet.iter().enumerate().find(|(_, a)| !a.is_finite()) {
            return Err(Error::Schema {
                path: format!("A[{j}]"),
                message: format!("non-finite alphabet value {a}"),
            });
        }
        let probs = probs
            .into_iter()
            .map(|row| row.into_iter().map(|p| if p.abs() < FLUSH_THRESHOLD { 0.0 } else { p }).collect())
            .collect();
        Ok(Self {
            b_in,
            b_out,
            probs,
            alphabet,
            privacy,
            tolerances: Tolerances::default(),
            provenance: Map::new(),
        })
    }

    pub fn with_tolerances(mut self, tolerances: Tolerances) -> Self {
        self.tolerances = tolerances;
        self
    }

    pub fn with_provenance(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.provenance.insert(key.to_string(), value.into());
        self
    }

    pub fn b_in(&self) -> u32 {
        self.b_in
    }

    pub fn b_out(&self) -> u32 {
        self.b_out
    }

    pub fn input_levels(&self) -> usize {
        self.probs.len()
    }

    pub fn output_levels(&self) -> usize {
        self.alphabet.len()
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i]
    }

    pub fn alphabet(&self) -> &[f64] {
        &self.alphabet
    }

    pub fn privacy(&self) -> &PrivacySpec {
        &self.privacy
    }

    pub fn tolerances(&self) -> &Tolerances {
        &self.tolerances
    }

    pub fn provenance(&self) -> &Map<String, Value> {
        &self.provenance
    }

    /// The quantized input value of row `i`.
    pub fn input_point(&self, i: usize) -> f64 {
        input_point(i, self.input_levels())
    }

    /// `Σ_i Σ_j p_ij (x_i - a_j)²`: the output variance summed over the
    /// quantized inputs.
    pub fn variance_objective(&self) -> f64 {
        variance_objective(&self.probs, &self.alphabet)
    }

    /// Per-row unbiasedness residuals `Σ_j a_j p_ij - x_i`.
    pub fn bias_residuals(&self) -> Vec<f64> {
        bias_residuals(&self.probs, &self.alphabet)
    }

    /// Output variance for the quantized input of row `i`.
    pub fn row_variance(&self, i: usize) -> f64 {
        let x = self.input_point(i);
        self.probs[i]
            .iter()
            .zip(&self.alphabet)
            .map(|(p, a)| p * (a - x).powi(2))
            .sum()
    }

    pub fn realized_epsilon(&self) -> f64 {
        realized_epsilon(self)
    }

    pub fn check(&self) -> FeasibilityReport {
        check_feasibility(self, &self.tolerances)
    }
}

pub(crate) fn input_point(i: usize, levels: usize) -> f64 {
    if i + 1 == levels {
        1.0
    } else {
        i as f64 / (levels - 1) as f64
    }
}

pub(crate) fn variance_objective(probs: &[Vec<f64>], alphabet: &[f64]) -> f64 {
    let levels = probs.len();
    probs
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let x = input_point(i, levels);
            row.iter().zip(alphabet).map(|(p, a)| p * (x - a).powi(2)).sum::<f64>()
        })
        .sum()
}

pub(crate) fn bias_residuals(probs: &[Vec<f64>], alphabet: &[f64]) -> Vec<f64> {
    let levels = probs.len();
    probs
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().zip(alphabet).map(|(p, a)| p * a).sum::<f64>() - input_point(i, levels))
        .collect()
}

fn check_shape(probs: &[Vec<f64>], alphabet: &[f64], rows: usize, cols: usize) -> Result<()> {
    if probs.len() != rows {
        return Err(Error::Dimension(format!("P has {} rows, expected {rows}", probs.len())));
    }
    if let Some((i, row)) = probs.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(Error::Dimension(format!("P[{i}] has {} entries, expected {cols}", row.len())));
    }
    if alphabet.len() != cols {
        return Err(Error::Dimension(format!("A has {} entries, expected {cols}", alphabet.len())));
    }
    Ok(())
}

fn flushed(p: f64) -> f64 {
    if p.abs() < FLUSH_THRESHOLD {
        0.0
    } else {
        p
    }
}

/// Largest `ln(p_ij / p_kj) - bound(i, k)` over all pairs, or `+inf` if a
/// positive entry faces a zero in the same column.
fn dp_violation(probs: &[Vec<f64>], privacy: &PrivacySpec) -> f64 {
    let rows = probs.len();
    let cols = probs.first().map_or(0, Vec::len);
    let mut worst = 0.0_f64;
    for j in 0..cols {
        let column: Vec<f64> = probs.iter().map(|r| flushed(r[j])).collect();
        let positive = column.iter().filter(|&&p| p > 0.0).count();
        if positive == 0 {
            continue;
        }
        if positive < rows {
            return f64::INFINITY;
        }
        match privacy {
            PrivacySpec::PureLdp { epsilon } => {
                let (lo, hi) = column
                    .iter()
                    .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &p| (lo.min(p), hi.max(p)));
                worst = worst.max((hi / lo).ln() - epsilon);
            }
            PrivacySpec::Metric { .. } => {
                for i in 0..rows {
                    for k in 0..rows {
                        if i != k {
                            let v = (column[i] / column[k]).ln() - privacy.log_ratio_bound(i, k, rows);
                            worst = worst.max(v);
                        }
                    }
                }
            }
        }
    }
    worst
}

/// Validate a table against constraints: row sums, non-negativity, the
/// likelihood-ratio constraints of its privacy spec and unbiasedness.
/// Exhaustive over all `(i, i', j)`; never mutates the table.
pub fn check_feasibility(table: &MechanismTable, tol: &Tolerances) -> FeasibilityReport {
    // Shape was validated at construction.
    check_feasibility_raw(&table.probs, &table.alphabet, &table.privacy, tol)
        .expect("table shape validated at construction")
}

/// [`check_feasibility`] over raw parts, for matrices that have not been
/// wrapped in a [`MechanismTable`].
pub fn check_feasibility_raw(
    probs: &[Vec<f64>],
    alphabet: &[f64],
    privacy: &PrivacySpec,
    tol: &Tolerances,
) -> Result<FeasibilityReport> {
    if probs.len() < 2 {
        return Err(Error::Dimension("P needs at least two rows".into()));
    }
    check_shape(probs, alphabet, probs.len(), alphabet.len())?;
    let max_row_sum_deviation = probs
        .iter()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let min_entry = probs.iter().flatten().map(|&p| flushed(p)).fold(f64::INFINITY, f64::min);
    let max_dp_violation = dp_violation(probs, privacy);
    let max_bias_residual = bias_residuals(probs, alphabet)
        .into_iter()
        .map(f64::abs)
        .fold(0.0, f64::max);
    let realized_epsilon = realized_epsilon_raw(probs, privacy);
    let valid = max_row_sum_deviation <= tol.row_sum
        && min_entry >= 0.0
        && max_dp_violation <= tol.dp
        && max_bias_residual <= tol.bias;
    Ok(FeasibilityReport {
        max_row_sum_deviation,
        min_entry,
        max_dp_violation,
        max_bias_residual,
        realized_epsilon,
        valid,
    })
}

/// Smallest ε for which the table meets its privacy kind: the largest
/// absolute log-ratio within a column (pure LDP), or that ratio divided by
/// the input distance (metric DP). `+inf` if a column mixes zeros and
/// positive entries.
pub fn realized_epsilon(table: &MechanismTable) -> f64 {
    realized_epsilon_raw(&table.probs, &table.privacy)
}

fn realized_epsilon_raw(probs: &[Vec<f64>], privacy: &PrivacySpec) -> f64 {
    let rows = probs.len();
    let cols = probs.first().map_or(0, Vec::len);
    let mut eps = 0.0_f64;
    for j in 0..cols {
        let logs: Vec<f64> = probs.iter().map(|r| flushed(r[j]).ln()).collect();
        let positive = logs.iter().filter(|l| l.is_finite()).count();
        if positive == 0 {
            continue;
        }
        if positive < rows {
            return f64::INFINITY;
        }
        for i in 0..rows {
            for k in (i + 1)..rows {
                let ratio = (logs[i] - logs[k]).abs();
                let d = privacy.distance(input_point(i, rows), input_point(k, rows));
                eps = eps.max(ratio / d);
            }
        }
    }
    eps
}

/// Whether a loaded table that fails its tolerances is an error or a warning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadPolicy {
    #[default]
    Strict,
    Warn,
}

/// A deserialized table together with its re-computed feasibility report.
#[derive(Debug, Clone)]
pub struct LoadedTable {
    pub table: MechanismTable,
    pub report: FeasibilityReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct ToolInfo {
    name: String,
    version: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableDocument {
    version: u32,
    tool: ToolInfo,
    b_in: u32,
    b_out: u32,
    privacy: PrivacySpec,
    #[serde(rename = "P")]
    probs: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    alphabet: Vec<f64>,
    tolerances: Tolerances,
    #[serde(default)]
    provenance: Map<String, Value>,
    feasibility: FeasibilityReport,
}

/// Canonical JSON document for a table. Numbers are written as shortest
/// round-trip decimals, so [`deserialize`] restores every bit.
pub fn serialize(table: &MechanismTable) -> Result<String> {
    let doc = TableDocument {
        version: SCHEMA_VERSION,
        tool: ToolInfo {
            name: "mvu".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        },
        b_in: table.b_in,
        b_out: table.b_out,
        privacy: table.privacy,
        probs: table.probs.clone(),
        alphabet: table.alphabet.clone(),
        tolerances: table.tolerances,
        provenance: table.provenance.clone(),
        feasibility: table.check(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Parse and re-validate a table document.
pub fn deserialize(text: &str, policy: LoadPolicy) -> Result<LoadedTable> {
    let doc: TableDocument = serde_json::from_str(text).map_err(|e| Error::Schema {
        path: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    if doc.version != SCHEMA_VERSION {
        return Err(Error::Schema {
            path: "version".into(),
            message: format!("unsupported schema version {}", doc.version),
        });
    }
    doc.privacy.validate().map_err(|e| Error::Schema {
        path: "privacy".into(),
        message: e.to_string(),
    })?;
    for (i, row) in doc.probs.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p < 0.0 {
                return Err(Error::Schema {
                    path: format!("P[{i}][{j}]"),
                    message: format!("negative probability {p}"),
                });
            }
        }
    }
    let tol = doc.tolerances;
    for (name, v) in [("dp", tol.dp), ("row_sum", tol.row_sum), ("bias", tol.bias)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Schema {
                path: format!("tolerances.{name}"),
                message: format!("tolerance must be finite and non-negative, got {v}"),
            });
        }
    }
    let table = MechanismTable::new(doc.b_in, doc.b_out, doc.probs, doc.alphabet, doc.privacy)
        .map_err(|e| match e {
            Error::Dimension(message) => Error::Schema {
                path: "P".into(),
                message,
            },
            other => other,
        })?
        .with_tolerances(tol);
    let table = MechanismTable {
        provenance: doc.provenance,
        ..table
    };
    let report = table.check();
    if !report.valid && policy == LoadPolicy::Strict {
        return Err(Error::Infeasible(describe_failure(&report, &tol)));
    }
    Ok(LoadedTable { table, report })
}

pub(crate) fn describe_failure(report: &FeasibilityReport, tol: &Tolerances) -> String {
    let mut parts = Vec::new();
    if report.max_row_sum_deviation > tol.row_sum {
        parts.push(format!("row-sum deviation {:.3e} > {:.1e}", report.max_row_sum_deviation, tol.row_sum));
    }
    if report.min_entry < 0.0 {
        parts.push(format!("negative entry {:.3e}", report.min_entry));
    }
    if report.max_dp_violation > tol.dp {
        parts.push(format!("log-ratio violation {:.3e} > {:.1e}", report.max_dp_violation, tol.dp));
    }
    if report.max_bias_residual > tol.bias {
        parts.push(format!("bias residual {:.3e} > {:.1e}", report.max_bias_residual, tol.bias));
    }
    parts.join("; ")
}

/// Serde adapter writing non-finite floats as strings, since JSON numbers
/// cannot express them.
pub(crate) mod float_repr {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct FloatVisitor;
        impl Visitor<'_> for FloatVisitor {
            type Value = f64;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number or one of \"inf\", \"-inf\", \"nan\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                match v {
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    "nan" => Ok(f64::NAN),
                    _ => Err(E::custom(format!("unexpected float string {v:?}"))),
                }
            }
        }
        d.deserialize_any(FloatVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rr_table() -> MechanismTable {
        MechanismTable::new(
            1,
            1,
            vec![vec![0.75, 0.25], vec![0.25, 0.75]],
            vec![-0.5, 1.5],
            PrivacySpec::pure(3f64.ln()),
        )
        .unwrap()
    }

    #[test]
    fn two_by_two_rr_is_feasible_and_unbiased() {
        let t = rr_table();
        let r = t.check();
        assert!(r.valid, "{r:?}");
        assert_eq!(r.max_bias_residual, 0.0);
        assert_eq!(r.max_row_sum_deviation, 0.0);
        assert_relative_eq!(r.realized_epsilon, 3f64.ln(), epsilon = 1e-15);
        assert!(r.max_dp_violation <= 1e-15);
    }

    #[test]
    fn uniform_table_has_no_privacy_loss() {
        let probs = vec![vec![0.25; 4]; 4];
        let t = MechanismTable::new(2, 2, probs, vec![0.0, 0.1, 0.2, 0.3], PrivacySpec::pure(0.1)).unwrap();
        let r = t.check();
        assert_eq!(r.max_dp_violation, 0.0);
        assert_eq!(r.realized_epsilon, 0.0);
        assert_eq!(r.max_row_sum_deviation, 0.0);
        assert!(r.max_bias_residual > 0.0);
        assert!(!r.valid);
    }

    #[test]
    fn zero_facing_positive_is_infinite() {
        let t = MechanismTable::new(
            1,
            1,
            vec![vec![1.0, 0.0], vec![0.5, 0.5]],
            vec![0.0, 2.0],
            PrivacySpec::pure(1.0),
        )
        .unwrap();
        let r = t.check();
        assert_eq!(r.max_dp_violation, f64::INFINITY);
        assert_eq!(r.realized_epsilon, f64::INFINITY);
        assert!(!r.valid);
    }

    #[test]
    fn all_zero_column_is_allowed() {
        let t = MechanismTable::new(
            1,
            2,
            vec![vec![0.75, 0.0, 0.25, 0.0], vec![0.25, 0.0, 0.75, 0.0]],
            vec![-0.5, 7.0, 1.5, -3.0],
            PrivacySpec::pure(3f64.ln()),
        )
        .unwrap();
        assert!(t.check().valid);
    }

    #[test]
    fn tiny_entries_flush_to_zero() {
        let t = MechanismTable::new(
            1,
            1,
            vec![vec![1.0 - 1e-13, 1e-13], vec![1.0, 0.0]],
            vec![0.0, 1.0],
            PrivacySpec::pure(1.0),
        )
        .unwrap();
        assert_eq!(t.row(0)[1], 0.0);
    }

    #[test]
    fn metric_violation_uses_distance() {
        // Adjacent rows of a 4-level grid are 1/3 apart; ratio e^0.5 needs ε >= 1.5.
        let e = 0.5f64.exp();
        let z = 1.0 + e;
        let row_a = vec![1.0 / z, e / z];
        let row_b = vec![e / z, 1.0 / z];
        let probs = vec![row_a.clone(), row_a, row_b.clone(), row_b];
        let tight = check_feasibility_raw(&probs, &[0.0, 1.0], &PrivacySpec::metric(1.5, 1.0), &Tolerances::default())
            .unwrap();
        assert!(tight.max_dp_violation <= 1e-12, "{tight:?}");
        let loose = check_feasibility_raw(&probs, &[0.0, 1.0], &PrivacySpec::metric(1.0, 1.0), &Tolerances::default())
            .unwrap();
        assert!(loose.max_dp_violation > 0.1);
        assert_relative_eq!(loose.realized_epsilon, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let err = MechanismTable::new(1, 1, vec![vec![1.0, 0.0]], vec![0.0, 1.0], PrivacySpec::pure(1.0)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        let err = check_feasibility_raw(&[vec![1.0], vec![0.5, 0.5]], &[0.0, 1.0], &PrivacySpec::pure(1.0), &Tolerances::default())
            .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let third = 1.0 / 3.0;
        let t = MechanismTable::new(
            1,
            1,
            vec![vec![third, 1.0 - third], vec![1.0 - third, third]],
            vec![0.1 + 0.2, -1e-300],
            PrivacySpec::metric(0.7, 2.0),
        )
        .unwrap()
        .with_provenance("method", "test");
        let text = serialize(&t).unwrap();
        let back = deserialize(&text, LoadPolicy::Warn).unwrap();
        assert_eq!(back.table, t);
        assert_eq!(back.table.realized_epsilon().to_bits(), t.realized_epsilon().to_bits());
    }

    #[test]
    fn negative_probability_rejected_with_path() {
        let text = serialize(&rr_table()).unwrap();
        let mut doc: Value = serde_json::from_str(&text).unwrap();
        doc["P"][1][0] = Value::from(-0.25);
        doc["P"][1][1] = Value::from(1.25);
        match deserialize(&doc.to_string(), LoadPolicy::Warn) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "P[1][0]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn infeasible_table_is_error_or_warning() {
        let text = serialize(&rr_table()).unwrap();
        let mut doc: Value = serde_json::from_str(&text).unwrap();
        doc["A"][1] = Value::from(1.6);
        let text = doc.to_string();
        assert!(matches!(deserialize(&text, LoadPolicy::Strict), Err(Error::Infeasible(_))));
        let loaded = deserialize(&text, LoadPolicy::Warn).unwrap();
        assert!(!loaded.report.valid);
    }

    #[test]
    fn schema_errors() {
        let text = serialize(&rr_table()).unwrap();
        let mut doc: Value = serde_json::from_str(&text).unwrap();
        doc["version"] = Value::from(9);
        assert!(matches!(deserialize(&doc.to_string(), LoadPolicy::Warn), Err(Error::Schema { .. })));
        assert!(matches!(deserialize("{\"version\": 1}", LoadPolicy::Warn), Err(Error::Schema { .. })));
        let mut doc: Value = serde_json::from_str(&text).unwrap();
        doc["P"].as_array_mut().unwrap().pop();
        assert!(matches!(deserialize(&doc.to_string(), LoadPolicy::Warn), Err(Error::Schema { .. })));
    }

    #[test]
    fn infinite_report_fields_serialize() {
        let r = FeasibilityReport {
            max_row_sum_deviation: 0.0,
            min_entry: 0.0,
            max_dp_violation: f64::INFINITY,
            max_bias_residual: 0.0,
            realized_epsilon: f64::INFINITY,
            valid: false,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"inf\""));
        let back: FeasibilityReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back.max_dp_violation, f64::INFINITY);
    }

    #[test]
    fn check_is_idempotent() {
        let t = rr_table();
        assert_eq!(t.check(), t.check());
        assert_eq!(t, rr_table());
    }
}
