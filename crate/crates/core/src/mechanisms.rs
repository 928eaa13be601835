//! Online privatization with a mechanism table, payload bit-packing, and the
//! uncompressed Laplace and Gaussian reference mechanisms.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{lp_norm, DitherGrid};
use crate::tables::MechanismTable;

/// Client vectors live in the `L_p` ball of radius `sensitivity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VectorSpec {
    pub dim: usize,
    pub norm_order: f64,
    pub sensitivity: f64,
}

impl VectorSpec {
    pub fn new(dim: usize, norm_order: f64, sensitivity: f64) -> Result<Self> {
        let s = Self {
            dim,
            norm_order,
            sensitivity,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidParameter("dimension must be at least 1".into()));
        }
        if !(self.norm_order >= 1.0) {
            return Err(Error::InvalidParameter(format!("norm order must be >= 1, got {}", self.norm_order)));
        }
        if !(self.sensitivity > 0.0 && self.sensitivity.is_finite()) {
            return Err(Error::InvalidParameter(format!("sensitivity must be positive, got {}", self.sensitivity)));
        }
        Ok(())
    }

    /// Map a coordinate from `[-Δ, Δ]` to `[0, 1]`.
    pub fn to_unit(&self, v: f64) -> f64 {
        (v + self.sensitivity) / (2.0 * self.sensitivity)
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        2.0 * self.sensitivity * u - self.sensitivity
    }

    /// Per-step LDP guarantee of the coordinate-wise mechanism built from an
    /// `ε`-metric table: rescaling turns the ball radius into `1/2`.
    pub fn composite_epsilon(&self, table_epsilon: f64) -> f64 {
        table_epsilon * 0.5f64.powf(self.norm_order)
    }

    pub fn check_norm(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!("expected {} coordinates, got {}", self.dim, x.len())));
        }
        let norm = lp_norm(x, self.norm_order);
        if !(norm <= self.sensitivity * (1.0 + 1e-12)) {
            return Err(Error::NormViolation {
                norm,
                bound: self.sensitivity,
            });
        }
        Ok(())
    }
}

/// Output indices of one client, `b_out` bits each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    indices: Vec<u32>,
    b_out: u32,
}

impl Payload {
    pub fn new(indices: Vec<u32>, b_out: u32) -> Result<Self> {
        if b_out == 0 || b_out > 24 {
            return Err(Error::InvalidParameter(format!("b_out must be in 1..=24, got {b_out}")));
        }
        if let Some((k, &j)) = indices.iter().enumerate().find(|(_, &j)| j >= 1 << b_out) {
            return Err(Error::CoordinateOutOfRange {
                index: k,
                value: j as f64,
                lo: 0.0,
                hi: ((1u64 << b_out) - 1) as f64,
            });
        }
        Ok(Self { indices, b_out })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn b_out(&self) -> u32 {
        self.b_out
    }

    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    /// Exact number of payload bits, `d · b_out`.
    pub fn bit_cost(&self) -> usize {
        self.indices.len() * self.b_out as usize
    }

    /// Little-endian bit stream: coordinate `k` occupies bits
    /// `[k·b_out, (k+1)·b_out)`, least significant bit first, zero-padded to
    /// a whole byte.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bit_cost().div_ceil(8)];
        let b = self.b_out as usize;
        for (k, &j) in self.indices.iter().enumerate() {
            for bit in 0..b {
                if (j >> bit) & 1 == 1 {
                    let pos = k * b + bit;
                    out[pos / 8] |= 1 << (pos % 8);
                }
            }
        }
        out
    }

    pub fn unpack(bytes: &[u8], dim: usize, b_out: u32) -> Result<Self> {
        let b = b_out as usize;
        let need = (dim * b).div_ceil(8);
        if bytes.len() != need {
            return Err(Error::Dimension(format!("packed payload has {} bytes, expected {need}", bytes.len())));
        }
        let indices = (0..dim)
            .map(|k| {
                (0..b).fold(0u32, |acc, bit| {
                    let pos = k * b + bit;
                    acc | ((((bytes[pos / 8] >> (pos % 8)) & 1) as u32) << bit)
                })
            })
            .collect();
        Self::new(indices, b_out)
    }
}

/// Magic bytes opening a payload file.
pub const PAYLOAD_MAGIC: &[u8; 4] = b"MVUP";
pub const PAYLOAD_VERSION: u8 = 1;

/// Write payloads as: magic, version (u8), d (u32 LE), b_out (u8),
/// count (u32 LE), then each packed payload.
pub fn write_payloads<W: Write>(w: &mut W, payloads: &[Payload]) -> Result<()> {
    let (dim, b_out) = match payloads.first() {
        Some(p) => (p.dim(), p.b_out()),
        None => (0, 1),
    };
    if payloads.iter().any(|p| p.dim() != dim || p.b_out() != b_out) {
        return Err(Error::Dimension("payloads in one file must share d and b_out".into()));
    }
    let dim32 = u32::try_from(dim).map_err(|_| Error::Dimension("dimension exceeds u32".into()))?;
    let count = u32::try_from(payloads.len()).map_err(|_| Error::Dimension("too many payloads".into()))?;
    w.write_all(PAYLOAD_MAGIC)?;
    w.write_all(&[PAYLOAD_VERSION])?;
    w.write_all(&dim32.to_le_bytes())?;
    w.write_all(&[b_out as u8])?;
    w.write_all(&count.to_le_bytes())?;
    for p in payloads {
        w.write_all(&p.pack())?;
    }
    Ok(())
}

pub fn read_payloads<R: Read>(r: &mut R) -> Result<Vec<Payload>> {
    let mut head = [0u8; 14];
    r.read_exact(&mut head)?;
    if &head[..4] != PAYLOAD_MAGIC {
        return Err(Error::Schema {
            path: "magic".into(),
            message: "not a payload file".into(),
        });
    }
    if head[4] != PAYLOAD_VERSION {
        return Err(Error::Schema {
            path: "version".into(),
            message: format!("unsupported payload version {}", head[4]),
        });
    }
    let dim = u32::from_le_bytes(head[5..9].try_into().expect("4 bytes")) as usize;
    let b_out = head[9] as u32;
    let count = u32::from_le_bytes(head[10..14].try_into().expect("4 bytes")) as usize;
    let mut buf = vec![0u8; (dim * b_out as usize).div_ceil(8)];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        out.push(Payload::unpack(&buf, dim, b_out)?);
    }
    Ok(out)
}

/// Draw an output index from row `i` of the table by inverse CDF.
pub fn sample_row<R: Rng + ?Sized>(table: &MechanismTable, i: usize, rng: &mut R) -> usize {
    let row = table.row(i);
    let u: f64 = rng.random::<f64>() * row.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

fn input_grid(table: &MechanismTable) -> DitherGrid {
    DitherGrid::unit(table.input_levels()).expect("tables have at least two input levels")
}

/// Dither `x ∈ [0, 1]` onto the table's input grid and sample an output
/// index from the corresponding row.
pub fn privatize_index<R: Rng + ?Sized>(table: &MechanismTable, x: f64, rng: &mut R) -> Result<usize> {
    let law = input_grid(table).law(x)?;
    let i = law.sample(rng);
    Ok(sample_row(table, i, rng))
}

pub fn privatize_scalar<R: Rng + ?Sized>(table: &MechanismTable, x: f64, rng: &mut R) -> Result<Payload> {
    let j = privatize_index(table, x, rng)?;
    Payload::new(vec![j as u32], table.b_out())
}

/// The alphabet value of output index `j`.
pub fn decode(table: &MechanismTable, j: usize) -> Result<f64> {
    table.alphabet().get(j).copied().ok_or(Error::OutOfRange {
        value: j as f64,
        lo: 0.0,
        hi: (table.output_levels() - 1) as f64,
    })
}

/// Exact output variance `E[(a_J - x)²]` at `x ∈ [0, 1]`, including the
/// dithering step. Equals the variance when the table is unbiased.
pub fn output_mse(table: &MechanismTable, x: f64) -> Result<f64> {
    let grid = input_grid(table);
    let law = grid.law(x)?;
    Ok(law
        .outcomes()
        .map(|(i, w)| {
            w * table
                .row(i)
                .iter()
                .zip(table.alphabet())
                .map(|(p, a)| p * (a - x).powi(2))
                .sum::<f64>()
        })
        .sum())
}

/// Privatize each coordinate of `x` independently after mapping the ball
/// `‖x‖_p <= Δ` into `[0, 1]^d`.
pub fn privatize_vector<R: Rng + ?Sized>(
    table: &MechanismTable,
    x: &[f64],
    spec: &VectorSpec,
    rng: &mut R,
) -> Result<Payload> {
    spec.validate()?;
    spec.check_norm(x)?;
    let indices = x
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let u = spec.to_unit(v).clamp(0.0, 1.0);
            privatize_index(table, u, rng).map(|j| j as u32).map_err(|e| match e {
                Error::OutOfRange { value, lo, hi } => Error::CoordinateOutOfRange { index: k, value, lo, hi },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Payload::new(indices, table.b_out())
}

/// Decode a vector payload back to the original coordinates.
pub fn decode_vector(table: &MechanismTable, payload: &Payload, spec: &VectorSpec) -> Result<Vec<f64>> {
    payload
        .indices()
        .iter()
        .map(|&j| decode(table, j as usize).map(|a| spec.from_unit(a)))
        .collect()
}

fn check_privacy_args(sensitivity: f64, epsilon: f64) -> Result<()> {
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::InvalidParameter(format!("sensitivity must be positive, got {sensitivity}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

/// Add Laplace noise of scale `Δ1/ε` to every coordinate.
pub fn laplace_mechanism<R: Rng + ?Sized>(x: &[f64], l1_sensitivity: f64, epsilon: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_privacy_args(l1_sensitivity, epsilon)?;
    let scale = l1_sensitivity / epsilon;
    if scale == 0.0 {
        return Ok(x.to_vec());
    }
    Ok(x.iter()
        .map(|&v| {
            // Inverse CDF on a symmetric uniform in (-1/2, 1/2).
            let u: f64 = rng.random::<f64>() - 0.5;
            v - scale * u.signum() * (-2.0 * u.abs()).ln_1p()
        })
        .collect())
}

/// Classical Gaussian calibration `σ = Δ2·√(2 ln(1.25/δ))/ε`.
pub fn gaussian_sigma(l2_sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64> {
    check_privacy_args(l2_sensitivity, epsilon)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(l2_sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

pub fn gaussian_mechanism<R: Rng + ?Sized>(
    x: &[f64],
    l2_sensitivity: f64,
    epsilon: f64,
    delta: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sigma = gaussian_sigma(l2_sensitivity, epsilon, delta)?;
    if sigma == 0.0 {
        return Ok(x.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(x.iter().map(|&v| v + normal.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designer::{build_bitwise_rr, build_generalized_rr};
    use crate::rng::substream;
    use crate::tables::PrivacySpec;
    use proptest::prelude::*;

    fn identity_table(b: u32) -> MechanismTable {
        let n = 1usize << b;
        let probs = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let alphabet = (0..n).map(|j| j as f64 / (n - 1) as f64).collect();
        MechanismTable::new(b, b, probs, alphabet, PrivacySpec::pure(1.0)).unwrap()
    }

    #[test]
    fn noiseless_table_round_trips_grid_points() {
        let t = identity_table(3);
        let mut rng = substream(1, 0);
        for i in 0..8 {
            let x = i as f64 / 7.0;
            let p = privatize_scalar(&t, x, &mut rng).unwrap();
            assert_eq!(decode(&t, p.indices()[0] as usize).unwrap(), x);
        }
    }

    #[test]
    fn one_bit_rr_output_law() {
        let t = build_bitwise_rr(3f64.ln(), 1).unwrap();
        let mut rng = substream(2, 0);
        let n = 200_000;
        let hits = (0..n)
            .filter(|_| privatize_index(&t, 1.0, &mut rng).unwrap() == 1)
            .count();
        let f = hits as f64 / n as f64;
        let se = (0.75 * 0.25 / n as f64).sqrt();
        assert!((f - 0.75).abs() < 4.0 * se, "{f}");
        assert!((output_mse(&t, 1.0).unwrap() - (0.75 * 0.25 + 0.25 * 2.25)).abs() < 1e-12);
    }

    #[test]
    fn decode_out_of_range() {
        let t = identity_table(1);
        assert!(decode(&t, 2).is_err());
        assert!(privatize_scalar(&t, 1.5, &mut substream(0, 0)).is_err());
    }

    #[test]
    fn scalar_mean_is_unbiased() {
        let t = build_generalized_rr(1.0, 3).unwrap();
        let mut rng = substream(3, 0);
        let n = 200_000;
        let x = 0.3;
        let draws: Vec<f64> = (0..n)
            .map(|_| decode(&t, privatize_index(&t, x, &mut rng).unwrap()).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (output_mse(&t, x).unwrap() / n as f64).sqrt();
        assert!((mean - x).abs() < 4.0 * sd, "{mean}");
    }

    #[test]
    fn pack_layout_is_little_endian_coordinate_major() {
        let p = Payload::new(vec![0b101, 0b011, 0b110], 3).unwrap();
        // Stream positions set: 0, 2 | 3, 4 | 7, 8.
        let bytes = p.pack();
        assert_eq!(bytes, vec![0b1001_1101, 0b0000_0001]);
        assert_eq!(Payload::unpack(&bytes, 3, 3).unwrap(), p);
    }

    #[test]
    fn payload_rejects_wide_index() {
        assert!(Payload::new(vec![0, 4], 2).is_err());
        assert!(Payload::unpack(&[0], 3, 3).is_err());
    }

    #[test]
    fn payload_file_round_trip() {
        let ps = vec![
            Payload::new(vec![1, 2, 3, 0, 7], 3).unwrap(),
            Payload::new(vec![7, 7, 7, 7, 7], 3).unwrap(),
        ];
        let mut buf = Vec::new();
        write_payloads(&mut buf, &ps).unwrap();
        assert_eq!(buf.len(), 14 + 2 * 2);
        assert_eq!(read_payloads(&mut buf.as_slice()).unwrap(), ps);
        buf[0] = b'X';
        assert!(read_payloads(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn vector_norm_violation() {
        let t = identity_table(2);
        let spec = VectorSpec::new(2, 1.0, 1.0).unwrap();
        match privatize_vector(&t, &[0.8, -0.5], &spec, &mut substream(0, 0)) {
            Err(Error::NormViolation { norm, .. }) => assert!((norm - 1.3).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn vector_of_one_is_scalar_after_scaling() {
        let t = build_generalized_rr(2.0, 2).unwrap();
        let spec = VectorSpec::new(1, 1.0, 2.0).unwrap();
        let a = privatize_vector(&t, &[0.5], &spec, &mut substream(9, 1)).unwrap();
        let b = privatize_scalar(&t, spec.to_unit(0.5), &mut substream(9, 1)).unwrap();
        assert_eq!(a, b);
        let v = decode_vector(&t, &a, &spec).unwrap();
        assert_eq!(v[0], 4.0 * t.alphabet()[a.indices()[0] as usize] - 2.0);
    }

    #[test]
    fn laplace_and_gaussian_variance() {
        let mut rng = substream(4, 0);
        let n = 200_000;
        let x = vec![0.0; n];
        let l = laplace_mechanism(&x, 1.0, 2.0, &mut rng).unwrap();
        let var = l.iter().map(|v| v * v).sum::<f64>() / n as f64;
        // Var = 2b² = 0.5; the fourth moment 24b⁴ gives the sampling error.
        let se = ((24.0 * 0.5f64.powi(4) - 0.25) / n as f64).sqrt();
        assert!((var - 0.5).abs() < 4.0 * se, "{var}");
        let sigma = gaussian_sigma(1.0, 1.0, 1e-5).unwrap();
        let g = gaussian_mechanism(&x, 1.0, 1.0, 1e-5, &mut rng).unwrap();
        let var = g.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let se = (2.0 * sigma.powi(4) / n as f64).sqrt();
        assert!((var - sigma * sigma).abs() < 4.0 * se);
        assert!(gaussian_mechanism(&x, 1.0, 1.0, 1.0, &mut rng).is_err());
        assert_eq!(laplace_mechanism(&[0.25], 1.0, f64::INFINITY, &mut rng).unwrap(), vec![0.25]);
        assert_eq!(gaussian_mechanism(&[0.25], 1.0, f64::INFINITY, 0.1, &mut rng).unwrap(), vec![0.25]);
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(b in 1u32..=12, idx in prop::collection::vec(0u32..4096, 1..40)) {
            let indices: Vec<u32> = idx.into_iter().map(|j| j % (1 << b)).collect();
            let p = Payload::new(indices, b).unwrap();
            let bytes = p.pack();
            prop_assert_eq!(bytes.len(), (p.bit_cost() + 7) / 8);
            prop_assert_eq!(Payload::unpack(&bytes, p.dim(), b).unwrap(), p);
        }
    }
}
