//! Closed-form unbiased randomized response tables.

use crate::error::{Error, Result};
use crate::lattice::levels_for_bits;
use crate::tables::{MechanismTable, PrivacySpec};

/// Alphabet magnitudes beyond this are rejected as numerically unusable.
pub const MAX_ALPHABET_MAGNITUDE: f64 = 1e12;

/// Bit-weight convention used when decoding bitwise tables: bit `k` of the
/// integer `(B - 1) z` carries weight `2^k / (B - 1)`.
pub const BIT_WEIGHT_CONVENTION: &str = "bit k of (B-1)z has weight 2^k/(B-1)";

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) || epsilon.is_nan() {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

fn check_magnitude(alphabet: &[f64]) -> Result<()> {
    let magnitude = alphabet.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
    if !(magnitude <= MAX_ALPHABET_MAGNITUDE) {
        return Err(Error::AlphabetOverflow { magnitude });
    }
    Ok(())
}

/// Unbiased bitwise randomized response: each of the `b` bits of the
/// quantized input is kept with probability `1 / (1 + e^{-ε/b})` and
/// debiased independently.
pub fn build_bitwise_rr(epsilon: f64, b: u32) -> Result<MechanismTable> {
    check_epsilon(epsilon)?;
    let levels = levels_for_bits(b)?;
    let per_bit = epsilon / b as f64;
    let em1 = per_bit.exp_m1();
    let keep = 1.0 / (1.0 + (-per_bit).exp());
    let flip = 1.0 - keep;
    // Decoded value of an output bit 0 or 1.
    let bit_value = [-1.0 / em1, (em1 + 1.0) / em1];
    let scale = (levels - 1) as f64;
    let alphabet: Vec<f64> = (0..levels)
        .map(|j| {
            (0..b)
                .map(|k| ((1u64 << k) as f64) * bit_value[(j >> k) & 1])
                .sum::<f64>()
                / scale
        })
        .collect();
    check_magnitude(&alphabet)?;
    let probs = (0..levels)
        .map(|i| {
            (0..levels)
                .map(|j| {
                    let agree = b - ((i ^ j) as u32).count_ones();
                    keep.powi(agree as i32) * flip.powi((b - agree) as i32)
                })
                .collect()
        })
        .collect();
    Ok(MechanismTable::new(b, b, probs, alphabet, PrivacySpec::pure(epsilon))?
        .with_provenance("method", "bitwise-rr")
        .with_provenance("bit_weight_convention", BIT_WEIGHT_CONVENTION))
}

/// Diagonal and off-diagonal mass of the generalized RR matrix
/// `αI + β·11ᵀ` over `levels` outputs.
pub(crate) fn grr_weights(epsilon: f64, levels: usize) -> (f64, f64) {
    let em1 = epsilon.exp_m1();
    let denom = levels as f64 + em1;
    (em1 / denom, 1.0 / denom)
}

/// Rows of the generalized RR matrix and its unbiased alphabet.
pub(crate) fn grr_parts(epsilon: f64, levels: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (alpha, beta) = grr_weights(epsilon, levels);
    if !(alpha > 0.0) {
        return Err(Error::Numeric(format!("generalized RR system is singular at epsilon {epsilon}")));
    }
    // Summing the unbiasedness equations gives Σa = Σx = levels/2.
    let scale = (levels - 1) as f64;
    let offset = beta * levels as f64 / 2.0;
    let alphabet: Vec<f64> = (0..levels).map(|i| (i as f64 / scale - offset) / alpha).collect();
    check_magnitude(&alphabet)?;
    let probs = (0..levels)
        .map(|i| (0..levels).map(|j| if i == j { alpha + beta } else { beta }).collect())
        .collect();
    Ok((probs, alphabet))
}

/// Unbiased generalized randomized response over `2^b` symbols.
pub fn build_generalized_rr(epsilon: f64, b: u32) -> Result<MechanismTable> {
    check_epsilon(epsilon)?;
    let levels = levels_for_bits(b)?;
    let (probs, alphabet) = grr_parts(epsilon, levels)?;
    Ok(MechanismTable::new(b, b, probs, alphabet, PrivacySpec::pure(epsilon))?
        .with_provenance("method", "generalized-rr"))
}
