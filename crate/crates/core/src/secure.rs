//! Masked ring summation for pooling summary statistics across parties
//! without revealing any single contribution. Values travel as fixed-point
//! integers so the pooled result is exact and independent of ring order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::suffstats::SufficientStats;

/// Fixed-point quantum: values are scaled by 2^40 and rounded to nearest.
pub const FIXED_POINT_BITS: u32 = 40;

const SCALE: f64 = (1u64 << FIXED_POINT_BITS) as f64;

#[derive(Error, Debug, PartialEq)]
pub enum SecureError {
    #[error("secure summation needs at least 3 parties, got {0}")]
    TooFewParties(usize),
    #[error("party {party} contribution is not finite or overflows fixed point: {value}")]
    NotRepresentable { party: usize, value: f64 },
    #[error("party {party} statistics have dimension {got}, expected {want}")]
    DimensionMismatch { party: usize, got: usize, want: usize },
}

/// Encodes a real value on the fixed-point grid.
pub fn encode_fixed(x: f64) -> Option<i128> {
    if !x.is_finite() {
        return None;
    }
    let scaled = x * SCALE;
    // Keep far away from i128 overflow even after summing many parties.
    if scaled.abs() >= 2f64.powi(100) {
        return None;
    }
    Some(scaled.round() as i128)
}

pub fn decode_fixed(v: i128) -> f64 {
    v as f64 / SCALE
}

/// Exact pooled value the protocol must reproduce: quantize each input, sum
/// in integers, decode.
pub fn fixed_point_sum(values: &[f64]) -> Option<f64> {
    let mut acc: i128 = 0;
    for &v in values {
        acc += encode_fixed(v)?;
    }
    Some(decode_fixed(acc))
}

/// One round of the ring protocol on scalars, with an explicit offset (the
/// random mask the initiating party adds before the ring pass and removes
/// after).
pub fn ring_sum_with_offset(values: &[f64], offset: i128) -> Result<f64, SecureError> {
    if values.len() < 3 {
        return Err(SecureError::TooFewParties(values.len()));
    }
    let mut running = offset;
    for (party, &v) in values.iter().enumerate() {
        let enc = encode_fixed(v).ok_or(SecureError::NotRepresentable { party, value: v })?;
        running += enc;
    }
    Ok(decode_fixed(running - offset))
}

/// Secure scalar sum: party 0 draws a uniform mask, passes the masked
/// running total around the ring, and unmasks the final value.
pub fn secure_scalar_sum<R: Rng>(values: &[f64], rng: &mut R) -> Result<f64, SecureError> {
    if values.len() < 3 {
        return Err(SecureError::TooFewParties(values.len()));
    }
    let offset: i128 = rng.gen::<i64>() as i128 * SCALE as i128;
    ring_sum_with_offset(values, offset)
}

/// Pools per-party summary statistics entrywise with one ring round per
/// unique entry: each diagonal-and-above cell of the Gram matrix, each
/// projection entry, the squared norm, and the count.
pub fn secure_merge<R: Rng>(
    parties: &[SufficientStats],
    rng: &mut R,
) -> Result<SufficientStats, SecureError> {
    if parties.len() < 3 {
        return Err(SecureError::TooFewParties(parties.len()));
    }
    let p = parties[0].dim();
    for (i, s) in parties.iter().enumerate() {
        if s.dim() != p {
            return Err(SecureError::DimensionMismatch {
                party: i,
                got: s.dim(),
                want: p,
            });
        }
    }
    let gather = |f: &dyn Fn(&SufficientStats) -> f64| -> Vec<f64> {
        parties.iter().map(f).collect()
    };
    let mut ctc = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let s = secure_scalar_sum(&gather(&|st| st.ctc[(i, j)]), rng)?;
            ctc[(i, j)] = s;
            ctc[(j, i)] = s;
        }
    }
    let mut cty = DVector::zeros(p);
    for i in 0..p {
        cty[i] = secure_scalar_sum(&gather(&|st| st.cty[i]), rng)?;
    }
    let yty = secure_scalar_sum(&gather(&|st| st.yty), rng)?;
    let n = secure_scalar_sum(&gather(&|st| st.n), rng)?;
    Ok(SufficientStats { ctc, cty, yty, n })
}
