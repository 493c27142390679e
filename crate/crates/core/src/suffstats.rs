//! The summary-statistic algebra.
//!
//! Everything the fitting engine ever learns from data is (CᵀC, Cᵀy, yᵀy, n).
//! These are additive across rows and across hosts, which is what makes the
//! distributed batch, streaming, windowed and reweighted modes exact.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum StatsError {
    #[error("dimension mismatch: expected P={expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("cannot subtract statistics with larger n ({old}) from n = {current}")]
    SubtractTooMuch { old: f64, current: f64 },
    #[error("decay step requires a nonempty batch")]
    EmptyBatch,
    #[error("wire payload malformed: {0}")]
    Wire(String),
    #[error("statistics with fractional n = {0} cannot be put on the wire")]
    FractionalCount(f64),
}

/// (CᵀC, Cᵀy, yᵀy, n) for some set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub ctc: DMatrix<f64>,
    pub cty: DVector<f64>,
    pub yty: f64,
    pub n: f64,
}

impl SufficientStats {
    pub fn zeros(p: usize) -> Self {
        SufficientStats {
            ctc: DMatrix::zeros(p, p),
            cty: DVector::zeros(p),
            yty: 0.0,
            n: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.cty.len()
    }

    fn check_dim(&self, other: &SufficientStats) -> Result<(), StatsError> {
        if self.dim() != other.dim() {
            return Err(StatsError::Dimension {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    /// Adds one sample in place: ctc += c cᵀ, cty += c y, yty += y², n += 1.
    pub fn accumulate(&mut self, c: &[f64], y: f64) -> Result<(), StatsError> {
        let p = self.dim();
        if c.len() != p {
            return Err(StatsError::Dimension {
                expected: p,
                got: c.len(),
            });
        }
        for j in 0..p {
            let cj = c[j];
            if cj == 0.0 {
                continue;
            }
            for i in 0..p {
                self.ctc[(i, j)] += c[i] * cj;
            }
            self.cty[j] += cj * y;
        }
        self.yty += y * y;
        self.n += 1.0;
        Ok(())
    }

    /// Fieldwise sum.
    pub fn merge(&self, other: &SufficientStats) -> Result<SufficientStats, StatsError> {
        self.check_dim(other)?;
        Ok(SufficientStats {
            ctc: &self.ctc + &other.ctc,
            cty: &self.cty + &other.cty,
            yty: self.yty + other.yty,
            n: self.n + other.n,
        })
    }

    pub fn merge_in(&mut self, other: &SufficientStats) -> Result<(), StatsError> {
        self.check_dim(other)?;
        self.ctc += &other.ctc;
        self.cty += &other.cty;
        self.yty += other.yty;
        self.n += other.n;
        Ok(())
    }

    /// Removes previously merged statistics (window expiry).
    pub fn subtract(&self, old: &SufficientStats) -> Result<SufficientStats, StatsError> {
        self.check_dim(old)?;
        if old.n > self.n {
            return Err(StatsError::SubtractTooMuch {
                old: old.n,
                current: self.n,
            });
        }
        Ok(SufficientStats {
            ctc: &self.ctc - &old.ctc,
            cty: &self.cty - &old.cty,
            yty: self.yty - old.yty,
            n: self.n - old.n,
        })
    }

    /// Reweighted update: stats <- (1-rho) stats + rho batch for the matrix
    /// and vector parts, while n accumulates unweighted. Returns gamma =
    /// n / batch.n, the rescaling used inside the variational sweep.
    pub fn decay(&mut self, batch: &SufficientStats, rho: f64) -> Result<f64, StatsError> {
        self.check_dim(batch)?;
        if batch.n < 1.0 {
            return Err(StatsError::EmptyBatch);
        }
        let keep = 1.0 - rho;
        self.ctc = &self.ctc * keep + &batch.ctc * rho;
        self.cty = &self.cty * keep + &batch.cty * rho;
        self.yty = keep * self.yty + rho * batch.yty;
        self.n += batch.n;
        Ok(self.n / batch.n)
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0.0
    }
}

/// Forgetting schedule for the reweighted (decaying-window) mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecayConfig {
    /// rho_t = (tau + t)^(-kappa), tau > 0, 0.5 < kappa <= 1.
    Decreasing { tau: f64, kappa: f64 },
    /// rho_t = rho for all t, 0 < rho < 1.
    Constant { rho: f64 },
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum DecayConfigError {
    #[error("decreasing learning rate requires tau > 0, got {0}")]
    BadTau(f64),
    #[error("decreasing learning rate requires 0.5 < kappa <= 1, got {0}")]
    BadKappa(f64),
    #[error("constant learning rate requires 0 < rho < 1, got {0}")]
    BadRho(f64),
}

impl DecayConfig {
    pub fn validate(&self) -> Result<(), DecayConfigError> {
        match *self {
            DecayConfig::Decreasing { tau, kappa } => {
                if !(tau > 0.0) || !tau.is_finite() {
                    return Err(DecayConfigError::BadTau(tau));
                }
                if !(kappa > 0.5 && kappa <= 1.0) {
                    return Err(DecayConfigError::BadKappa(kappa));
                }
                Ok(())
            }
            DecayConfig::Constant { rho } => {
                if !(rho > 0.0 && rho < 1.0) {
                    return Err(DecayConfigError::BadRho(rho));
                }
                Ok(())
            }
        }
    }

    /// Learning rate at step t >= 1.
    pub fn learning_rate(&self, t: u64) -> f64 {
        debug_assert!(t >= 1);
        match *self {
            DecayConfig::Decreasing { tau, kappa } => (tau + t as f64).powf(-kappa),
            DecayConfig::Constant { rho } => rho,
        }
    }
}

/// Binary flush encoding, little-endian: header {P: u32, n: u64}, then yty,
/// the P entries of Cᵀy, and the P(P+1)/2 upper-triangular entries of CᵀC in
/// row-major order starting at the diagonal. Bit-exact round-trip.
pub fn encode_stats(stats: &SufficientStats) -> Result<Vec<u8>, StatsError> {
    if stats.n.fract() != 0.0 || stats.n < 0.0 {
        return Err(StatsError::FractionalCount(stats.n));
    }
    let p = stats.dim();
    let mut buf = Vec::with_capacity(4 + 8 + 8 * (1 + p + p * (p + 1) / 2));
    buf.extend_from_slice(&(p as u32).to_le_bytes());
    buf.extend_from_slice(&(stats.n as u64).to_le_bytes());
    buf.extend_from_slice(&stats.yty.to_le_bytes());
    for i in 0..p {
        buf.extend_from_slice(&stats.cty[i].to_le_bytes());
    }
    for i in 0..p {
        for j in i..p {
            buf.extend_from_slice(&stats.ctc[(i, j)].to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_stats(buf: &[u8]) -> Result<SufficientStats, StatsError> {
    let take8 = |b: &[u8], at: usize| -> Result<[u8; 8], StatsError> {
        b.get(at..at + 8)
            .and_then(|s| <[u8; 8]>::try_from(s).ok())
            .ok_or_else(|| StatsError::Wire("truncated payload".into()))
    };
    let p = u32::from_le_bytes(
        buf.get(0..4)
            .and_then(|s| <[u8; 4]>::try_from(s).ok())
            .ok_or_else(|| StatsError::Wire("missing header".into()))?,
    ) as usize;
    let n = u64::from_le_bytes(take8(buf, 4)?) as f64;
    let expected = 12 + 8 * (1 + p + p * (p + 1) / 2);
    if buf.len() != expected {
        return Err(StatsError::Wire(format!(
            "expected {} bytes for P={}, got {}",
            expected,
            p,
            buf.len()
        )));
    }
    let mut at = 12;
    let read = |at: &mut usize| -> f64 {
        let v = f64::from_le_bytes(<[u8; 8]>::try_from(&buf[*at..*at + 8]).unwrap());
        *at += 8;
        v
    };
    let yty = read(&mut at);
    let mut cty = DVector::zeros(p);
    for i in 0..p {
        cty[i] = read(&mut at);
    }
    let mut ctc = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let v = read(&mut at);
            ctc[(i, j)] = v;
            ctc[(j, i)] = v;
        }
    }
    Ok(SufficientStats { ctc, cty, yty, n })
}
