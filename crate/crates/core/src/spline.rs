//! O'Sullivan-type penalized spline bases and design-row assembly.
//!
//! The construction: cubic B-splines on an equidistant interior knot
//! sequence, penalty = integrated squared second derivative computed by
//! exact Gauss-Legendre quadrature per inter-knot interval, then a spectral
//! decomposition of the penalty maps the raw B-spline coefficients onto K
//! standardized columns with an i.i.d. N(0, sigma_u^2) prior. Linear
//! functions span the penalty nullspace, so the penalized fit shrinks
//! toward the straight line carried by the X part of the design.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BlockSpec, FixedTerm, ModelSpec, RangePolicy};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum BasisError {
    #[error("degenerate predictor range: lo ({0}) must be < hi ({1})")]
    DegenerateRange(f64, f64),
    #[error("at least one interior knot is required")]
    NoInteriorKnots,
    #[error("penalty decomposition produced a non-positive eigenvalue at column {0}")]
    DegeneratePenalty(usize),
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum DesignError {
    #[error("row provides {got} predictor values but the model needs {expected}")]
    PredictorCount { got: usize, expected: usize },
    #[error("predictor '{name}' = {value} outside declared range [{lo}, {hi}]")]
    OutOfRange {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("group id {got} out of range (model declares {groups} groups)")]
    UnknownGroup { got: usize, groups: usize },
    #[error("row has a group id but the model has no random-intercept block")]
    UnexpectedGroup,
    #[error("model has a random-intercept block but the row carries no group id")]
    MissingGroup,
    #[error("non-finite value for predictor '{0}'")]
    NonFinite(String),
}

/// Knot placement for one spline block: equidistant interior knots on a
/// prespecified predictor range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnotConfig {
    pub range_lo: f64,
    pub range_hi: f64,
    pub num_interior: usize,
}

impl KnotConfig {
    pub fn validate(&self) -> Result<(), BasisError> {
        if !(self.range_lo < self.range_hi)
            || !self.range_lo.is_finite()
            || !self.range_hi.is_finite()
        {
            return Err(BasisError::DegenerateRange(self.range_lo, self.range_hi));
        }
        if self.num_interior == 0 {
            return Err(BasisError::NoInteriorKnots);
        }
        Ok(())
    }

    /// Number of standardized basis columns produced by this config.
    pub fn basis_columns(&self) -> usize {
        self.num_interior + 2
    }

    /// Config with `k` basis columns on the given range.
    pub fn with_columns(range_lo: f64, range_hi: f64, k: usize) -> Self {
        assert!(k >= 3, "spline blocks need K >= 3");
        KnotConfig {
            range_lo,
            range_hi,
            num_interior: k - 2,
        }
    }
}

/// Boundary + equidistant interior knots, endpoints included once.
pub fn make_knots(cfg: &KnotConfig) -> Result<Vec<f64>, BasisError> {
    cfg.validate()?;
    let m = cfg.num_interior;
    let span = cfg.range_hi - cfg.range_lo;
    let mut knots = Vec::with_capacity(m + 2);
    knots.push(cfg.range_lo);
    for i in 1..=m {
        knots.push(cfg.range_lo + span * i as f64 / (m + 1) as f64);
    }
    knots.push(cfg.range_hi);
    Ok(knots)
}

/// A standardized penalized spline basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    pub config: KnotConfig,
    /// Clamped cubic B-spline knot vector (boundary knots repeated 4x).
    full_knots: Vec<f64>,
    /// Number of standardized columns.
    pub k: usize,
    /// Maps raw B-spline values b(x) to standardized columns: z(x) = T^t b(x).
    transform: DMatrix<f64>,
}

const DEGREE: usize = 3;

// 3-point Gauss-Legendre on [-1, 1]; exact through degree 5, comfortably
// above the quadratic integrand of cubic-spline curvature products.
const GL_NODES: [f64; 3] = [-0.7745966692414834, 0.0, 0.7745966692414834];
const GL_WEIGHTS: [f64; 3] = [0.5555555555555556, 0.8888888888888888, 0.5555555555555556];

/// Values of all cubic B-splines at `x` for a clamped knot vector.
pub fn bspline_values(full_knots: &[f64], x: f64) -> Vec<f64> {
    bspline_all_degree(full_knots, x, DEGREE)
}

/// Cox-de Boor evaluation of every degree-`d` B-spline at `x`.
fn bspline_all_degree(t: &[f64], x: f64, d: usize) -> Vec<f64> {
    // Degree-0 indicators; x on the right boundary belongs to the last
    // nonempty interval.
    let mut vals = vec![0.0; t.len() - 1];
    let mut idx = None;
    for i in 0..t.len() - 1 {
        if t[i] <= x && x < t[i + 1] {
            idx = Some(i);
            break;
        }
    }
    if idx.is_none() && x >= t[t.len() - 1] {
        idx = (0..t.len() - 1).rev().find(|&i| t[i] < t[i + 1]);
    }
    if let Some(i) = idx {
        vals[i] = 1.0;
    }
    for k in 1..=d {
        let len = t.len() - k - 1;
        let mut next = vec![0.0; len];
        for (i, slot) in next.iter_mut().enumerate() {
            let mut v = 0.0;
            let d1 = t[i + k] - t[i];
            if d1 > 0.0 {
                v += (x - t[i]) / d1 * vals[i];
            }
            let d2 = t[i + k + 1] - t[i + 1];
            if d2 > 0.0 {
                v += (t[i + k + 1] - x) / d2 * vals[i + 1];
            }
            *slot = v;
        }
        vals = next;
    }
    vals
}

/// Second derivatives of all cubic B-splines at `x`.
fn bspline_second_derivs(t: &[f64], x: f64) -> Vec<f64> {
    let n1 = bspline_all_degree(t, x, 1);
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    // First derivative of the degree-2 splines.
    let len2 = t.len() - 3;
    let d2: Vec<f64> = (0..len2)
        .map(|i| {
            2.0 * (ratio(n1[i], t[i + 2] - t[i]) - ratio(n1[i + 1], t[i + 3] - t[i + 1]))
        })
        .collect();
    let len3 = t.len() - 4;
    (0..len3)
        .map(|i| 3.0 * (ratio(d2[i], t[i + 3] - t[i]) - ratio(d2[i + 1], t[i + 4] - t[i + 1])))
        .collect()
}

/// Curvature penalty of the raw cubic B-spline basis, by exact quadrature.
pub fn penalty_matrix(full_knots: &[f64]) -> DMatrix<f64> {
    let n = full_knots.len() - DEGREE - 1;
    let mut omega = DMatrix::zeros(n, n);
    for a in 0..full_knots.len() - 1 {
        let (lo, hi) = (full_knots[a], full_knots[a + 1]);
        if hi <= lo {
            continue;
        }
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (node, weight) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
            let x = mid + half * node;
            let d2 = bspline_second_derivs(full_knots, x);
            let w = weight * half;
            for i in 0..n {
                if d2[i] == 0.0 {
                    continue;
                }
                for j in i..n {
                    omega[(i, j)] += w * d2[i] * d2[j];
                }
            }
        }
    }
    // Mirror the upper triangle.
    for i in 0..n {
        for j in 0..i {
            omega[(i, j)] = omega[(j, i)];
        }
    }
    omega
}

/// Builds the standardized O'Sullivan basis for one spline block.
pub fn osullivan_basis(cfg: &KnotConfig) -> Result<SplineBasis, BasisError> {
    cfg.validate()?;
    let interior = make_knots(cfg)?;
    let mut full = Vec::with_capacity(interior.len() + 6);
    for _ in 0..DEGREE {
        full.push(cfg.range_lo);
    }
    full.extend_from_slice(&interior);
    for _ in 0..DEGREE {
        full.push(cfg.range_hi);
    }

    let omega = penalty_matrix(&full);
    let n = omega.nrows();
    let k = cfg.basis_columns();

    let eig = omega.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let mut transform = DMatrix::zeros(n, k);
    for (col, &src) in order.iter().take(k).enumerate() {
        let lambda = eig.eigenvalues[src];
        if lambda <= 0.0 {
            return Err(BasisError::DegeneratePenalty(col));
        }
        let mut v = eig.eigenvectors.column(src).clone_owned();
        // Deterministic sign: largest-magnitude entry positive.
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        if v[pivot] < 0.0 {
            v = -v;
        }
        v /= lambda.sqrt();
        transform.set_column(col, &v);
    }

    Ok(SplineBasis {
        config: *cfg,
        full_knots: full,
        k,
        transform,
    })
}

impl SplineBasis {
    /// Standardized basis values z_1(x), ..., z_K(x).
    pub fn evaluate(&self, x: f64) -> DVector<f64> {
        let b = DVector::from_vec(bspline_values(&self.full_knots, x));
        self.transform.tr_mul(&b)
    }
}

enum CompiledBlock {
    Spline {
        predictor: usize,
        name: String,
        basis: SplineBasis,
    },
    RandomIntercept {
        groups: usize,
    },
}

/// Compiled design-row assembler for a validated model spec.
///
/// Predictor names referenced by the model are resolved once, in order of
/// first appearance; `row` then takes a slice of predictor values in that
/// order.
pub struct DesignBuilder {
    predictor_names: Vec<String>,
    fixed: Vec<Option<usize>>,
    blocks: Vec<CompiledBlock>,
    range_policy: RangePolicy,
    total_columns: usize,
}

impl DesignBuilder {
    pub fn new(spec: &ModelSpec) -> Result<Self, BasisError> {
        let mut names: Vec<String> = Vec::new();
        let mut resolve = |name: &str| -> usize {
            if let Some(i) = names.iter().position(|n| n == name) {
                i
            } else {
                names.push(name.to_string());
                names.len() - 1
            }
        };
        let mut fixed = Vec::with_capacity(spec.fixed.len());
        for term in &spec.fixed {
            fixed.push(match term {
                FixedTerm::Intercept => None,
                FixedTerm::Linear { predictor } => Some(resolve(predictor)),
            });
        }
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for block in &spec.blocks {
            blocks.push(match block {
                BlockSpec::Spline {
                    predictor, knots, ..
                } => CompiledBlock::Spline {
                    predictor: resolve(predictor),
                    name: predictor.clone(),
                    basis: osullivan_basis(knots)?,
                },
                BlockSpec::RandomIntercept { groups } => CompiledBlock::RandomIntercept {
                    groups: *groups,
                },
            });
        }
        Ok(DesignBuilder {
            predictor_names: names,
            fixed,
            blocks,
            range_policy: spec.range_policy,
            total_columns: spec.total_columns(),
        })
    }

    /// Predictor ordering expected by [`DesignBuilder::row`].
    pub fn predictor_names(&self) -> &[String] {
        &self.predictor_names
    }

    pub fn total_columns(&self) -> usize {
        self.total_columns
    }

    /// Assembles one row of C = [X Z1 Z2].
    pub fn row(&self, predictors: &[f64], group: Option<usize>) -> Result<Vec<f64>, DesignError> {
        if predictors.len() != self.predictor_names.len() {
            return Err(DesignError::PredictorCount {
                got: predictors.len(),
                expected: self.predictor_names.len(),
            });
        }
        for (i, &v) in predictors.iter().enumerate() {
            if !v.is_finite() {
                return Err(DesignError::NonFinite(self.predictor_names[i].clone()));
            }
        }
        let mut c = Vec::with_capacity(self.total_columns);
        for term in &self.fixed {
            c.push(match term {
                None => 1.0,
                Some(idx) => predictors[*idx],
            });
        }
        let mut seen_group = false;
        for block in &self.blocks {
            match block {
                CompiledBlock::Spline {
                    predictor,
                    name,
                    basis,
                } => {
                    let raw = predictors[*predictor];
                    let (lo, hi) = (basis.config.range_lo, basis.config.range_hi);
                    let x = if raw < lo || raw > hi {
                        match self.range_policy {
                            RangePolicy::Clamp => raw.clamp(lo, hi),
                            RangePolicy::Error => {
                                return Err(DesignError::OutOfRange {
                                    name: name.clone(),
                                    value: raw,
                                    lo,
                                    hi,
                                })
                            }
                        }
                    } else {
                        raw
                    };
                    c.extend(basis.evaluate(x).iter());
                }
                CompiledBlock::RandomIntercept { groups } => {
                    seen_group = true;
                    let g = group.ok_or(DesignError::MissingGroup)?;
                    if g >= *groups {
                        return Err(DesignError::UnknownGroup {
                            got: g,
                            groups: *groups,
                        });
                    }
                    let start = c.len();
                    c.resize(start + groups, 0.0);
                    c[start + g] = 1.0;
                }
            }
        }
        if group.is_some() && !seen_group {
            return Err(DesignError::UnexpectedGroup);
        }
        debug_assert_eq!(c.len(), self.total_columns);
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PriorHyperparams;
    use approx::assert_abs_diff_eq;

    #[test]
    fn equidistant_interior_knots() {
        let cfg = KnotConfig {
            range_lo: 0.0,
            range_hi: 1.0,
            num_interior: 3,
        };
        let knots = make_knots(&cfg).unwrap();
        assert_eq!(knots.len(), 5);
        assert_abs_diff_eq!(knots[1], 0.25);
        assert_abs_diff_eq!(knots[2], 0.5);
        assert_abs_diff_eq!(knots[3], 0.75);
    }

    #[test]
    fn degenerate_range_rejected() {
        let cfg = KnotConfig {
            range_lo: 0.0,
            range_hi: 0.0,
            num_interior: 3,
        };
        assert!(matches!(
            make_knots(&cfg),
            Err(BasisError::DegenerateRange(_, _))
        ));
    }

    #[test]
    fn wide_range_spacing() {
        let cfg = KnotConfig {
            range_lo: -3.0,
            range_hi: 3.0,
            num_interior: 24,
        };
        let knots = make_knots(&cfg).unwrap();
        assert_eq!(knots.len(), 26);
        let spacing = 6.0 / 25.0;
        for w in knots.windows(2) {
            assert_abs_diff_eq!(w[1] - w[0], spacing, epsilon = 1e-12);
        }
    }

    #[test]
    fn bsplines_partition_unity() {
        let cfg = KnotConfig {
            range_lo: -1.0,
            range_hi: 2.0,
            num_interior: 7,
        };
        let basis = osullivan_basis(&cfg).unwrap();
        for i in 0..=50 {
            let x = -1.0 + 3.0 * i as f64 / 50.0;
            let vals = bspline_values(&basis.full_knots, x);
            let sum: f64 = vals.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn basis_finite_on_grid() {
        let cfg = KnotConfig {
            range_lo: 0.0,
            range_hi: 1.0,
            num_interior: 22,
        };
        let basis = osullivan_basis(&cfg).unwrap();
        assert_eq!(basis.k, 24);
        for i in 0..200 {
            let x = i as f64 / 199.0;
            let z = basis.evaluate(x);
            assert_eq!(z.len(), 24);
            assert!(z.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn basis_evaluation_deterministic() {
        let cfg = KnotConfig {
            range_lo: 0.2,
            range_hi: 5.7,
            num_interior: 13,
        };
        let a = osullivan_basis(&cfg).unwrap();
        let b = osullivan_basis(&cfg).unwrap();
        for i in 0..40 {
            let x = 0.2 + 5.5 * i as f64 / 39.0;
            let za = a.evaluate(x);
            let zb = b.evaluate(x);
            assert_eq!(za.as_slice(), zb.as_slice());
        }
    }

    /// Quadrature penalty against an independent numeric route: second
    /// derivatives via central finite differences of the basis values,
    /// integrated with a fine Simpson rule.
    #[test]
    fn penalty_matches_finite_difference_integration() {
        let configs = [
            KnotConfig { range_lo: 0.0, range_hi: 1.0, num_interior: 4 },
            KnotConfig { range_lo: -2.0, range_hi: 3.0, num_interior: 6 },
            KnotConfig { range_lo: 0.5, range_hi: 0.9, num_interior: 3 },
            KnotConfig { range_lo: -1.0, range_hi: 1.0, num_interior: 8 },
            KnotConfig { range_lo: 10.0, range_hi: 20.0, num_interior: 5 },
        ];
        for cfg in configs {
            let basis = osullivan_basis(&cfg).unwrap();
            let t = &basis.full_knots;
            let n = t.len() - 4;
            let omega = penalty_matrix(t);

            let span = cfg.range_hi - cfg.range_lo;
            let h = span * 1e-5;
            let d2_at = |x: f64| -> Vec<f64> {
                let fm = bspline_values(t, x - h);
                let f0 = bspline_values(t, x);
                let fp = bspline_values(t, x + h);
                (0..n).map(|i| (fm[i] - 2.0 * f0[i] + fp[i]) / (h * h)).collect()
            };
            // Simpson per inter-knot interval, 16 panels each, staying clear
            // of the knots where the second derivative kinks.
            let mut num = DMatrix::zeros(n, n);
            for a in 0..t.len() - 1 {
                if t[a + 1] <= t[a] {
                    continue;
                }
                let (lo, hi) = (t[a] + 2.0 * h, t[a + 1] - 2.0 * h);
                let panels = 16;
                let step = (hi - lo) / panels as f64;
                for p in 0..panels {
                    let x0 = lo + p as f64 * step;
                    let d0 = d2_at(x0);
                    let dm = d2_at(x0 + 0.5 * step);
                    let d1 = d2_at(x0 + step);
                    for i in 0..n {
                        for j in 0..n {
                            num[(i, j)] += step / 6.0
                                * (d0[i] * d0[j] + 4.0 * dm[i] * dm[j] + d1[i] * d1[j]);
                        }
                    }
                }
            }
            let scale = omega.norm();
            assert!(
                (&omega - &num).norm() / scale < 1e-3,
                "penalty mismatch for {:?}: rel {}",
                cfg,
                (&omega - &num).norm() / scale
            );
        }
    }

    #[test]
    fn one_hot_intercept_segment() {
        let spec = ModelSpec {
            fixed: vec![FixedTerm::Intercept],
            blocks: vec![BlockSpec::RandomIntercept { groups: 3 }],
            priors: PriorHyperparams::default_for(1),
            range_policy: RangePolicy::default(),
        };
        let builder = DesignBuilder::new(&spec).unwrap();
        let c = builder.row(&[], Some(2)).unwrap();
        assert_eq!(c, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            builder.row(&[], Some(3)),
            Err(DesignError::UnknownGroup { got: 3, groups: 3 })
        ));
        assert!(matches!(builder.row(&[], None), Err(DesignError::MissingGroup)));
    }

    #[test]
    fn plain_linear_row() {
        let spec = ModelSpec {
            fixed: vec![
                FixedTerm::Intercept,
                FixedTerm::Linear { predictor: "x".into() },
            ],
            blocks: vec![],
            priors: PriorHyperparams::default_for(0),
            range_policy: RangePolicy::default(),
        };
        let builder = DesignBuilder::new(&spec).unwrap();
        assert_eq!(builder.row(&[0.5], None).unwrap(), vec![1.0, 0.5]);
    }

    #[test]
    fn out_of_range_policy() {
        let mut spec = ModelSpec {
            fixed: vec![FixedTerm::Intercept],
            blocks: vec![BlockSpec::Spline {
                predictor: "x".into(),
                knots: KnotConfig {
                    range_lo: 0.0,
                    range_hi: 1.0,
                    num_interior: 4,
                },
                k: 6,
            }],
            priors: PriorHyperparams::default_for(1),
            range_policy: RangePolicy::Error,
        };
        let strict = DesignBuilder::new(&spec).unwrap();
        assert!(matches!(
            strict.row(&[1.5], None),
            Err(DesignError::OutOfRange { .. })
        ));
        spec.range_policy = RangePolicy::Clamp;
        let lenient = DesignBuilder::new(&spec).unwrap();
        let clamped = lenient.row(&[1.5], None).unwrap();
        let at_edge = lenient.row(&[1.0], None).unwrap();
        assert_eq!(clamped, at_edge);
    }
}
