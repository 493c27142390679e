//! Model specification: fixed-effect layout, random-coefficient blocks and
//! prior hyperparameters, plus the derived column layout of C = [X Z].

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spline::KnotConfig;

/// Default prior variance of the fixed effects.
pub const DEFAULT_SIGMA_BETA_SQ: f64 = 1e8;
/// Default Half-Cauchy scale for the error and block standard deviations.
pub const DEFAULT_HALF_CAUCHY_SCALE: f64 = 1e5;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("model must declare at least one fixed-effect column")]
    NoFixedEffects,
    #[error("block {0} is empty (K must be >= 1)")]
    EmptyBlock(usize),
    #[error("random-intercept block must be the last block (found at position {0} of {1})")]
    InterceptNotLast(usize, usize),
    #[error("at most one random-intercept block is supported")]
    MultipleInterceptBlocks,
    #[error("hyperparameter {name} must be strictly positive and finite, got {value}")]
    BadHyperparameter { name: &'static str, value: f64 },
    #[error("A_u has {got} entries but the model declares {expected} blocks")]
    HalfCauchyScaleCount { got: usize, expected: usize },
    #[error("spline block {block}: declared K={declared} but knot config yields K={derived}")]
    SplineColumnMismatch {
        block: usize,
        declared: usize,
        derived: usize,
    },
    #[error("spline block {block}: {source}")]
    BadKnots {
        block: usize,
        source: crate::spline::BasisError,
    },
    #[error("duplicate predictor name '{0}'")]
    DuplicatePredictor(String),
    #[error("basis kind '{0}' is not supported")]
    UnsupportedBasis(String),
}

/// Prior hyperparameters of the Gaussian mixed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorHyperparams {
    /// Prior variance of each fixed-effect coefficient.
    pub sigma_beta_sq: f64,
    /// Half-Cauchy scale of the error standard deviation.
    pub a_eps: f64,
    /// Half-Cauchy scales of the block standard deviations, one per block.
    pub a_u: Vec<f64>,
}

impl PriorHyperparams {
    /// Weakly informative default hyperparameters for a model with `r` blocks.
    pub fn default_for(r: usize) -> Self {
        PriorHyperparams {
            sigma_beta_sq: DEFAULT_SIGMA_BETA_SQ,
            a_eps: DEFAULT_HALF_CAUCHY_SCALE,
            a_u: vec![DEFAULT_HALF_CAUCHY_SCALE; r],
        }
    }
}

/// One fixed-effect column of X.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FixedTerm {
    Intercept,
    Linear { predictor: String },
}

impl FixedTerm {
    pub fn name(&self) -> String {
        match self {
            FixedTerm::Intercept => "(intercept)".to_string(),
            FixedTerm::Linear { predictor } => predictor.clone(),
        }
    }
}

/// One random-coefficient block of Z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    /// Penalized spline columns for one predictor.
    Spline {
        predictor: String,
        knots: KnotConfig,
        k: usize,
    },
    /// One-hot group indicators sharing a single variance.
    RandomIntercept { groups: usize },
}

impl BlockSpec {
    pub fn k(&self) -> usize {
        match self {
            BlockSpec::Spline { k, .. } => *k,
            BlockSpec::RandomIntercept { groups } => *groups,
        }
    }
}

/// Policy for spline predictors observed outside their declared range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangePolicy {
    /// Clamp the value to the declared range (streaming default).
    #[default]
    Clamp,
    /// Reject the row.
    Error,
}

/// Full model specification: X columns, Z blocks and priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub fixed: Vec<FixedTerm>,
    pub blocks: Vec<BlockSpec>,
    pub priors: PriorHyperparams,
    #[serde(default)]
    pub range_policy: RangePolicy,
}

impl ModelSpec {
    /// Number of fixed-effect columns.
    pub fn p(&self) -> usize {
        self.fixed.len()
    }

    /// Number of random-coefficient blocks.
    pub fn r(&self) -> usize {
        self.blocks.len()
    }

    /// Total number of columns of C = [X Z].
    pub fn total_columns(&self) -> usize {
        self.p() + self.blocks.iter().map(|b| b.k()).sum::<usize>()
    }

    /// Whether the trailing block is a random intercept.
    pub fn has_intercept_block(&self) -> bool {
        matches!(self.blocks.last(), Some(BlockSpec::RandomIntercept { .. }))
    }
}

/// Column ranges of the combined design matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    /// Columns of X.
    pub x: Range<usize>,
    /// Columns of each Z block, in declaration order.
    pub blocks: Vec<Range<usize>>,
    /// Index into `blocks` of the trailing random-intercept block, if any.
    pub intercept_block: Option<usize>,
}

impl BlockLayout {
    pub fn total_columns(&self) -> usize {
        self.blocks.last().map_or(self.x.end, |b| b.end)
    }

    /// Columns of the non-intercept part [X Z₁] used by the fast path.
    pub fn head_columns(&self) -> usize {
        match self.intercept_block {
            Some(i) => self.blocks[i].start,
            None => self.total_columns(),
        }
    }
}

/// Outcome of model validation: either a layout or the list of violations.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub layout: Option<BlockLayout>,
    pub violations: Vec<ModelError>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks a model specification and derives the column layout.
pub fn validate_spec(spec: &ModelSpec) -> ValidationReport {
    let mut violations = Vec::new();

    if spec.fixed.is_empty() {
        violations.push(ModelError::NoFixedEffects);
    }
    let mut seen = std::collections::HashSet::new();
    for term in &spec.fixed {
        if let FixedTerm::Linear { predictor } = term {
            if !seen.insert(predictor.clone()) {
                violations.push(ModelError::DuplicatePredictor(predictor.clone()));
            }
        }
    }

    let r = spec.blocks.len();
    let mut intercept_positions = Vec::new();
    for (i, block) in spec.blocks.iter().enumerate() {
        if block.k() == 0 {
            violations.push(ModelError::EmptyBlock(i));
        }
        match block {
            BlockSpec::RandomIntercept { .. } => intercept_positions.push(i),
            BlockSpec::Spline { knots, k, .. } => {
                match knots.validate() {
                    Ok(()) => {
                        let derived = knots.basis_columns();
                        if derived != *k {
                            violations.push(ModelError::SplineColumnMismatch {
                                block: i,
                                declared: *k,
                                derived,
                            });
                        }
                    }
                    Err(e) => violations.push(ModelError::BadKnots { block: i, source: e }),
                }
            }
        }
    }
    if intercept_positions.len() > 1 {
        violations.push(ModelError::MultipleInterceptBlocks);
    }
    if let Some(&pos) = intercept_positions.first() {
        if pos + 1 != r {
            violations.push(ModelError::InterceptNotLast(pos, r));
        }
    }

    for (name, value) in [
        ("sigma_beta_sq", spec.priors.sigma_beta_sq),
        ("A_eps", spec.priors.a_eps),
    ] {
        if !(value.is_finite() && value > 0.0) {
            violations.push(ModelError::BadHyperparameter { name, value });
        }
    }
    if spec.priors.a_u.len() != r {
        violations.push(ModelError::HalfCauchyScaleCount {
            got: spec.priors.a_u.len(),
            expected: r,
        });
    }
    for &value in &spec.priors.a_u {
        if !(value.is_finite() && value > 0.0) {
            violations.push(ModelError::BadHyperparameter { name: "A_u", value });
        }
    }

    let layout = if violations.is_empty() {
        Some(derive_layout(spec))
    } else {
        None
    };
    ValidationReport { layout, violations }
}

fn derive_layout(spec: &ModelSpec) -> BlockLayout {
    let p = spec.p();
    let mut cursor = p;
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    let mut intercept_block = None;
    for (i, block) in spec.blocks.iter().enumerate() {
        let k = block.k();
        blocks.push(cursor..cursor + k);
        if matches!(block, BlockSpec::RandomIntercept { .. }) {
            intercept_block = Some(i);
        }
        cursor += k;
    }
    BlockLayout {
        x: 0..p,
        blocks,
        intercept_block,
    }
}
