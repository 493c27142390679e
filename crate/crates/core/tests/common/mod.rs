//! Shared fixtures for the integration suites. Each test target uses its
//! own subset, so the unused lint is off for the whole module.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use streamvb::model::{
    validate_spec, BlockLayout, BlockSpec, FixedTerm, ModelSpec, PriorHyperparams, RangePolicy,
};
use streamvb::runtime::Row;
use streamvb::spline::{DesignBuilder, KnotConfig};
use streamvb::suffstats::SufficientStats;

pub fn layout_of(spec: &ModelSpec) -> BlockLayout {
    let report = validate_spec(spec);
    assert!(report.violations.is_empty(), "{:?}", report.violations);
    report.layout.unwrap()
}

/// Intercept + slope on x, nothing else.
pub fn linear_spec() -> ModelSpec {
    ModelSpec {
        fixed: vec![
            FixedTerm::Intercept,
            FixedTerm::Linear { predictor: "x".into() },
        ],
        blocks: vec![],
        priors: PriorHyperparams::default_for(0),
        range_policy: RangePolicy::default(),
    }
}

/// Intercept + linear + one K-column spline block on x over [0, 1].
pub fn spline_spec(k: usize) -> ModelSpec {
    ModelSpec {
        fixed: vec![
            FixedTerm::Intercept,
            FixedTerm::Linear { predictor: "x".into() },
        ],
        blocks: vec![BlockSpec::Spline {
            predictor: "x".into(),
            knots: KnotConfig::with_columns(0.0, 1.0, k),
            k,
        }],
        priors: PriorHyperparams::default_for(1),
        range_policy: RangePolicy::default(),
    }
}

/// Intercept + linear + spline on s + trailing random intercept.
pub fn grouped_spec(k_spline: usize, groups: usize) -> ModelSpec {
    ModelSpec {
        fixed: vec![
            FixedTerm::Intercept,
            FixedTerm::Linear { predictor: "x".into() },
        ],
        blocks: vec![
            BlockSpec::Spline {
                predictor: "s".into(),
                knots: KnotConfig::with_columns(0.0, 1.0, k_spline),
                k: k_spline,
            },
            BlockSpec::RandomIntercept { groups },
        ],
        priors: PriorHyperparams::default_for(2),
        range_policy: RangePolicy::default(),
    }
}

/// Rows for the grouped spec: nonlinear signal plus group effects plus
/// unit-scale noise.
pub fn grouped_rows(seed: u64, n: usize, groups: usize) -> Vec<Row> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let effects: Vec<f64> = (0..groups)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.8 * z
        })
        .collect();
    (0..n)
        .map(|_| {
            let x: f64 = rng.gen();
            let s: f64 = rng.gen();
            let g = rng.gen_range(0..groups);
            let eps: f64 = StandardNormal.sample(&mut rng);
            Row {
                predictors: vec![x, s],
                y: 1.0 + 0.5 * x + (2.5 * std::f64::consts::PI * s).sin() + effects[g]
                    + 0.6 * eps,
                group: Some(g),
            }
        })
        .collect()
}

/// Rows for the spline spec: smooth signal plus noise.
pub fn smooth_rows(seed: u64, n: usize) -> Vec<Row> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: f64 = rng.gen();
            let eps: f64 = StandardNormal.sample(&mut rng);
            Row {
                predictors: vec![x],
                y: 0.5 + 2.0 * x + (3.0 * std::f64::consts::PI * x * x).cos() + 0.5 * eps,
                group: None,
            }
        })
        .collect()
}

pub fn stats_from_rows(spec: &ModelSpec, layout: &BlockLayout, rows: &[Row]) -> SufficientStats {
    let builder = DesignBuilder::new(spec).unwrap();
    let mut stats = SufficientStats::zeros(layout.total_columns());
    for row in rows {
        let c = builder.row(&row.predictors, row.group).unwrap();
        stats.accumulate(&c, row.y).unwrap();
    }
    stats
}

pub fn rel_frobenius(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
