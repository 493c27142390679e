//! Seeded generators for the synthetic experiments: the nine-host additive
//! stream, the piecewise linear-regression drift, the drifting sine, and the
//! drifting spline-truth stream. All generators are pure functions of the
//! seed; per-host randomness uses distinct ChaCha streams (host i reads
//! stream i of the seeded generator), so host outputs are mutually
//! independent and individually reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::runtime::Row;
use crate::spline::{osullivan_basis, KnotConfig, SplineBasis};

/// Standard normal cdf by the Abramowitz-Stegun 26.2.17 rational
/// approximation; absolute error below 7.5e-8.
pub fn normal_cdf(x: f64) -> f64 {
    let ax = x.abs();
    let t = 1.0 / (1.0 + 0.2316419 * ax);
    let poly = t
        * (0.319381530
            + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
    let pdf = (-0.5 * ax * ax).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let upper = pdf * poly;
    if x >= 0.0 {
        1.0 - upper
    } else {
        upper
    }
}

/// Piecewise parameter schedule: segments of (parameters, sample count).
#[derive(Debug, Clone, PartialEq)]
pub enum Interpolation {
    Step,
    Linear,
}

#[derive(Debug, Clone)]
pub struct DriftSchedule {
    pub segments: Vec<(Vec<f64>, usize)>,
    pub interpolation: Interpolation,
}

impl DriftSchedule {
    pub fn new(segments: Vec<(Vec<f64>, usize)>, interpolation: Interpolation) -> Self {
        assert!(!segments.is_empty());
        let dim = segments[0].0.len();
        for (params, count) in &segments {
            assert!(*count >= 1);
            assert_eq!(params.len(), dim);
        }
        DriftSchedule {
            segments,
            interpolation,
        }
    }

    pub fn total(&self) -> usize {
        self.segments.iter().map(|(_, c)| c).sum()
    }

    /// Parameter vector in force at global sample index i. Linear
    /// interpolation moves from a segment's parameters at its first sample
    /// towards the next segment's parameters at that segment's first sample.
    pub fn value_at(&self, i: usize) -> Vec<f64> {
        let mut start = 0usize;
        for (k, (params, count)) in self.segments.iter().enumerate() {
            if i < start + count {
                match self.interpolation {
                    Interpolation::Step => return params.clone(),
                    Interpolation::Linear => {
                        let next = match self.segments.get(k + 1) {
                            Some((p, _)) => p,
                            None => return params.clone(),
                        };
                        let frac = (i - start) as f64 / *count as f64;
                        return params
                            .iter()
                            .zip(next.iter())
                            .map(|(a, b)| a + frac * (b - a))
                            .collect();
                    }
                }
            }
            start += count;
        }
        self.segments.last().unwrap().0.clone()
    }
}

fn host_rng(seed: u64, host: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(host as u64);
    rng
}

/// True additive-model component functions.
pub fn f4(x: f64) -> f64 {
    2.0 * normal_cdf(6.0 * x - 3.0)
}

pub fn f5(x: f64) -> f64 {
    (3.0 * std::f64::consts::PI * x.powi(3)).sin()
}

pub fn f6(x: f64) -> f64 {
    (4.0 * std::f64::consts::PI * x).cos()
}

pub const ADDITIVE_BETA: [f64; 3] = [0.2, -0.3, 0.6];

/// True mean of the additive model at a predictor vector.
pub fn additive_truth(x: &[f64]) -> f64 {
    ADDITIVE_BETA[0] * x[0] + ADDITIVE_BETA[1] * x[1] + ADDITIVE_BETA[2] * x[2]
        + f4(x[3])
        + f5(x[4])
        + f6(x[5])
}

/// Nine-host additive stream: three Bernoulli(1/2) predictors, three
/// standard-normal predictors, unit noise variance.
pub fn gen_additive_stream(seed: u64, hosts: usize, per_host: usize) -> Vec<Vec<Row>> {
    assert!(hosts >= 1);
    (0..hosts)
        .map(|h| {
            let mut rng = host_rng(seed, h);
            (0..per_host)
                .map(|_| {
                    let mut x = vec![0.0; 6];
                    for v in x.iter_mut().take(3) {
                        *v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                    }
                    for v in x.iter_mut().skip(3) {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    let y = additive_truth(&x) + eps;
                    Row {
                        predictors: x,
                        y,
                        group: None,
                    }
                })
                .collect()
        })
        .collect()
}

pub fn linear_drift_schedule() -> DriftSchedule {
    DriftSchedule::new(
        vec![
            (vec![4.0, 3.0, 0.350], 300),
            (vec![3.665, 2.72, 0.325], 500),
            (vec![3.33, 2.44, 0.300], 400),
        ],
        Interpolation::Step,
    )
}

/// Simple linear regression with stepwise-drifting intercept, slope and
/// noise variance; 1200 rows.
pub fn gen_drifting_linear(seed: u64) -> Vec<Row> {
    let schedule = linear_drift_schedule();
    let mut rng = host_rng(seed, 0);
    (0..schedule.total())
        .map(|i| {
            let p = schedule.value_at(i);
            let x: f64 = rng.gen();
            let eps: f64 = StandardNormal.sample(&mut rng);
            Row {
                predictors: vec![x],
                y: p[0] + p[1] * x + p[2].sqrt() * eps,
                group: None,
            }
        })
        .collect()
}

pub fn sine_drift_schedule() -> DriftSchedule {
    let segments = (0..10)
        .map(|j| {
            let frac = j as f64 / 9.0;
            (
                vec![
                    4.0,
                    0.5 + frac * 2.5,
                    frac * 5.0,
                    0.1 + frac * 0.3,
                ],
                600,
            )
        })
        .collect();
    DriftSchedule::new(segments, Interpolation::Step)
}

/// Sine mean with drifting amplitude, phase and noise variance; 6000 rows.
/// Parameters per row: [alpha0, alpha1, alpha2, sigma_sq].
pub fn gen_drifting_sine(seed: u64) -> Vec<Row> {
    let schedule = sine_drift_schedule();
    let mut rng = host_rng(seed, 0);
    (0..schedule.total())
        .map(|i| {
            let p = schedule.value_at(i);
            let x: f64 = rng.gen();
            let eps: f64 = StandardNormal.sample(&mut rng);
            Row {
                predictors: vec![x],
                y: sine_truth(&p, x) + p[3].sqrt() * eps,
                group: None,
            }
        })
        .collect()
}

pub fn sine_truth(params: &[f64], x: f64) -> f64 {
    params[0] + params[1] * (6.0 * std::f64::consts::PI * x + params[2]).sin()
}

/// Truth basis for the drifting-spline stream: 24 columns on [0, 1].
pub fn spline_truth_basis() -> SplineBasis {
    osullivan_basis(&KnotConfig::with_columns(0.0, 1.0, 24)).unwrap()
}

pub const SPLINE_TRUTH_COEFS: usize = 26;
pub const SPLINE_ANCHOR_SEGMENTS: usize = 8;
pub const SPLINE_NOISE_VAR: f64 = 0.25;

/// Draws anchor coefficient vectors [beta0, beta1, u_1..u_24] from a seeded
/// prior: intercept and slope standard normal, spline coefficients
/// N(0, 0.25^2). The checked-in anchor file is produced by this function.
pub fn anchors_from_seed(seed: u64, count: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut v = Vec::with_capacity(SPLINE_TRUTH_COEFS);
            for _ in 0..2 {
                v.push(StandardNormal.sample(&mut rng));
            }
            for _ in 0..24 {
                let z: f64 = StandardNormal.sample(&mut rng);
                v.push(0.25 * z);
            }
            v
        })
        .collect()
}

/// The anchors used by the drifting-spline replication, stored as data.
pub fn default_spline_anchors() -> Vec<Vec<f64>> {
    serde_json::from_str(include_str!("../data/spline_anchors.json"))
        .expect("bundled anchor file parses")
}

/// Coefficient vector in force at step t of a stream with the given total,
/// linearly interpolated across eight equal segments.
pub fn spline_truth_at(anchors: &[Vec<f64>], step: usize, steps: usize) -> Vec<f64> {
    assert_eq!(anchors.len(), SPLINE_ANCHOR_SEGMENTS + 1);
    let seg_len = steps / SPLINE_ANCHOR_SEGMENTS;
    let seg = (step / seg_len).min(SPLINE_ANCHOR_SEGMENTS - 1);
    let frac = (step - seg * seg_len) as f64 / seg_len as f64;
    anchors[seg]
        .iter()
        .zip(anchors[seg + 1].iter())
        .map(|(a, b)| a + frac * (b - a))
        .collect()
}

/// True mean at x under a coefficient vector [beta0, beta1, u_1..u_24].
pub fn spline_truth_mean(coefs: &[f64], basis: &SplineBasis, x: f64) -> f64 {
    let z = basis.evaluate(x);
    coefs[0] + coefs[1] * x + z.iter().zip(&coefs[2..]).map(|(zi, ui)| zi * ui).sum::<f64>()
}

/// Per-host drifting-spline streams: B hosts, one sample per host per step,
/// truth linearly interpolated between the anchors.
pub fn gen_drifting_spline(
    seed: u64,
    hosts: usize,
    steps: usize,
    anchors: &[Vec<f64>],
) -> Vec<Vec<Row>> {
    assert!(hosts >= 1);
    assert!(steps % SPLINE_ANCHOR_SEGMENTS == 0);
    let basis = spline_truth_basis();
    (0..hosts)
        .map(|h| {
            let mut rng = host_rng(seed, h);
            (0..steps)
                .map(|t| {
                    let coefs = spline_truth_at(anchors, t, steps);
                    let x: f64 = rng.gen();
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    Row {
                        predictors: vec![x],
                        y: spline_truth_mean(&coefs, &basis, x) + SPLINE_NOISE_VAR.sqrt() * eps,
                        group: None,
                    }
                })
                .collect()
        })
        .collect()
}
