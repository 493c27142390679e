//! A small map/reduce emulation over row partitions. Mappers turn raw rows
//! into keyed statistic emissions, an optional combiner pre-aggregates per
//! partition, reducers sum per key, and the fit runs on the reassembled
//! totals.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::mfvb::{self, FitConfig, FitError, Posterior, QState};
use crate::model::{BlockLayout, ModelSpec};
use crate::par;
use crate::runtime::Row;
use crate::spline::{DesignBuilder, DesignError};
use crate::suffstats::{StatsError, SufficientStats};

/// Emission keys, fixed by the job contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatKey {
    GramMatrix = 1,
    Projection = 2,
    SquaredNorm = 3,
    Count = 4,
}

/// A keyed emission payload. Matrix and vector payloads carry their data
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum StatValue {
    Matrix(DMatrix<f64>),
    Vector(DVector<f64>),
    Scalar(f64),
}

pub type Emission = (StatKey, StatValue);

#[derive(Error, Debug)]
pub enum JobError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Basis(#[from] crate::spline::BasisError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("no partitions supplied")]
    NoPartitions,
    #[error("emission under key {key:?} has payload of the wrong shape")]
    ShapeMismatch { key: StatKey },
}

/// One mapper input: a slice of the dataset.
#[derive(Debug, Clone)]
pub struct Partition {
    pub rows: Vec<Row>,
}

/// Maps one partition to its four keyed emissions.
pub fn map_fn(partition: &Partition, builder: &DesignBuilder, p: usize) -> Result<Vec<Emission>, JobError> {
    let mut stats = SufficientStats::zeros(p);
    for row in &partition.rows {
        let c = builder.row(&row.predictors, row.group)?;
        stats.accumulate(&c, row.y)?;
    }
    Ok(emit(&stats))
}

fn emit(stats: &SufficientStats) -> Vec<Emission> {
    vec![
        (StatKey::GramMatrix, StatValue::Matrix(stats.ctc.clone())),
        (StatKey::Projection, StatValue::Vector(stats.cty.clone())),
        (StatKey::SquaredNorm, StatValue::Scalar(stats.yty)),
        (StatKey::Count, StatValue::Scalar(stats.n)),
    ]
}

/// Sums all emissions sharing a key. The combiner stage reuses this
/// function unchanged, so combining is exactly a local reduce.
pub fn reduce_fn(emissions: &[Emission], p: usize) -> Result<SufficientStats, JobError> {
    let mut stats = SufficientStats::zeros(p);
    for (key, value) in emissions {
        match (key, value) {
            (StatKey::GramMatrix, StatValue::Matrix(m)) if m.nrows() == p && m.ncols() == p => {
                stats.ctc += m;
            }
            (StatKey::Projection, StatValue::Vector(v)) if v.len() == p => {
                stats.cty += v;
            }
            (StatKey::SquaredNorm, StatValue::Scalar(s)) => {
                stats.yty += s;
            }
            (StatKey::Count, StatValue::Scalar(s)) => {
                stats.n += s;
            }
            (key, _) => return Err(JobError::ShapeMismatch { key: *key }),
        }
    }
    Ok(stats)
}

/// Runs the full job: parallel map, optional per-partition combiner pass,
/// reduce, batch fit.
pub fn run_job(
    partitions: &[Partition],
    spec: &ModelSpec,
    layout: &BlockLayout,
    cfg: &FitConfig,
    use_combiner: bool,
) -> Result<Posterior, JobError> {
    let stats = job_stats(partitions, spec, layout, use_combiner, false)?;
    Ok(mfvb::fit(&stats, spec, layout, QState::init(spec, layout), cfg)?)
}

/// The shuffle-and-reduce half without the fit, with a switch for the
/// sequential map phase (used by the benchmarks).
pub fn job_stats(
    partitions: &[Partition],
    spec: &ModelSpec,
    layout: &BlockLayout,
    use_combiner: bool,
    sequential: bool,
) -> Result<SufficientStats, JobError> {
    if partitions.is_empty() {
        return Err(JobError::NoPartitions);
    }
    let builder = DesignBuilder::new(spec)?;
    let p = layout.total_columns();
    let mapper = |part: &Partition| -> Result<Vec<Emission>, JobError> {
        let emissions = map_fn(part, &builder, p)?;
        if use_combiner {
            // Combiner stage: locally reduce the partition's emissions and
            // re-emit the condensed set.
            let local = reduce_fn(&emissions, p)?;
            Ok(emit(&local))
        } else {
            Ok(emissions)
        }
    };
    let mapped: Vec<Result<Vec<Emission>, JobError>> = if sequential {
        par::map_collect_seq(partitions, mapper)
    } else {
        par::map_collect(partitions, mapper)
    };
    let mut all = Vec::new();
    for m in mapped {
        all.extend(m?);
    }
    reduce_fn(&all, p)
}
