//! Run configuration, dataset I/O and output documents for the command-line
//! front end.
//!
//! CSV inputs are self-describing: a header row, a `y` column for the
//! response, an optional `group` column holding a non-negative integer
//! factor level, and the remaining columns matched to the model's
//! predictors by name. JSON outputs carry `schema_version: 1`; floats are
//! serialized in the shortest round-trip decimal form, so repeated runs are
//! byte-identical.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mfvb::{CoefficientSummary, CovariancePath, FitConfig, Posterior, QState};
use crate::model::{validate_spec, BlockLayout, ModelSpec};
use crate::runtime::{
    warm_up, Combiner, CombinerMode, HostState, Row, RuntimeError, Snapshot,
};
use crate::spline::DesignBuilder;
use crate::suffstats::DecayConfig;
use crate::synthdata;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path} line {line}: {message}")]
    CsvRow {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("model spec invalid: {0:?}")]
    InvalidSpec(Vec<String>),
    #[error("config invalid: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Fit(#[from] crate::mfvb::FitError),
}

/// Streaming mode of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModeConfig {
    Batch,
    Online,
    Window { width_ticks: u64 },
    Decay { schedule: DecayConfig },
}

/// Built-in data generators for simulated streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    Additive { per_host: usize },
    DriftingLinear,
    DriftingSine,
    DriftingSpline { steps: usize },
}

fn default_hosts() -> usize {
    1
}

fn default_threshold() -> usize {
    1
}

fn default_rel_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            rel_tol: default_rel_tol(),
            max_iter: default_max_iter(),
        }
    }
}

impl FitOptions {
    pub fn to_fit_config(&self) -> FitConfig {
        FitConfig {
            rel_tol: self.rel_tol,
            max_iter: self.max_iter,
            ..FitConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub mode: ModeConfig,
    #[serde(default = "default_hosts")]
    pub hosts: usize,
    #[serde(default = "default_threshold")]
    pub flush_threshold: usize,
    #[serde(default)]
    pub warm_up: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<BlockLayout, ConfigError> {
        let report = validate_spec(&self.model);
        if !report.violations.is_empty() {
            return Err(ConfigError::InvalidSpec(
                report.violations.iter().map(|v| v.to_string()).collect(),
            ));
        }
        if self.hosts == 0 {
            return Err(ConfigError::InvalidConfig("hosts must be >= 1".into()));
        }
        if self.flush_threshold == 0 {
            return Err(ConfigError::InvalidConfig(
                "flush_threshold must be >= 1".into(),
            ));
        }
        if let ModeConfig::Decay { schedule } = &self.mode {
            schedule
                .validate()
                .map_err(|e| ConfigError::InvalidConfig(e.to_string()))?;
        }
        if let ModeConfig::Window { width_ticks } = self.mode {
            if width_ticks == 0 {
                return Err(ConfigError::InvalidConfig(
                    "window width must be >= 1 tick".into(),
                ));
            }
        }
        Ok(report.layout.expect("valid spec has a layout"))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads one CSV dataset. Column order is free; predictors are selected by
/// header name in the order the model declares them.
pub fn read_csv_rows(path: &Path, predictor_names: &[String]) -> Result<Vec<Row>, ConfigError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        index.insert(h, i);
    }
    let y_col = *index.get("y").ok_or_else(|| ConfigError::Parse {
        path: path.to_path_buf(),
        message: "missing required column \"y\"".into(),
    })?;
    let group_col = index.get("group").copied();
    let mut pred_cols = Vec::with_capacity(predictor_names.len());
    for name in predictor_names {
        let col = *index
            .get(name.as_str())
            .ok_or_else(|| ConfigError::Parse {
                path: path.to_path_buf(),
                message: format!("missing predictor column {name:?}"),
            })?;
        pred_cols.push(col);
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| ConfigError::CsvRow {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |col: usize| -> Result<f64, ConfigError> {
            let raw = record.get(col).ok_or_else(|| ConfigError::CsvRow {
                path: path.to_path_buf(),
                line,
                message: format!("missing field {col}"),
            })?;
            raw.trim().parse().map_err(|_| ConfigError::CsvRow {
                path: path.to_path_buf(),
                line,
                message: format!("not a number: {raw:?}"),
            })
        };
        let y = field(y_col)?;
        let predictors = pred_cols
            .iter()
            .map(|&c| field(c))
            .collect::<Result<Vec<f64>, _>>()?;
        let group = match group_col {
            Some(c) => {
                let raw = record.get(c).unwrap_or("").trim();
                if raw.is_empty() {
                    None
                } else {
                    Some(raw.parse::<usize>().map_err(|_| ConfigError::CsvRow {
                        path: path.to_path_buf(),
                        line,
                        message: format!("group level must be a non-negative integer: {raw:?}"),
                    })?)
                }
            }
            None => None,
        };
        rows.push(Row {
            predictors,
            y,
            group,
        });
    }
    Ok(rows)
}

/// Posterior output document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDoc {
    pub schema_version: u32,
    pub converged: bool,
    pub iterations: usize,
    pub n: f64,
    pub lower_bound: Option<f64>,
    pub coefficients: Vec<CoefficientSummary>,
    pub block_precisions: Vec<f64>,
    pub noise_precision: f64,
    pub effective_config: RunConfig,
}

pub fn posterior_doc(
    post: &Posterior,
    n: f64,
    config: &RunConfig,
    layout: &BlockLayout,
) -> PosteriorDoc {
    PosteriorDoc {
        schema_version: SCHEMA_VERSION,
        converged: post.converged,
        iterations: post.iterations,
        n,
        lower_bound: post.trace.last().copied(),
        coefficients: crate::mfvb::coefficient_table(&post.state, &config.model, layout),
        block_precisions: post.state.mu_inv_sigu.clone(),
        noise_precision: post.state.mu_inv_sigeps,
        effective_config: config.clone(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<(), ConfigError> {
    let text = serde_json::to_string_pretty(doc).expect("document serializes");
    fs::write(path, text + "\n").map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the combiner trace: one row per snapshot with the lower bound,
/// fixed-effect summaries and block precisions.
pub fn write_trace(path: &Path, snapshots: &[Snapshot]) -> Result<(), ConfigError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut header = vec![
        "tick".to_string(),
        "mode".to_string(),
        "n".to_string(),
        "gamma".to_string(),
        "lower_bound".to_string(),
    ];
    if let Some(first) = snapshots.first() {
        for c in &first.coefficients {
            header.push(format!("{}_mean", c.name));
            header.push(format!("{}_lo", c.name));
            header.push(format!("{}_hi", c.name));
        }
        for l in 0..first.block_precisions.len() {
            header.push(format!("block_{l}_precision"));
        }
    }
    let fail = |e: csv::Error| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    writer.write_record(&header).map_err(fail)?;
    for s in snapshots {
        let mut rec = vec![
            s.tick.to_string(),
            s.mode.to_string(),
            format!("{:?}", s.n),
            format!("{:?}", s.gamma),
            format!("{:?}", s.lower_bound),
        ];
        for c in &s.coefficients {
            rec.push(format!("{:?}", c.mean));
            rec.push(format!("{:?}", c.lo95));
            rec.push(format!("{:?}", c.hi95));
        }
        for p in &s.block_precisions {
            rec.push(format!("{p:?}"));
        }
        writer.write_record(&rec).map_err(fail)?;
    }
    writer.flush().map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Materializes the configured generator into per-host streams plus a
/// warm-up block. The warm-up block uses a seed offset so it never overlaps
/// the host streams.
pub fn generate_streams(config: &RunConfig) -> Result<(Vec<Vec<Row>>, Vec<Row>), ConfigError> {
    let gen = config
        .generator
        .as_ref()
        .ok_or_else(|| ConfigError::InvalidConfig("no generator configured".into()))?;
    let warm_seed = config.seed.wrapping_add(0x5eed);
    let (streams, warm) = match gen {
        GeneratorConfig::Additive { per_host } => (
            synthdata::gen_additive_stream(config.seed, config.hosts, *per_host),
            if config.warm_up > 0 {
                synthdata::gen_additive_stream(warm_seed, 1, config.warm_up).remove(0)
            } else {
                Vec::new()
            },
        ),
        GeneratorConfig::DriftingLinear => {
            if config.hosts != 1 {
                return Err(ConfigError::InvalidConfig(
                    "drifting_linear generates a single stream; set hosts = 1".into(),
                ));
            }
            (vec![synthdata::gen_drifting_linear(config.seed)], Vec::new())
        }
        GeneratorConfig::DriftingSine => {
            if config.hosts != 1 {
                return Err(ConfigError::InvalidConfig(
                    "drifting_sine generates a single stream; set hosts = 1".into(),
                ));
            }
            (vec![synthdata::gen_drifting_sine(config.seed)], Vec::new())
        }
        GeneratorConfig::DriftingSpline { steps } => {
            let anchors = synthdata::default_spline_anchors();
            (
                synthdata::gen_drifting_spline(config.seed, config.hosts, *steps, &anchors),
                if config.warm_up > 0 {
                    synthdata::gen_drifting_spline(warm_seed, 1, config.warm_up.next_multiple_of(8), &anchors)
                        .remove(0)
                        .into_iter()
                        .take(config.warm_up)
                        .collect()
                } else {
                    Vec::new()
                },
            )
        }
    };
    Ok((streams, warm))
}

/// Distributes a single row stream round-robin over the configured hosts.
pub fn split_round_robin(rows: Vec<Row>, hosts: usize) -> Vec<Vec<Row>> {
    let mut streams: Vec<Vec<Row>> = (0..hosts).map(|_| Vec::new()).collect();
    for (i, row) in rows.into_iter().enumerate() {
        streams[i % hosts].push(row);
    }
    streams
}

/// Drives per-host streams through hosts and the combiner tick by tick.
/// Each tick every host ingests its next pending row; the combiner
/// processes the tick's drained flushes in host order and snapshots.
pub fn run_stream(
    config: &RunConfig,
    layout: &BlockLayout,
    streams: &[Vec<Row>],
    warm_rows: &[Row],
) -> Result<(Vec<Snapshot>, Combiner, Vec<HostState>), ConfigError> {
    let builder = DesignBuilder::new(&config.model)
        .map_err(|e| ConfigError::InvalidConfig(e.to_string()))?;
    let p = layout.total_columns();
    let mode = match &config.mode {
        ModeConfig::Batch => {
            return Err(ConfigError::InvalidConfig(
                "batch mode is not a streaming mode".into(),
            ))
        }
        ModeConfig::Online => CombinerMode::Online,
        ModeConfig::Window { width_ticks } => CombinerMode::Window {
            width_ticks: *width_ticks,
        },
        ModeConfig::Decay { schedule } => CombinerMode::Decay(*schedule),
    };
    let mut combiner = Combiner::new(
        config.model.clone(),
        layout.clone(),
        mode,
        CovariancePath::Auto,
    );
    let mut hosts: Vec<HostState> = (0..streams.len())
        .map(|i| HostState::new(i, p, config.flush_threshold, true))
        .collect();
    if !warm_rows.is_empty() {
        let fit_cfg = config.fit.to_fit_config();
        let (state, warm_stats) = warm_up(warm_rows, &builder, &config.model, layout, &fit_cfg)?;
        combiner.warm_start(&warm_stats, state)?;
        for h in &mut hosts {
            h.seed_local(&warm_stats)?;
        }
    }
    let ticks = streams.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut snapshots = Vec::new();
    for tick in 0..ticks as u64 {
        let mut events = Vec::new();
        for (host, stream) in hosts.iter_mut().zip(streams) {
            if let Some(row) = stream.get(tick as usize) {
                if let Some(ev) = host.step(&builder, row, tick)? {
                    events.push(ev);
                }
            }
        }
        let window_needs_tick = matches!(config.mode, ModeConfig::Window { .. });
        if !events.is_empty() || window_needs_tick {
            if events.is_empty() && matches!(config.mode, ModeConfig::Decay { .. }) {
                continue;
            }
            snapshots.push(combiner.step(&events, tick)?);
        }
    }
    Ok((snapshots, combiner, hosts))
}

/// Fits the posterior for the variational state held by a combiner or host
/// by running the batch loop from that state's statistics.
pub fn fit_stats(
    stats: &crate::suffstats::SufficientStats,
    config: &RunConfig,
    layout: &BlockLayout,
) -> Result<Posterior, ConfigError> {
    let fit_cfg = config.fit.to_fit_config();
    Ok(crate::mfvb::fit(
        stats,
        &config.model,
        layout,
        QState::init(&config.model, layout),
        &fit_cfg,
    )?)
}
