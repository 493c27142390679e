use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use streamvb::config::{
    self, fit_stats, generate_streams, load_config, posterior_doc, read_csv_rows, run_stream,
    split_round_robin, write_json, write_trace, ConfigError, ModeConfig, RunConfig,
};
use streamvb::mapreduce::{run_job, Partition};
use streamvb::mfvb;
use streamvb::model::BlockLayout;
use streamvb::secure::secure_merge;
use streamvb::spline::DesignBuilder;
use streamvb::suffstats::SufficientStats;

#[derive(Parser)]
#[command(name = "streamvb", about = "Streaming variational semiparametric regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one converged posterior on pooled CSV inputs.
    FitBatch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Input CSV files; statistics are pooled across all of them.
        inputs: Vec<PathBuf>,
    },
    /// Simulate hosts and a combiner over generated or file-based streams.
    SimulateStream {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the mode kind from the config (window/decay details
        /// still come from the config).
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Optional CSV input distributed round-robin over the hosts;
        /// otherwise the config's generator is used.
        input: Option<PathBuf>,
    },
    /// Fit via keyed map/reduce over partition files.
    Mapreduce {
        #[arg(long)]
        config: PathBuf,
        /// Glob over partition CSV files ('*' wildcard in the file name).
        #[arg(long)]
        partitions: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_combine_stage: bool,
    },
    /// Pool per-party statistics by masked ring summation, then fit.
    SecureSumDemo {
        #[arg(long)]
        config: PathBuf,
        /// Glob over party CSV files; needs more than two matches.
        #[arg(long)]
        parties: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    };
    ExitCode::from(code)
}

fn init_threads() {
    #[cfg(feature = "parallel")]
    if let Ok(raw) = std::env::var("STREAMVB_THREADS") {
        if let Ok(n) = raw.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn exit_code_for(err: &ConfigError) -> u8 {
    match err {
        ConfigError::InvalidSpec(_) | ConfigError::InvalidConfig(_) => 2,
        _ => 1,
    }
}

fn load_validated(path: &Path) -> Result<(RunConfig, BlockLayout), ConfigError> {
    let config = load_config(path)?;
    let layout = config.validate()?;
    Ok((config, layout))
}

fn read_inputs(
    config: &RunConfig,
    paths: &[PathBuf],
) -> Result<Vec<Vec<streamvb::runtime::Row>>, ConfigError> {
    let builder =
        DesignBuilder::new(&config.model).map_err(|e| ConfigError::InvalidConfig(e.to_string()))?;
    let names: Vec<String> = builder.predictor_names().to_vec();
    paths.iter().map(|p| read_csv_rows(p, &names)).collect()
}

fn stats_of(
    config: &RunConfig,
    layout: &BlockLayout,
    rows: &[streamvb::runtime::Row],
) -> Result<SufficientStats, ConfigError> {
    let builder =
        DesignBuilder::new(&config.model).map_err(|e| ConfigError::InvalidConfig(e.to_string()))?;
    let mut stats = SufficientStats::zeros(layout.total_columns());
    for row in rows {
        let c = builder
            .row(&row.predictors, row.group)
            .map_err(|e| ConfigError::InvalidConfig(e.to_string()))?;
        stats
            .accumulate(&c, row.y)
            .map_err(|e| ConfigError::InvalidConfig(e.to_string()))?;
    }
    Ok(stats)
}

/// Expands a path whose file name may contain '*', matching literally
/// otherwise. Matches are returned sorted.
fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>, ConfigError> {
    let path = Path::new(pattern);
    let name = match path.file_name().and_then(|n| n.to_str()) {
        Some(n) if n.contains('*') => n.to_string(),
        _ => return Ok(vec![path.to_path_buf()]),
    };
    let dir = if path.parent().map_or(true, |p| p.as_os_str().is_empty()) {
        PathBuf::from(".")
    } else {
        path.parent().unwrap().to_path_buf()
    };
    let (prefix, suffix) = name.split_once('*').unwrap();
    let mut matches = Vec::new();
    let entries = std::fs::read_dir(&dir).map_err(|source| ConfigError::Io {
        path: dir.clone(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| ConfigError::Io {
            path: dir.clone(),
            source,
        })?;
        let fname = entry.file_name();
        let Some(fname) = fname.to_str() else { continue };
        if fname.len() >= prefix.len() + suffix.len()
            && fname.starts_with(prefix)
            && fname.ends_with(suffix)
        {
            matches.push(entry.path());
        }
    }
    matches.sort();
    Ok(matches)
}

fn run(command: Command) -> Result<u8, ConfigError> {
    match command {
        Command::FitBatch { config, out, inputs } => {
            let (config, layout) = load_validated(&config)?;
            if inputs.is_empty() {
                return Err(ConfigError::InvalidConfig("no input files".into()));
            }
            let mut stats = SufficientStats::zeros(layout.total_columns());
            for rows in read_inputs(&config, &inputs)? {
                let part = stats_of(&config, &layout, &rows)?;
                stats
                    .merge_in(&part)
                    .map_err(|e| ConfigError::InvalidConfig(e.to_string()))?;
            }
            let post = fit_stats(&stats, &config, &layout)?;
            let converged = post.converged;
            std::fs::create_dir_all(&out).map_err(|source| ConfigError::Io {
                path: out.clone(),
                source,
            })?;
            write_json(
                &out.join("posterior.json"),
                &posterior_doc(&post, stats.n, &config, &layout),
            )?;
            Ok(if converged { 0 } else { 3 })
        }
        Command::SimulateStream {
            config,
            mode,
            seed,
            out,
            trace,
            input,
        } => {
            let (mut config, layout) = load_validated(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(mode) = mode {
                config.mode = override_mode(&config.mode, &mode)?;
            }
            let (streams, warm) = match input {
                Some(path) => {
                    let rows = read_inputs(&config, std::slice::from_ref(&path))?.remove(0);
                    let warm = rows.len().min(config.warm_up);
                    let (warm_rows, stream_rows) = rows.split_at(warm);
                    (
                        split_round_robin(stream_rows.to_vec(), config.hosts),
                        warm_rows.to_vec(),
                    )
                }
                None => generate_streams(&config)?,
            };
            let (snapshots, combiner, _hosts) = run_stream(&config, &layout, &streams, &warm)?;
            std::fs::create_dir_all(&out).map_err(|source| ConfigError::Io {
                path: out.clone(),
                source,
            })?;
            if let Some(trace_path) = trace {
                write_trace(&trace_path, &snapshots)?;
            }
            let final_lb = snapshots.last().map(|s| s.lower_bound);
            let doc = config::PosteriorDoc {
                schema_version: config::SCHEMA_VERSION,
                converged: true,
                iterations: snapshots.len(),
                n: combiner.stats.n,
                lower_bound: final_lb,
                coefficients: mfvb::coefficient_table(&combiner.state, &config.model, &layout),
                block_precisions: combiner.state.mu_inv_sigu.clone(),
                noise_precision: combiner.state.mu_inv_sigeps,
                effective_config: config.clone(),
            };
            write_json(&out.join("posterior.json"), &doc)?;
            Ok(0)
        }
        Command::Mapreduce {
            config,
            partitions,
            out,
            no_combine_stage,
        } => {
            let (config, layout) = load_validated(&config)?;
            let paths = expand_glob(&partitions)?;
            if paths.is_empty() {
                return Err(ConfigError::InvalidConfig(format!(
                    "no partitions match {partitions:?}"
                )));
            }
            let parts: Vec<Partition> = read_inputs(&config, &paths)?
                .into_iter()
                .map(|rows| Partition { rows })
                .collect();
            let fit_cfg = config.fit.to_fit_config();
            let post = run_job(&parts, &config.model, &layout, &fit_cfg, !no_combine_stage)
                .map_err(|e| ConfigError::InvalidConfig(e.to_string()))?;
            let n: f64 = parts.iter().map(|p| p.rows.len() as f64).sum();
            let converged = post.converged;
            std::fs::create_dir_all(&out).map_err(|source| ConfigError::Io {
                path: out.clone(),
                source,
            })?;
            write_json(
                &out.join("posterior.json"),
                &posterior_doc(&post, n, &config, &layout),
            )?;
            Ok(if converged { 0 } else { 3 })
        }
        Command::SecureSumDemo {
            config,
            parties,
            seed,
            out,
        } => {
            let (config, layout) = load_validated(&config)?;
            let paths = expand_glob(&parties)?;
            if paths.len() < 3 {
                return Err(ConfigError::InvalidConfig(format!(
                    "secure summation needs more than two parties, found {}",
                    paths.len()
                )));
            }
            let party_stats: Vec<SufficientStats> = read_inputs(&config, &paths)?
                .iter()
                .map(|rows| stats_of(&config, &layout, rows))
                .collect::<Result<_, _>>()?;
            let mut rng = ChaCha20Rng::seed_from_u64(seed.unwrap_or(config.seed));
            for (i, s) in party_stats.iter().enumerate() {
                println!("party {i}: n={} (contribution stays masked in transit)", s.n);
            }
            let pooled = secure_merge(&party_stats, &mut rng)
                .map_err(|e| ConfigError::InvalidConfig(e.to_string()))?;
            println!("pooled: n={}", pooled.n);
            let post = fit_stats(&pooled, &config, &layout)?;
            let converged = post.converged;
            std::fs::create_dir_all(&out).map_err(|source| ConfigError::Io {
                path: out.clone(),
                source,
            })?;
            write_json(
                &out.join("posterior.json"),
                &posterior_doc(&post, pooled.n, &config, &layout),
            )?;
            Ok(if converged { 0 } else { 3 })
        }
    }
}

fn override_mode(current: &ModeConfig, name: &str) -> Result<ModeConfig, ConfigError> {
    match name {
        "batch" => Ok(ModeConfig::Batch),
        "online" => Ok(ModeConfig::Online),
        "window" => match current {
            ModeConfig::Window { .. } => Ok(current.clone()),
            _ => Err(ConfigError::InvalidConfig(
                "window mode requires width_ticks in the config".into(),
            )),
        },
        "decay" => match current {
            ModeConfig::Decay { .. } => Ok(current.clone()),
            _ => Err(ConfigError::InvalidConfig(
                "decay mode requires a schedule in the config".into(),
            )),
        },
        other => Err(ConfigError::InvalidConfig(format!("unknown mode {other:?}"))),
    }
}
