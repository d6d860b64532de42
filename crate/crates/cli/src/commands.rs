use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use metaisda::datakit::{gen_synthetic, load_idx, Dataset};
use metaisda::numkit::RngState;
use metaisda::trainer::{run, MetricsRecord, TrainMode};
use metaisda::Error;

use crate::config::{ConfigBuilder, ConfigError, DataSource, ExperimentConfig, KEYS};

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    /// Non-finite values during training, naming the phase.
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::NegativeVariance { .. } => {
                CliError::Numerical(e.to_string())
            }
            Error::Io(m) => CliError::Io(m),
            other => CliError::Config(ConfigError {
                line: None,
                message: other.to_string(),
            }),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<ConfigBuilder, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(ConfigBuilder::parse_text(&text, base)?)
}

pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset), CliError> {
    match &cfg.data {
        DataSource::Synthetic {
            config,
            seed: data_seed,
        } => Ok(gen_synthetic(
            config,
            &mut RngState::new(data_seed.unwrap_or(seed)),
        )?),
        DataSource::Idx(p) => Ok((
            load_idx(&p.train_images, &p.train_labels)?,
            load_idx(&p.test_images, &p.test_labels)?,
        )),
    }
}

pub const METRICS_HEADER: &str =
    "iteration,train_loss,meta_loss,test_acc,mean_cov,meta_grad_norm_sq,running_min_grad,scatter_ratio";

/// Metric rows with 17 significant digits per value.
pub fn metrics_csv(history: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.iteration,
            r.train_loss,
            r.meta_loss,
            r.test_acc,
            r.mean_cov,
            r.meta_grad_norm_sq,
            r.running_min_grad,
            r.scatter_ratio
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub history: Vec<MetricsRecord>,
    pub final_acc: f64,
    pub clamp_hits: u64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub mode: TrainMode,
    pub results: Vec<SeedResult>,
    pub mean: f64,
    pub stddev: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every seed, writing `metrics_seed<k>.csv`, the final parameters
/// and `summary.json` into `out`.
pub fn run_into(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (train, test) = load_data(cfg, seed)?;
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let start = Instant::now();
        let state = run(&tc, &train, &test)?;
        let wall_clock_secs = start.elapsed().as_secs_f64();
        let csv = out.join(format!("metrics_seed{seed}.csv"));
        fs::write(&csv, metrics_csv(&state.history)).map_err(io_err(&csv))?;
        let mut params = Vec::new();
        state.classifier.write_to(&mut params)?;
        let p = out.join(format!("classifier_seed{seed}.params"));
        fs::write(&p, params).map_err(io_err(&p))?;
        let mut params = Vec::new();
        state.covnet.write_to(&mut params)?;
        let p = out.join(format!("covnet_seed{seed}.params"));
        fs::write(&p, params).map_err(io_err(&p))?;
        results.push(SeedResult {
            seed,
            final_acc: state.history.last().map_or(f64::NAN, |r| r.test_acc),
            history: state.history,
            clamp_hits: state.clamp_hits,
            wall_clock_secs,
        });
    }
    let accs: Vec<f64> = results.iter().map(|r| r.final_acc).collect();
    let (mean, stddev) = mean_std(&accs);
    let summary = serde_json::json!({
        "mode": cfg.train.mode.name(),
        "seeds": cfg.seeds,
        "final_test_acc": accs,
        "mean_final_test_acc": mean,
        "stddev_final_test_acc": stddev,
        "clamp_hits": results.iter().map(|r| r.clamp_hits).collect::<Vec<_>>(),
    });
    let p = out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(&p, text + "\n").map_err(io_err(&p))?;
    Ok(RunSummary {
        mode: cfg.train.mode,
        results,
        mean,
        stddev,
    })
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary, CliError> {
    run_into(cfg, &cfg.out)
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub dir: PathBuf,
    pub mean: f64,
    pub stddev: f64,
    /// Mean seconds per seed.
    pub wall_clock_secs: f64,
}

fn dir_label(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// One run per value of `param`, each in `<out>/<param>_<value>/`, then
/// `<out>/sweep_<param>.csv`.
pub fn cmd_sweep(
    base: &ConfigBuilder,
    param: &str,
    values: &[String],
) -> Result<Vec<SweepRow>, CliError> {
    if !KEYS.contains(&param) || param == "out" {
        return Err(ConfigError {
            line: None,
            message: format!("cannot sweep unknown parameter `{param}`"),
        }
        .into());
    }
    if values.is_empty() {
        return Err(ConfigError {
            line: None,
            message: "sweep needs at least one value".into(),
        }
        .into());
    }
    // Validate every point before running any of them.
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let mut b = base.clone();
        b.override_key(param, v)?;
        points.push((v.clone(), b.build()?));
    }
    let out = base.build()?.out;
    let mut rows = Vec::with_capacity(points.len());
    for (value, cfg) in points {
        let dir = out.join(format!("{}_{}", dir_label(param), dir_label(&value)));
        let summary = run_into(&cfg, &dir)?;
        let secs: Vec<f64> = summary.results.iter().map(|r| r.wall_clock_secs).collect();
        rows.push(SweepRow {
            value,
            dir,
            mean: summary.mean,
            stddev: summary.stddev,
            wall_clock_secs: mean_std(&secs).0,
        });
    }
    let mut table = String::from("value,mean_test_acc,stddev_test_acc,wall_clock_secs\n");
    for r in &rows {
        let _ = writeln!(
            table,
            "\"{}\",{:.16e},{:.16e},{:.6}",
            r.value, r.mean, r.stddev, r.wall_clock_secs
        );
    }
    let p = out.join(format!("sweep_{}.csv", dir_label(param)));
    fs::write(&p, table).map_err(io_err(&p))?;
    Ok(rows)
}

pub const COMPARE_MODES: [TrainMode; 3] = [
    TrainMode::CeBaseline,
    TrainMode::ClasswiseIsda,
    TrainMode::Meta,
];

#[derive(Debug, Clone)]
pub struct CompareTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<RunSummary>,
}

impl CompareTable {
    pub fn row(&self, mode: TrainMode) -> &RunSummary {
        self.rows
            .iter()
            .find(|r| r.mode == mode)
            .expect("all compare modes present")
    }

    pub fn render(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!("# seeds: {}\nmethod", seeds.join(","));
        for s in &seeds {
            let _ = write!(out, ",seed_{s}");
        }
        out.push_str(",mean,stddev\n");
        for row in &self.rows {
            out.push_str(row.mode.name());
            for r in &row.results {
                let _ = write!(out, ",{:.16e}", r.final_acc);
            }
            let _ = writeln!(out, ",{:.16e},{:.16e}", row.mean, row.stddev);
        }
        out
    }
}

/// Runs the baseline, class-wise and meta modes on identical data and
/// seeds, each under `<out>/<mode>/`, and writes `<out>/compare.csv`.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<CompareTable, CliError> {
    let mut rows = Vec::with_capacity(3);
    for mode in COMPARE_MODES {
        let mut c = cfg.clone();
        c.train.mode = mode;
        c.train.validate()?;
        rows.push(run_into(&c, &cfg.out.join(mode.name()))?);
    }
    let table = CompareTable {
        seeds: cfg.seeds.clone(),
        rows,
    };
    let p = cfg.out.join("compare.csv");
    fs::write(&p, table.render()).map_err(io_err(&p))?;
    Ok(table)
}
