use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use hignn::checks;
use hignn::experiments::{
    self, CsvRow, Metadata, SampleEfficiencyConfig, ScalingConfig, Table, TimingConfig,
    TimingSummary,
};
use hignn::fp::{self, FpOptions};
use hignn::train::{self, Checkpoint, TrainConfig};
use hignn::{Dataset, HignnArch, ScenarioConfig};

/// Weighted sum-rate beamforming with heterogeneous graph neural networks.
#[derive(Parser)]
#[command(name = "hignn", version)]
struct Cli {
    /// Worker threads for parallel sections (timing always runs on one).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; omitted keys take defaults, unknown keys are errors.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file from a scenario.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Overrides the sample count in the config.
        #[arg(long)]
        count: Option<usize>,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, or with --sweep run the training-set size study.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Interpret the config as a sample-efficiency sweep.
        #[arg(long)]
        sweep: bool,
        /// Checkpoint file, or output directory with --sweep.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a checkpoint with converged FP on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the FP baseline on a dataset.
    Fp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Stop after this many iterations.
        #[arg(long)]
        truncate: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a frozen checkpoint on the scaling and timing studies.
    Bench {
        suite: Suite,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Iterations of the truncated FP in the timing study.
        #[arg(long)]
        truncate: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient, permutation and feasibility self-tests.
    Check {
        #[command(flatten)]
        common: Common,
        /// Output directory for a JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Area,
    Density,
    Timing,
    All,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenConfig {
    scenario: ScenarioConfig,
    samples: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            scenario: ScenarioConfig::default(),
            samples: 1000,
        }
    }
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FpConfig {
    fp: FpOptions,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BenchConfig {
    scaling: ScalingConfig,
    timing: TimingConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CheckConfig {
    arch: HignnArch,
    seed: u64,
    fd_step: f64,
    gradient_tolerance: f64,
    permutation_trials: usize,
    feasibility_trials: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            arch: HignnArch::default(),
            seed: 0,
            fd_step: 1e-5,
            gradient_tolerance: 1e-4,
            permutation_trials: 200,
            feasibility_trials: 10_000,
        }
    }
}

#[derive(Serialize)]
struct FpRow {
    index: usize,
    wsr: f64,
    iterations: usize,
    converged: bool,
}

impl CsvRow for FpRow {
    fn header() -> &'static [&'static str] {
        &["index", "wsr", "iterations", "converged"]
    }
    fn fields(&self) -> Vec<String> {
        vec![
            self.index.to_string(),
            self.wsr.to_string(),
            self.iterations.to_string(),
            self.converged.to_string(),
        ]
    }
}

#[derive(Serialize)]
struct HistoryRow(hignn::train::HistoryEntry);

impl CsvRow for HistoryRow {
    fn header() -> &'static [&'static str] {
        &["step", "epoch", "train_loss", "val_loss", "val_ratio"]
    }
    fn fields(&self) -> Vec<String> {
        let h = &self.0;
        vec![
            h.step.to_string(),
            h.epoch.to_string(),
            h.train_loss.to_string(),
            h.val_loss.to_string(),
            h.val_ratio.to_string(),
        ]
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write_table<R: CsvRow + Serialize>(dir: &Path, name: &str, table: &Table<R>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{name}.csv")), table.to_csv())?;
    fs::write(dir.join(format!("{name}.json")), table.to_json()?)?;
    Ok(())
}

fn gen(common: &Common, count: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg: GenConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.scenario.seed = s;
    }
    if let Some(n) = count {
        cfg.samples = n;
    }
    let ds = Dataset::generate(&cfg.scenario, cfg.samples)?;
    ds.save(out)?;
    eprintln!("wrote {} samples to {}", ds.len(), out.display());
    Ok(())
}

fn train_cmd(
    common: &Common,
    train_path: Option<PathBuf>,
    val_path: Option<PathBuf>,
    sweep: bool,
    out: &Path,
) -> Result<()> {
    if sweep {
        let mut cfg: SampleEfficiencyConfig = load_config(common.config.as_deref())?;
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        let table = experiments::run_sample_efficiency(&cfg)?;
        for r in &table.rows {
            eprintln!("{} n={} ratio {:.4}", r.arch, r.train_size, r.mean_ratio);
        }
        return write_table(out, "sample_efficiency", &table);
    }
    let mut cfg: TrainConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if train_path.is_some() {
        cfg.train_path = train_path;
    }
    if val_path.is_some() {
        cfg.val_path = val_path;
    }
    let ckpt = train::fit(&cfg)?;
    ckpt.save(out)?;
    let best = ckpt.history.iter().find(|h| h.step == ckpt.step);
    eprintln!(
        "saved step {} (validation ratio {:.4}) to {}",
        ckpt.step,
        best.map_or(f64::NAN, |h| h.val_ratio),
        out.display()
    );
    let history = Table {
        metadata: Metadata::new("train", cfg.seed, &cfg)?,
        rows: ckpt.history.iter().cloned().map(HistoryRow).collect(),
    };
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    write_table(
        out.parent().unwrap_or(Path::new(".")),
        &format!("{stem}.history"),
        &history,
    )
}

fn eval(common: &Common, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg: FpConfig = load_config(common.config.as_deref())?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = Dataset::load(data)?;
    let report = train::evaluate(&ckpt.params, &ds.samples, &cfg.fp)?;
    eprintln!(
        "mean ratio {:.4} ± {:.4} over {} instances",
        report.mean_ratio,
        report.std_ratio,
        report.instances.len()
    );
    let table = Table {
        metadata: Metadata::new("eval", ds.config.seed, &(&cfg, &ckpt.config, &ds.config))?,
        rows: report.instances.clone(),
    };
    write_table(out, "eval", &table)?;
    fs::write(out.join("eval_summary.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn fp_cmd(common: &Common, data: &Path, truncate: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg: FpConfig = load_config(common.config.as_deref())?;
    if let Some(k) = truncate {
        cfg.fp = FpOptions::truncated(k);
    }
    let ds = Dataset::load(data)?;
    let rows: Vec<FpRow> = ds
        .samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let i = &s.instance;
            let (_, trace) = fp::solve(&s.channels, &i.weights, &i.noise_vars, i.p_max, &cfg.fp);
            FpRow {
                index,
                wsr: trace.wsr.last().copied().unwrap_or(0.0),
                iterations: trace.iterations,
                converged: trace.converged,
            }
        })
        .collect();
    let mean = rows.iter().map(|r| r.wsr).sum::<f64>() / rows.len().max(1) as f64;
    eprintln!("mean WSR {mean:.4} nats over {} instances", rows.len());
    let table = Table {
        metadata: Metadata::new("fp", ds.config.seed, &(&cfg, &ds.config))?,
        rows,
    };
    write_table(out, "fp", &table)
}

fn bench(
    suite: Suite,
    common: &Common,
    checkpoint: &Path,
    truncate: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut cfg: BenchConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.scaling.seed = s;
        cfg.timing.scaling.seed = s;
    }
    if let Some(k) = truncate {
        cfg.timing.truncate = k;
    }
    let params = Checkpoint::load(checkpoint)?.params;
    let run = |s: Suite| suite == s || suite == Suite::All;
    if run(Suite::Area) {
        let t = experiments::run_area_scaling(&params, &cfg.scaling)?;
        for r in &t.rows {
            eprintln!("area    {:>3} links: ratio {:.4}", r.links, r.mean_ratio);
        }
        write_table(out, "area_scaling", &t)?;
    }
    if run(Suite::Density) {
        let t = experiments::run_density_scaling(&params, &cfg.scaling)?;
        for r in &t.rows {
            eprintln!("density {:>3} links: ratio {:.4}", r.links, r.mean_ratio);
        }
        write_table(out, "density_scaling", &t)?;
    }
    if run(Suite::Timing) {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
        let t = pool.install(|| experiments::run_timing(&params, &cfg.timing))?;
        let s = TimingSummary::from_rows(&t.rows);
        for ((k, sp), i) in s.links.iter().zip(&s.speedup).zip(0..) {
            let growth = if i > 0 { format!(", FP growth {:.2}x", s.fp_growth[i - 1]) } else { String::new() };
            eprintln!("timing  {k:>3} links: FP/HIGNN {sp:.1}x{growth}");
        }
        write_table(out, "timing", &t)?;
        fs::write(out.join("timing_summary.json"), serde_json::to_string_pretty(&s)?)?;
    }
    Ok(())
}

fn check(common: &Common, out: Option<&Path>) -> Result<bool> {
    let mut cfg: CheckConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let g = checks::gradient_check(&cfg.arch, cfg.seed, cfg.fd_step, 1e-6)?;
    let p = checks::permutation_check(&cfg.arch, cfg.permutation_trials, cfg.seed)?;
    let f = checks::feasibility_check(&cfg.arch, cfg.feasibility_trials, cfg.seed, 1e-6)?;
    let results = [
        (
            "gradient",
            g.max_rel_err <= cfg.gradient_tolerance,
            format!("max rel err {:.2e} over {} params", g.max_rel_err, g.num_params),
        ),
        (
            "invariance",
            p.max_invariance_err <= 1e-12,
            format!("max rel err {:.2e} over {} trials", p.max_invariance_err, p.trials),
        ),
        (
            "equivariance",
            p.max_equivariance_err <= 1e-10,
            format!("max rel err {:.2e} over {} trials", p.max_equivariance_err, p.trials),
        ),
        (
            "feasibility",
            f.violations == 0,
            format!("{} violations over {} passes", f.violations, f.trials),
        ),
    ];
    for (name, ok, detail) in &results {
        println!("{} {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let report = serde_json::json!({
            "metadata": Metadata::new("check", cfg.seed, &cfg)?,
            "gradient": g,
            "permutation": p,
            "feasibility": f,
        });
        fs::write(dir.join("check.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(results.iter().all(|r| r.1))
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Gen { common, count, out } => gen(&common, count, &out)?,
        Command::Train {
            common,
            train,
            val,
            sweep,
            out,
        } => train_cmd(&common, train, val, sweep, &out)?,
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
        } => eval(&common, &checkpoint, &data, &out)?,
        Command::Fp {
            common,
            data,
            truncate,
            out,
        } => fp_cmd(&common, &data, truncate, &out)?,
        Command::Bench {
            suite,
            common,
            checkpoint,
            truncate,
            out,
        } => bench(suite, &common, &checkpoint, truncate, &out)?,
        Command::Check { common, out } => return check(&common, out.as_deref()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
