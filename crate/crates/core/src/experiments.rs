//! Experiment runners: sample efficiency, area and density scaling, timing.
//!
//! Every runner returns a [`Table`] of typed rows plus [`Metadata`] (seed,
//! SHA-256 of the JSON config, crate version). Tables render to CSV, with
//! the metadata as leading `#` comment lines, and to JSON.
//!
//! Datasets inside an experiment draw from seeds derived from the
//! experiment seed and a purpose tag, so train, validation and test sets never
//! share realizations.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{Dataset, ScenarioConfig};
use crate::error::{Error, Result};
use crate::fp::{self, FpOptions};
use crate::graph::build_graph;
use crate::metrics::mean_std;
use crate::model::{self, HignnArch, HignnParams};
use crate::train::{self, TrainConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub experiment: String,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

impl Metadata {
    pub fn new<C: Serialize>(experiment: &str, seed: u64, config: &C) -> Result<Metadata> {
        Ok(Metadata {
            experiment: experiment.to_string(),
            seed,
            config_hash: config_hash(config)?,
            version: VERSION.to_string(),
        })
    }
}

/// Hex SHA-256 of the compact JSON encoding of `config`.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(config)?)))
}

/// Deterministic sub-seed for one purpose within an experiment.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest is 32 bytes"))
}

/// A row type with a fixed CSV schema.
pub trait CsvRow {
    fn header() -> &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table<R> {
    pub metadata: Metadata,
    pub rows: Vec<R>,
}

impl<R: CsvRow + Serialize> Table<R> {
    pub fn to_csv(&self) -> String {
        let m = &self.metadata;
        let mut out = format!(
            "# experiment={}\n# seed={}\n# config_hash={}\n# version={}\n",
            m.experiment, m.seed, m.config_hash, m.version
        );
        out.push_str(&R::header().join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.fields().join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl CsvRow for train::InstanceResult {
    fn header() -> &'static [&'static str] {
        &["index", "hignn_wsr", "fp_wsr", "ratio"]
    }
    fn fields(&self) -> Vec<String> {
        vec![
            self.index.to_string(),
            self.hignn_wsr.to_string(),
            self.fp_wsr.to_string(),
            self.ratio.to_string(),
        ]
    }
}

fn counts_label(counts: &[usize]) -> String {
    counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("+")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArch {
    pub name: String,
    pub arch: HignnArch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleEfficiencyConfig {
    pub scenario: ScenarioConfig,
    pub train_sizes: Vec<usize>,
    pub archs: Vec<NamedArch>,
    /// Optimizer and schedule; its `arch` and paths are ignored.
    pub train: TrainConfig,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SampleEfficiencyConfig {
    fn default() -> Self {
        let arch = |layers: usize, hidden: Vec<usize>| HignnArch {
            layers,
            hidden,
            ..HignnArch::default()
        };
        SampleEfficiencyConfig {
            scenario: ScenarioConfig::default(),
            train_sizes: vec![500, 2000, 5000, 20000],
            archs: vec![
                NamedArch {
                    name: "2-layer {16}".into(),
                    arch: arch(2, vec![16]),
                },
                NamedArch {
                    name: "3-layer {16}".into(),
                    arch: arch(3, vec![16]),
                },
                NamedArch {
                    name: "4-layer {64,32}".into(),
                    arch: arch(4, vec![64, 32]),
                },
            ],
            train: TrainConfig::default(),
            val_size: 500,
            test_size: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub arch: String,
    pub layers: usize,
    pub hidden: Vec<usize>,
    pub train_size: usize,
    pub mean_ratio: f64,
    pub std_ratio: f64,
    pub best_step: usize,
    pub train_seconds: f64,
}

impl CsvRow for EfficiencyRow {
    fn header() -> &'static [&'static str] {
        &[
            "arch",
            "layers",
            "hidden",
            "train_size",
            "mean_ratio",
            "std_ratio",
            "best_step",
            "train_seconds",
        ]
    }
    fn fields(&self) -> Vec<String> {
        vec![
            format!("\"{}\"", self.arch),
            self.layers.to_string(),
            self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("x"),
            self.train_size.to_string(),
            self.mean_ratio.to_string(),
            self.std_ratio.to_string(),
            self.best_step.to_string(),
            format!("{:.3}", self.train_seconds),
        ]
    }
}

/// Scenario datasets shared by the training-based studies.
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn make_splits(
    scenario: &ScenarioConfig,
    seed: u64,
    train_size: usize,
    val_size: usize,
    test_size: usize,
) -> Result<Splits> {
    let gen = |tag: &str, n: usize| {
        Dataset::generate(&scenario.clone().with_seed(derive_seed(seed, tag)), n)
    };
    Ok(Splits {
        train: gen("train", train_size)?,
        val: gen("val", val_size)?,
        test: gen("test", test_size)?,
    })
}

/// Trains every architecture on nested prefixes of one training set and
/// scores each model on a common test set.
pub fn run_sample_efficiency(cfg: &SampleEfficiencyConfig) -> Result<Table<EfficiencyRow>> {
    let largest = cfg.train_sizes.iter().copied().max().unwrap_or(0);
    if largest == 0 || cfg.archs.is_empty() {
        return Err(Error::Config("need at least one train size and architecture".into()));
    }
    let splits = make_splits(&cfg.scenario, cfg.seed, largest, cfg.val_size, cfg.test_size)?;
    let baseline = train::fp_wsr(&splits.test.samples, &cfg.train.fp);
    let mut rows = Vec::new();
    for named in &cfg.archs {
        for &size in &cfg.train_sizes {
            let tc = TrainConfig {
                arch: named.arch.clone(),
                train_path: None,
                val_path: None,
                ..cfg.train.clone()
            };
            let t = Instant::now();
            let ckpt = train::fit_datasets(&tc, &splits.train.samples[..size], &splits.val.samples)?;
            let train_seconds = t.elapsed().as_secs_f64();
            let report =
                train::evaluate_with_baseline(&ckpt.params, &splits.test.samples, &baseline)?;
            rows.push(EfficiencyRow {
                arch: named.name.clone(),
                layers: named.arch.layers,
                hidden: named.arch.hidden.clone(),
                train_size: size,
                mean_ratio: report.mean_ratio,
                std_ratio: report.std_ratio,
                best_step: ckpt.step,
                train_seconds,
            });
        }
    }
    Ok(Table {
        metadata: Metadata::new("sample_efficiency", cfg.seed, cfg)?,
        rows,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingFamily {
    /// Links double and the area side grows by √2: constant density.
    #[default]
    Area,
    /// Links double in a fixed area.
    Density,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    /// Step-0 scenario; its counts double at every step.
    pub scenario: ScenarioConfig,
    pub steps: usize,
    pub instances: usize,
    pub fp: FpOptions,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            scenario: ScenarioConfig::default(),
            steps: 3,
            instances: 1000,
            fp: FpOptions::default(),
            seed: 0,
        }
    }
}

impl ScalingConfig {
    /// Scenario at `step` of `family`, sampling from a step-specific seed.
    pub fn scenario_at(&self, family: ScalingFamily, step: usize) -> ScenarioConfig {
        let factor = 1usize << step;
        let mut s = self.scenario.clone();
        s.counts = s.counts.iter().map(|c| c * factor).collect();
        if family == ScalingFamily::Area {
            s.area_length *= 2f64.sqrt().powi(step as i32);
        }
        s.with_seed(derive_seed(self.seed, &format!("scaling-{step}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub family: ScalingFamily,
    pub step: usize,
    pub links: usize,
    pub counts: Vec<usize>,
    pub area_length: f64,
    pub mean_ratio: f64,
    pub std_ratio: f64,
    pub mean_hignn_wsr: f64,
    pub mean_fp_wsr: f64,
}

impl CsvRow for ScalingRow {
    fn header() -> &'static [&'static str] {
        &[
            "family",
            "step",
            "links",
            "counts",
            "area_length",
            "mean_ratio",
            "std_ratio",
            "mean_hignn_wsr",
            "mean_fp_wsr",
        ]
    }
    fn fields(&self) -> Vec<String> {
        vec![
            match self.family {
                ScalingFamily::Area => "area".into(),
                ScalingFamily::Density => "density".into(),
            },
            self.step.to_string(),
            self.links.to_string(),
            counts_label(&self.counts),
            self.area_length.to_string(),
            self.mean_ratio.to_string(),
            self.std_ratio.to_string(),
            self.mean_hignn_wsr.to_string(),
            self.mean_fp_wsr.to_string(),
        ]
    }
}

/// Evaluates frozen parameters at steps `0..=steps` of a scaling family.
pub fn run_scaling(
    params: &HignnParams,
    cfg: &ScalingConfig,
    family: ScalingFamily,
) -> Result<Table<ScalingRow>> {
    let mut rows = Vec::new();
    for step in 0..=cfg.steps {
        let scenario = cfg.scenario_at(family, step);
        let ds = Dataset::generate(&scenario, cfg.instances)?;
        let report = train::evaluate(params, &ds.samples, &cfg.fp)?;
        rows.push(ScalingRow {
            family,
            step,
            links: scenario.num_links(),
            counts: scenario.counts.clone(),
            area_length: scenario.area_length,
            mean_ratio: report.mean_ratio,
            std_ratio: report.std_ratio,
            mean_hignn_wsr: report.mean_hignn_wsr,
            mean_fp_wsr: report.mean_fp_wsr,
        });
    }
    let name = match family {
        ScalingFamily::Area => "area_scaling",
        ScalingFamily::Density => "density_scaling",
    };
    Ok(Table {
        metadata: Metadata::new(name, cfg.seed, &(cfg, family))?,
        rows,
    })
}

pub fn run_area_scaling(params: &HignnParams, cfg: &ScalingConfig) -> Result<Table<ScalingRow>> {
    run_scaling(params, cfg, ScalingFamily::Area)
}

pub fn run_density_scaling(params: &HignnParams, cfg: &ScalingConfig) -> Result<Table<ScalingRow>> {
    run_scaling(params, cfg, ScalingFamily::Density)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub scaling: ScalingConfig,
    pub family: ScalingFamily,
    /// Iterations of the truncated FP variant.
    pub truncate: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            scaling: ScalingConfig {
                instances: 100,
                ..ScalingConfig::default()
            },
            family: ScalingFamily::Area,
            truncate: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimedMethod {
    Fp,
    TruncatedFp,
    /// HIGNN forward pass on a prebuilt graph.
    Hignn,
    /// Graph construction from channels, reported separately.
    GraphBuild,
}

impl TimedMethod {
    fn label(self) -> &'static str {
        match self {
            TimedMethod::Fp => "fp",
            TimedMethod::TruncatedFp => "tr_fp",
            TimedMethod::Hignn => "hignn",
            TimedMethod::GraphBuild => "graph_build",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub links: usize,
    pub method: TimedMethod,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub instances: usize,
}

impl CsvRow for TimingRow {
    fn header() -> &'static [&'static str] {
        &["links", "method", "mean_ms", "std_ms", "instances"]
    }
    fn fields(&self) -> Vec<String> {
        vec![
            self.links.to_string(),
            self.method.label().into(),
            self.mean_ms.to_string(),
            self.std_ms.to_string(),
            self.instances.to_string(),
        ]
    }
}

fn time_ms<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = std::hint::black_box(f());
    (out, t.elapsed().as_secs_f64() * 1e3)
}

/// Per-instance wall-clock times of full FP, truncated FP, graph build and
/// HIGNN forward, measured serially on the calling thread.
pub fn run_timing(params: &HignnParams, cfg: &TimingConfig) -> Result<Table<TimingRow>> {
    let full = cfg.scaling.fp.clone();
    let trunc = FpOptions::truncated(cfg.truncate);
    let mut rows = Vec::new();
    for step in 0..=cfg.scaling.steps {
        let scenario = cfg.scaling.scenario_at(cfg.family, step);
        let ds = Dataset::generate(&scenario, cfg.scaling.instances)?;
        let mut times: [Vec<f64>; 4] = Default::default();
        for s in &ds.samples {
            let inst = &s.instance;
            let (_, t) =
                time_ms(|| fp::solve(&s.channels, &inst.weights, &inst.noise_vars, inst.p_max, &full));
            times[0].push(t);
            let (_, t) =
                time_ms(|| fp::solve(&s.channels, &inst.weights, &inst.noise_vars, inst.p_max, &trunc));
            times[1].push(t);
            let (g, t) = time_ms(|| build_graph(inst, &s.channels, params.arch.graph));
            let g = g?;
            times[3].push(t);
            let (x, t) = time_ms(|| model::forward(params, &g, inst.p_max));
            x?;
            times[2].push(t);
        }
        let methods = [
            TimedMethod::Fp,
            TimedMethod::TruncatedFp,
            TimedMethod::Hignn,
            TimedMethod::GraphBuild,
        ];
        for (method, t) in methods.into_iter().zip(&times) {
            let (mean_ms, std_ms) = mean_std(t);
            rows.push(TimingRow {
                links: scenario.num_links(),
                method,
                mean_ms,
                std_ms,
                instances: t.len(),
            });
        }
    }
    Ok(Table {
        metadata: Metadata::new("timing", cfg.scaling.seed, cfg)?,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub links: Vec<usize>,
    /// Full FP time over HIGNN time at each size.
    pub speedup: Vec<f64>,
    /// FP time ratio between consecutive sizes.
    pub fp_growth: Vec<f64>,
    pub hignn_growth: Vec<f64>,
}

impl TimingSummary {
    pub fn from_rows(rows: &[TimingRow]) -> TimingSummary {
        let mut links: Vec<usize> = rows.iter().map(|r| r.links).collect();
        links.dedup();
        let get = |k: usize, m: TimedMethod| {
            rows.iter()
                .find(|r| r.links == k && r.method == m)
                .map_or(f64::NAN, |r| r.mean_ms)
        };
        let fp: Vec<f64> = links.iter().map(|&k| get(k, TimedMethod::Fp)).collect();
        let nn: Vec<f64> = links.iter().map(|&k| get(k, TimedMethod::Hignn)).collect();
        let growth = |v: &[f64]| v.windows(2).map(|w| w[1] / w[0]).collect();
        TimingSummary {
            speedup: fp.iter().zip(&nn).map(|(f, n)| f / n).collect(),
            fp_growth: growth(&fp),
            hignn_growth: growth(&nn),
            links,
        }
    }

    pub fn mean_fp_growth(&self) -> f64 {
        mean_std(&self.fp_growth).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scaling_schedule() {
        let cfg = ScalingConfig::default();
        let links: Vec<usize> = (0..=3)
            .map(|s| cfg.scenario_at(ScalingFamily::Area, s).num_links())
            .collect();
        assert_eq!(links, [12, 24, 48, 96]);
        let a3 = cfg.scenario_at(ScalingFamily::Area, 3);
        assert!((a3.area_length - 400.0 * 8f64.sqrt()).abs() < 1e-9);
        let density = |s: &ScenarioConfig| s.num_links() as f64 / s.area_length.powi(2);
        let a0 = cfg.scenario_at(ScalingFamily::Area, 0);
        assert!((density(&a3) / density(&a0) - 1.0).abs() < 1e-12);
        assert_eq!(cfg.scenario_at(ScalingFamily::Density, 3).area_length, 400.0);
        assert_eq!(cfg.scenario_at(ScalingFamily::Density, 2).counts, [32, 16]);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, "train"), derive_seed(0, "val"));
        assert_ne!(derive_seed(0, "train"), derive_seed(1, "train"));
        assert_eq!(derive_seed(5, "x"), derive_seed(5, "x"));
    }

    #[test]
    fn step_zero_matches_plain_eval() {
        let params = init_params(&HignnArch::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = ScalingConfig {
            steps: 1,
            instances: 6,
            ..Default::default()
        };
        let table = run_area_scaling(&params, &cfg).unwrap();
        let ds = Dataset::generate(&cfg.scenario_at(ScalingFamily::Area, 0), 6).unwrap();
        let plain = train::evaluate(&params, &ds.samples, &cfg.fp).unwrap();
        assert_eq!(table.rows[0].mean_ratio, plain.mean_ratio);
        assert_eq!(table.rows[1].links, 24);
        let again = run_area_scaling(&params, &cfg).unwrap();
        assert_eq!(table, again);
        let csv = table.to_csv();
        assert!(csv.starts_with("# experiment=area_scaling\n# seed=0\n# config_hash="));
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 3);
    }

    #[test]
    fn timing_table_shape() {
        let params = init_params(&HignnArch::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = TimingConfig {
            scaling: ScalingConfig {
                steps: 1,
                instances: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        let t = run_timing(&params, &cfg).unwrap();
        assert_eq!(t.rows.len(), 8);
        assert!(t.rows.iter().all(|r| r.mean_ms > 0.0 && r.std_ms >= 0.0));
        let s = TimingSummary::from_rows(&t.rows);
        assert_eq!(s.links, [12, 24]);
        assert_eq!(s.fp_growth.len(), 1);
        let json: serde_json::Value = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(json["metadata"]["experiment"], "timing");
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ScalingConfig::default();
        let b = ScalingConfig {
            instances: 7,
            ..Default::default()
        };
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }
}
