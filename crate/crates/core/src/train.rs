//! Unsupervised training of the graph policy on the negative weighted sum
//! rate, validation against FP, evaluation reports and checkpoints.
//!
//! A minibatch is split into fixed chunks of [`CHUNK`] samples in sample
//! order. Chunks may be differentiated in parallel, but their gradients are
//! always summed in chunk order, so results do not depend on the thread
//! count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{Dataset, Sample};
use crate::error::{structural, validation, Error, Result};
use crate::fp::{self, FpOptions};
use crate::graph::{build_graph, BeamformerSet, GraphConfig, HeteroGraph};
use crate::metrics::{mean_std, ratio, weighted_sum_rate};
use crate::model::{self, init_params, HignnArch, HignnParams, NormStats, WsrBatch};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HIGC";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Samples per gradient chunk.
pub const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub arch: HignnArch,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Optimizer steps between validations; 0 means once per epoch.
    pub eval_interval: usize,
    pub seed: u64,
    /// Baseline used for the validation ratio.
    pub fp: FpOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            train_path: None,
            val_path: None,
            arch: HignnArch::default(),
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 100,
            patience: 10,
            eval_interval: 0,
            seed: 0,
            fp: FpOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Feature scales `1/std` per vertex type and per relation over the stacked
/// real features of every sample.
pub fn compute_norm_stats(samples: &[Sample], graph_config: GraphConfig) -> Result<NormStats> {
    let first = samples
        .first()
        .ok_or_else(|| validation("cannot compute statistics of an empty dataset"))?;
    let m_types = first.instance.num_types();
    // (count, sum, sum of squares) per group
    let mut vert = vec![(0usize, 0.0f64, 0.0f64); m_types];
    let mut edge = vec![(0usize, 0.0f64, 0.0f64); m_types * m_types];
    let add = |acc: &mut (usize, f64, f64), data: &[f64]| {
        acc.0 += data.len();
        for &v in data {
            acc.1 += v;
            acc.2 += v * v;
        }
    };
    for s in samples {
        let g = build_graph(&s.instance, &s.channels, graph_config)?;
        if g.num_types() != m_types {
            return Err(structural("samples disagree on the number of link types"));
        }
        for (m, v) in g.vertices.iter().enumerate() {
            add(&mut vert[m], v.data());
        }
        for r in &g.relations {
            add(&mut edge[r.src_type * m_types + r.dst_type], r.features.data());
        }
    }
    let scale = |&(n, s, q): &(usize, f64, f64)| {
        if n == 0 {
            return 1.0;
        }
        let mean = s / n as f64;
        let var = (q / n as f64 - mean * mean).max(0.0);
        if var > 0.0 && var.is_finite() {
            1.0 / var.sqrt()
        } else {
            1.0
        }
    };
    Ok(NormStats {
        vertex: vert.iter().map(scale).collect(),
        edge: edge.iter().map(scale).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, h: &AdamHyper) {
    debug_assert_eq!(params.len(), grads.len());
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub epoch: usize,
    /// Mean minibatch loss since the previous validation.
    pub train_loss: f64,
    /// Negative mean HIGNN weighted sum rate on the validation set.
    pub val_loss: f64,
    /// Mean HIGNN / FP ratio on the validation set.
    pub val_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: HignnParams,
    pub config: TrainConfig,
    pub history: Vec<HistoryEntry>,
    /// Step at which `params` were taken.
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    arch: HignnArch,
    config: TrainConfig,
    history: Vec<HistoryEntry>,
    step: usize,
    num_norm: usize,
    num_params: usize,
}

impl Checkpoint {
    /// Layout: `"HIGC"`, `u32` version, `u64` header length, JSON header,
    /// `u64` value count, then little-endian `f64` values: vertex scales,
    /// relation scales, parameters in slot order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let norm = self.params.norm.to_vec();
        let flat = self.params.to_flat();
        let header = serde_json::to_vec(&CheckpointHeader {
            arch: self.params.arch.clone(),
            config: self.config.clone(),
            history: self.history.clone(),
            step: self.step,
            num_norm: norm.len(),
            num_params: flat.len(),
        })?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&((norm.len() + flat.len()) as u64).to_le_bytes())?;
        for v in norm.iter().chain(&flat) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
        let bad = |msg: String| Error::Format { sample: None, msg };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut header = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)
            .map_err(|e| bad(format!("bad checkpoint header: {e}")))?;
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        if count != header.num_norm + header.num_params {
            return Err(bad(format!(
                "header announces {} values, blob has {count}",
                header.num_norm + header.num_params
            )));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        let m_types = header.arch.num_types();
        if header.num_norm != m_types + m_types * m_types {
            return Err(bad("normalization block does not match the architecture".into()));
        }
        let norm = NormStats {
            vertex: values[..m_types].to_vec(),
            edge: values[m_types..header.num_norm].to_vec(),
        };
        let params = HignnParams::from_flat(&header.arch, norm, &values[header.num_norm..])?;
        Ok(Checkpoint {
            params,
            config: header.config,
            history: header.history,
            step: header.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Per-instance outcome of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub index: usize,
    pub hignn_wsr: f64,
    pub fp_wsr: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_ratio: f64,
    pub std_ratio: f64,
    pub mean_hignn_wsr: f64,
    pub mean_fp_wsr: f64,
    pub instances: Vec<InstanceResult>,
}

impl EvalReport {
    fn from_pairs(policy: &[f64], baseline: &[f64]) -> EvalReport {
        let instances: Vec<InstanceResult> = policy
            .iter()
            .zip(baseline)
            .enumerate()
            .map(|(index, (&c, &b))| InstanceResult {
                index,
                hignn_wsr: c,
                fp_wsr: b,
                ratio: ratio(c, b),
            })
            .collect();
        let ratios: Vec<f64> = instances.iter().map(|r| r.ratio).collect();
        let (mean_ratio, std_ratio) = mean_std(&ratios);
        EvalReport {
            mean_ratio,
            std_ratio,
            mean_hignn_wsr: mean_std(policy).0,
            mean_fp_wsr: mean_std(baseline).0,
            instances,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,hignn_wsr,fp_wsr,ratio\n");
        for r in &self.instances {
            out.push_str(&format!("{},{},{},{}\n", r.index, r.hignn_wsr, r.fp_wsr, r.ratio));
        }
        out
    }
}

/// Converged-FP weighted sum rate of every sample.
pub fn fp_wsr(samples: &[Sample], opts: &FpOptions) -> Vec<f64> {
    samples
        .par_iter()
        .map(|s| {
            let inst = &s.instance;
            let (x, _) = fp::solve(&s.channels, &inst.weights, &inst.noise_vars, inst.p_max, opts);
            weighted_sum_rate(&x, &s.channels, &inst.weights, &inst.noise_vars, 1.0)
        })
        .collect()
}

/// Weighted sum rate of an arbitrary policy against a precomputed baseline.
pub fn evaluate_policy<F>(samples: &[Sample], baseline: &[f64], policy: F) -> Result<EvalReport>
where
    F: Fn(&Sample) -> Result<BeamformerSet> + Sync,
{
    if samples.len() != baseline.len() {
        return Err(structural("one baseline value per sample expected"));
    }
    let wsr = samples
        .par_iter()
        .map(|s| {
            let x = policy(s)?;
            let inst = &s.instance;
            Ok(weighted_sum_rate(&x, &s.channels, &inst.weights, &inst.noise_vars, 1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport::from_pairs(&wsr, baseline))
}

/// HIGNN against converged FP on every sample.
pub fn evaluate(params: &HignnParams, samples: &[Sample], opts: &FpOptions) -> Result<EvalReport> {
    let baseline = fp_wsr(samples, opts);
    evaluate_with_baseline(params, samples, &baseline)
}

pub fn evaluate_with_baseline(
    params: &HignnParams,
    samples: &[Sample],
    baseline: &[f64],
) -> Result<EvalReport> {
    evaluate_policy(samples, baseline, |s| {
        let g = build_graph(&s.instance, &s.channels, params.arch.graph)?;
        model::forward(params, &g, s.instance.p_max)
    })
}

/// Loss and gradient of one minibatch, reduced over chunks in order.
pub fn batch_gradient(
    params: &HignnParams,
    graphs: &[&HeteroGraph],
    samples: &[&Sample],
) -> Result<(f64, Vec<f64>)> {
    let b = samples.len();
    if b == 0 || graphs.len() != b {
        return Err(structural("minibatch needs one graph per sample"));
    }
    let parts = (0..b.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let range = c * CHUNK..((c + 1) * CHUNK).min(b);
            let graph = HeteroGraph::batch(&graphs[range.clone()])?;
            let pairs: Vec<_> = samples[range.clone()]
                .iter()
                .map(|s| (&s.instance, &s.channels))
                .collect();
            let wsr = WsrBatch::new(&pairs)?;
            let (l, g) = model::loss_and_grad(params, &graph, &wsr)?;
            Ok((range.len() as f64 / b as f64, l, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.num_params()];
    for (w, l, g) in parts {
        loss += w * l;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += w * v;
        }
    }
    Ok((loss, grad))
}

fn build_graphs(samples: &[Sample], config: GraphConfig) -> Result<Vec<HeteroGraph>> {
    samples
        .par_iter()
        .map(|s| build_graph(&s.instance, &s.channels, config))
        .collect()
}

/// Loads the configured datasets and trains.
pub fn fit(config: &TrainConfig) -> Result<Checkpoint> {
    let train_path = config
        .train_path
        .as_ref()
        .ok_or_else(|| Error::Config("train_path is required".into()))?;
    let val_path = config
        .val_path
        .as_ref()
        .ok_or_else(|| Error::Config("val_path is required".into()))?;
    let train = Dataset::load(train_path)?;
    let val = Dataset::load(val_path)?;
    fit_datasets(config, &train.samples, &val.samples)
}

/// Minibatch Adam with periodic validation, keeping the parameters with the
/// best validation ratio.
pub fn fit_datasets(config: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<Checkpoint> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(validation("training and validation sets must be non-empty"));
    }
    for s in train.iter().chain(val) {
        if s.instance.type_antennas() != config.arch.antennas {
            return Err(structural(format!(
                "sample link types {:?} differ from the architecture's {:?}",
                s.instance.type_antennas(),
                config.arch.antennas
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init_params(&config.arch, &mut rng)?;
    params.norm = compute_norm_stats(train, config.arch.graph)?;
    let graphs = build_graphs(train, config.arch.graph)?;
    let val_baseline = fp_wsr(val, &config.fp);
    let hyper = AdamHyper::from(config);

    let snapshot = |params: &HignnParams, history: &[HistoryEntry], step: usize| Checkpoint {
        params: params.clone(),
        config: config.clone(),
        history: history.to_vec(),
        step,
    };

    let mut flat = params.to_flat();
    let mut adam = AdamState::new(flat.len());
    let mut history: Vec<HistoryEntry> = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stale = 0;
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let eval_every = if config.eval_interval == 0 {
        steps_per_epoch
    } else {
        config.eval_interval
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (mut step, mut loss_sum, mut loss_count) = (0usize, 0.0, 0usize);

    'outer: for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let g: Vec<&HeteroGraph> = batch.iter().map(|&i| &graphs[i]).collect();
            let s: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
            let (loss, grad) = batch_gradient(&params, &g, &s)?;
            if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    loss,
                    last_good: Box::new(snapshot(&params, &history, step)),
                });
            }
            adam_step(&mut flat, &grad, &mut adam, &hyper);
            params.set_flat(&flat)?;
            step += 1;
            loss_sum += loss;
            loss_count += 1;

            if step % eval_every == 0 {
                let report = evaluate_with_baseline(&params, val, &val_baseline)?;
                history.push(HistoryEntry {
                    step,
                    epoch,
                    train_loss: loss_sum / loss_count as f64,
                    val_loss: -report.mean_hignn_wsr,
                    val_ratio: report.mean_ratio,
                });
                loss_sum = 0.0;
                loss_count = 0;
                if best.as_ref().is_none_or(|(r, _)| report.mean_ratio > *r) {
                    best = Some((report.mean_ratio, snapshot(&params, &[], step)));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.patience {
                        break 'outer;
                    }
                }
            }
        }
    }
    if history.last().is_none_or(|h| h.step != step) {
        let report = evaluate_with_baseline(&params, val, &val_baseline)?;
        history.push(HistoryEntry {
            step,
            epoch: config.max_epochs.saturating_sub(1),
            train_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN },
            val_loss: -report.mean_hignn_wsr,
            val_ratio: report.mean_ratio,
        });
        if best.as_ref().is_none_or(|(r, _)| report.mean_ratio > *r) {
            best = Some((report.mean_ratio, snapshot(&params, &[], step)));
        }
    }
    let (_, mut ckpt) = best.expect("at least one validation ran");
    ckpt.history = history;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ScenarioConfig;
    use crate::graph::ChannelSet;

    #[test]
    fn adam_matches_hand_computed_trace() {
        // lr 0.1, β = (0.9, 0.999), ε = 1e-8, gradients 1, -2, 0.5 on θ = 1
        let h = AdamHyper {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut p = [1.0];
        let mut s = AdamState::new(1);
        let mut expect = 1.0;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [1.0f64, -2.0, 0.5].into_iter().enumerate() {
            adam_step(&mut p, &[g], &mut s, &h);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            expect -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - expect).abs() < 1e-15);
        }
        // hand-computed: m̂ = 1, v̂ = 1 after the first step
        let mut q = [1.0];
        adam_step(&mut q, &[1.0], &mut AdamState::new(1), &h);
        assert!((q[0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let h = AdamHyper::from(&TrainConfig::default());
        let mut p = [0.3, -2.0];
        let mut s = AdamState::new(2);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, &h);
        }
        assert_eq!(p, [0.3, -2.0]);
    }

    #[test]
    fn adam_constant_gradient_steps_by_lr() {
        let h = AdamHyper::from(&TrainConfig::default());
        let mut p = [0.0];
        let mut s = AdamState::new(1);
        let mut prev = 0.0;
        for _ in 0..200 {
            adam_step(&mut p, &[3.0], &mut s, &h);
            let step = prev - p[0];
            assert!((step - 1e-3).abs() < 1e-8);
            prev = p[0];
        }
    }

    fn small_config() -> ScenarioConfig {
        ScenarioConfig::default().with_counts(vec![3, 2]).with_area(150.0)
    }

    #[test]
    fn norm_stats_scale_covariance() {
        let ds = Dataset::generate(&small_config(), 50).unwrap();
        let s1 = compute_norm_stats(&ds.samples, GraphConfig::default()).unwrap();
        let doubled: Vec<Sample> = ds
            .samples
            .iter()
            .map(|s| Sample {
                instance: s.instance.clone(),
                channels: s.channels.scaled(2.0),
            })
            .collect();
        let s2 = compute_norm_stats(&doubled, GraphConfig::default()).unwrap();
        for (a, b) in s1.to_vec().iter().zip(s2.to_vec()) {
            assert!((a / b - 2.0).abs() < 1e-12);
        }
        // Normalized features have unit spread per group.
        let rescaled: Vec<Sample> = ds
            .samples
            .iter()
            .map(|s| {
                let inst = &s.instance;
                let offs = inst.type_offsets();
                let ty = |g: usize| offs.partition_point(|&o| o <= g) - 1;
                let m = inst.num_types();
                let ch = ChannelSet::from_fn(inst.link_antennas(), |i, j, a| {
                    let sc = if i == j { s1.vertex[ty(i)] } else { s1.edge[ty(j) * m + ty(i)] };
                    s.channels.get(i, j)[a] * sc
                });
                Sample {
                    instance: inst.clone(),
                    channels: ch,
                }
            })
            .collect();
        let s3 = compute_norm_stats(&rescaled, GraphConfig::default()).unwrap();
        assert!(s3.to_vec().iter().all(|v| (v - 1.0).abs() < 0.05), "{s3:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let arch = HignnArch::default();
        let mut params = init_params(&arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        params.norm = NormStats {
            vertex: vec![0.1234567890123, 3.0],
            edge: vec![1.0 / 3.0, 2.0, 1e-300, 7.5],
        };
        let ckpt = Checkpoint {
            params,
            config: TrainConfig::default(),
            history: vec![HistoryEntry {
                step: 10,
                epoch: 0,
                train_loss: -1.0 / 7.0,
                val_loss: -0.1 - 0.2,
                val_ratio: 0.912345678901234,
            }],
            step: 10,
        };
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);

        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(Checkpoint::read_from(&mut corrupt.as_slice()).is_err());
        assert!(Checkpoint::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn fp_against_itself_and_silent_policy() {
        let ds = Dataset::generate(&small_config(), 8).unwrap();
        let opts = FpOptions::default();
        let base = fp_wsr(&ds.samples, &opts);
        let same = evaluate_policy(&ds.samples, &base, |s| {
            let i = &s.instance;
            Ok(fp::solve(&s.channels, &i.weights, &i.noise_vars, i.p_max, &opts).0)
        })
        .unwrap();
        assert_eq!(same.mean_ratio, 1.0);
        let silent = evaluate_policy(&ds.samples, &base, |s| {
            Ok(BeamformerSet::zeros(s.instance.link_antennas()))
        })
        .unwrap();
        assert_eq!(silent.mean_ratio, 0.0);
        assert!(silent.to_csv().starts_with("index,hignn_wsr,fp_wsr,ratio\n0,0,"));
    }

    #[test]
    fn evaluation_does_not_touch_params() {
        let ds = Dataset::generate(&small_config(), 4).unwrap();
        let params = init_params(&HignnArch::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = params.clone();
        let r = evaluate(&params, &ds.samples, &FpOptions::default()).unwrap();
        assert_eq!(params, before);
        assert!(r.mean_ratio.is_finite());
    }

    #[test]
    fn chunked_gradient_equals_whole_batch() {
        let ds = Dataset::generate(&small_config(), 37).unwrap();
        let params = init_params(&HignnArch::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let graphs = build_graphs(&ds.samples, GraphConfig::default()).unwrap();
        let g: Vec<&HeteroGraph> = graphs.iter().collect();
        let s: Vec<&Sample> = ds.samples.iter().collect();
        let (l, grad) = batch_gradient(&params, &g, &s).unwrap();
        let big = HeteroGraph::batch(&g).unwrap();
        let pairs: Vec<_> = ds.samples.iter().map(|s| (&s.instance, &s.channels)).collect();
        let (l2, grad2) = model::loss_and_grad(&params, &big, &WsrBatch::new(&pairs).unwrap()).unwrap();
        assert!((l - l2).abs() < 1e-12 * l.abs());
        for (a, b) in grad.iter().zip(&grad2) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn training_is_reproducible_and_improves() {
        let cfg = small_config();
        let train = Dataset::generate(&cfg, 96).unwrap();
        let val = Dataset::generate(&cfg.clone().with_seed(1), 24).unwrap();
        let tc = TrainConfig {
            batch_size: 16,
            max_epochs: 4,
            eval_interval: 3,
            patience: 100,
            seed: 5,
            ..Default::default()
        };
        let a = fit_datasets(&tc, &train.samples, &val.samples).unwrap();
        let b = fit_datasets(&tc, &train.samples, &val.samples).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 8);
        let first = a.history[0].val_loss;
        let best = a.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
        assert!(best < first);
        let best_ratio = a.history.iter().map(|h| h.val_ratio).fold(0.0, f64::max);
        let report = evaluate(&a.params, &val.samples, &tc.fp).unwrap();
        assert!((report.mean_ratio - best_ratio).abs() < 1e-12);
    }

    #[test]
    fn bad_configs_rejected() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rat": 0.1}"#).is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"batch_size": 8}"#).unwrap();
        assert_eq!(ok.batch_size, 8);
    }

    #[test]
    fn divergence_returns_last_good_checkpoint() {
        let cfg = small_config();
        let train = Dataset::generate(&cfg, 4).unwrap();
        let val = Dataset::generate(&cfg, 2).unwrap();
        let tc = TrainConfig {
            batch_size: 4,
            learning_rate: 1e300,
            ..Default::default()
        };
        match fit_datasets(&tc, &train.samples, &val.samples) {
            Err(Error::Diverged { step, last_good, .. }) => {
                assert!(step >= 1);
                assert!(last_good.params.to_flat().iter().all(|v| v.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
