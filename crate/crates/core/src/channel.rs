//! Random D2D topologies, channel realizations and dataset files.
//!
//! Transmitters are uniform over a `D × D` square; each receiver is uniform
//! over the annulus `[d_min, d_max]` around its own transmitter. Channels are
//! `h = sqrt(β) g` with log-distance path loss plus log-normal shadowing in
//! `β` and i.i.d. CN(0, 1) small-scale fading in `g`.
//!
//! Sample `i` of a dataset draws from its own ChaCha stream `(seed, i)`, so
//! a dataset is fully determined by its config and is identical whether it is
//! generated serially or in parallel.
//!
//! # File format
//!
//! All integers and floats little-endian.
//!
//! ```text
//! b"HIGD"  u32 version  u32 config_len  config_len bytes of JSON config
//! u64 sample_count
//! per sample: tx_pos [K][2] f64, rx_pos [K][2] f64, weights [K] f64,
//!             channels: for each receiver, for each transmitter, for each
//!             antenna: (re f64, im f64)
//! ```

use std::f64::consts::PI;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::graph::{distance, link_types, ChannelSet, NetworkInstance};

pub const DATASET_MAGIC: &[u8; 4] = b"HIGD";
pub const DATASET_VERSION: u32 = 1;

/// Re-draws allowed for a receiver that falls outside the area before it is
/// clamped to the boundary.
const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsMode {
    #[default]
    AllOnes,
    /// One weight per link, type-major.
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Side of the square deployment area, meters.
    pub area_length: f64,
    /// Links per type.
    pub counts: Vec<usize>,
    /// Transmit antennas per type.
    pub antennas: Vec<usize>,
    pub d_min: f64,
    pub d_max: f64,
    pub p_max: f64,
    pub noise_var: f64,
    pub weights: WeightsMode,
    pub path_loss_exponent: f64,
    /// Large-scale gain at the 1 m reference distance, dB.
    pub ref_gain_db: f64,
    pub shadowing_std_db: f64,
    pub seed: u64,
}

/// Reference gain that puts the direct SNR of a `d_max = 50 m` link at
/// 10 dB with unit power and noise.
fn calibrated_ref_gain_db(exponent: f64) -> f64 {
    10.0 + 10.0 * exponent * 50f64.log10()
}

impl Default for ScenarioConfig {
    /// 8 SISO + 4 MISO (2 antennas) links in a 400 m square.
    fn default() -> Self {
        ScenarioConfig {
            area_length: 400.0,
            counts: vec![8, 4],
            antennas: vec![1, 2],
            d_min: 2.0,
            d_max: 50.0,
            p_max: 1.0,
            noise_var: 1.0,
            weights: WeightsMode::AllOnes,
            path_loss_exponent: 2.2,
            ref_gain_db: calibrated_ref_gain_db(2.2),
            shadowing_std_db: 7.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.d_min && self.d_min < self.d_max && self.d_max < self.area_length) {
            return Err(validation(format!(
                "need 0 < d_min < d_max < area_length, got {} / {} / {}",
                self.d_min, self.d_max, self.area_length
            )));
        }
        if !(self.path_loss_exponent > 0.0) {
            return Err(validation("path loss exponent must be positive"));
        }
        if !(self.shadowing_std_db >= 0.0) || !self.ref_gain_db.is_finite() {
            return Err(validation("invalid large-scale fading parameters"));
        }
        if self.counts.len() != self.antennas.len() || self.counts.is_empty() {
            return Err(validation("counts and antennas must list the same link types"));
        }
        if self.antennas.contains(&0) {
            return Err(validation("every link type needs at least one antenna"));
        }
        if self.num_links() == 0 {
            return Err(validation("scenario has no links"));
        }
        if !(self.p_max > 0.0) || !(self.noise_var > 0.0) {
            return Err(validation("p_max and noise_var must be positive"));
        }
        if let WeightsMode::Explicit(w) = &self.weights {
            if w.len() != self.num_links() || w.iter().any(|v| !(*v >= 0.0)) {
                return Err(validation(format!(
                    "explicit weights need {} non-negative entries",
                    self.num_links()
                )));
            }
        }
        Ok(())
    }

    pub fn num_links(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn with_counts(mut self, counts: Vec<usize>) -> Self {
        self.counts = counts;
        self
    }

    pub fn with_area(mut self, area_length: f64) -> Self {
        self.area_length = area_length;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn link_weights(&self) -> Vec<f64> {
        match &self.weights {
            WeightsMode::AllOnes => vec![1.0; self.num_links()],
            WeightsMode::Explicit(w) => w.clone(),
        }
    }

    /// Large-scale gain at `distance_m` without shadowing.
    pub fn path_gain(&self, distance_m: f64) -> f64 {
        10f64.powf((self.ref_gain_db - 10.0 * self.path_loss_exponent * distance_m.log10()) / 10.0)
    }
}

/// Transmitters uniform in the square; receivers uniform (by area) in the
/// annulus around their transmitter, re-drawn while outside the square.
pub fn sample_topology<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> NetworkInstance {
    let k = config.num_links();
    let side = config.area_length;
    let (r2_min, r2_max) = (config.d_min.powi(2), config.d_max.powi(2));
    let mut tx_pos = Vec::with_capacity(k);
    let mut rx_pos = Vec::with_capacity(k);
    for _ in 0..k {
        let tx = [rng.random::<f64>() * side, rng.random::<f64>() * side];
        let mut rx = [0.0; 2];
        for attempt in 0..MAX_PLACEMENT_TRIES {
            let angle = rng.random::<f64>() * 2.0 * PI;
            let radius = (rng.random::<f64>() * (r2_max - r2_min) + r2_min).sqrt();
            rx = [tx[0] + radius * angle.cos(), tx[1] + radius * angle.sin()];
            let inside = (0.0..=side).contains(&rx[0]) && (0.0..=side).contains(&rx[1]);
            if inside {
                break;
            }
            if attempt + 1 == MAX_PLACEMENT_TRIES {
                rx = [rx[0].clamp(0.0, side), rx[1].clamp(0.0, side)];
            }
        }
        tx_pos.push(tx);
        rx_pos.push(rx);
    }
    NetworkInstance {
        types: link_types(&config.antennas),
        counts: config.counts.clone(),
        tx_pos,
        rx_pos,
        weights: config.link_weights(),
        noise_vars: vec![config.noise_var; k],
        p_max: config.p_max,
        area_length: side,
    }
}

/// `β = G₀ · d^(−α) · 10^(S/10)` with `S ~ N(0, σ_sh²)` dB.
pub fn large_scale_gain<R: Rng + ?Sized>(
    distance_m: f64,
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<f64> {
    if !(distance_m > 0.0) {
        return Err(validation(format!("distance must be positive, got {distance_m}")));
    }
    let shadow_db: f64 = config.shadowing_std_db * rng.sample::<f64, _>(StandardNormal);
    Ok(config.path_gain(distance_m) * 10f64.powf(shadow_db / 10.0))
}

/// Circularly-symmetric complex Gaussian with unit variance.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// One `β` per (receiver, transmitter) pair from the Tx–Rx distance,
/// floored at `d_min`, times unit-variance Rayleigh fading per antenna.
pub fn sample_channels<R: Rng + ?Sized>(
    instance: &NetworkInstance,
    config: &ScenarioConfig,
    rng: &mut R,
) -> ChannelSet {
    let antennas = instance.link_antennas();
    let k = antennas.len();
    let mut data = Vec::with_capacity(k * antennas.iter().sum::<usize>());
    for i in 0..k {
        for (j, &n) in antennas.iter().enumerate() {
            let d = distance(instance.tx_pos[j], instance.rx_pos[i]).max(config.d_min);
            let beta = large_scale_gain(d, config, rng).expect("distance floored at d_min > 0");
            let amp = beta.sqrt();
            for _ in 0..n {
                data.push(complex_normal(rng) * amp);
            }
        }
    }
    ChannelSet::new(antennas, data).expect("channel layout matches antennas")
}

/// A network realization and its channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub instance: NetworkInstance,
    pub channels: ChannelSet,
}

/// Independent generator stream for sample `index`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

impl Sample {
    pub fn generate(config: &ScenarioConfig, index: u64) -> Sample {
        let mut rng = sample_rng(config.seed, index);
        let instance = sample_topology(config, &mut rng);
        let channels = sample_channels(&instance, config, &mut rng);
        Sample { instance, channels }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: ScenarioConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Samples `0..n` of the config's seed.
    pub fn generate(config: &ScenarioConfig, n: usize) -> Result<Dataset> {
        config.validate()?;
        let samples = (0..n as u64)
            .into_par_iter()
            .map(|i| Sample::generate(config, i))
            .collect();
        Ok(Dataset {
            config: config.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        let config = serde_json::to_vec(&self.config)?;
        w.write_all(&(config.len() as u32).to_le_bytes())?;
        w.write_all(&config)?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        for s in &self.samples {
            let inst = &s.instance;
            for p in inst.tx_pos.iter().chain(&inst.rx_pos) {
                write_f64s(w, p)?;
            }
            write_f64s(w, &inst.weights)?;
            for c in s.channels.data() {
                write_f64s(w, &[c.re, c.im])?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let mut r = BufReader::new(File::open(path)?);
        Dataset::read_from(&mut r)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, None)?;
        if &magic != DATASET_MAGIC {
            return Err(format_err(None, "not a dataset file (bad magic)"));
        }
        let version = u32::from_le_bytes(read_array(r, None)?);
        if version != DATASET_VERSION {
            return Err(format_err(None, format!("unsupported dataset version {version}")));
        }
        let config_len = u32::from_le_bytes(read_array(r, None)?) as usize;
        let mut config = vec![0u8; config_len];
        read_exact(r, &mut config, None)?;
        let config: ScenarioConfig = serde_json::from_slice(&config)
            .map_err(|e| format_err(None, format!("bad config header: {e}")))?;
        config
            .validate()
            .map_err(|e| format_err(None, format!("bad config header: {e}")))?;
        let count = u64::from_le_bytes(read_array(r, None)?) as usize;

        let template = sample_topology(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let k = template.num_links();
        let antennas = template.link_antennas();
        let n_channel = k * antennas.iter().sum::<usize>();
        let floats = 4 * k + k + 2 * n_channel;
        let mut buf = vec![0u8; floats * 8];
        let mut samples = Vec::with_capacity(count);
        for idx in 0..count {
            read_exact(r, &mut buf, Some(idx))?;
            let v: Vec<f64> = buf
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let pos = |base: usize| (0..k).map(|g| [v[base + 2 * g], v[base + 2 * g + 1]]).collect();
            let ch = &v[5 * k..];
            let channels = ChannelSet::new(
                antennas.clone(),
                ch.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect(),
            )?;
            let instance = NetworkInstance {
                tx_pos: pos(0),
                rx_pos: pos(2 * k),
                weights: v[4 * k..5 * k].to_vec(),
                ..template.clone()
            };
            instance
                .validate()
                .map_err(|e| format_err(Some(idx), e.to_string()))?;
            samples.push(Sample { instance, channels });
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(format_err(
                Some(count),
                format!("header declares {count} samples but more data follows"),
            ));
        }
        Ok(Dataset { config, samples })
    }
}

/// Generates `n_samples` and writes them to `path`.
pub fn generate_dataset(
    config: &ScenarioConfig,
    n_samples: usize,
    path: impl AsRef<Path>,
) -> Result<Dataset> {
    let ds = Dataset::generate(config, n_samples)?;
    ds.save(path)?;
    Ok(ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::load(path)
}

fn write_f64s(w: &mut impl Write, vals: &[f64]) -> io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn format_err(sample: Option<usize>, msg: impl Into<String>) -> Error {
    Error::Format {
        sample,
        msg: msg.into(),
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], sample: Option<usize>) -> Result<()> {
    r.read_exact(buf).map_err(|source| {
        if source.kind() == io::ErrorKind::UnexpectedEof {
            format_err(sample, "file truncated")
        } else {
            Error::Io { sample, source }
        }
    })
}

fn read_array<const N: usize>(r: &mut impl Read, sample: Option<usize>) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b, sample)?;
    Ok(b)
}
