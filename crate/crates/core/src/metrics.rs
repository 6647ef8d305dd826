//! SINR, per-link rate and weighted sum rate.
//!
//! Rates are in nats with bandwidth normalized to 1 unless a bandwidth is
//! passed explicitly; [`nats_to_bits`] converts for presentation.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::graph::{BeamformerSet, ChannelSet};

/// `h^H x`.
pub fn inner(h: &[Complex64], x: &[Complex64]) -> Complex64 {
    h.iter().zip(x).map(|(a, b)| a.conj() * b).sum()
}

/// Received power `|h_{i j}^H x_j|²` for every receiver `i` (rows) and
/// transmitter `j` (columns), row-major `K × K`.
pub fn received_power(x: &BeamformerSet, h: &ChannelSet) -> Vec<f64> {
    let k = h.num_links();
    let mut out = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            out.push(inner(h.get(i, j), x.link(j)).norm_sqr());
        }
    }
    out
}

/// SINR of link `i`: direct power over interference plus noise.
pub fn sinr(i: usize, x: &BeamformerSet, h: &ChannelSet, noise_var: f64) -> f64 {
    let signal = inner(h.get(i, i), x.link(i)).norm_sqr();
    let interference: f64 = (0..h.num_links())
        .filter(|&j| j != i)
        .map(|j| inner(h.get(i, j), x.link(j)).norm_sqr())
        .sum();
    signal / (interference + noise_var)
}

/// SINR of every link from a precomputed [`received_power`] matrix.
pub fn sinr_from_power(power: &[f64], noise_vars: &[f64]) -> Vec<f64> {
    let k = noise_vars.len();
    (0..k)
        .map(|i| {
            let row = &power[i * k..(i + 1) * k];
            let interference: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, p)| p)
                .sum();
            row[i] / (interference + noise_vars[i])
        })
        .collect()
}

/// Per-link and total rates of one beamformer choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub sinr: Vec<f64>,
    /// `W · ln(1 + SINR)`, nats.
    pub rate: Vec<f64>,
    pub wsr: f64,
    pub bandwidth: f64,
}

impl RateReport {
    pub fn compute(
        x: &BeamformerSet,
        h: &ChannelSet,
        weights: &[f64],
        noise_vars: &[f64],
        bandwidth: f64,
    ) -> Self {
        let sinr = sinr_from_power(&received_power(x, h), noise_vars);
        let rate: Vec<f64> = sinr.iter().map(|s| bandwidth * s.ln_1p()).collect();
        let wsr = rate.iter().zip(weights).map(|(r, w)| r * w).sum();
        RateReport {
            sinr,
            rate,
            wsr,
            bandwidth,
        }
    }
}

/// `Σ ω_i · W · ln(1 + SINR_i)`.
pub fn weighted_sum_rate(
    x: &BeamformerSet,
    h: &ChannelSet,
    weights: &[f64],
    noise_vars: &[f64],
    bandwidth: f64,
) -> f64 {
    RateReport::compute(x, h, weights, noise_vars, bandwidth).wsr
}

pub fn nats_to_bits(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}

/// Candidate over baseline for one instance. A zero baseline counts as
/// matched when the candidate is also zero.
pub fn ratio(candidate: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        if candidate == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        candidate / baseline
    }
}

/// Mean over instances of `candidate[i] / baseline[i]`.
pub fn relative_performance(candidate: &[f64], baseline: &[f64]) -> f64 {
    assert_eq!(candidate.len(), baseline.len());
    if candidate.is_empty() {
        return f64::NAN;
    }
    candidate
        .iter()
        .zip(baseline)
        .map(|(&c, &b)| ratio(c, b))
        .sum::<f64>()
        / candidate.len() as f64
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
