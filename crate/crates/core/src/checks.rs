//! Self-tests runnable from a release binary: reverse-mode gradient against
//! central differences, permutation invariance and equivariance, and power
//! feasibility of the policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::finite_diff_grad;
use crate::channel::{Dataset, Sample, ScenarioConfig};
use crate::error::Result;
use crate::graph::{build_graph, permute_beamformers, permute_network, PermutationSpec};
use crate::metrics::weighted_sum_rate;
use crate::model::{self, init_params, HignnArch, WsrBatch};
use crate::train::compute_norm_stats;

/// Relative error with the denominator floored at `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub num_params: usize,
    pub max_rel_err: f64,
    pub worst_param: usize,
}

/// Compares the loss gradient on one heterogeneous 3-link sample (2 links of
/// the first type, 1 of the second) with central differences of step `eps`.
pub fn gradient_check(arch: &HignnArch, seed: u64, eps: f64, floor: f64) -> Result<GradientCheck> {
    let mut counts = vec![0; arch.num_types()];
    counts[0] = 2;
    *counts.last_mut().expect("at least one type") += 1;
    let scenario = ScenarioConfig {
        counts,
        antennas: arch.antennas.clone(),
        seed,
        ..ScenarioConfig::default()
    };
    let ds = Dataset::generate(&scenario, 16)?;
    let mut params = init_params(arch, &mut ChaCha8Rng::seed_from_u64(seed))?;
    params.norm = compute_norm_stats(&ds.samples, arch.graph)?;
    let s = &ds.samples[0];
    let g = build_graph(&s.instance, &s.channels, arch.graph)?;
    let batch = WsrBatch::new(&[(&s.instance, &s.channels)])?;
    let (_, grad) = model::loss_and_grad(&params, &g, &batch)?;
    let mut probe = params.clone();
    let mut failure = None;
    let fd = finite_diff_grad(
        |t| {
            probe.set_flat(t).expect("same layout");
            model::loss(&probe, &g, &batch).unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        },
        &params.to_flat(),
        eps,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let (worst_param, max_rel_err) = grad
        .iter()
        .zip(&fd)
        .map(|(a, b)| rel_err(*a, *b, floor))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 || e.is_nan() { (i, e) } else { acc });
    Ok(GradientCheck {
        num_params: grad.len(),
        max_rel_err,
        worst_param,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationCheck {
    pub trials: usize,
    /// Utility of permuted beamformers on the permuted network vs original.
    pub max_invariance_err: f64,
    /// Policy output on the permuted network vs permuted policy output,
    /// relative to the largest output magnitude.
    pub max_equivariance_err: f64,
}

fn random_sample(antennas: &[usize], rng: &mut ChaCha8Rng) -> Sample {
    let counts: Vec<usize> = antennas.iter().map(|_| rng.random_range(0..6)).collect();
    let mut counts = counts;
    if counts.iter().all(|&c| c == 0) {
        counts[0] = 1;
    }
    let scenario = ScenarioConfig {
        counts,
        antennas: antennas.to_vec(),
        area_length: rng.random_range(100.0..600.0),
        seed: rng.random(),
        ..ScenarioConfig::default()
    };
    Sample::generate(&scenario, 0)
}

/// Random (network, parameters, permutation) triples.
pub fn permutation_check(arch: &HignnArch, trials: usize, seed: u64) -> Result<PermutationCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut inv, mut eqv) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let params = init_params(arch, &mut rng)?;
        let s = random_sample(&arch.antennas, &mut rng);
        let inst = &s.instance;
        let perm = PermutationSpec::random(&inst.counts, &mut rng);
        let (pinst, pch) = permute_network(inst, &s.channels, &perm)?;

        let x = model::forward(&params, &build_graph(inst, &s.channels, arch.graph)?, inst.p_max)?;
        let px = model::forward(&params, &build_graph(&pinst, &pch, arch.graph)?, inst.p_max)?;
        let expect = permute_beamformers(&x, &perm)?;
        let scale = (0..x.num_links())
            .flat_map(|g| x.link(g).iter().map(|c| c.norm()))
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        for g in 0..px.num_links() {
            for (a, b) in px.link(g).iter().zip(expect.link(g)) {
                eqv = eqv.max((a - b).norm() / scale);
            }
        }

        let u = weighted_sum_rate(&x, &s.channels, &inst.weights, &inst.noise_vars, 1.0);
        let pu = weighted_sum_rate(&expect, &pch, &pinst.weights, &pinst.noise_vars, 1.0);
        inv = inv.max(rel_err(u, pu, f64::MIN_POSITIVE));
    }
    Ok(PermutationCheck {
        trials,
        max_invariance_err: inv,
        max_equivariance_err: eqv,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityCheck {
    pub trials: usize,
    pub violations: usize,
    /// Largest per-link power over `p_max`.
    pub max_power_ratio: f64,
}

/// Forward passes with random parameters on random networks, counting links
/// whose power exceeds `p_max + tol`.
pub fn feasibility_check(arch: &HignnArch, trials: usize, seed: u64, tol: f64) -> Result<FeasibilityCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(arch, &mut rng)?;
    let (mut violations, mut worst) = (0, 0.0f64);
    for t in 0..trials {
        if t % 50 == 0 {
            params = init_params(arch, &mut rng)?;
            // Large weights push raw outputs well outside the power ball.
            let scale = rng.random_range(0.1..20.0);
            let flat: Vec<f64> = params.to_flat().iter().map(|v| v * scale).collect();
            params.set_flat(&flat)?;
        }
        let s = random_sample(&arch.antennas, &mut rng);
        let mut inst = s.instance.clone();
        inst.p_max = rng.random_range(0.1..10.0);
        let x = model::forward(&params, &build_graph(&inst, &s.channels, arch.graph)?, inst.p_max)?;
        for g in 0..x.num_links() {
            let p = x.power(g);
            worst = worst.max(p / inst.p_max);
            if p > inst.p_max + tol {
                violations += 1;
            }
        }
    }
    Ok(FeasibilityCheck {
        trials,
        violations,
        max_power_ratio: worst,
    })
}
