//! Closed-form fractional programming for weighted sum-rate beamforming.
//!
//! Each round updates three blocks in turn, holding the others fixed:
//! the SINR auxiliaries `γ`, the quadratic-transform auxiliaries `y`, and the
//! beamformers `x`. Every block update maximizes the same surrogate, so the
//! weighted sum rate never decreases from round to round. The beamformer
//! update solves a regularized Hermitian system per link; the multiplier `η`
//! on the power constraint is found by bisection when the unregularized
//! solution is infeasible.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::graph::{BeamformerSet, ChannelSet};
use crate::metrics::{inner, received_power, sinr_from_power};

/// Ridge added when the unregularized system is singular.
const SINGULAR_RIDGE: f64 = 1e-12;
const MAX_BISECTION_STEPS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpOptions {
    pub max_iters: usize,
    /// Stop once the relative WSR improvement of a round drops below this.
    pub rel_tol: f64,
    /// Tolerance on `|‖x‖² − P_max| / P_max` for the multiplier search.
    pub bisection_tol: f64,
    /// Run exactly this many rounds, ignoring `rel_tol`.
    pub truncated_iters: Option<usize>,
}

impl Default for FpOptions {
    fn default() -> Self {
        FpOptions {
            max_iters: 100,
            rel_tol: 1e-5,
            bisection_tol: 1e-8,
            truncated_iters: None,
        }
    }
}

impl FpOptions {
    /// Three-round truncated FP.
    pub fn truncated(iters: usize) -> Self {
        FpOptions {
            truncated_iters: Some(iters),
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FpTrace {
    /// WSR of the starting point followed by the WSR after each round.
    pub wsr: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Rounds in which the multiplier search ran for at least one link.
    pub bisection_rounds: usize,
}

/// Maximum-ratio transmission at full power; links with a zero direct
/// channel stay silent.
pub fn init_mrt(h: &ChannelSet, p_max: f64) -> BeamformerSet {
    let k = h.num_links();
    let vecs = (0..k)
        .map(|i| {
            let d = h.get(i, i);
            let norm = d.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            if norm > 0.0 {
                let s = p_max.sqrt() / norm;
                d.iter().map(|c| c * s).collect()
            } else {
                vec![Complex64::new(0.0, 0.0); d.len()]
            }
        })
        .collect();
    BeamformerSet::from_vecs(vecs)
}

/// Reusable buffers for the per-link Hermitian solves.
#[derive(Default)]
struct Solver {
    l: Vec<Complex64>,
    z: Vec<Complex64>,
    x: Vec<Complex64>,
    best: Vec<Complex64>,
}

impl Solver {
    /// Lower-triangular Cholesky factor of the Hermitian `a + ηI`
    /// (row-major `n × n`) into `self.l`; false if not positive definite.
    fn cholesky(&mut self, a: &[Complex64], n: usize, eta: f64) -> bool {
        let l = &mut self.l;
        l.clear();
        l.resize(n * n, Complex64::new(0.0, 0.0));
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                if i == j {
                    s += eta;
                }
                for p in 0..j {
                    s -= l[i * n + p] * l[j * n + p].conj();
                }
                if i == j {
                    if !(s.re > 0.0) {
                        return false;
                    }
                    l[i * n + i] = Complex64::new(s.re.sqrt(), 0.0);
                } else {
                    l[i * n + j] = s / l[j * n + j].re;
                }
            }
        }
        true
    }

    /// Solves `(a + ηI) x = b` into `self.x`, adding a tiny ridge if the
    /// system is singular. Returns `‖x‖²`.
    fn solve(&mut self, a: &[Complex64], b: &[Complex64], eta: f64) -> f64 {
        let n = b.len();
        let ok = self.cholesky(a, n, eta) || self.cholesky(a, n, eta + SINGULAR_RIDGE) || {
            let scale = (0..n).map(|i| a[i * n + i].re).fold(0.0, f64::max);
            self.cholesky(a, n, eta + SINGULAR_RIDGE * scale.max(1.0) * 1e6)
        };
        assert!(ok, "ridge-regularized PSD matrix is positive definite");
        let (l, z, x) = (&self.l, &mut self.z, &mut self.x);
        z.clear();
        z.resize(n, Complex64::new(0.0, 0.0));
        for i in 0..n {
            let mut s = b[i];
            for p in 0..i {
                s -= l[i * n + p] * z[p];
            }
            z[i] = s / l[i * n + i].re;
        }
        x.clear();
        x.resize(n, Complex64::new(0.0, 0.0));
        for i in (0..n).rev() {
            let mut s = z[i];
            for p in i + 1..n {
                s -= l[p * n + i].conj() * x[p];
            }
            x[i] = s / l[i * n + i].re;
        }
        norm_sqr(x)
    }

    /// Smallest `η ≥ 0` with `‖(a + ηI)⁻¹ b‖² ≤ P_max`; the solution is left
    /// in `self.best`. Returns whether the search ran.
    fn constrained(&mut self, a: &[Complex64], b: &[Complex64], p_max: f64, tol: f64) -> bool {
        if self.solve(a, b, 0.0) <= p_max {
            std::mem::swap(&mut self.best, &mut self.x);
            return false;
        }
        let mut hi = 1.0;
        while self.solve(a, b, hi) >= p_max {
            hi *= 2.0;
        }
        let mut best_p = norm_sqr(&self.x);
        std::mem::swap(&mut self.best, &mut self.x);
        let mut lo = 0.0;
        for _ in 0..MAX_BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            let p = self.solve(a, b, mid);
            if p > p_max {
                lo = mid;
            } else {
                hi = mid;
                best_p = p;
                std::mem::swap(&mut self.best, &mut self.x);
                if p_max - p <= tol * p_max {
                    break;
                }
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        // The optimum is on the boundary; close the remaining slack.
        if best_p > 0.0 {
            let scale = (p_max / best_p).sqrt();
            for v in &mut self.best {
                *v *= scale;
            }
        }
        true
    }
}

#[cfg(test)]
fn solve_regularized(a: &[Complex64], b: &[Complex64], eta: f64) -> Vec<Complex64> {
    let mut s = Solver::default();
    s.solve(a, b, eta);
    s.x
}

fn norm_sqr(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

/// Smallest `η ≥ 0` with `‖(a + ηI)⁻¹ b‖² ≤ P_max`, and the matching
/// solution. The second value reports whether the search ran.
#[cfg(test)]
fn constrained_solve(a: &[Complex64], b: &[Complex64], p_max: f64, tol: f64) -> (Vec<Complex64>, bool) {
    let mut s = Solver::default();
    let ran = s.constrained(a, b, p_max, tol);
    (s.best, ran)
}

/// Scratch state of one FP round, reused to avoid recomputing the
/// received-power matrix.
struct Round {
    power: Vec<f64>,
    wsr: f64,
}

fn evaluate(x: &BeamformerSet, h: &ChannelSet, weights: &[f64], noise: &[f64]) -> Round {
    let power = received_power(x, h);
    let wsr = sinr_from_power(&power, noise)
        .iter()
        .zip(weights)
        .map(|(s, w)| w * s.ln_1p())
        .sum();
    Round { power, wsr }
}

fn fp_round(
    x: &BeamformerSet,
    round: &Round,
    h: &ChannelSet,
    weights: &[f64],
    noise: &[f64],
    p_max: f64,
    tol: f64,
) -> (BeamformerSet, bool) {
    let k = h.num_links();
    let gamma = sinr_from_power(&round.power, noise);
    // √(ω(1+γ)) per link
    let coef: Vec<f64> = gamma
        .iter()
        .zip(weights)
        .map(|(g, w)| (w * (1.0 + g)).sqrt())
        .collect();
    let y: Vec<Complex64> = (0..k)
        .map(|i| {
            let total: f64 = round.power[i * k..(i + 1) * k].iter().sum::<f64>() + noise[i];
            inner(h.get(i, i), x.link(i)) * (coef[i] / total)
        })
        .collect();
    let y2: Vec<f64> = y.iter().map(|v| v.norm_sqr()).collect();

    let mut out = BeamformerSet::zeros(h.antennas().to_vec());
    let mut searched = false;
    let mut solver = Solver::default();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in 0..k {
        let n = h.antennas()[i];
        // Σ_j |y_j|² h_{j i} h_{j i}^H
        a.clear();
        a.resize(n * n, Complex64::new(0.0, 0.0));
        for (j, &w) in y2.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let hji = h.get(j, i);
            for r in 0..n {
                let hr = hji[r] * w;
                for c in 0..n {
                    a[r * n + c] += hr * hji[c].conj();
                }
            }
        }
        let s = y[i] * coef[i];
        b.clear();
        b.extend(h.get(i, i).iter().map(|v| v * s));
        if norm_sqr(&b) == 0.0 {
            continue;
        }
        searched |= solver.constrained(&a, &b, p_max, tol);
        out.link_mut(i).copy_from_slice(&solver.best);
    }
    (out, searched)
}

/// One full round of the three block updates.
pub fn fp_iterate(
    x: &BeamformerSet,
    h: &ChannelSet,
    weights: &[f64],
    noise_vars: &[f64],
    p_max: f64,
) -> BeamformerSet {
    let round = evaluate(x, h, weights, noise_vars);
    fp_round(x, &round, h, weights, noise_vars, p_max, FpOptions::default().bisection_tol).0
}

/// Iterates from MRT until the relative WSR gain of a round falls below
/// `rel_tol` or the round budget runs out. Returns the best iterate.
pub fn solve(
    h: &ChannelSet,
    weights: &[f64],
    noise_vars: &[f64],
    p_max: f64,
    opts: &FpOptions,
) -> (BeamformerSet, FpTrace) {
    solve_from(init_mrt(h, p_max), h, weights, noise_vars, p_max, opts)
}

pub fn solve_from(
    start: BeamformerSet,
    h: &ChannelSet,
    weights: &[f64],
    noise_vars: &[f64],
    p_max: f64,
    opts: &FpOptions,
) -> (BeamformerSet, FpTrace) {
    let budget = opts.truncated_iters.unwrap_or(opts.max_iters);
    let mut x = start;
    let mut round = evaluate(&x, h, weights, noise_vars);
    let mut trace = FpTrace {
        wsr: vec![round.wsr],
        ..Default::default()
    };
    let (mut best, mut best_wsr) = (x.clone(), round.wsr);
    for _ in 0..budget {
        let (next, searched) = fp_round(&x, &round, h, weights, noise_vars, p_max, opts.bisection_tol);
        let next_round = evaluate(&next, h, weights, noise_vars);
        let gain = next_round.wsr - round.wsr;
        trace.iterations += 1;
        trace.bisection_rounds += searched as usize;
        trace.wsr.push(next_round.wsr);
        x = next;
        round = next_round;
        if round.wsr >= best_wsr {
            best_wsr = round.wsr;
            best = x.clone();
        }
        if opts.truncated_iters.is_none() && gain <= opts.rel_tol * trace.wsr[trace.wsr.len() - 2].abs() {
            trace.converged = true;
            break;
        }
    }
    if opts.truncated_iters.is_some() {
        trace.converged = trace.iterations == budget;
    }
    (best, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{Sample, ScenarioConfig};
    use crate::metrics::weighted_sum_rate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn mrt_init() {
        let h = ChannelSet::from_entries(vec![2], &[vec![vec![c(1.0, 0.0), c(0.0, 1.0)]]]).unwrap();
        let x = init_mrt(&h, 1.0);
        let s = 0.5f64.sqrt();
        assert!((x.link(0)[0] - c(s, 0.0)).norm() < 1e-15);
        assert!((x.link(0)[1] - c(0.0, s)).norm() < 1e-15);

        let zero = ChannelSet::from_entries(vec![1], &[vec![vec![c(0.0, 0.0)]]]).unwrap();
        assert_eq!(init_mrt(&zero, 1.0).link(0), &[c(0.0, 0.0)]);

        let siso = ChannelSet::from_entries(vec![1], &[vec![vec![c(0.3, 0.0)]]]).unwrap();
        assert!((init_mrt(&siso, 1.0).link(0)[0] - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn single_link_reaches_mrt_at_full_power() {
        let hv = vec![c(0.7, -0.2), c(-0.1, 0.9)];
        let h = ChannelSet::from_entries(vec![2], &[vec![hv.clone()]]).unwrap();
        let start = BeamformerSet::from_vecs(vec![vec![c(0.1, 0.0), c(0.0, 0.0)]]);
        let x = fp_iterate(&start, &h, &[1.0], &[1.0], 1.0);
        assert!((x.power(0) - 1.0).abs() < 1e-8);
        // aligned with h up to a common phase
        let align = inner(&hv, x.link(0)).norm() / norm_sqr(&hv).sqrt();
        assert!((align - 1.0).abs() < 1e-8);

        let (_, trace) = solve(&h, &[1.0], &[1.0], 1.0, &FpOptions::default());
        assert!(trace.converged && trace.iterations <= 2);
    }

    #[test]
    fn decoupled_pair_goes_full_power() {
        let g = [1.3, 0.8];
        let h = ChannelSet::from_fn(vec![1, 1], |i, j, _| {
            if i == j { c(g[i], 0.0) } else { c(1e-6, 0.0) }
        });
        let (x, trace) = solve(&h, &[1.0, 1.0], &[1.0, 1.0], 1.0, &FpOptions::default());
        assert!(trace.converged);
        assert!((x.power(0) - 1.0).abs() < 1e-7 && (x.power(1) - 1.0).abs() < 1e-7);
        let expected: f64 = g.iter().map(|v: &f64| (1.0 + v * v).ln()).sum();
        let wsr = weighted_sum_rate(&x, &h, &[1.0, 1.0], &[1.0, 1.0], 1.0);
        assert!((wsr - expected).abs() < 1e-6);
    }

    #[test]
    fn truncated_runs_exact_rounds() {
        let s = Sample::generate(&ScenarioConfig::default(), 0);
        let (_, trace) = solve(
            &s.channels,
            &s.instance.weights,
            &s.instance.noise_vars,
            1.0,
            &FpOptions::truncated(3),
        );
        assert_eq!(trace.iterations, 3);
        assert_eq!(trace.wsr.len(), 4);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(40))]

        #[test]
        fn monotone_and_feasible_on_random_instances(
            siso in 1usize..8,
            miso in 0usize..5,
            area in 60.0f64..500.0,
            p_max in 0.05f64..10.0,
            index in 0u64..1000,
        ) {
            let cfg = ScenarioConfig::default().with_counts(vec![siso, miso]).with_area(area);
            let s = Sample::generate(&cfg, index);
            let (x, trace) = solve(
                &s.channels,
                &s.instance.weights,
                &s.instance.noise_vars,
                p_max,
                &FpOptions::default(),
            );
            for w in trace.wsr.windows(2) {
                proptest::prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
            }
            proptest::prop_assert!(x.max_power() <= p_max * (1.0 + 1e-8));
        }
    }

    #[test]
    fn bisection_only_when_infeasible() {
        let (x, ran) = constrained_solve(&[c(4.0, 0.0)], &[c(1.0, 0.0)], 1.0, 1e-8);
        assert!(!ran);
        assert!((x[0] - c(0.25, 0.0)).norm() < 1e-15);

        let (x, ran) = constrained_solve(&[c(0.25, 0.0)], &[c(0.0, 1.0)], 1.0, 1e-8);
        assert!(ran);
        let p = norm_sqr(&x);
        assert!(p <= 1.0 && 1.0 - p <= 1e-8);
        // η = |b|/√P − a = 0.75 in closed form for the scalar case
        assert!((x[0] - c(0.0, 1.0)).norm() < 1e-8);
    }

    #[test]
    fn hermitian_solver_matches_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let v: Vec<Complex64> = (0..4).map(|_| c(rng.random(), rng.random())).collect();
            // a = v1 v1^H + v2 v2^H (PSD 2x2)
            let mut a = vec![c(0.0, 0.0); 4];
            for pair in v.chunks(2) {
                for r in 0..2 {
                    for cc in 0..2 {
                        a[r * 2 + cc] += pair[r] * pair[cc].conj();
                    }
                }
            }
            let b = vec![c(rng.random(), rng.random()), c(rng.random(), rng.random())];
            let eta = rng.random::<f64>();
            let x = solve_regularized(&a, &b, eta);
            for r in 0..2 {
                let lhs = (a[r * 2] + if r == 0 { eta } else { 0.0 }) * x[0]
                    + (a[r * 2 + 1] + if r == 1 { eta } else { 0.0 }) * x[1];
                assert!((lhs - b[r]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn singular_system_falls_back_to_ridge() {
        let a = vec![c(0.0, 0.0); 4];
        let b = vec![c(1.0, 0.0), c(0.0, 0.0)];
        let (x, ran) = constrained_solve(&a, &b, 1.0, 1e-8);
        assert!(ran);
        assert!((norm_sqr(&x) - 1.0).abs() <= 1e-8);
    }
}
