use rand::seq::index;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{PairingPlan, ParticleState, MAX_DIM};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::rng::StreamKey;

/// Draws `N_p` distinct partners of an agent, uniform among the other agents.
///
/// Small batches use rejection against an open-addressing set whose slots
/// carry a draw stamp, so the table is reused across agents without clearing.
/// Batches above half the population fall back to a shuffle-based draw.
#[derive(Debug, Default)]
pub(crate) struct PartnerSampler {
    /// `(stamp << 32) | index` per slot.
    table: Vec<u64>,
    stamp: u64,
    out: Vec<usize>,
}

impl PartnerSampler {
    pub(crate) fn new() -> Self {
        Self::default()
    }

    pub(crate) fn draw(&mut self, rng: &mut ChaCha8Rng, n: usize, i: usize, np: usize) -> &[usize] {
        let m = n - 1;
        let lift = |j: usize| if j >= i { j + 1 } else { j };
        self.out.clear();
        if 2 * np > m || m > u32::MAX as usize {
            self.out.extend(index::sample(rng, m, np).into_iter().map(lift));
            return &self.out;
        }
        let bits = (2 * np).next_power_of_two().trailing_zeros().max(1);
        let mask = (1usize << bits) - 1;
        if self.table.len() < mask + 1 || self.stamp >= u32::MAX as u64 {
            self.table = vec![0; (mask + 1).max(self.table.len())];
            self.stamp = 0;
        }
        self.stamp += 1;
        let tag = self.stamp << 32;
        while self.out.len() < np {
            // Multiply-shift index draw; the bias is below m / 2^64.
            let j = ((rng.next_u64() as u128 * m as u128) >> 64) as usize;
            let mut h = (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) as usize >> (usize::BITS - bits) & mask;
            loop {
                let slot = self.table[h];
                if slot >> 32 != self.stamp {
                    self.table[h] = tag | j as u64;
                    self.out.push(lift(j));
                    break;
                }
                if slot as u32 as usize == j {
                    break;
                }
                h = (h + 1) & mask;
            }
        }
        &self.out
    }
}

/// Difference `x_j - x_i` and its Euclidean norm.
#[inline]
pub(crate) fn displacement(xi: &[f64], xj: &[f64]) -> ([f64; MAX_DIM], f64) {
    let mut delta = [0.0; MAX_DIM];
    let mut r2 = 0.0;
    for c in 0..xi.len() {
        delta[c] = xj[c] - xi[c];
        r2 += delta[c] * delta[c];
    }
    (delta, r2.sqrt())
}

fn check_batch(n: usize, np: usize) -> Result<()> {
    if np == 0 || np >= n {
        return Err(Error::Config(format!("batch size must satisfy 1 <= N_p < N (N_p = {np}, N = {n})")));
    }
    Ok(())
}

fn finish(state: &ParticleState, dt: f64, x: Vec<f64>) -> ParticleState {
    ParticleState { t: state.t + dt, dim: state.dim, x }
}

/// Binary update with caller-supplied standard normal noise `Ξ` (length `dN`).
pub fn step_binary_with_noise(
    state: &ParticleState,
    plan: &PairingPlan,
    kernels: &KernelSpec,
    dt: f64,
    noise: &[f64],
) -> Result<ParticleState> {
    let d = state.dim;
    let n = state.n_agents();
    if plan.len() != n {
        return Err(Error::Shape(format!("plan for {} agents, state has {n}", plan.len())));
    }
    if noise.len() != d * n {
        return Err(Error::Shape("noise length differs from state length".into()));
    }
    let sqdt = dt.sqrt();
    let mut next = vec![0.0; d * n];
    next.par_chunks_mut(d).enumerate().try_for_each(|(i, out)| -> Result<()> {
        let xi = state.agent(i);
        let (delta, r) = displacement(xi, state.agent(plan.partner(i)));
        let p = kernels.drift_weight(i, r)?;
        let mut amp = [0.0; MAX_DIM];
        kernels.noise_amplitude(i, xi, &delta[..d], r, &mut amp[..d])?;
        for c in 0..d {
            out[c] = xi[c] + dt * p * delta[c] + sqdt * amp[c] * noise[i * d + c];
        }
        Ok(())
    })?;
    Ok(finish(state, dt, next))
}

/// One step of the binary-interaction scheme
/// `x_i <- x_i + dt P(r_i)(x_j(i) - x_i) + sqrt(dt) D_i ξ_i`.
pub fn step_binary(
    state: &ParticleState,
    plan: &PairingPlan,
    kernels: &KernelSpec,
    dt: f64,
    key: StreamKey,
) -> Result<ParticleState> {
    let d = state.dim;
    let mut noise = vec![0.0; state.x.len()];
    noise.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
        let mut rng = key.child(i as u64).rng();
        out.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    });
    step_binary_with_noise(state, plan, kernels, dt, &noise)
}

/// Random-batch step: each agent averages the drift over `np` partners drawn
/// without replacement and receives `(sqrt(dt)/np) Σ_j D_ij ξ_ij` noise.
pub fn step_batch(
    state: &ParticleState,
    kernels: &KernelSpec,
    np: usize,
    dt: f64,
    key: StreamKey,
) -> Result<ParticleState> {
    let d = state.dim;
    let n = state.n_agents();
    check_batch(n, np)?;
    let sqdt = dt.sqrt();
    let inv = 1.0 / np as f64;
    let mut next = vec![0.0; d * n];
    next.par_chunks_mut(d).enumerate().try_for_each_init(PartnerSampler::new, |sampler, (i, out)| -> Result<()> {
        let mut rng = key.child(i as u64).rng();
        let xi = state.agent(i);
        let mut drift = [0.0; MAX_DIM];
        let mut noise = [0.0; MAX_DIM];
        let mut amp = [0.0; MAX_DIM];
        for &j in sampler.draw(&mut rng, n, i, np) {
            let (delta, r) = displacement(xi, state.agent(j));
            let p = kernels.drift_weight(i, r)?;
            kernels.noise_amplitude(i, xi, &delta[..d], r, &mut amp[..d])?;
            for c in 0..d {
                drift[c] += p * delta[c];
                let xi_c: f64 = rng.sample(StandardNormal);
                noise[c] += amp[c] * xi_c;
            }
        }
        for c in 0..d {
            out[c] = xi[c] + dt * inv * drift[c] + sqdt * inv * noise[c];
        }
        Ok(())
    })?;
    Ok(finish(state, dt, next))
}

/// Batch step with moment-matched noise: drift as in [`step_batch`], noise
/// `sqrt(dt * mean_j D_ij^2) ξ_i` componentwise.
pub fn step_batch_surrogate(
    state: &ParticleState,
    kernels: &KernelSpec,
    np: usize,
    dt: f64,
    key: StreamKey,
) -> Result<ParticleState> {
    let d = state.dim;
    let n = state.n_agents();
    check_batch(n, np)?;
    let inv = 1.0 / np as f64;
    let mut next = vec![0.0; d * n];
    next.par_chunks_mut(d).enumerate().try_for_each_init(PartnerSampler::new, |sampler, (i, out)| -> Result<()> {
        let mut rng = key.child(i as u64).rng();
        let xi = state.agent(i);
        let mut drift = [0.0; MAX_DIM];
        let mut var = [0.0; MAX_DIM];
        let mut amp = [0.0; MAX_DIM];
        for &j in sampler.draw(&mut rng, n, i, np) {
            let (delta, r) = displacement(xi, state.agent(j));
            let p = kernels.drift_weight(i, r)?;
            kernels.noise_amplitude(i, xi, &delta[..d], r, &mut amp[..d])?;
            for c in 0..d {
                drift[c] += p * delta[c];
                var[c] += amp[c] * amp[c];
            }
        }
        for c in 0..d {
            let xi_c: f64 = rng.sample(StandardNormal);
            out[c] = xi[c] + dt * inv * drift[c] + (dt * inv * var[c]).sqrt() * xi_c;
        }
        Ok(())
    })?;
    Ok(finish(state, dt, next))
}

/// Euler–Maruyama step of the all-to-all system
/// `dx_i = (1/N) Σ_j P(r_ij)(x_j - x_i) dt + (1/N) Σ_j D_ij dB_ij`.
///
/// The `N` independent noise terms are combined into one Gaussian per
/// component with the same variance, which is exact in law. Cost is `O(N^2)`.
pub fn step_full(state: &ParticleState, kernels: &KernelSpec, dt: f64, key: StreamKey) -> Result<ParticleState> {
    let d = state.dim;
    let n = state.n_agents();
    let sqdt = dt.sqrt();
    let inv = 1.0 / n as f64;
    let mut next = vec![0.0; d * n];
    next.par_chunks_mut(d).enumerate().try_for_each(|(i, out)| -> Result<()> {
        let mut rng = key.child(i as u64).rng();
        let xi = state.agent(i);
        let mut drift = [0.0; MAX_DIM];
        let mut var = [0.0; MAX_DIM];
        let mut amp = [0.0; MAX_DIM];
        for j in 0..n {
            let (delta, r) = displacement(xi, state.agent(j));
            if j != i {
                let p = kernels.drift_weight(i, r)?;
                for c in 0..d {
                    drift[c] += p * delta[c];
                }
            }
            kernels.noise_amplitude(i, xi, &delta[..d], r, &mut amp[..d])?;
            for c in 0..d {
                var[c] += amp[c] * amp[c];
            }
        }
        for c in 0..d {
            let xi_c: f64 = rng.sample(StandardNormal);
            out[c] = xi[c] + dt * inv * drift[c] + sqdt * inv * var[c].sqrt() * xi_c;
        }
        Ok(())
    })?;
    Ok(finish(state, dt, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::sample_pairing;
    use crate::kernels::{DiffusionMode, KernelFn, KernelSpec};
    use std::sync::Arc;

    fn constant_kernels(p: f64, dval: f64, mode: DiffusionMode) -> KernelSpec {
        KernelSpec::from_fns(&KernelFn::Constant { value: p }, mode, &[KernelFn::Constant { value: dval }]).unwrap()
    }

    #[test]
    fn zero_kernels_leave_the_state_unchanged() {
        let state = ParticleState::new(0.0, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8]).unwrap();
        let plan = sample_pairing(4, StreamKey::new(3)).unwrap();
        let k = constant_kernels(0.0, 0.0, DiffusionMode::PairwiseRadial);
        let next = step_binary(&state, &plan, &k, 0.1, StreamKey::new(9)).unwrap();
        assert_eq!(next.x, state.x);
    }

    #[test]
    fn two_agent_hand_computation() {
        let state = ParticleState::new(0.0, 1, vec![0.0, 1.0]).unwrap();
        let plan = PairingPlan::new(vec![1, 0]).unwrap();
        let k = constant_kernels(1.0, 0.0, DiffusionMode::PairwiseRadial);
        let next = step_binary(&state, &plan, &k, 0.1, StreamKey::new(1)).unwrap();
        assert!((next.x[0] - 0.1).abs() < 1e-15);
        assert!((next.x[1] - 0.9).abs() < 1e-15);
        assert!((next.t - 0.1).abs() < 1e-15);
    }

    /// Per-agent loop written directly from the update rule.
    fn scalar_binary(x: &[f64], perm: &[usize], noise: &[f64], dt: f64, p: impl Fn(f64) -> f64, dfn: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..x.len() {
            let j = perm[i];
            let r = (x[j] - x[i]).abs();
            let amp = dfn(r) * (x[j] - x[i]);
            out.push(x[i] + dt * p(r) * (x[j] - x[i]) + dt.sqrt() * amp * noise[i]);
        }
        out
    }

    #[test]
    fn vectorized_step_matches_scalar_loop() {
        let p = |r: f64| (1.0 + r * r).powi(-2);
        let dfn = |r: f64| 0.25 / ((1.0 + r) * (1.0 + r));
        let kernels = KernelSpec::new(Arc::new(p), DiffusionMode::PairwiseRadialDisplacement, vec![Arc::new(dfn)]).unwrap();
        for seed in 0..50u64 {
            let mut rng = StreamKey::new(seed).rng();
            let n = 2 * (1 + (seed as usize % 5));
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let plan = sample_pairing(n, StreamKey::new(seed + 100)).unwrap();
            let state = ParticleState::new(0.0, 1, x.clone()).unwrap();
            let got = step_binary_with_noise(&state, &plan, &kernels, 0.01, &noise).unwrap();
            let want = scalar_binary(&x, plan.as_slice(), &noise, 0.01, p, dfn);
            assert_eq!(got.x, want);
        }
    }

    #[test]
    fn non_finite_kernel_names_agent_and_distance() {
        let state = ParticleState::new(0.0, 1, vec![0.0, 0.5]).unwrap();
        let plan = PairingPlan::new(vec![1, 0]).unwrap();
        let k = KernelSpec::new(Arc::new(|r: f64| 1.0 / (r - 0.5)), DiffusionMode::PairwiseRadial, vec![Arc::new(|_| 0.0)]).unwrap();
        let err = step_binary(&state, &plan, &k, 0.1, StreamKey::new(1)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteKernel { r, .. } if r == 0.5));
    }

    #[test]
    fn exhaustive_batch_equals_full_average() {
        let mut rng = StreamKey::new(5).rng();
        let n = 12;
        let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let state = ParticleState::new(0.0, 2, x).unwrap();
        let k = KernelSpec::from_fns(&KernelFn::CuckerSmale {}, DiffusionMode::PairwiseRadial, &[KernelFn::Constant { value: 0.0 }]).unwrap();
        let dt = 0.1;
        let batch = step_batch(&state, &k, n - 1, dt, StreamKey::new(8)).unwrap();
        for i in 0..n {
            let xi = state.agent(i);
            for c in 0..2 {
                let mut s = 0.0;
                for j in (0..n).filter(|&j| j != i) {
                    let (delta, r) = displacement(xi, state.agent(j));
                    s += KernelFn::CuckerSmale {}.eval(r) * delta[c];
                }
                let want = xi[c] + dt * s / (n - 1) as f64;
                assert!((batch.x[2 * i + c] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn three_agents_single_partner_enumeration() {
        // With N = 3 and N_p = 1 each agent sees one of two partners with
        // probability 1/2; the analytic mean drift averages both.
        let state = ParticleState::new(0.0, 1, vec![0.0, 0.3, 1.0]).unwrap();
        let k = KernelSpec::from_fns(&KernelFn::CuckerSmale {}, DiffusionMode::PairwiseRadial, &[KernelFn::Constant { value: 0.0 }]).unwrap();
        let dt = 1.0;
        let draws = 20_000;
        let mut mean = [0.0; 3];
        let mut sq = [0.0; 3];
        for s in 0..draws {
            let next = step_batch(&state, &k, 1, dt, StreamKey::new(s)).unwrap();
            for i in 0..3 {
                let inc = next.x[i] - state.x[i];
                mean[i] += inc / draws as f64;
                sq[i] += inc * inc / draws as f64;
            }
        }
        for i in 0..3 {
            let partners: Vec<usize> = (0..3).filter(|&j| j != i).collect();
            let vals: Vec<f64> = partners
                .iter()
                .map(|&j| {
                    let d = state.x[j] - state.x[i];
                    KernelFn::CuckerSmale {}.eval(d.abs()) * d
                })
                .collect();
            let analytic = (vals[0] + vals[1]) / 2.0;
            let sd = ((vals[0] - vals[1]).abs() / 2.0) / (draws as f64).sqrt();
            assert!((mean[i] - analytic).abs() <= 3.0 * sd + 1e-12, "agent {i}");
        }
    }

    #[test]
    fn surrogate_noise_matches_binary_second_moment() {
        // Local diffusion: the surrogate batch noise equals D(x_i) ξ_i exactly.
        let state = ParticleState::new(0.0, 1, vec![0.0, 0.5, -0.5, 0.2]).unwrap();
        let k = KernelSpec::from_fns(&KernelFn::Constant { value: 0.0 }, DiffusionMode::LocalState, &[KernelFn::Bump { scale: 0.5, power: 2.0 }]).unwrap();
        let draws = 20_000;
        let mut var = 0.0;
        for s in 0..draws {
            let next = step_batch_surrogate(&state, &k, 2, 0.01, StreamKey::new(s)).unwrap();
            var += (next.x[0] - state.x[0]).powi(2) / draws as f64;
        }
        let want = 0.01 * 0.25;
        assert!((var - want).abs() < 4.0 * want * (2.0 / draws as f64).sqrt());
    }

    #[test]
    fn partner_draws_are_distinct_and_exclude_self() {
        let mut sampler = PartnerSampler::new();
        let mut rng = StreamKey::new(8).rng();
        for (n, np) in [(50, 3), (50, 30), (1000, 100), (7, 6)] {
            for i in [0, n / 2, n - 1] {
                let mut got = sampler.draw(&mut rng, n, i, np).to_vec();
                assert_eq!(got.len(), np);
                assert!(got.iter().all(|&j| j < n && j != i));
                got.sort_unstable();
                got.dedup();
                assert_eq!(got.len(), np);
            }
        }
    }

    #[test]
    fn partner_draws_are_uniform() {
        // Every other agent is chosen with probability N_p / (N - 1).
        let (n, np, i, trials) = (40, 5, 17, 40_000);
        let mut sampler = PartnerSampler::new();
        let mut rng = StreamKey::new(9).rng();
        let mut hits = vec![0usize; n];
        for _ in 0..trials {
            for &j in sampler.draw(&mut rng, n, i, np) {
                hits[j] += 1;
            }
        }
        let p = np as f64 / (n - 1) as f64;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for (j, &h) in hits.iter().enumerate() {
            if j == i {
                assert_eq!(h, 0);
            } else {
                assert!((h as f64 - trials as f64 * p).abs() < 5.0 * sd, "agent {j}: {h}");
            }
        }
    }
}
