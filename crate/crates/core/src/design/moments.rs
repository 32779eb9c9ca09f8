use crate::dynamics::step::displacement;
use crate::dynamics::{step_binary_with_noise, PairingPlan, ParticleState, MAX_DIM};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;

/// Max-norm residuals of the one-step moment identities, divided by `Δt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentResiduals {
    /// `|E[ΔX] - Δt E_S[P(r)(x_j - x_i)]| / Δt`
    pub drift: f64,
    /// `|E[ΔX ⊙ ΔX] - Δt E_S[D ⊙ D]| / Δt`
    pub diffusion: f64,
}

/// Three-point Gauss–Hermite rule for the standard normal (exact to degree 5).
const GAUSS_HERMITE: [(f64, f64); 3] = [(-1.732_050_807_568_877_2, 1.0 / 6.0), (0.0, 2.0 / 3.0), (1.732_050_807_568_877_2, 1.0 / 6.0)];

/// Moments of one binary step from `state`, computed exactly.
///
/// The expectation over the partner of agent `i` (uniform over the other
/// agents) is taken by running the shifted permutations `i -> i + s mod N`,
/// `s = 1..N-1`, which together pair every agent with every other agent once.
/// The expectation over the noise uses Gauss–Hermite nodes; the step is affine
/// in the noise, so the rule is exact for both moments.
pub fn moment_residuals(state: &ParticleState, kernels: &KernelSpec, dt: f64) -> Result<MomentResiduals> {
    let d = state.dim;
    let n = state.n_agents();
    if n < 2 {
        return Err(Error::Config("need at least two agents".into()));
    }
    let combos = 3usize.pow(d as u32);
    let w_partner = 1.0 / (n - 1) as f64;
    let mut m1 = vec![0.0; d * n];
    let mut m2 = vec![0.0; d * n];
    let mut noise = vec![0.0; d * n];
    for s in 1..n {
        let plan = PairingPlan::new((0..n).map(|i| (i + s) % n).collect())?;
        for q in 0..combos {
            let mut weight = w_partner;
            let mut nodes = [0.0; MAX_DIM];
            let mut rest = q;
            for node in nodes.iter_mut().take(d) {
                let (z, w) = GAUSS_HERMITE[rest % 3];
                *node = z;
                weight *= w;
                rest /= 3;
            }
            for (k, v) in noise.iter_mut().enumerate() {
                *v = nodes[k % d];
            }
            let next = step_binary_with_noise(state, &plan, kernels, dt, &noise)?;
            for k in 0..d * n {
                let inc = next.x[k] - state.x[k];
                m1[k] += weight * inc;
                m2[k] += weight * inc * inc;
            }
        }
    }

    let mut drift: f64 = 0.0;
    let mut diffusion: f64 = 0.0;
    let mut amp = [0.0; MAX_DIM];
    for i in 0..n {
        let xi = state.agent(i);
        let mut mean_drift = [0.0; MAX_DIM];
        let mut mean_sq = [0.0; MAX_DIM];
        for j in (0..n).filter(|&j| j != i) {
            let (delta, r) = displacement(xi, state.agent(j));
            let p = kernels.drift_weight(i, r)?;
            kernels.noise_amplitude(i, xi, &delta[..d], r, &mut amp[..d])?;
            for c in 0..d {
                mean_drift[c] += w_partner * p * delta[c];
                mean_sq[c] += w_partner * amp[c] * amp[c];
            }
        }
        for c in 0..d {
            drift = drift.max((m1[i * d + c] - dt * mean_drift[c]).abs() / dt);
            diffusion = diffusion.max((m2[i * d + c] - dt * mean_sq[c]).abs() / dt);
        }
    }
    Ok(MomentResiduals { drift, diffusion })
}
