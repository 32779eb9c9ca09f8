//! Forward simulators: binary-interaction dynamics, random-batch dynamics,
//! the full mean-field particle system, and dynamics driven by learned kernels.

mod io;
pub(crate) mod step;

pub use io::{read_trajectory, write_csv, write_trajectory, TRAJECTORY_MAGIC};
pub use step::{
    step_batch, step_batch_surrogate, step_binary, step_binary_with_noise, step_full,
};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::KernelEstimate;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::rng::{tag, StreamKey};

/// Largest supported state dimension.
pub const MAX_DIM: usize = 3;

/// Agent states at one time, laid out as `d`-blocks per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub t: f64,
    pub dim: usize,
    pub x: Vec<f64>,
}

impl ParticleState {
    pub fn new(t: f64, dim: usize, x: Vec<f64>) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Config(format!("state dimension must be in 1..={MAX_DIM}")));
        }
        if x.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values do not form {dim}-blocks", x.len())));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite state entry at {i}")));
        }
        Ok(ParticleState { t, dim, x })
    }

    pub fn n_agents(&self) -> usize {
        self.x.len() / self.dim
    }

    #[inline]
    pub fn agent(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// True if every agent lies in `[-half_width, half_width]^d`.
    pub fn inside_box(&self, half_width: f64) -> bool {
        self.x.iter().all(|v| v.abs() <= half_width)
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.n_agents() as f64;
        let mut m = vec![0.0; self.dim];
        for block in self.x.chunks(self.dim) {
            for (mc, v) in m.iter_mut().zip(block) {
                *mc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

/// One interaction partner per agent (0-based indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingPlan {
    perm: Vec<usize>,
}

impl PairingPlan {
    /// Accepts any fixed-point-free permutation.
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for (i, &j) in perm.iter().enumerate() {
            if j >= n || seen[j] {
                return Err(Error::InvalidPairing("not a permutation".into()));
            }
            if j == i {
                return Err(Error::InvalidPairing(format!("agent {i} is paired with itself")));
            }
            seen[j] = true;
        }
        Ok(PairingPlan { perm })
    }

    pub fn from_one_based(perm: &[usize]) -> Result<Self> {
        if perm.iter().any(|&j| j == 0) {
            return Err(Error::InvalidPairing("one-based index 0".into()));
        }
        PairingPlan::new(perm.iter().map(|j| j - 1).collect())
    }

    #[inline]
    pub fn partner(&self, i: usize) -> usize {
        self.perm[i]
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.perm.iter().map(|j| j + 1).collect()
    }

    pub fn is_involution(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &j)| self.perm[j] == i)
    }
}

/// Uniformly random perfect matching, expressed as an involution.
pub fn sample_pairing(n: usize, key: StreamKey) -> Result<PairingPlan> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::OddPairing(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut key.rng());
    let mut perm = vec![0; n];
    for pair in order.chunks_exact(2) {
        perm[pair[0]] = pair[1];
        perm[pair[1]] = pair[0];
    }
    Ok(PairingPlan { perm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    /// Each coordinate i.i.d. uniform on `[low, high)`.
    Uniform { low: f64, high: f64 },
    /// Flat `dN` sample vector.
    Explicit { samples: Vec<f64> },
}

/// Which update rule advances the particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Matched pairs, one partner per agent and step.
    Binary,
    /// Random batches of `batch_size` partners with summed noise.
    Batch,
    /// All-to-all mean-field particle system.
    Full,
    /// Random batches with moment-matched noise: the drift is the batch
    /// average and the noise variance is the batch average of `D^2`.
    SurrogateBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_agents: usize,
    pub dim: usize,
    pub dt: f64,
    pub snapshots: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub initial: InitialLaw,
    /// Declared domain box `[-L, L]^d`.
    #[serde(default)]
    pub domain_half_width: Option<f64>,
}

impl SimConfig {
    pub fn validate(&self, scheme: Scheme) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::Config("need at least two agents".into()));
        }
        if self.dim == 0 || self.dim > MAX_DIM {
            return Err(Error::Config(format!("dimension must be in 1..={MAX_DIM}")));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("time step must be positive".into()));
        }
        if self.snapshots == 0 {
            return Err(Error::Config("need at least one snapshot".into()));
        }
        match scheme {
            Scheme::Binary if self.n_agents % 2 != 0 => return Err(Error::OddPairing(self.n_agents)),
            Scheme::Batch | Scheme::SurrogateBatch => {
                let np = self.batch_size.ok_or_else(|| Error::Config("batch scheme needs batch_size".into()))?;
                if np == 0 || np >= self.n_agents {
                    return Err(Error::Config(format!(
                        "batch size must satisfy 1 <= N_p < N (N_p = {np}, N = {})",
                        self.n_agents
                    )));
                }
            }
            _ => {}
        }
        if let InitialLaw::Explicit { samples } = &self.initial {
            if samples.len() != self.n_agents * self.dim {
                return Err(Error::Shape(format!(
                    "initial samples have length {}, expected {}",
                    samples.len(),
                    self.n_agents * self.dim
                )));
            }
        }
        Ok(())
    }

    pub fn initial_state(&self) -> Result<ParticleState> {
        let x = match &self.initial {
            InitialLaw::Uniform { low, high } => {
                if !(low < high) {
                    return Err(Error::Config("uniform law needs low < high".into()));
                }
                let mut rng = StreamKey::new(self.seed).child(tag::INIT).rng();
                (0..self.n_agents * self.dim).map(|_| rng.random_range(*low..*high)).collect()
            }
            InitialLaw::Explicit { samples } => samples.clone(),
        };
        let state = ParticleState::new(0.0, self.dim, x)?;
        if let Some(l) = self.domain_half_width {
            if !state.inside_box(l) {
                return Err(Error::Config(format!("initial condition leaves the box [-{l}, {l}]^d")));
            }
        }
        Ok(state)
    }
}

/// Snapshots `X^0..X^{M-1}` at `t_n = n dt`, with pairings when recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub n_agents: usize,
    pub dim: usize,
    pub dt: f64,
    pub seed: u64,
    frames: Vec<f64>,
    pub pairings: Option<Vec<PairingPlan>>,
}

impl TrajectoryDataset {
    pub fn new(
        n_agents: usize,
        dim: usize,
        dt: f64,
        seed: u64,
        frames: Vec<f64>,
        pairings: Option<Vec<PairingPlan>>,
    ) -> Result<Self> {
        let width = n_agents * dim;
        if width == 0 || frames.len() % width != 0 {
            return Err(Error::Shape("frames are not a whole number of snapshots".into()));
        }
        let m = frames.len() / width;
        if let Some(p) = &pairings {
            if p.len() != m || p.iter().any(|s| s.len() != n_agents) {
                return Err(Error::Shape("pairing frames do not match snapshots".into()));
            }
        }
        Ok(TrajectoryDataset { n_agents, dim, dt, seed, frames, pairings })
    }

    pub fn snapshots(&self) -> usize {
        self.frames.len() / (self.n_agents * self.dim)
    }

    pub fn frame(&self, n: usize) -> &[f64] {
        let w = self.n_agents * self.dim;
        &self.frames[n * w..(n + 1) * w]
    }

    pub fn state(&self, n: usize) -> ParticleState {
        ParticleState { t: self.time(n), dim: self.dim, x: self.frame(n).to_vec() }
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.snapshots() - 1)
    }

    pub fn frames_flat(&self) -> &[f64] {
        &self.frames
    }

    /// Simulation settings that regenerate dynamics from this dataset's
    /// initial condition over the same time grid.
    pub fn replay_config(&self, seed: u64, batch_size: Option<usize>) -> SimConfig {
        SimConfig {
            n_agents: self.n_agents,
            dim: self.dim,
            dt: self.dt,
            snapshots: self.snapshots(),
            batch_size,
            seed,
            initial: InitialLaw::Explicit { samples: self.frame(0).to_vec() },
            domain_half_width: None,
        }
    }
}

/// Runs `scheme` from the configured initial condition and records every step.
pub fn simulate(config: &SimConfig, kernels: &KernelSpec, scheme: Scheme) -> Result<TrajectoryDataset> {
    config.validate(scheme)?;
    let mut state = config.initial_state()?;
    let key = StreamKey::new(config.seed);
    let m = config.snapshots;
    let width = config.n_agents * config.dim;
    let mut frames = Vec::with_capacity(m * width);
    frames.extend_from_slice(&state.x);

    let pairings = if scheme == Scheme::Binary {
        let plans = (0..m)
            .map(|n| sample_pairing(config.n_agents, key.child(tag::PAIRING).child(n as u64)))
            .collect::<Result<Vec<_>>>()?;
        Some(plans)
    } else {
        None
    };

    for n in 0..m.saturating_sub(1) {
        let noise_key = key.child(tag::NOISE).child(n as u64);
        state = match scheme {
            Scheme::Binary => {
                let plan = &pairings.as_ref().expect("binary pairings")[n];
                step_binary(&state, plan, kernels, config.dt, noise_key)?
            }
            Scheme::Batch => step_batch(&state, kernels, config.batch_size.unwrap(), config.dt, noise_key)?,
            Scheme::SurrogateBatch => {
                step_batch_surrogate(&state, kernels, config.batch_size.unwrap(), config.dt, noise_key)?
            }
            Scheme::Full => step_full(&state, kernels, config.dt, noise_key)?,
        };
        frames.extend_from_slice(&state.x);
    }

    TrajectoryDataset::new(config.n_agents, config.dim, config.dt, config.seed, frames, pairings)
}

/// Dynamics driven by the learned kernels `P̂`, `D̂` of `estimate`.
///
/// `Scheme::Batch` is interpreted as the surrogate batch scheme, whose noise
/// matches the second moment of the binary dynamics.
pub fn simulate_reconstructed(
    config: &SimConfig,
    estimate: &KernelEstimate,
    scheme: Scheme,
) -> Result<TrajectoryDataset> {
    let scheme = if scheme == Scheme::Batch { Scheme::SurrogateBatch } else { scheme };
    simulate(config, &estimate.to_kernel_spec(), scheme)
}
