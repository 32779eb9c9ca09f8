//! Ready-made experiments: the benchmark models with their data windows,
//! constraints and ensemble sizes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::basis::MeshKind;
use crate::discover::{DiffusionSettings, DiscoveryConfig, DriftSettings, Method, ValidationOptions, WeightRule};
use crate::dynamics::{InitialLaw, Scheme, SimConfig};
use crate::error::{Error, Result};
use crate::kernels::{DiffusionMode, KernelFn, KernelSpecConfig};
use crate::qp::QpOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    /// Cucker–Smale drift, displacement diffusion, pairings observed.
    KnownS,
    /// Bounded confidence `τ = 0.5`, local diffusion.
    BoundedConfidence,
    /// Attraction–repulsion drift, local diffusion.
    AttractionRepulsion,
    /// Cucker–Smale drift, displacement diffusion anchored at `r = 0`.
    NonlocalDiffusion,
    /// As [`Benchmark::NonlocalDiffusion`] with a nonincreasing diffusion.
    NonlocalDiffusionMonotone,
    /// 2D power-law attraction–repulsion with anisotropic local diffusion.
    Anisotropic2d,
    /// 2D bounded confidence `τ = 1` with displacement diffusion.
    Nonlocal2d,
}

impl Benchmark {
    pub const ALL: [Benchmark; 7] = [
        Benchmark::KnownS,
        Benchmark::BoundedConfidence,
        Benchmark::AttractionRepulsion,
        Benchmark::NonlocalDiffusion,
        Benchmark::NonlocalDiffusionMonotone,
        Benchmark::Anisotropic2d,
        Benchmark::Nonlocal2d,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Benchmark::KnownS => "known_s",
            Benchmark::BoundedConfidence => "1",
            Benchmark::AttractionRepulsion => "2",
            Benchmark::NonlocalDiffusion => "3",
            Benchmark::NonlocalDiffusionMonotone => "3b",
            Benchmark::Anisotropic2d => "4",
            Benchmark::Nonlocal2d => "5",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Benchmark::Anisotropic2d | Benchmark::Nonlocal2d => 2,
            _ => 1,
        }
    }

    pub fn methods(self) -> &'static [Method] {
        match self {
            Benchmark::KnownS => &[Method::KnownS],
            _ => &[Method::Rbm, Method::MeanField],
        }
    }

    pub fn settings(self) -> &'static [Setting] {
        match self {
            Benchmark::KnownS => &[Setting::S1],
            _ => &[Setting::S1, Setting::S2, Setting::S3],
        }
    }

    pub fn kernels(self) -> KernelSpecConfig {
        let local = |d: Vec<KernelFn>| (DiffusionMode::LocalState, d);
        let (drift, (diffusion_mode, diffusion)) = match self {
            Benchmark::KnownS | Benchmark::NonlocalDiffusion | Benchmark::NonlocalDiffusionMonotone => (
                KernelFn::CuckerSmale {},
                (DiffusionMode::PairwiseRadialDisplacement, vec![KernelFn::RationalDecay { amplitude: 0.25 }]),
            ),
            Benchmark::BoundedConfidence => {
                (KernelFn::BoundedConfidence { tau: 0.5 }, local(vec![KernelFn::Bump { scale: 0.5, power: 2.0 }]))
            }
            Benchmark::AttractionRepulsion => {
                (KernelFn::AttractionRepulsion {}, local(vec![KernelFn::Bump { scale: 0.5, power: 2.0 }]))
            }
            Benchmark::Anisotropic2d => (
                KernelFn::PowerLaw2d {},
                local(vec![KernelFn::Bump { scale: 0.25, power: 1.0 }, KernelFn::Bump { scale: 0.2, power: 0.5 }]),
            ),
            Benchmark::Nonlocal2d => (
                KernelFn::BoundedConfidence { tau: 1.0 },
                (DiffusionMode::PairwiseRadialDisplacement, vec![KernelFn::CuckerSmale {}]),
            ),
        };
        KernelSpecConfig { drift, diffusion_mode, diffusion }
    }

    fn dt(self) -> f64 {
        match self {
            Benchmark::BoundedConfidence | Benchmark::AttractionRepulsion => 0.05,
            _ => 0.01,
        }
    }

    fn initial(self) -> InitialLaw {
        match self {
            Benchmark::Anisotropic2d => InitialLaw::Uniform { low: -0.85, high: 0.85 },
            _ => InitialLaw::Uniform { low: -1.0, high: 1.0 },
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Benchmark::ALL
            .into_iter()
            .find(|b| b.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown test id {s:?} (expected one of known_s, 1, 2, 3, 3b, 4, 5)")))
    }
}

/// Drift data windows `(M_P, ℓ)`: `(100, 1)`, `(50, 2)` or `(25, 4)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    S1,
    S2,
    S3,
}

impl Setting {
    pub fn window(self) -> (usize, usize) {
        match self {
            Setting::S1 => (100, 1),
            Setting::S2 => (50, 2),
            Setting::S3 => (25, 4),
        }
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "s1" => Ok(Setting::S1),
            "2" | "s2" => Ok(Setting::S2),
            "3" | "s3" => Ok(Setting::S3),
            _ => Err(Error::Config(format!("unknown setting {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn n_agents(self) -> usize {
        match self {
            Scale::Desk => 20_000,
            Scale::Paper => 100_000,
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            Scale::Desk => 1000,
            Scale::Paper => 1000,
        }
    }

    pub fn ensemble_size(self) -> usize {
        match self {
            Scale::Desk => 3,
            Scale::Paper => 10,
        }
    }

    fn density_bins(self, dim: usize) -> usize {
        match (self, dim) {
            (_, 1) => 100,
            (Scale::Desk, _) => 25,
            (Scale::Paper, _) => 40,
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            _ => Err(Error::Config(format!("unknown scale {s:?} (expected desk or paper)"))),
        }
    }
}

/// Data generation, ground truth and discovery settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub sim: SimConfig,
    pub kernels: KernelSpecConfig,
    pub discovery: DiscoveryConfig,
    #[serde(default)]
    pub validation: ValidationOptions,
}

/// The experiment of `bench` under `setting`, `scale` and `method`.
pub fn preset(bench: Benchmark, setting: Setting, scale: Scale, method: Method, seed: u64) -> Result<Experiment> {
    if !bench.methods().contains(&method) {
        return Err(Error::Config(format!("test {bench} does not run the {method:?} method")));
    }
    let dim = bench.dim();
    let kernels = bench.kernels();
    let sim = SimConfig {
        n_agents: scale.n_agents(),
        dim,
        dt: bench.dt(),
        snapshots: 201,
        batch_size: None,
        seed,
        initial: bench.initial(),
        domain_half_width: Some(1.0),
    };
    let (m_p, stride) = if bench == Benchmark::KnownS { (20, 1) } else { setting.window() };
    let (nb_p, rho_bar, kappa_p) = match bench {
        Benchmark::KnownS | Benchmark::NonlocalDiffusion | Benchmark::NonlocalDiffusionMonotone => (10, 1.0, -1),
        Benchmark::BoundedConfidence => (21, 1.0, -1),
        Benchmark::AttractionRepulsion => (8, -1.0, 1),
        Benchmark::Anisotropic2d => (10, -7.0, 1),
        Benchmark::Nonlocal2d => (21, 1.0, -1),
    };
    let local = kernels.diffusion_mode == DiffusionMode::LocalState;
    let (nb_d, anchors, kappa_d): (usize, Vec<(i64, f64)>, i8) = match bench {
        Benchmark::KnownS | Benchmark::NonlocalDiffusion => (8, vec![(0, 0.25)], 0),
        Benchmark::NonlocalDiffusionMonotone => (8, vec![(0, 0.25)], -1),
        Benchmark::BoundedConfidence | Benchmark::AttractionRepulsion | Benchmark::Anisotropic2d => {
            (15, vec![(0, 0.0), (-1, 0.0)], 0)
        }
        Benchmark::Nonlocal2d => (10, vec![(0, 1.0)], -1),
    };
    let (m_d, stride_d) = match (bench, method) {
        (Benchmark::KnownS, _) => (10, 1),
        (Benchmark::Anisotropic2d, _) => (20, 1),
        _ if local => (10, 1),
        (Benchmark::NonlocalDiffusion | Benchmark::NonlocalDiffusionMonotone, Method::MeanField) => (10, 1),
        _ => (m_p, stride),
    };
    let discovery = DiscoveryConfig {
        method,
        diffusion_mode: kernels.diffusion_mode,
        drift: DriftSettings {
            basis_size: nb_p,
            mesh_kind: MeshKind::Uniform,
            interval: None,
            snapshots: m_p,
            stride,
            anchor: rho_bar,
            monotone: kappa_p,
        },
        diffusion: DiffusionSettings {
            basis_size: nb_d,
            mesh_kind: MeshKind::Uniform,
            interval: None,
            snapshots: m_d,
            stride: stride_d,
            anchors,
            monotone: kappa_d,
        },
        ensemble_size: scale.ensemble_size(),
        batch_size: (method == Method::Rbm).then(|| scale.batch_size()),
        recon_batch_size: None,
        recon_scheme: Scheme::Binary,
        weight_rule: WeightRule::Averaging,
        density_bins: scale.density_bins(dim),
        half_width: 1.0,
        seed: seed ^ 0x5EED_D15C,
        qp: QpOptions::default(),
    };
    Ok(Experiment { sim, kernels, discovery, validation: ValidationOptions::default() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for b in Benchmark::ALL {
            assert_eq!(b.id().parse::<Benchmark>().unwrap(), b);
        }
        assert!("9".parse::<Benchmark>().is_err());
    }

    #[test]
    fn coupled_windows_are_shared() {
        let e = preset(Benchmark::NonlocalDiffusion, Setting::S2, Scale::Desk, Method::Rbm, 1).unwrap();
        assert_eq!((e.discovery.diffusion.snapshots, e.discovery.diffusion.stride), (50, 2));
        let e = preset(Benchmark::NonlocalDiffusion, Setting::S2, Scale::Desk, Method::MeanField, 1).unwrap();
        assert_eq!((e.discovery.diffusion.snapshots, e.discovery.diffusion.stride), (10, 1));
    }

    #[test]
    fn every_window_fits_the_data() {
        for b in Benchmark::ALL {
            for &s in b.settings() {
                for &m in b.methods() {
                    let e = preset(b, s, Scale::Desk, m, 0).unwrap();
                    let d = &e.discovery;
                    assert!(d.drift.snapshots * d.drift.stride < e.sim.snapshots);
                    assert!(d.diffusion.snapshots * d.diffusion.stride < e.sim.snapshots);
                }
            }
        }
    }
}
