//! Ground-truth interaction and diffusion kernels.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// How the diffusion amplitude of an interaction is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionMode {
    /// Scalar amplitude `D(r)` with `r = |x_j - x_i|`, shared by all components.
    PairwiseRadial,
    /// Vector amplitude `D(r) (x_j - x_i)`, applied componentwise.
    PairwiseRadialDisplacement,
    /// Componentwise amplitude `D_c(x_{i,c})` of the agent's own state.
    LocalState,
}

impl DiffusionMode {
    pub fn is_pairwise(self) -> bool {
        !matches!(self, DiffusionMode::LocalState)
    }
}

/// Named scalar functions usable as drift or diffusion kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelFn {
    Constant { value: f64 },
    Affine { intercept: f64, slope: f64 },
    /// `1` for `r < tau`, `0` otherwise.
    BoundedConfidence { tau: f64 },
    /// `((0.1 + r)^2 - 0.05 (0.1 + r)^-2) / 5`
    AttractionRepulsion {},
    /// `(1 + r^2)^-2`
    CuckerSmale {},
    /// `(-(0.1 + r)^-1.15 + r^2) / 2`
    PowerLaw2d {},
    /// `amplitude / (1 + r)^2`
    RationalDecay { amplitude: f64 },
    /// `scale * max(1 - x^2, 0)^power`
    Bump { scale: f64, power: f64 },
    /// Linear interpolation through `(nodes[k], values[k])`, constant outside.
    Piecewise { nodes: Vec<f64>, values: Vec<f64> },
}

impl KernelFn {
    pub fn validate(&self) -> Result<()> {
        if let KernelFn::Piecewise { nodes, values } = self {
            if nodes.len() < 2 || nodes.len() != values.len() {
                return Err(Error::Config(
                    "piecewise kernel needs >= 2 nodes and one value per node".into(),
                ));
            }
            if nodes.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config("piecewise kernel nodes must increase".into()));
            }
        }
        Ok(())
    }

    pub fn eval(&self, r: f64) -> f64 {
        match self {
            KernelFn::Constant { value } => *value,
            KernelFn::Affine { intercept, slope } => intercept + slope * r,
            KernelFn::BoundedConfidence { tau } => {
                if r < *tau {
                    1.0
                } else {
                    0.0
                }
            }
            KernelFn::AttractionRepulsion {} => {
                let s = 0.1 + r;
                (s * s - 0.05 / (s * s)) / 5.0
            }
            KernelFn::CuckerSmale {} => {
                let q = 1.0 + r * r;
                1.0 / (q * q)
            }
            KernelFn::PowerLaw2d {} => (-(0.1 + r).powf(-1.15) + r * r) / 2.0,
            KernelFn::RationalDecay { amplitude } => amplitude / ((1.0 + r) * (1.0 + r)),
            KernelFn::Bump { scale, power } => scale * (1.0 - r * r).max(0.0).powf(*power),
            KernelFn::Piecewise { nodes, values } => piecewise(nodes, values, r),
        }
    }

    pub fn to_fn(&self) -> ScalarFn {
        let f = self.clone();
        Arc::new(move |r| f.eval(r))
    }
}

fn piecewise(nodes: &[f64], values: &[f64], r: f64) -> f64 {
    let last = nodes.len() - 1;
    if r <= nodes[0] {
        return values[0];
    }
    if r >= nodes[last] {
        return values[last];
    }
    let k = nodes.partition_point(|&z| z <= r) - 1;
    let w = (r - nodes[k]) / (nodes[k + 1] - nodes[k]);
    (1.0 - w) * values[k] + w * values[k + 1]
}

/// Drift kernel `P(r)` plus diffusion kernel(s) and their mode.
///
/// In [`DiffusionMode::LocalState`] `diffusion` holds either one function
/// shared by all components or one function per component.
#[derive(Clone)]
pub struct KernelSpec {
    pub drift: ScalarFn,
    pub mode: DiffusionMode,
    pub diffusion: Vec<ScalarFn>,
}

impl fmt::Debug for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelSpec")
            .field("mode", &self.mode)
            .field("diffusion_components", &self.diffusion.len())
            .finish()
    }
}

impl KernelSpec {
    pub fn new(drift: ScalarFn, mode: DiffusionMode, diffusion: Vec<ScalarFn>) -> Result<Self> {
        if diffusion.is_empty() {
            return Err(Error::Config("at least one diffusion function is required".into()));
        }
        if mode.is_pairwise() && diffusion.len() != 1 {
            return Err(Error::Config("pairwise diffusion modes take exactly one radial function".into()));
        }
        Ok(KernelSpec { drift, mode, diffusion })
    }

    pub fn from_fns(drift: &KernelFn, mode: DiffusionMode, diffusion: &[KernelFn]) -> Result<Self> {
        drift.validate()?;
        for d in diffusion {
            d.validate()?;
        }
        KernelSpec::new(drift.to_fn(), mode, diffusion.iter().map(KernelFn::to_fn).collect())
    }

    /// Zero drift and zero diffusion.
    pub fn frozen(mode: DiffusionMode) -> Self {
        let zero: ScalarFn = Arc::new(|_| 0.0);
        KernelSpec { drift: zero.clone(), mode, diffusion: vec![zero] }
    }

    pub fn diffusion_for(&self, component: usize) -> &ScalarFn {
        if self.diffusion.len() == 1 {
            &self.diffusion[0]
        } else {
            &self.diffusion[component]
        }
    }

    #[inline]
    pub(crate) fn drift_weight(&self, agent: usize, r: f64) -> Result<f64> {
        let p = (self.drift)(r);
        if p.is_finite() {
            Ok(p)
        } else {
            Err(Error::NonFiniteKernel { agent, r })
        }
    }

    /// Noise amplitude of agent `i` (state `xi`) interacting across `delta = x_j - x_i`.
    #[inline]
    pub(crate) fn noise_amplitude(
        &self,
        agent: usize,
        xi: &[f64],
        delta: &[f64],
        r: f64,
        out: &mut [f64],
    ) -> Result<()> {
        match self.mode {
            DiffusionMode::PairwiseRadial => {
                let a = (self.diffusion[0])(r);
                if !a.is_finite() {
                    return Err(Error::NonFiniteKernel { agent, r });
                }
                out.iter_mut().for_each(|o| *o = a);
            }
            DiffusionMode::PairwiseRadialDisplacement => {
                let a = (self.diffusion[0])(r);
                if !a.is_finite() {
                    return Err(Error::NonFiniteKernel { agent, r });
                }
                for (o, dc) in out.iter_mut().zip(delta) {
                    *o = a * dc;
                }
            }
            DiffusionMode::LocalState => {
                for (c, (o, &x)) in out.iter_mut().zip(xi).enumerate() {
                    let a = (self.diffusion_for(c))(x);
                    if !a.is_finite() {
                        return Err(Error::NonFiniteKernel { agent, r: x });
                    }
                    *o = a;
                }
            }
        }
        Ok(())
    }

    /// Samples drift and diffusion on a grid and checks finiteness and, for
    /// the scalar modes, nonnegativity of the diffusion.
    pub fn check_on(&self, radial: (f64, f64), state: (f64, f64), points: usize) -> Result<()> {
        let grid = |(a, b): (f64, f64), k: usize| a + (b - a) * k as f64 / (points - 1) as f64;
        for k in 0..points {
            let r = grid(radial, k);
            if !(self.drift)(r).is_finite() {
                return Err(Error::Config(format!("drift kernel is not finite at r = {r}")));
            }
            let (arg, fns) = match self.mode {
                DiffusionMode::LocalState => (grid(state, k), &self.diffusion),
                _ => (r, &self.diffusion),
            };
            for f in fns {
                let v = f(arg);
                if !v.is_finite() {
                    return Err(Error::Config(format!("diffusion kernel is not finite at {arg}")));
                }
                if self.mode != DiffusionMode::PairwiseRadialDisplacement && v < 0.0 {
                    return Err(Error::Config(format!("diffusion kernel is negative at {arg}")));
                }
            }
        }
        Ok(())
    }
}

/// Serializable selector for a [`KernelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpecConfig {
    pub drift: KernelFn,
    pub diffusion_mode: DiffusionMode,
    pub diffusion: Vec<KernelFn>,
}

impl KernelSpecConfig {
    pub fn build(&self) -> Result<KernelSpec> {
        KernelSpec::from_fns(&self.drift, self.diffusion_mode, &self.diffusion)
    }
}
