//! Error metrics for kernels, trajectories and densities, and the a-priori
//! mean-square trajectory error bound.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{estimate_density, GridBox};
use crate::dynamics::{simulate, InitialLaw, Scheme, SimConfig, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::kernels::{DiffusionMode, KernelFn, KernelSpec};

/// Trapezoid points used for kernel errors by default.
pub const DEFAULT_QUAD_POINTS: usize = 2001;
/// Bins per axis of the 2D density histograms on `[-1, 1]^2`.
pub const DEFAULT_DENSITY_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelErrors {
    /// Relative `L^1(I)` error.
    pub l1: f64,
    /// Relative `L^∞(I)` error.
    pub linf: f64,
}

fn grid(interval: (f64, f64), points: usize) -> impl Iterator<Item = (f64, f64)> {
    let (a, b) = interval;
    let h = (b - a) / (points - 1) as f64;
    (0..points).map(move |k| {
        let w = if k == 0 || k == points - 1 { 0.5 * h } else { h };
        (a + k as f64 * h, w)
    })
}

/// Relative errors of `f_hat` against `f_true` on `interval`, by the composite
/// trapezoid rule (`L^1`) and the maximum over the same grid (`L^∞`).
pub fn kernel_errors(
    f_true: impl Fn(f64) -> f64,
    f_hat: impl Fn(f64) -> f64,
    interval: (f64, f64),
    points: usize,
) -> Result<KernelErrors> {
    if points < 2 {
        return Err(Error::Config("kernel errors need at least 2 points".into()));
    }
    let (mut gap1, mut norm1, mut gapi, mut normi): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for (r, w) in grid(interval, points) {
        let (t, h) = (f_true(r), f_hat(r));
        gap1 += w * (t - h).abs();
        norm1 += w * t.abs();
        gapi = gapi.max((t - h).abs());
        normi = normi.max(t.abs());
    }
    if norm1 == 0.0 || normi == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(KernelErrors { l1: gap1 / norm1, linf: gapi / normi })
}

/// `sup_I |f - g|` on a uniform grid.
pub fn supremum_gap(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64, interval: (f64, f64), points: usize) -> f64 {
    grid(interval, points.max(2)).fold(0.0, |m, (r, _)| m.max((f(r) - g(r)).abs()))
}

/// `sup_I |f|` on a uniform grid.
pub fn sup_norm(f: impl Fn(f64) -> f64, interval: (f64, f64), points: usize) -> f64 {
    grid(interval, points.max(2)).fold(0.0, |m, (r, _)| m.max(f(r).abs()))
}

/// Largest divided difference over adjacent grid points, a lower bound of the
/// Lipschitz constant of `f` on `interval`.
pub fn lipschitz_estimate(f: impl Fn(f64) -> f64, interval: (f64, f64), points: usize) -> f64 {
    let pts: Vec<f64> = grid(interval, points.max(2)).map(|(r, _)| r).collect();
    pts.windows(2).fold(0.0, |m, w| m.max(((f(w[1]) - f(w[0])) / (w[1] - w[0])).abs()))
}

/// 1-Wasserstein distance of two equally sized 1D samples.
pub fn w1_sorted(xa: &[f64], xb: &[f64], dim: usize) -> Result<f64> {
    if dim != 1 {
        return Err(Error::SortedW1Dimension(dim));
    }
    if xa.len() != xb.len() || xa.is_empty() {
        return Err(Error::Shape("W1 needs two nonempty samples of equal size".into()));
    }
    let mut a = xa.to_vec();
    let mut b = xb.to_vec();
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryMetric {
    /// Sorted-sample W1 (d = 1).
    Wasserstein,
    /// Relative histogram `L^1` gap (d >= 2).
    HistogramL1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryErrors {
    pub metric: TrajectoryMetric,
    /// Average over `n = 1..M-1` (W1) or aggregate relative gap (histogram).
    pub average: f64,
    /// Value at the last snapshot.
    pub final_time: f64,
    /// Per-snapshot values for `n = 0..M-1`.
    pub series: Vec<f64>,
}

/// Trajectory reconstruction errors; 1D uses W1, higher dimensions the
/// histogram gap on `[-1, 1]^d` with [`DEFAULT_DENSITY_BINS`] bins per axis.
pub fn trajectory_errors(data: &TrajectoryDataset, recon: &TrajectoryDataset) -> Result<TrajectoryErrors> {
    let grid = GridBox::new(-1.0, 1.0, DEFAULT_DENSITY_BINS)?;
    trajectory_errors_with(data, recon, grid)
}

pub fn trajectory_errors_with(data: &TrajectoryDataset, recon: &TrajectoryDataset, grid: GridBox) -> Result<TrajectoryErrors> {
    if data.snapshots() != recon.snapshots()
        || data.n_agents != recon.n_agents
        || data.dim != recon.dim
        || (data.dt - recon.dt).abs() > 1e-15 * data.dt
    {
        return Err(Error::Shape("trajectories have different snapshot grids".into()));
    }
    let m = data.snapshots();
    if data.dim == 1 {
        let series = (0..m)
            .into_par_iter()
            .map(|n| w1_sorted(data.frame(n), recon.frame(n), 1))
            .collect::<Result<Vec<_>>>()?;
        let average = if m > 1 { series[1..].iter().sum::<f64>() / (m - 1) as f64 } else { 0.0 };
        return Ok(TrajectoryErrors { metric: TrajectoryMetric::Wasserstein, average, final_time: series[m - 1], series });
    }
    let pairs = (0..m)
        .into_par_iter()
        .map(|n| {
            let f = estimate_density(&data.state(n), grid)?;
            let g = estimate_density(&recon.state(n), grid)?;
            let norm = f.values().iter().sum::<f64>() * f.cell_volume();
            Ok((f.l1_distance(&g)?, norm))
        })
        .collect::<Result<Vec<_>>>()?;
    let series: Vec<f64> = pairs.iter().map(|(gap, norm)| gap / norm).collect();
    let (gap, norm) = pairs.iter().skip(1).fold((0.0, 0.0), |(a, b), (g, n)| (a + g, b + n));
    let average = if m > 1 { gap / norm } else { 0.0 };
    Ok(TrajectoryErrors { metric: TrajectoryMetric::HistogramL1, average, final_time: series[m - 1], series })
}

/// Kernel and trajectory errors of one learned estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub drift: KernelErrors,
    /// One entry per diffusion component.
    pub diffusion: Vec<KernelErrors>,
    pub trajectory: TrajectoryErrors,
}

/// Constants entering the mean-square bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub lip_p: f64,
    pub lip_d: f64,
    pub lip_p_hat: f64,
    pub lip_d_hat: f64,
    pub p_max: f64,
    pub p_hat_max: f64,
    pub d_max: f64,
    pub d_hat_max: f64,
    pub delta_p: f64,
    pub delta_d: f64,
    pub eta_s: f64,
    /// Half-width of the box containing all trajectories.
    pub half_width: f64,
    /// `N_d = dN`.
    pub n_d: f64,
    pub horizon: f64,
    pub dt: f64,
}

/// Right-hand side `(δ_P² + δ_D² + η_S²) Ĉ₂ (exp(Ĉ₁ T) - 1)`.
pub fn apriori_bound(b: &BoundInputs) -> Result<f64> {
    if b.dt > 1.0 {
        return Err(Error::BoundHypothesis(format!("time step {} exceeds 1", b.dt)));
    }
    let fields = [
        b.lip_p, b.lip_d, b.lip_p_hat, b.lip_d_hat, b.p_max, b.p_hat_max, b.d_max, b.d_hat_max, b.delta_p, b.delta_d,
        b.eta_s, b.half_width, b.n_d, b.horizon, b.dt,
    ];
    if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config("bound inputs must be finite and nonnegative".into()));
    }
    if b.eta_s > 2.0 {
        return Err(Error::BoundHypothesis(format!("pairing gap {} exceeds 2", b.eta_s)));
    }
    let l = b.half_width;
    let nd = b.n_d;
    let c1 = 8.0 * b.p_max.powi(2) + 64.0 * l * l * b.lip_p.powi(2) + 4.0 * b.p_max + 4.0 * l * b.lip_p + 8.0 * nd * b.lip_d.powi(2) + 1.0;
    let c2 = 18.0 * l * l * nd + 2.0 * nd;
    let c3 = 1.0 + 4.0 * b.p_hat_max + 2.0 * l * b.lip_p_hat + 8.0 * nd * b.lip_d_hat.powi(2) + 8.0 * b.p_hat_max.powi(2)
        + 64.0 * l * l * b.lip_p_hat.powi(2) * nd;
    let c4 = (b.p_hat_max + 2.0 * l * b.lip_p_hat).powi(2) * nd
        + 2.0 * nd * nd * b.lip_d_hat.powi(2) * l * l
        + 4.0 * b.p_hat_max.powi(2) * nd * l * l
        + 16.0 * l.powi(4) * b.lip_p_hat.powi(2) * nd * nd;
    let c_hat_2 = (c2 / c1).max(c4 / c3);
    let c_hat_1 = c1.max(c3);
    let gaps = b.delta_p.powi(2) + b.delta_d.powi(2) + b.eta_s.powi(2);
    if gaps == 0.0 || b.horizon == 0.0 {
        return Ok(0.0);
    }
    Ok(gaps * c_hat_2 * (c_hat_1 * b.horizon).exp_m1())
}

/// Monte Carlo check of the bound for drift perturbations `P̂ = P + ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundCheckConfig {
    pub n_agents: usize,
    pub dt: f64,
    pub snapshots: usize,
    pub paths: usize,
    pub perturbations: Vec<f64>,
    pub drift: KernelFn,
    pub diffusion: KernelFn,
    pub seed: u64,
    /// Grid points for suprema and Lipschitz estimates.
    pub grid_points: usize,
}

impl Default for BoundCheckConfig {
    fn default() -> Self {
        BoundCheckConfig {
            n_agents: 10,
            dt: 0.01,
            snapshots: 101,
            paths: 1000,
            perturbations: vec![0.0, 0.01, 0.05, 0.1],
            drift: KernelFn::CuckerSmale {},
            diffusion: KernelFn::RationalDecay { amplitude: 0.25 },
            seed: 2024,
            grid_points: 10_001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckCase {
    pub perturbation: f64,
    /// `max_n` of the path average of `‖X^n - X̃^n‖²`.
    pub empirical: f64,
    pub bound: f64,
    pub holds: bool,
    pub inputs: BoundInputs,
}

/// Runs the true and perturbed binary dynamics with shared pairings and noise
/// over `paths` independent initial conditions and compares the mean-square
/// gap with [`apriori_bound`].
pub fn bound_check(config: &BoundCheckConfig) -> Result<Vec<BoundCheckCase>> {
    if config.paths == 0 {
        return Err(Error::Config("bound check needs at least one path".into()));
    }
    let mode = DiffusionMode::PairwiseRadial;
    let truth = KernelSpec::from_fns(&config.drift, mode, std::slice::from_ref(&config.diffusion))?;
    let sim = |seed: u64| SimConfig {
        n_agents: config.n_agents,
        dim: 1,
        dt: config.dt,
        snapshots: config.snapshots,
        batch_size: None,
        seed,
        initial: InitialLaw::Uniform { low: -1.0, high: 1.0 },
        domain_half_width: Some(1.0),
    };
    let base: Vec<TrajectoryDataset> = (0..config.paths as u64)
        .map(|p| simulate(&sim(config.seed.wrapping_add(p)), &truth, Scheme::Binary))
        .collect::<Result<_>>()?;

    let mut cases = Vec::new();
    for &eps in &config.perturbations {
        let p = config.drift.to_fn();
        let perturbed = KernelSpec::new(Arc::new(move |r| p(r) + eps), mode, vec![config.diffusion.to_fn()])?;
        let mut mean_sq = vec![0.0; config.snapshots];
        let mut half_width: f64 = 0.0;
        for (k, data) in base.iter().enumerate() {
            let other = simulate(&sim(config.seed.wrapping_add(k as u64)), &perturbed, Scheme::Binary)?;
            for n in 0..config.snapshots {
                let (a, b) = (data.frame(n), other.frame(n));
                mean_sq[n] += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / config.paths as f64;
                half_width = a.iter().chain(b).fold(half_width, |m, v| m.max(v.abs()));
            }
        }
        let empirical = mean_sq.iter().fold(0.0f64, |m, &v| m.max(v));
        let radial = (0.0, 2.0 * half_width);
        let pts = config.grid_points;
        let p_true = config.drift.to_fn();
        let d_true = config.diffusion.to_fn();
        let p_hat = {
            let p = config.drift.to_fn();
            move |r: f64| p(r) + eps
        };
        let inputs = BoundInputs {
            lip_p: lipschitz_estimate(&*p_true, radial, pts),
            lip_d: lipschitz_estimate(&*d_true, radial, pts),
            lip_p_hat: lipschitz_estimate(&p_hat, radial, pts),
            lip_d_hat: lipschitz_estimate(&*d_true, radial, pts),
            p_max: sup_norm(&*p_true, radial, pts),
            p_hat_max: sup_norm(&p_hat, radial, pts),
            d_max: sup_norm(&*d_true, radial, pts),
            d_hat_max: sup_norm(&*d_true, radial, pts),
            delta_p: supremum_gap(&*p_true, &p_hat, radial, pts),
            delta_d: 0.0,
            eta_s: 0.0,
            half_width,
            n_d: config.n_agents as f64,
            horizon: (config.snapshots - 1) as f64 * config.dt,
            dt: config.dt,
        };
        let bound = apriori_bound(&inputs)?;
        cases.push(BoundCheckCase { perturbation: eps, empirical, bound, holds: empirical <= bound, inputs });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_offset_kernels() {
        let f = |r: f64| (1.0 + r * r).powi(-2);
        let e = kernel_errors(f, f, (0.0, 2.0), DEFAULT_QUAD_POINTS).unwrap();
        assert_eq!((e.l1, e.linf), (0.0, 0.0));
        let e = kernel_errors(|_| 1.0, |_| 1.1, (0.0, 2.0), DEFAULT_QUAD_POINTS).unwrap();
        assert!((e.l1 - 0.1).abs() < 1e-12 && (e.linf - 0.1).abs() < 1e-12);
        assert!(matches!(kernel_errors(|_| 0.0, |_| 1.0, (0.0, 2.0), 11), Err(Error::ZeroReference)));
    }

    #[test]
    fn w1_examples() {
        assert_eq!(w1_sorted(&[0.0, 1.0], &[1.0, 0.0], 1).unwrap(), 0.0);
        assert_eq!(w1_sorted(&[0.0, 1.0], &[0.5, 1.5], 1).unwrap(), 0.5);
        let err = w1_sorted(&[0.0; 4], &[0.0; 4], 2).unwrap_err();
        assert!(err.to_string().contains("density_l1"));
    }

    #[test]
    fn supremum_and_lipschitz() {
        assert_eq!(supremum_gap(|r| r, |r| r, (0.0, 1.0), 100), 0.0);
        for pts in [2, 7, 1000] {
            assert!((lipschitz_estimate(|r| 3.0 * r - 1.0, (0.0, 2.0), pts) - 3.0).abs() < 1e-12);
        }
    }

    fn inputs() -> BoundInputs {
        BoundInputs {
            lip_p: 0.65,
            lip_d: 0.5,
            lip_p_hat: 0.65,
            lip_d_hat: 0.5,
            p_max: 1.0,
            p_hat_max: 1.01,
            d_max: 0.25,
            d_hat_max: 0.25,
            delta_p: 0.01,
            delta_d: 0.0,
            eta_s: 0.0,
            half_width: 1.0,
            n_d: 10.0,
            horizon: 0.1,
            dt: 0.01,
        }
    }

    #[test]
    fn bound_vanishes_without_gaps_or_time() {
        let mut b = inputs();
        b.delta_p = 0.0;
        assert_eq!(apriori_bound(&b).unwrap(), 0.0);
        let mut b = inputs();
        b.horizon = 0.0;
        assert_eq!(apriori_bound(&b).unwrap(), 0.0);
        let mut b = inputs();
        b.dt = 1.5;
        assert!(apriori_bound(&b).unwrap_err().to_string().contains("theorem hypothesis violated"));
    }

    #[test]
    fn bound_matches_hand_evaluation() {
        let b = inputs();
        let c1 = 8.0 + 64.0 * 0.65f64.powi(2) + 4.0 + 4.0 * 0.65 + 8.0 * 10.0 * 0.25 + 1.0;
        let c2 = 18.0 * 10.0 + 20.0;
        let c3 = 1.0 + 4.04 + 1.3 + 20.0 + 8.0 * 1.0201 + 64.0 * 0.4225 * 10.0;
        let c4 = (1.01 + 1.3f64).powi(2) * 10.0 + 200.0 * 0.25 + 40.0 * 1.0201 + 16.0 * 0.4225 * 100.0;
        let want = 1e-4 * (c2 / c1).max(c4 / c3) * (c1.max(c3) * 0.1).exp_m1();
        assert!((apriori_bound(&b).unwrap() - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn bound_is_monotone() {
        let base = apriori_bound(&inputs()).unwrap();
        for f in [
            |b: &mut BoundInputs| b.delta_p *= 2.0,
            |b: &mut BoundInputs| b.delta_d += 0.01,
            |b: &mut BoundInputs| b.eta_s += 0.1,
            |b: &mut BoundInputs| b.horizon *= 2.0,
        ] {
            let mut b = inputs();
            f(&mut b);
            assert!(apriori_bound(&b).unwrap() >= base);
        }
    }
}
