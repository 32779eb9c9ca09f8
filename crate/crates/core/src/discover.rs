//! Kernel discovery pipelines: regression with known pairings, the informed
//! random-batch ensemble, and the mean-field histogram approach.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::basis::{make_basis, BasisFamily, KernelEstimate, MeshKind};
use crate::design::{assemble_block, assemble_blocks, snapshot_indices, Block, GridBox, Sampling, Target};
use crate::dynamics::{simulate_reconstructed, Scheme, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::kernels::{DiffusionMode, KernelSpec};
use crate::metrics::{kernel_errors, trajectory_errors, ErrorSummary, DEFAULT_QUAD_POINTS};
use crate::qp::{
    build_constraints_for_diffusion, build_constraints_for_drift, solve_normal, ConstraintSet, NormalEquations,
    QpOptions, QpSolution, QpStatus,
};
use crate::rng::{tag, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    KnownS,
    Rbm,
    MeanField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    Averaging,
    Best,
}

/// Basis, data window and admissible set of the drift regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSettings {
    pub basis_size: usize,
    #[serde(default = "uniform_mesh")]
    pub mesh_kind: MeshKind,
    /// Defaults to `[0, 2L sqrt(d)]`.
    #[serde(default)]
    pub interval: Option<(f64, f64)>,
    pub snapshots: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Value of `P̂` at the first node.
    pub anchor: f64,
    /// `-1` nonincreasing, `+1` nondecreasing, `0` free.
    #[serde(default)]
    pub monotone: i8,
}

/// Basis, data window and admissible set of the diffusion regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSettings {
    pub basis_size: usize,
    #[serde(default = "uniform_mesh")]
    pub mesh_kind: MeshKind,
    /// Defaults to `[0, 2L sqrt(d)]` for pairwise modes and `[-L, L]` for the
    /// local mode.
    #[serde(default)]
    pub interval: Option<(f64, f64)>,
    pub snapshots: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// `(node, D̂ value)` pairs; negative nodes count from the end. Each value
    /// `v` pins the coefficient to `v^2 / 2`.
    #[serde(default)]
    pub anchors: Vec<(i64, f64)>,
    #[serde(default)]
    pub monotone: i8,
}

fn uniform_mesh() -> MeshKind {
    MeshKind::Uniform
}

fn one() -> usize {
    1
}

fn default_half_width() -> f64 {
    1.0
}

fn default_ensemble() -> usize {
    10
}

fn default_bins() -> usize {
    100
}

fn default_recon_scheme() -> Scheme {
    Scheme::Binary
}

fn default_rule() -> WeightRule {
    WeightRule::Averaging
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscoveryConfig {
    pub method: Method,
    pub diffusion_mode: DiffusionMode,
    pub drift: DriftSettings,
    pub diffusion: DiffusionSettings,
    /// Ensemble size `K`.
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    /// Partners per agent `N_p` in the batch design.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Batch size of the runs that score each ensemble member; defaults to `N_p`.
    #[serde(default)]
    pub recon_batch_size: Option<usize>,
    #[serde(default = "default_recon_scheme")]
    pub recon_scheme: Scheme,
    /// Rule whose estimate becomes the report's final estimate.
    #[serde(default = "default_rule")]
    pub weight_rule: WeightRule,
    /// Histogram bins per axis on `[-L, L]^d`.
    #[serde(default = "default_bins")]
    pub density_bins: usize,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    pub seed: u64,
    #[serde(default)]
    pub qp: QpOptions,
}

impl DiscoveryConfig {
    fn drift_interval(&self, dim: usize) -> (f64, f64) {
        self.drift.interval.unwrap_or((0.0, 2.0 * self.half_width * (dim as f64).sqrt()))
    }

    fn diffusion_interval(&self, dim: usize) -> (f64, f64) {
        self.diffusion.interval.unwrap_or(match self.diffusion_mode {
            DiffusionMode::LocalState => (-self.half_width, self.half_width),
            _ => (0.0, 2.0 * self.half_width * (dim as f64).sqrt()),
        })
    }

    pub fn drift_basis(&self, dim: usize) -> Result<BasisFamily> {
        let (a, b) = self.drift_interval(dim);
        make_basis(a, b, self.drift.basis_size, self.drift.mesh_kind)
    }

    pub fn diffusion_basis(&self, dim: usize) -> Result<BasisFamily> {
        let (a, b) = self.diffusion_interval(dim);
        make_basis(a, b, self.diffusion.basis_size, self.diffusion.mesh_kind)
    }

    pub fn drift_constraints(&self) -> ConstraintSet {
        build_constraints_for_drift(self.drift.basis_size, self.drift.anchor, self.drift.monotone)
    }

    pub fn diffusion_constraints(&self) -> ConstraintSet {
        let anchors: Vec<(i64, f64)> = self.diffusion.anchors.iter().map(|&(k, v)| (k, 0.5 * v * v)).collect();
        build_constraints_for_diffusion(self.diffusion.basis_size, &anchors, self.diffusion.monotone)
    }

    /// Separate regressions per state component (local mode in `d > 1`).
    fn diffusion_components(&self, dim: usize) -> usize {
        if self.diffusion_mode == DiffusionMode::LocalState {
            dim
        } else {
            1
        }
    }

    fn check(&self, data: &TrajectoryDataset) -> Result<()> {
        if !(self.half_width > 0.0) {
            return Err(Error::Config("half width must be positive".into()));
        }
        self.drift_constraints().validate()?;
        self.diffusion_constraints().validate()?;
        if self.method == Method::Rbm {
            if self.ensemble_size == 0 {
                return Err(Error::Config("ensemble size K must be at least 1".into()));
            }
            let np = self.batch_size.ok_or_else(|| Error::Config("random-batch discovery needs batch_size".into()))?;
            if np == 0 || np >= data.n_agents {
                return Err(Error::Config(format!("batch size must satisfy 1 <= N_p < N (N_p = {np}, N = {})", data.n_agents)));
            }
            if self.diffusion_mode == DiffusionMode::PairwiseRadialDisplacement
                && (self.drift.snapshots != self.diffusion.snapshots || self.drift.stride != self.diffusion.stride)
            {
                return Err(Error::Config(
                    "displacement diffusion with random batches needs M_P = M_D and a shared stride".into(),
                ));
            }
        }
        if self.method == Method::KnownS && (self.drift.stride != 1 || self.diffusion.stride != 1) {
            return Err(Error::Config("known pairings use stride 1".into()));
        }
        Ok(())
    }
}

/// Normal equations of one drift regression and the diffusion regression(s).
#[derive(Debug, Clone)]
struct Problems {
    drift: NormalEquations,
    diffusion: Vec<NormalEquations>,
}

impl Problems {
    fn weighted(items: &[(&Problems, f64)]) -> Problems {
        let first = items[0].0;
        let mut out = Problems {
            drift: NormalEquations::new(first.drift.cols()),
            diffusion: first.diffusion.iter().map(|ne| NormalEquations::new(ne.cols())).collect(),
        };
        for (p, w) in items {
            out.drift.add_scaled(&p.drift, *w);
            for (acc, ne) in out.diffusion.iter_mut().zip(&p.diffusion) {
                acc.add_scaled(ne, *w);
            }
        }
        out
    }
}

fn add_block(problems: &mut [NormalEquations], block: &Block, weight: f64) -> Result<()> {
    if block.a.iter().chain(&block.y).any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("non-finite design entry at snapshot {}", block.n)));
    }
    let k = problems.len();
    if k == 1 {
        problems[0].add_block(&block.a, &block.y, weight);
    } else {
        for (c, ne) in problems.iter_mut().enumerate() {
            let part = block.component(c, k);
            ne.add_block(&part.a, &part.y, weight);
        }
    }
    Ok(())
}

/// Accumulates both regressions snapshot by snapshot. Snapshots used by
/// both targets with the same stride share their partner draws.
fn build_problems(
    data: &TrajectoryDataset,
    config: &DiscoveryConfig,
    drift_basis: &BasisFamily,
    diff_basis: &BasisFamily,
    sampling: Sampling,
) -> Result<Problems> {
    if sampling == Sampling::KnownPairs && data.pairings.is_none() {
        return Err(Error::MissingPairings);
    }
    let components = config.diffusion_components(data.dim);
    let mut drift = vec![NormalEquations::new(drift_basis.len())];
    let mut diffusion = vec![NormalEquations::new(diff_basis.len()); components];
    let target_d = Target::Diffusion(config.diffusion_mode);
    let (mp, lp) = (config.drift.snapshots, config.drift.stride);
    let (md, ld) = (config.diffusion.snapshots, config.diffusion.stride);
    let drift_steps = snapshot_indices(data.snapshots(), mp, lp)?;
    let diff_steps = snapshot_indices(data.snapshots(), md, ld)?;
    let (wp, wd) = (1.0 / mp as f64, 1.0 / md as f64);
    let shared = |n: &usize, other: &[usize]| lp == ld && other.contains(n);
    for &n in drift_steps.iter().filter(|n| shared(n, &diff_steps)) {
        let blocks = assemble_blocks(data, &[(drift_basis, Target::Drift), (diff_basis, target_d)], sampling, n, lp)?;
        add_block(&mut drift, &blocks[0], wp)?;
        add_block(&mut diffusion, &blocks[1], wd)?;
    }
    for &n in drift_steps.iter().filter(|n| !shared(n, &diff_steps)) {
        add_block(&mut drift, &assemble_block(data, drift_basis, Target::Drift, sampling, n, lp)?, wp)?;
    }
    for &n in diff_steps.iter().filter(|n| !shared(n, &drift_steps)) {
        add_block(&mut diffusion, &assemble_block(data, diff_basis, target_d, sampling, n, ld)?, wd)?;
    }
    Ok(Problems { drift: drift.pop().expect("one drift problem"), diffusion })
}

/// Solver outcome of one constrained regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub label: String,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
    pub kkt_residual: f64,
    pub regularized: bool,
}

impl SolveRecord {
    fn new(label: String, sol: &QpSolution) -> Self {
        SolveRecord {
            label,
            status: sol.status.clone(),
            iterations: sol.iterations,
            objective: sol.objective,
            kkt_residual: sol.kkt_residual,
            regularized: sol.regularized,
        }
    }
}

fn solve_problems(
    problems: &Problems,
    config: &DiscoveryConfig,
    drift_basis: &BasisFamily,
    diff_basis: &BasisFamily,
    label: &str,
    records: &mut Vec<SolveRecord>,
) -> Result<KernelEstimate> {
    let drift = solve_normal(&problems.drift, &config.drift_constraints(), &config.qp)?.into_result()?;
    records.push(SolveRecord::new(format!("{label}/drift"), &drift));
    let cons = config.diffusion_constraints();
    let mut diffusion = Vec::with_capacity(problems.diffusion.len());
    for (c, ne) in problems.diffusion.iter().enumerate() {
        let sol = solve_normal(ne, &cons, &config.qp)?.into_result()?;
        records.push(SolveRecord::new(format!("{label}/diffusion/{c}"), &sol));
        diffusion.push((diff_basis.clone(), sol.theta));
    }
    KernelEstimate::new(config.diffusion_mode, drift_basis.clone(), drift.theta, diffusion)
}

/// Weights of the averaging rule `w_k = (1 - Ē_k) / (K - 1)` with
/// `Ē_k = E_k / Σ E_j`, or the indicator of the smallest `E_k` (first index on
/// ties). The flag is set when every error vanishes and uniform weights were
/// returned instead.
pub fn compute_weights(errors: &[f64], rule: WeightRule) -> Result<(Vec<f64>, bool)> {
    let k = errors.len();
    if k == 0 {
        return Err(Error::Config("no ensemble errors".into()));
    }
    if errors.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::Config("ensemble errors must be finite and nonnegative".into()));
    }
    match rule {
        WeightRule::Best => {
            let best = errors
                .iter()
                .enumerate()
                .fold(0, |b, (i, e)| if *e < errors[b] { i } else { b });
            let mut w = vec![0.0; k];
            w[best] = 1.0;
            Ok((w, false))
        }
        WeightRule::Averaging => {
            if k == 1 {
                return Ok((vec![1.0], false));
            }
            let total: f64 = errors.iter().sum();
            if total == 0.0 {
                return Ok((vec![1.0 / k as f64; k], true));
            }
            let bar: Vec<f64> = errors.iter().map(|e| e / total).collect();
            let denom = k as f64 - bar.iter().sum::<f64>();
            Ok((bar.iter().map(|b| (1.0 - b) / denom).collect(), false))
        }
    }
}

/// One member of the random-batch ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rho: Vec<f64>,
    pub zeta: Vec<Vec<f64>>,
    pub error: f64,
    pub weight_averaging: f64,
    pub weight_best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEstimate {
    /// `known_s`, `averaging`, `best` or `mean_field`.
    pub label: String,
    pub estimate: KernelEstimate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub assembly_s: f64,
    pub solve_s: f64,
    pub reconstruction_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledErrors {
    pub label: String,
    pub errors: ErrorSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub method: Method,
    /// Final estimate (the configured rule for the ensemble method).
    pub estimate: KernelEstimate,
    pub estimates: Vec<LabeledEstimate>,
    pub runs: Vec<RunRecord>,
    /// Every ensemble error was zero and the averaging weights fell back to uniform.
    pub degenerate_weights: bool,
    pub solves: Vec<SolveRecord>,
    pub config: DiscoveryConfig,
    #[serde(default)]
    pub validation: Vec<LabeledErrors>,
    pub timings: Timings,
}

impl DiscoveryReport {
    pub fn get(&self, label: &str) -> Option<&KernelEstimate> {
        self.estimates.iter().find(|e| e.label == label).map(|e| &e.estimate)
    }

    pub fn errors(&self, label: &str) -> Option<&ErrorSummary> {
        self.validation.iter().find(|e| e.label == label).map(|e| &e.errors)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The report without wall-clock timings, for reproducibility checks.
    pub fn without_timings(&self) -> DiscoveryReport {
        DiscoveryReport { timings: Timings::default(), ..self.clone() }
    }
}

fn single_solve_report(
    data: &TrajectoryDataset,
    config: &DiscoveryConfig,
    sampling: Sampling,
    label: &str,
) -> Result<DiscoveryReport> {
    let start = Instant::now();
    let drift_basis = config.drift_basis(data.dim)?;
    let diff_basis = config.diffusion_basis(data.dim)?;
    let problems = build_problems(data, config, &drift_basis, &diff_basis, sampling)?;
    let assembled = start.elapsed().as_secs_f64();
    let mut solves = Vec::new();
    let estimate = solve_problems(&problems, config, &drift_basis, &diff_basis, label, &mut solves)?;
    let total = start.elapsed().as_secs_f64();
    Ok(DiscoveryReport {
        method: config.method,
        estimate: estimate.clone(),
        estimates: vec![LabeledEstimate { label: label.into(), estimate }],
        runs: Vec::new(),
        degenerate_weights: false,
        solves,
        config: config.clone(),
        validation: Vec::new(),
        timings: Timings { assembly_s: assembled, solve_s: total - assembled, reconstruction_s: 0.0, total_s: total },
    })
}

/// Regression on the recorded pairings `S^n`.
pub fn discover_known_s(data: &TrajectoryDataset, config: &DiscoveryConfig) -> Result<DiscoveryReport> {
    config.check(data)?;
    if data.pairings.is_none() {
        return Err(Error::MissingPairings);
    }
    single_solve_report(data, config, Sampling::KnownPairs, "known_s")
}

/// Regression on histogram quadratures of the snapshot densities.
pub fn discover_mean_field(data: &TrajectoryDataset, config: &DiscoveryConfig) -> Result<DiscoveryReport> {
    config.check(data)?;
    let grid = GridBox::new(-config.half_width, config.half_width, config.density_bins)?;
    single_solve_report(data, config, Sampling::MeanField { grid }, "mean_field")
}

/// Informed random-batch ensemble.
///
/// Run `k` assembles both regressions from the same batch draws, solves them,
/// evolves the data's initial condition with the run's kernels and scores the
/// result with the time-averaged trajectory error `E_k`. The final estimates
/// solve the `E_k`-weighted sums of the per-run problems.
pub fn discover_rbm(data: &TrajectoryDataset, config: &DiscoveryConfig) -> Result<DiscoveryReport> {
    config.check(data)?;
    let start = Instant::now();
    let np = config.batch_size.expect("checked");
    let drift_basis = config.drift_basis(data.dim)?;
    let diff_basis = config.diffusion_basis(data.dim)?;
    let mut timings = Timings::default();
    let mut solves = Vec::new();
    let mut problems = Vec::with_capacity(config.ensemble_size);
    let mut runs = Vec::with_capacity(config.ensemble_size);

    for k in 0..config.ensemble_size {
        let key = StreamKey::new(config.seed).child(tag::ENSEMBLE).child(k as u64);
        let t0 = Instant::now();
        let sampling = Sampling::Batch { batch_size: np, key: key.child(tag::BATCH) };
        let p = build_problems(data, config, &drift_basis, &diff_basis, sampling)?;
        let t1 = Instant::now();
        let est = solve_problems(&p, config, &drift_basis, &diff_basis, &format!("run{k}"), &mut solves)?;
        let t2 = Instant::now();
        let replay = data.replay_config(key.child(tag::RECON).value(), Some(config.recon_batch_size.unwrap_or(np)));
        let recon = simulate_reconstructed(&replay, &est, config.recon_scheme)?;
        let error = trajectory_errors(data, &recon)?.average;
        let t3 = Instant::now();
        timings.assembly_s += (t1 - t0).as_secs_f64();
        timings.solve_s += (t2 - t1).as_secs_f64();
        timings.reconstruction_s += (t3 - t2).as_secs_f64();
        runs.push(RunRecord {
            rho: est.rho.clone(),
            zeta: est.diffusion.iter().map(|(_, z)| z.clone()).collect(),
            error,
            weight_averaging: 0.0,
            weight_best: 0.0,
        });
        problems.push(p);
    }

    let errors: Vec<f64> = runs.iter().map(|r| r.error).collect();
    let (w_av, degenerate) = compute_weights(&errors, WeightRule::Averaging)?;
    let (w_best, _) = compute_weights(&errors, WeightRule::Best)?;
    for (run, (a, b)) in runs.iter_mut().zip(w_av.iter().zip(&w_best)) {
        run.weight_averaging = *a;
        run.weight_best = *b;
    }

    let t0 = Instant::now();
    let mut estimates = Vec::new();
    for (label, w) in [("averaging", &w_av), ("best", &w_best)] {
        let items: Vec<(&Problems, f64)> = problems.iter().zip(w.iter()).filter(|(_, w)| **w > 0.0).map(|(p, w)| (p, *w)).collect();
        let combined = Problems::weighted(&items);
        let estimate = solve_problems(&combined, config, &drift_basis, &diff_basis, label, &mut solves)?;
        estimates.push(LabeledEstimate { label: label.into(), estimate });
    }
    timings.solve_s += t0.elapsed().as_secs_f64();
    timings.total_s = start.elapsed().as_secs_f64();

    let final_label = match config.weight_rule {
        WeightRule::Averaging => "averaging",
        WeightRule::Best => "best",
    };
    let estimate = estimates.iter().find(|e| e.label == final_label).expect("both rules solved").estimate.clone();
    Ok(DiscoveryReport {
        method: Method::Rbm,
        estimate,
        estimates,
        runs,
        degenerate_weights: degenerate,
        solves,
        config: config.clone(),
        validation: Vec::new(),
        timings,
    })
}

/// Dispatches on `config.method`.
pub fn discover(data: &TrajectoryDataset, config: &DiscoveryConfig) -> Result<DiscoveryReport> {
    match config.method {
        Method::KnownS => discover_known_s(data, config),
        Method::Rbm => discover_rbm(data, config),
        Method::MeanField => discover_mean_field(data, config),
    }
}

/// How validation trajectories are generated from a learned estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationOptions {
    pub scheme: Scheme,
    /// Seed of the validation run; `None` derives a fresh seed from the data
    /// seed. Passing the data seed replays the data's noise and pairings.
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions { scheme: Scheme::Binary, seed: None, batch_size: None }
    }
}

/// Kernel errors on the basis intervals and trajectory errors of a rerun with
/// the learned kernels.
pub fn evaluate(
    data: &TrajectoryDataset,
    truth: &KernelSpec,
    estimate: &KernelEstimate,
    options: &ValidationOptions,
) -> Result<ErrorSummary> {
    let p_true = &truth.drift;
    let drift = kernel_errors(|r| p_true(r), |r| estimate.eval_drift(r), estimate.drift_basis.interval(), DEFAULT_QUAD_POINTS)?;
    let components = if estimate.diffusion.len() > 1 { estimate.diffusion.len() } else { 1 };
    let diffusion = (0..components)
        .map(|c| {
            let f = truth.diffusion_for(c);
            let interval = estimate.diffusion[c.min(estimate.diffusion.len() - 1)].0.interval();
            kernel_errors(|r| f(r), |r| estimate.eval_diff(c, r), interval, DEFAULT_QUAD_POINTS)
        })
        .collect::<Result<Vec<_>>>()?;
    let seed = options.seed.unwrap_or_else(|| StreamKey::new(data.seed).child(tag::RECON).value());
    let replay = data.replay_config(seed, options.batch_size);
    let recon = simulate_reconstructed(&replay, estimate, options.scheme)?;
    let trajectory = trajectory_errors(data, &recon)?;
    Ok(ErrorSummary { drift, diffusion, trajectory })
}

/// Evaluates every estimate of `report` and stores the results in it.
pub fn attach_validation(
    report: &mut DiscoveryReport,
    data: &TrajectoryDataset,
    truth: &KernelSpec,
    options: &ValidationOptions,
) -> Result<()> {
    report.validation = report
        .estimates
        .iter()
        .map(|e| Ok(LabeledErrors { label: e.label.clone(), errors: evaluate(data, truth, &e.estimate, options)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(())
}
