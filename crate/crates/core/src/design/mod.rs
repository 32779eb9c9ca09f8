//! Regression targets and design matrices for drift and diffusion.
//!
//! Each snapshot `n` contributes a block of `dN` rows. Drift rows regress the
//! increments `X^{n+ℓ} - X^n` on `ℓΔt Θ^n`; diffusion rows regress the squared
//! increments on `2ℓΔt Λ^n`. `Θ^n`, `Λ^n` average hat-function evaluations over
//! the interaction partners of each agent, which are either the recorded
//! pairings, a random batch, or the cells of a histogram density.

mod density;
mod moments;

pub use density::{estimate_density, DensityGrid, GridBox};
pub use moments::{moment_residuals, MomentResiduals};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisFamily;
use crate::dynamics::step::{displacement, PartnerSampler};
use crate::dynamics::{TrajectoryDataset, MAX_DIM};
use crate::error::{Error, Result};
use crate::kernels::DiffusionMode;
use crate::rng::StreamKey;

/// What a design system regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Drift,
    Diffusion(DiffusionMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    KnownS,
    Batch,
    MeanField,
}

/// How interaction partners are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    /// Recorded pairings `S^n`; stride must be 1.
    KnownPairs,
    /// `batch_size` distinct partners per agent, drawn from `key.child(n).child(i)`.
    Batch { batch_size: usize, key: StreamKey },
    /// Histogram quadrature of the snapshot density.
    MeanField { grid: GridBox },
}

impl Sampling {
    pub fn regime(&self) -> Regime {
        match self {
            Sampling::KnownPairs => Regime::KnownS,
            Sampling::Batch { .. } => Regime::Batch,
            Sampling::MeanField { .. } => Regime::MeanField,
        }
    }
}

/// Design rows of one snapshot, row-major with `cols` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub n: usize,
    pub cols: usize,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
}

impl Block {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    /// Rows `c, c + d, c + 2d, ...` (component `c` of every agent).
    pub fn component(&self, c: usize, dim: usize) -> Block {
        let mut a = Vec::with_capacity(self.a.len() / dim);
        let mut y = Vec::with_capacity(self.y.len() / dim);
        for row in (c..self.rows()).step_by(dim) {
            a.extend_from_slice(&self.a[row * self.cols..(row + 1) * self.cols]);
            y.push(self.y[row]);
        }
        Block { n: self.n, cols: self.cols, a, y }
    }
}

/// Stacked blocks of one regression problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSystem {
    pub target: Target,
    pub regime: Regime,
    pub stride: usize,
    pub dt: f64,
    pub snapshots_used: Vec<usize>,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub a: Vec<f64>,
    pub y: Vec<f64>,
}

impl DesignSystem {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows(), self.cols, &self.a)
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.a[row * self.cols + col]
    }

    /// Binary dump: `rows: u64`, `cols: u64`, then `A` row-major and `y`, all
    /// little-endian.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(self.rows() as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for v in self.a.iter().chain(&self.y) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Start indices `0, ℓ, ..., (m_used - 1)ℓ` of non-overlapping windows.
pub fn snapshot_indices(available: usize, m_used: usize, stride: usize) -> Result<Vec<usize>> {
    if m_used == 0 || stride == 0 {
        return Err(Error::Config("snapshot count and stride must be positive".into()));
    }
    if m_used * stride > available.saturating_sub(1) {
        return Err(Error::StrideTooLong { stride, snapshots: m_used, available });
    }
    Ok((0..m_used).map(|k| k * stride).collect())
}

/// One weighted partner of an agent.
#[derive(Clone, Copy)]
struct Partner {
    delta: [f64; MAX_DIM],
    r: f64,
    w: f64,
}

#[inline(always)]
fn add_partners_with(
    basis: &BasisFamily,
    d: usize,
    partners: &[Partner],
    rows: &mut [f64],
    factor: impl Fn(&Partner, usize) -> f64,
) {
    let cols = basis.len();
    if d == 1 {
        for p in partners {
            let (k, lo, hi) = basis.locate(p.r);
            let s = p.w * factor(p, 0);
            rows[k] += s * lo;
            rows[k + 1] += s * hi;
        }
        return;
    }
    for p in partners {
        let (k, lo, hi) = basis.locate(p.r);
        for (c, row) in rows.chunks_exact_mut(cols).enumerate() {
            let s = p.w * factor(p, c);
            row[k] += s * lo;
            row[k + 1] += s * hi;
        }
    }
}

/// Accumulates the partners' contributions into the `d` rows of one agent.
fn add_partners(target: Target, basis: &BasisFamily, d: usize, partners: &[Partner], rows: &mut [f64]) {
    match target {
        Target::Drift => add_partners_with(basis, d, partners, rows, |p, c| p.delta[c]),
        Target::Diffusion(DiffusionMode::PairwiseRadial) => add_partners_with(basis, d, partners, rows, |_, _| 1.0),
        Target::Diffusion(DiffusionMode::PairwiseRadialDisplacement) => {
            add_partners_with(basis, d, partners, rows, |p, c| p.delta[c] * p.delta[c])
        }
        Target::Diffusion(DiffusionMode::LocalState) => unreachable!("local rows take no partners"),
    }
}

fn partner_key(key: StreamKey, n: usize, i: usize) -> StreamKey {
    key.child(n as u64).child(i as u64)
}

/// The partners of agent `i` on snapshot `n` under [`Sampling::Batch`] with
/// this `key`, in draw order.
pub fn batch_partners(key: StreamKey, n: usize, i: usize, n_agents: usize, batch_size: usize) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size >= n_agents || i >= n_agents {
        return Err(Error::Config(format!("batch size must satisfy 1 <= N_p < N (N_p = {batch_size}, N = {n_agents})")));
    }
    let mut rng = partner_key(key, n, i).rng();
    Ok(PartnerSampler::new().draw(&mut rng, n_agents, i, batch_size).to_vec())
}

/// Design block of snapshot `n` with window `stride`.
pub fn assemble_block(
    data: &TrajectoryDataset,
    basis: &BasisFamily,
    target: Target,
    sampling: Sampling,
    n: usize,
    stride: usize,
) -> Result<Block> {
    Ok(assemble_blocks(data, &[(basis, target)], sampling, n, stride)?.pop().expect("one block"))
}

/// Blocks of several targets on snapshot `n` that share one set of partner
/// draws (and one density estimate).
pub fn assemble_blocks(
    data: &TrajectoryDataset,
    targets: &[(&BasisFamily, Target)],
    sampling: Sampling,
    n: usize,
    stride: usize,
) -> Result<Vec<Block>> {
    let d = data.dim;
    let big_n = data.n_agents;
    if stride == 0 || n + stride >= data.snapshots() {
        return Err(Error::StrideTooLong { stride, snapshots: n / stride.max(1) + 1, available: data.snapshots() });
    }
    let x = data.frame(n);
    let x_next = data.frame(n + stride);
    let plan = match sampling {
        Sampling::KnownPairs => {
            if stride != 1 {
                return Err(Error::Config("known pairings use stride 1".into()));
            }
            Some(&data.pairings.as_ref().ok_or(Error::MissingPairings)?[n])
        }
        _ => None,
    };
    if let Sampling::Batch { batch_size, .. } = sampling {
        if batch_size == 0 || batch_size >= big_n {
            return Err(Error::Config(format!("batch size must satisfy 1 <= N_p < N (N_p = {batch_size}, N = {big_n})")));
        }
    }
    let local = Target::Diffusion(DiffusionMode::LocalState);
    let cells = match sampling {
        Sampling::MeanField { grid } if targets.iter().any(|t| t.1 != local) => {
            Some(estimate_density(&data.state(n), grid)?.occupied())
        }
        _ => None,
    };

    let widths: Vec<usize> = targets.iter().map(|(b, _)| d * b.len()).collect();
    let stride_row: usize = widths.iter().sum();
    let mut packed = vec![0.0; big_n * stride_row];
    let init = || (PartnerSampler::new(), Vec::<Partner>::new());
    packed.par_chunks_mut(stride_row).enumerate().for_each_init(init, |(sampler, partners), (i, all)| {
        let xi = &x[i * d..(i + 1) * d];
        let mut parts: Vec<&mut [f64]> = Vec::with_capacity(targets.len());
        let mut rest = all;
        for w in &widths {
            let (head, tail) = rest.split_at_mut(*w);
            parts.push(head);
            rest = tail;
        }
        partners.clear();
        let mut push = |z: &[f64], w: f64| {
            let (delta, r) = displacement(xi, z);
            partners.push(Partner { delta, r, w });
        };
        match sampling {
            Sampling::KnownPairs => {
                let j = plan.expect("pairings").partner(i);
                push(&x[j * d..(j + 1) * d], 1.0);
            }
            Sampling::Batch { batch_size, key } => {
                let mut rng = partner_key(key, n, i).rng();
                let w = 1.0 / batch_size as f64;
                for &j in sampler.draw(&mut rng, big_n, i, batch_size) {
                    push(&x[j * d..(j + 1) * d], w);
                }
            }
            Sampling::MeanField { .. } => {
                if let Some(cells) = cells.as_ref() {
                    for (z, w) in cells {
                        push(&z[..d], *w);
                    }
                }
            }
        }
        for ((basis, target), rows) in targets.iter().zip(parts.iter_mut()) {
            if *target != local {
                add_partners(*target, basis, d, partners, rows);
            }
        }
        for ((basis, target), rows) in targets.iter().zip(parts.iter_mut()) {
            let cols = basis.len();
            if *target == local {
                for c in 0..d {
                    basis.accumulate(xi[c], 1.0, &mut rows[c * cols..(c + 1) * cols]);
                }
            }
            let scale = match target {
                Target::Drift => stride as f64 * data.dt,
                Target::Diffusion(_) => 2.0 * stride as f64 * data.dt,
            };
            rows.iter_mut().for_each(|v| *v *= scale);
        }
    });

    let mut offset = 0;
    let mut blocks = Vec::with_capacity(targets.len());
    for ((basis, target), w) in targets.iter().zip(&widths) {
        let mut a = Vec::with_capacity(big_n * w);
        for agent in packed.chunks_exact(stride_row) {
            a.extend_from_slice(&agent[offset..offset + w]);
        }
        offset += w;
        let y: Vec<f64> = match target {
            Target::Drift => x_next.iter().zip(x).map(|(b, a)| b - a).collect(),
            Target::Diffusion(_) => x_next.iter().zip(x).map(|(b, a)| (b - a) * (b - a)).collect(),
        };
        blocks.push(Block { n, cols: basis.len(), a, y });
    }
    Ok(blocks)
}

/// All blocks of the windows selected by `m_used` and `stride`.
pub fn assemble(
    data: &TrajectoryDataset,
    basis: &BasisFamily,
    target: Target,
    sampling: Sampling,
    m_used: usize,
    stride: usize,
) -> Result<DesignSystem> {
    if sampling == Sampling::KnownPairs && data.pairings.is_none() {
        return Err(Error::MissingPairings);
    }
    let used = snapshot_indices(data.snapshots(), m_used, stride)?;
    let mut a = Vec::new();
    let mut y = Vec::new();
    for &n in &used {
        let block = assemble_block(data, basis, target, sampling, n, stride)?;
        a.extend_from_slice(&block.a);
        y.extend_from_slice(&block.y);
    }
    if a.iter().chain(&y).any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite design entry".into()));
    }
    Ok(DesignSystem {
        target,
        regime: sampling.regime(),
        stride,
        dt: data.dt,
        snapshots_used: used,
        cols: basis.len(),
        a,
        y,
    })
}

pub fn assemble_known_s(
    data: &TrajectoryDataset,
    basis: &BasisFamily,
    target: Target,
    m_used: usize,
) -> Result<DesignSystem> {
    assemble(data, basis, target, Sampling::KnownPairs, m_used, 1)
}

pub fn assemble_batch(
    data: &TrajectoryDataset,
    basis: &BasisFamily,
    target: Target,
    m_used: usize,
    stride: usize,
    batch_size: usize,
    key: StreamKey,
) -> Result<DesignSystem> {
    assemble(data, basis, target, Sampling::Batch { batch_size, key }, m_used, stride)
}

pub fn assemble_mean_field(
    data: &TrajectoryDataset,
    basis: &BasisFamily,
    target: Target,
    m_used: usize,
    stride: usize,
    grid: GridBox,
) -> Result<DesignSystem> {
    assemble(data, basis, target, Sampling::MeanField { grid }, m_used, stride)
}
