use serde::{Deserialize, Serialize};

use crate::dynamics::ParticleState;
use crate::error::{Error, Result};

/// Axis-aligned box `[low, high]^d` split into `bins^d` equal cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBox {
    pub low: f64,
    pub high: f64,
    pub bins: usize,
}

impl GridBox {
    pub fn new(low: f64, high: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(low < high) {
            return Err(Error::Config(format!("histogram box [{low}, {high}] with {bins} bins")));
        }
        Ok(GridBox { low, high, bins })
    }

    pub fn width(&self) -> f64 {
        (self.high - self.low) / self.bins as f64
    }

    /// Cell index along one axis; points on a shared face go to the lower
    /// cell, points outside the box to the nearest boundary cell.
    #[inline]
    pub fn axis_cell(&self, x: f64) -> usize {
        let s = ((x - self.low) / self.width()).ceil();
        if s < 1.0 {
            0
        } else {
            (s as usize - 1).min(self.bins - 1)
        }
    }

    pub fn axis_center(&self, k: usize) -> f64 {
        self.low + (k as f64 + 0.5) * self.width()
    }
}

/// Histogram estimate `f(z_m) = #{x_i ∈ C_m} / (N |C_m|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub grid: GridBox,
    pub dim: usize,
    pub n_agents: usize,
    counts: Vec<u32>,
}

pub fn estimate_density(state: &ParticleState, grid: GridBox) -> Result<DensityGrid> {
    let dim = state.dim;
    let cells = grid
        .bins
        .checked_pow(dim as u32)
        .filter(|&c| c <= 1 << 28)
        .ok_or_else(|| Error::Config("histogram has too many cells".into()))?;
    let mut counts = vec![0u32; cells];
    for x in state.x.chunks(dim) {
        counts[cell_of(&grid, x)] += 1;
    }
    Ok(DensityGrid { grid, dim, n_agents: state.n_agents(), counts })
}

#[inline]
fn cell_of(grid: &GridBox, x: &[f64]) -> usize {
    x.iter().fold(0, |m, &v| m * grid.bins + grid.axis_cell(v))
}

impl DensityGrid {
    pub fn cell_volume(&self) -> f64 {
        self.grid.width().powi(self.dim as i32)
    }

    pub fn n_cells(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, m: usize) -> u32 {
        self.counts[m]
    }

    pub fn value(&self, m: usize) -> f64 {
        self.counts[m] as f64 / (self.n_agents as f64 * self.cell_volume())
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|m| self.value(m)).collect()
    }

    /// Center of cell `m` (row-major over axes, first axis slowest).
    pub fn center(&self, m: usize, out: &mut [f64]) {
        let mut rest = m;
        for c in (0..self.dim).rev() {
            out[c] = self.grid.axis_center(rest % self.grid.bins);
            rest /= self.grid.bins;
        }
    }

    /// Occupied cells as `(center, f(z_m) |C_m|)`; the weights sum to one.
    pub fn occupied(&self) -> Vec<([f64; crate::dynamics::MAX_DIM], f64)> {
        let n = self.n_agents as f64;
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(m, &c)| {
                let mut z = [0.0; crate::dynamics::MAX_DIM];
                self.center(m, &mut z[..self.dim]);
                (z, c as f64 / n)
            })
            .collect()
    }

    /// `Σ_m |f_m - g_m| |C_m|` against a grid of the same shape.
    pub fn l1_distance(&self, other: &DensityGrid) -> Result<f64> {
        if self.grid != other.grid || self.dim != other.dim {
            return Err(Error::Shape("density grids differ".into()));
        }
        let vol = self.cell_volume();
        Ok((0..self.counts.len()).map(|m| (self.value(m) - other.value(m)).abs() * vol).sum())
    }
}
