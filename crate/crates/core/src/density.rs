//! Energy-based conditional density `p(y|x) = exp(s(y, x)) / Z(x)` on a grid.

use crate::error::{domain_err, Result};
use crate::gridmath::{log_sum_exp, Grid2D};

/// Normalized density over grid cells of area `cell_area`.
///
/// Values are densities (units of 1/area); `cell_area * sum == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    grid: Grid2D,
    cell_area: f64,
    log_partition: f64,
}

impl GridDensity {
    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_area
    }

    /// `log Z`, the log of the grid partition sum `A * sum_k exp(s_k)`.
    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    /// Probability mass per cell, `A * p_k`.
    pub fn masses(&self) -> Grid2D {
        self.grid.scaled(self.cell_area)
    }

    /// Probability mass inside the 3x3 neighbourhood (clipped at the border)
    /// of the density mode.
    pub fn peak_mass(&self) -> f64 {
        let (r, c) = argmax_state(self);
        let mut mass = 0.0;
        for (rr, cc) in neighbourhood(self.grid.shape(), r, c) {
            mass += self.grid.get(rr, cc);
        }
        mass * self.cell_area
    }
}

fn neighbourhood(shape: (usize, usize), row: usize, col: usize) -> impl Iterator<Item = (usize, usize)> {
    let (h, w) = shape;
    let rows = row.saturating_sub(1)..(row + 2).min(h);
    rows.flat_map(move |r| (col.saturating_sub(1)..(col + 2).min(w)).map(move |c| (r, c)))
}

/// Exponentiates and normalizes a score grid into a density.
pub fn normalize(scores: &Grid2D, cell_area: f64) -> Result<GridDensity> {
    let log_partition = log_sum_exp(scores, cell_area)?;
    let grid = scores.map(|s| (s - log_partition).exp());
    Ok(GridDensity {
        grid,
        cell_area,
        log_partition,
    })
}

/// Grid cell `(row, col)` of the density mode; ties go to the smallest row,
/// then the smallest column.
pub fn argmax_state(d: &GridDensity) -> (usize, usize) {
    d.grid.argmax().unwrap_or((0, 0))
}

/// Density-weighted mean `(row, col)` over the 3x3 neighbourhood of the mode.
pub fn expected_state(d: &GridDensity) -> (f64, f64) {
    let (r, c) = argmax_state(d);
    let (mut wr, mut wc, mut total) = (0.0, 0.0, 0.0);
    for (rr, cc) in neighbourhood(d.grid.shape(), r, c) {
        let p = d.grid.get(rr, cc);
        wr += p * rr as f64;
        wc += p * cc as f64;
        total += p;
    }
    if total > 0.0 {
        (wr / total, wc / total)
    } else {
        (r as f64, c as f64)
    }
}

/// Validates a pre-computed density (used when reading densities back).
pub fn from_density_grid(grid: Grid2D, cell_area: f64) -> Result<GridDensity> {
    if !(cell_area > 0.0) {
        return domain_err(format!("cell area must be positive, got {cell_area}"));
    }
    if grid.values().iter().any(|&v| v < 0.0) {
        return domain_err("density values must be non-negative");
    }
    let mass = grid.sum() * cell_area;
    if (mass - 1.0).abs() > 1e-9 {
        return domain_err(format!("density mass is {mass}, expected 1"));
    }
    // scores are taken to be the log-densities, whose partition is 1
    Ok(GridDensity {
        grid,
        cell_area,
        log_partition: 0.0,
    })
}
