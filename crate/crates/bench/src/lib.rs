//! Shared fixtures for the benchmarks.

use collapse_core::grid::{bounded_well, make_gaussian_packet, Grid, Propagator, WaveFunction};
use collapse_core::Result;

/// A Gaussian packet on an `n`-point window `[−20, 20]` with its propagator
/// for `H = −½Δ + V`, `V` a bounded well.
pub fn fixture(n: usize, max_step: f64) -> Result<(WaveFunction, Propagator)> {
    let grid = Grid::new(n, -20.0, 20.0)?;
    let phi0 = make_gaussian_packet(grid, 0.0, 1.0, 0.5)?;
    let prop = Propagator::new(grid, bounded_well(&grid, 1.0, 2.0)?, max_step)?;
    Ok((phi0, prop))
}
