//! Lindblad evolution of the statistical operator `ρ_t = E|ψ_t⟩⟨ψ_t|`.
//!
//! In the position basis both models share the form
//! `∂ρ(x,y)/∂t = −i[H,ρ](x,y) − Γ(x−y)·ρ(x,y)` with
//! `Γ_GRW(d) = μ(1 − e^{−αd²/4})` and `Γ_Diósi(d) = (λ/2)d²`.
//! Matrices store `ρ(x_i,x_j)·dx`, so the trace is the plain diagonal sum.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::diosi::WeightedEnsemble;
use crate::error::{invalid, CollapseError, Result};
use crate::grid::{hamiltonian_matrix, Grid, HamiltonianSpec, WaveFunction};
use crate::stats::pairwise_sum;

/// Dense storage grows as `n²`; larger grids belong to the trajectory modules.
pub const MAX_MASTER_POINTS: usize = 128;
/// Largest acceptable difference between a run and its step-halved rerun.
pub const STEP_HALVING_TOLERANCE: f64 = 1e-6;
/// RK4 loses stability on the imaginary axis near `|z| = 2√2`; refuse well below it.
const RK4_STABILITY_LIMIT: f64 = 2.5;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    grid: Grid,
    entries: DMatrix<Complex64>,
}

impl DensityMatrix {
    pub fn new(grid: Grid, entries: DMatrix<Complex64>) -> Result<Self> {
        check_size(&grid)?;
        let n = grid.n_points();
        if entries.nrows() != n || entries.ncols() != n {
            return Err(CollapseError::GridMismatch);
        }
        Ok(DensityMatrix { grid, entries })
    }

    /// `|φ⟩⟨φ|`.
    pub fn from_pure(psi: &WaveFunction) -> Result<Self> {
        let grid = *psi.grid();
        check_size(&grid)?;
        let a = psi.amplitudes();
        let dx = grid.dx();
        let n = grid.n_points();
        Ok(DensityMatrix {
            grid,
            entries: DMatrix::from_fn(n, n, |i, j| a[i] * a[j].conj() * dx),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `ρ(x_i, x_j)·dx`.
    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    /// `ρ(x_i, x_j)`.
    pub fn kernel(&self, i: usize, j: usize) -> Complex64 {
        self.entries[(i, j)] / self.grid.dx()
    }

    pub fn trace(&self) -> f64 {
        let d: Vec<f64> = (0..self.grid.n_points()).map(|i| self.entries[(i, i)].re).collect();
        pairwise_sum(&d)
    }

    /// Position density `ρ(x,x)`.
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.grid.n_points()).map(|i| self.kernel(i, i).re).collect()
    }

    /// `max |ρ − ρ†|`.
    pub fn hermiticity_error(&self) -> f64 {
        let n = self.grid.n_points();
        let mut m = 0.0f64;
        for i in 0..n {
            for j in i..n {
                m = m.max((self.entries[(i, j)] - self.entries[(j, i)].conj()).norm());
            }
        }
        m
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.entries + self.entries.adjoint()) * Complex64::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().fold(f64::INFINITY, |m, v| m.min(*v))
    }

    /// `max |ρ_ij − σ_ij|` over stored entries.
    pub fn max_abs_diff(&self, other: &DensityMatrix) -> Result<f64> {
        if self.grid != other.grid {
            return Err(CollapseError::GridMismatch);
        }
        Ok(self
            .entries
            .iter()
            .zip(other.entries.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).norm())))
    }

    /// Checks the physical-state invariants: Hermitian to 1e−10, unit trace to
    /// 1e−6, eigenvalues above −1e−8.
    pub fn check_physical(&self) -> Result<()> {
        let herm = self.hermiticity_error();
        if herm > 1e-10 {
            return Err(invalid(format!("density matrix not Hermitian (error {herm:e})")));
        }
        let tr = self.trace();
        if (tr - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("density matrix trace {tr} differs from 1")));
        }
        let ev = self.min_eigenvalue();
        if ev < -1e-8 {
            return Err(invalid(format!("density matrix has eigenvalue {ev:e}")));
        }
        Ok(())
    }
}

fn check_size(grid: &Grid) -> Result<()> {
    if grid.n_points() > MAX_MASTER_POINTS {
        return Err(invalid(format!(
            "master equation grids are limited to {MAX_MASTER_POINTS} points, got {}",
            grid.n_points()
        )));
    }
    Ok(())
}

/// `μ(1 − e^{−α·d²/4})` for separation `d`.
pub fn grw_decay_rate(mu: f64, alpha: f64, d: f64) -> f64 {
    -mu * (-0.25 * alpha * d * d).exp_m1()
}

/// `(λ/2)·d²` for separation `d`.
pub fn diosi_decay_rate(lambda: f64, d: f64) -> f64 {
    0.5 * lambda * d * d
}

struct Generator {
    h: DMatrix<Complex64>,
    decay: DMatrix<f64>,
    commutator: bool,
}

impl Generator {
    fn new(grid: &Grid, h: &HamiltonianSpec, rate: impl Fn(f64) -> f64) -> Result<Self> {
        if h.potential.len() != grid.n_points() {
            return Err(CollapseError::GridMismatch);
        }
        let n = grid.n_points();
        let decay = DMatrix::from_fn(n, n, |i, j| rate(grid.x(i) - grid.x(j)));
        Ok(Generator {
            h: hamiltonian_matrix(grid, h).map(|v| Complex64::new(v, 0.0)),
            decay,
            commutator: !h.is_zero(),
        })
    }

    /// Upper bound on the operator norm of `ρ ↦ L(ρ)`.
    fn norm_bound(&self) -> f64 {
        let h_norm = self
            .h
            .row_iter()
            .map(|r| r.iter().map(|v| v.norm()).sum::<f64>())
            .fold(0.0, f64::max);
        let d_max = self.decay.iter().fold(0.0f64, |m, v| m.max(*v));
        2.0 * h_norm + d_max
    }

    fn apply(&self, rho: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let mut out = if self.commutator {
            let c = &self.h * rho - rho * &self.h;
            c * Complex64::new(0.0, -1.0)
        } else {
            DMatrix::zeros(rho.nrows(), rho.ncols())
        };
        out.iter_mut()
            .zip(rho.iter().zip(self.decay.iter()))
            .for_each(|(o, (r, g))| *o -= r * *g);
        out
    }

    fn rk4(&self, rho0: &DMatrix<Complex64>, t: f64, n_steps: usize) -> DMatrix<Complex64> {
        let h = t / n_steps as f64;
        let half = Complex64::new(0.5 * h, 0.0);
        let full = Complex64::new(h, 0.0);
        let sixth = Complex64::new(h / 6.0, 0.0);
        let two = Complex64::new(2.0, 0.0);
        let mut rho = rho0.clone();
        for _ in 0..n_steps {
            let k1 = self.apply(&rho);
            let k2 = self.apply(&(&rho + &k1 * half));
            let k3 = self.apply(&(&rho + &k2 * half));
            let k4 = self.apply(&(&rho + &k3 * full));
            rho += (k1 + k2 * two + k3 * two + k4) * sixth;
        }
        rho
    }
}

fn evolve(rho0: &DensityMatrix, gen: Generator, t: f64, dt: f64) -> Result<DensityMatrix> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(invalid(format!("t must be non-negative, got {t}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid(format!("dt must be positive, got {dt}")));
    }
    if t == 0.0 {
        return Ok(rho0.clone());
    }
    let n = (t / dt).ceil().max(1.0) as usize;
    let z = gen.norm_bound() * t / n as f64;
    if z > RK4_STABILITY_LIMIT {
        return Err(CollapseError::StepTooLarge(format!(
            "dt*||L|| = {z:.3} exceeds the RK4 stability limit {RK4_STABILITY_LIMIT}"
        )));
    }
    let coarse = gen.rk4(&rho0.entries, t, n);
    let fine = gen.rk4(&rho0.entries, t, 2 * n);
    let gap = coarse
        .iter()
        .zip(fine.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
    if gap > STEP_HALVING_TOLERANCE {
        return Err(CollapseError::StepTooLarge(format!(
            "step halving changed the solution by {gap:e}"
        )));
    }
    Ok(DensityMatrix {
        grid: rho0.grid,
        entries: fine,
    })
}

/// GRW master equation, fixed-step RK4 validated by a step-halved rerun
/// (the finer solution is returned).
pub fn evolve_grw_master(
    rho0: &DensityMatrix,
    h: &HamiltonianSpec,
    mu: f64,
    alpha: f64,
    t: f64,
    dt: f64,
) -> Result<DensityMatrix> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(invalid(format!("mu must be positive, got {mu}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid(format!("alpha must be positive, got {alpha}")));
    }
    let gen = Generator::new(&rho0.grid, h, |d| grw_decay_rate(mu, alpha, d))?;
    evolve(rho0, gen, t, dt)
}

/// Diósi master equation, same integrator as [`evolve_grw_master`].
pub fn evolve_diosi_master(
    rho0: &DensityMatrix,
    h: &HamiltonianSpec,
    lambda: f64,
    t: f64,
    dt: f64,
) -> Result<DensityMatrix> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("lambda must be positive, got {lambda}")));
    }
    let gen = Generator::new(&rho0.grid, h, |d| diosi_decay_rate(lambda, d))?;
    evolve(rho0, gen, t, dt)
}

/// Ensemble estimate of `ρ_t` with the standard error of every entry
/// (`√(SE_re² + SE_im²)`, same `ρ·dx` units).
#[derive(Debug, Clone)]
pub struct EnsembleDensity {
    pub mean: DensityMatrix,
    pub standard_error: DMatrix<f64>,
    pub n: usize,
}

/// `(1/N) Σ w_i |φ_i⟩⟨φ_i|`; unit weights give the plain GRW average.
pub fn ensemble_density(ensemble: &WeightedEnsemble) -> Result<DensityMatrix> {
    Ok(ensemble_density_with_error(ensemble)?.mean)
}

pub fn ensemble_density_with_error(ensemble: &WeightedEnsemble) -> Result<EnsembleDensity> {
    let first = ensemble
        .states
        .first()
        .ok_or_else(|| invalid("ensemble is empty"))?;
    let grid = *first.grid();
    check_size(&grid)?;
    if ensemble.states.iter().any(|s| *s.grid() != grid) {
        return Err(CollapseError::GridMismatch);
    }
    let n = grid.n_points();
    let count = ensemble.states.len();
    let dx = grid.dx();
    let mut sum = DMatrix::<Complex64>::zeros(n, n);
    let mut sum_sq_re = DMatrix::<f64>::zeros(n, n);
    let mut sum_sq_im = DMatrix::<f64>::zeros(n, n);
    for (s, w) in ensemble.states.iter().zip(&ensemble.weights) {
        let a = s.amplitudes();
        for j in 0..n {
            for i in 0..n {
                let v = a[i] * a[j].conj() * (w * dx);
                sum[(i, j)] += v;
                sum_sq_re[(i, j)] += v.re * v.re;
                sum_sq_im[(i, j)] += v.im * v.im;
            }
        }
    }
    let nf = count as f64;
    let mean = sum.map(|v| v / nf);
    let se = DMatrix::from_fn(n, n, |i, j| {
        if count < 2 {
            return 0.0;
        }
        let m = mean[(i, j)];
        let var_re = ((sum_sq_re[(i, j)] - nf * m.re * m.re) / (nf - 1.0)).max(0.0);
        let var_im = ((sum_sq_im[(i, j)] - nf * m.im * m.im) / (nf - 1.0)).max(0.0);
        ((var_re + var_im) / nf).sqrt()
    });
    Ok(EnsembleDensity {
        mean: DensityMatrix { grid, entries: mean },
        standard_error: se,
        n: count,
    })
}
