//! Discretized one-dimensional Hilbert space.
//!
//! States live on a uniform periodic grid `x_j = x_min + j·dx`. All quadratures
//! use the rectangle rule `Σ f(x_j)·dx`, which is the rule under which the
//! discrete Fourier transform is exactly unitary. The Hamiltonian is
//! `H = −½Δ + V` with ħ = m = 1 and the collapse operator is `A = √λ·x`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CollapseError, Result};

/// Fraction of the window on each side counted as "near the boundary".
pub const BOUNDARY_FRACTION: f64 = 0.1;
/// Mass allowed in the outer boundary strips before a run is flagged.
pub const BOUNDARY_MASS_LIMIT: f64 = 1e-6;
/// Largest exponent `λ·max|x|²·dt` accepted by [`collapse_flow`].
pub const MAX_COLLAPSE_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    n_points: usize,
    x_min: f64,
    x_max: f64,
}

impl Grid {
    pub fn new(n_points: usize, x_min: f64, x_max: f64) -> Result<Self> {
        if n_points < 8 || !n_points.is_power_of_two() {
            return Err(invalid(format!(
                "n_points must be a power of two >= 8, got {n_points}"
            )));
        }
        if !(x_min.is_finite() && x_max.is_finite() && x_max > x_min) {
            return Err(invalid(format!("window [{x_min}, {x_max}] is empty")));
        }
        Ok(Grid {
            n_points,
            x_min,
            x_max,
        })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.n_points as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_points).map(|j| self.x(j)).collect()
    }

    /// Largest `|x_j|` on the grid.
    pub fn max_abs_x(&self) -> f64 {
        self.x(0).abs().max(self.x(self.n_points - 1).abs())
    }

    /// Angular wavenumbers in FFT order, Nyquist mode mapped to `−π/dx`.
    pub fn wavenumbers(&self) -> Vec<f64> {
        let n = self.n_points as i64;
        let scale = 2.0 * PI / (self.n_points as f64 * self.dx());
        (0..n)
            .map(|j| {
                let f = if j < n / 2 { j } else { j - n };
                scale * f as f64
            })
            .collect()
    }

    /// Index of the grid point nearest to `x` (clamped to the window).
    pub fn nearest_index(&self, x: f64) -> usize {
        let j = ((x - self.x_min) / self.dx()).round();
        j.clamp(0.0, (self.n_points - 1) as f64) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateLabel {
    Raw,
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveFunction {
    grid: Grid,
    amplitudes: Vec<Complex64>,
    label: StateLabel,
}

impl WaveFunction {
    pub fn new(grid: Grid, amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() != grid.n_points() {
            return Err(invalid(format!(
                "expected {} amplitudes, got {}",
                grid.n_points(),
                amplitudes.len()
            )));
        }
        Ok(WaveFunction {
            grid,
            amplitudes,
            label: StateLabel::Raw,
        })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> Complex64) -> Self {
        let amplitudes = grid.points().into_iter().map(f).collect();
        WaveFunction {
            grid,
            amplitudes,
            label: StateLabel::Raw,
        }
    }

    pub(crate) fn from_parts(grid: Grid, amplitudes: Vec<Complex64>, label: StateLabel) -> Self {
        debug_assert_eq!(amplitudes.len(), grid.n_points());
        WaveFunction {
            grid,
            amplitudes,
            label,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn label(&self) -> StateLabel {
        self.label
    }

    pub fn into_amplitudes(self) -> Vec<Complex64> {
        self.amplitudes
    }

    pub fn norm2(&self) -> f64 {
        norm2_of(&self.amplitudes, self.grid.dx())
    }

    pub fn normalize(&self) -> Result<WaveFunction> {
        let n2 = self.norm2();
        if !(n2 > 1e-300) || !n2.is_finite() {
            return Err(CollapseError::DegenerateState { norm2: n2 });
        }
        let s = 1.0 / n2.sqrt();
        Ok(WaveFunction {
            grid: self.grid,
            amplitudes: self.amplitudes.iter().map(|a| a * s).collect(),
            label: StateLabel::Normalized,
        })
    }

    /// `⟨self, other⟩ = Σ conj(ψ_j)·χ_j·dx`.
    pub fn inner(&self, other: &WaveFunction) -> Result<Complex64> {
        if self.grid != other.grid {
            return Err(CollapseError::GridMismatch);
        }
        let s: Complex64 = self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum();
        Ok(s * self.grid.dx())
    }

    pub fn scaled(&self, factor: Complex64) -> WaveFunction {
        WaveFunction {
            grid: self.grid,
            amplitudes: self.amplitudes.iter().map(|a| a * factor).collect(),
            label: StateLabel::Raw,
        }
    }

    /// `|ψ_j|²` at every grid point.
    pub fn density(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    /// `⟨x⟩` of the normalized state.
    pub fn mean_position(&self) -> f64 {
        let (m0, m1, _) = self.position_moments();
        m1 / m0
    }

    pub fn position_variance(&self) -> f64 {
        let (m0, m1, m2) = self.position_moments();
        let mean = m1 / m0;
        m2 / m0 - mean * mean
    }

    fn position_moments(&self) -> (f64, f64, f64) {
        let mut m = (0.0, 0.0, 0.0);
        for (j, a) in self.amplitudes.iter().enumerate() {
            let p = a.norm_sqr();
            let x = self.grid.x(j);
            m.0 += p;
            m.1 += p * x;
            m.2 += p * x * x;
        }
        m
    }

    /// Fraction of the squared norm lying in the outer boundary strips.
    pub fn boundary_mass_fraction(&self) -> f64 {
        let n = self.grid.n_points();
        let strip = ((n as f64) * BOUNDARY_FRACTION).ceil() as usize;
        let total: f64 = self.amplitudes.iter().map(|a| a.norm_sqr()).sum();
        let outer: f64 = self.amplitudes[..strip]
            .iter()
            .chain(&self.amplitudes[n - strip..])
            .map(|a| a.norm_sqr())
            .sum();
        if total > 0.0 {
            outer / total
        } else {
            0.0
        }
    }

    pub fn near_boundary(&self) -> bool {
        self.boundary_mass_fraction() > BOUNDARY_MASS_LIMIT
    }

    /// L² distance `‖self − other‖`.
    pub fn distance(&self, other: &WaveFunction) -> Result<f64> {
        if self.grid != other.grid {
            return Err(CollapseError::GridMismatch);
        }
        let s: f64 = self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        Ok((s * self.grid.dx()).sqrt())
    }
}

pub(crate) fn norm2_of(amplitudes: &[Complex64], dx: f64) -> f64 {
    amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>() * dx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    /// `V(x_j)` in energy units.
    pub potential: Vec<f64>,
    /// When false the kinetic term is dropped; with zero potential this is `H = 0`.
    pub kinetic: bool,
}

impl HamiltonianSpec {
    pub fn new(grid: &Grid, potential: Vec<f64>, kinetic: bool) -> Result<Self> {
        if potential.len() != grid.n_points() {
            return Err(invalid("potential length differs from grid size"));
        }
        if potential.iter().any(|v| !v.is_finite()) {
            return Err(invalid("potential must be finite"));
        }
        Ok(HamiltonianSpec { potential, kinetic })
    }

    /// `H = −½Δ`.
    pub fn free(grid: &Grid) -> Self {
        HamiltonianSpec {
            potential: vec![0.0; grid.n_points()],
            kinetic: true,
        }
    }

    /// `H = 0`.
    pub fn zero(grid: &Grid) -> Self {
        HamiltonianSpec {
            potential: vec![0.0; grid.n_points()],
            kinetic: false,
        }
    }

    /// `H = −½Δ + V` with `V` sampled at the grid points.
    pub fn with_potential(grid: &Grid, v: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, grid.points().into_iter().map(v).collect(), true)
    }

    pub fn has_potential(&self) -> bool {
        self.potential.iter().any(|v| *v != 0.0)
    }

    pub fn is_zero(&self) -> bool {
        !self.kinetic && !self.has_potential()
    }

    pub fn max_abs_potential(&self) -> f64 {
        self.potential.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `H = −½Δ + V` with the bounded well `V(x) = amplitude·(1 − e^{−x²/(2·width²)})`.
pub fn bounded_well(grid: &Grid, amplitude: f64, width: f64) -> Result<HamiltonianSpec> {
    if !(width > 0.0 && width.is_finite() && amplitude.is_finite()) {
        return Err(invalid(format!("bad well amplitude {amplitude} / width {width}")));
    }
    HamiltonianSpec::with_potential(grid, |x| amplitude * -(-(x * x) / (2.0 * width * width)).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseSpec {
    lambda: f64,
}

impl CollapseSpec {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(invalid(format!("lambda must be positive, got {lambda}")));
        }
        Ok(CollapseSpec { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Normalized Gaussian packet with `|φ|² ∝ exp(−(x−c)²/(2σ²))` and phase `e^{ikx}`.
pub fn make_gaussian_packet(grid: Grid, center: f64, sigma: f64, momentum: f64) -> Result<WaveFunction> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    let outside = gaussian_mass_outside(center, sigma, grid.x_min(), grid.x(grid.n_points() - 1));
    if outside > 1e-8 {
        return Err(CollapseError::GridTooSmall { mass: outside });
    }
    let psi = WaveFunction::from_fn(grid, |x| {
        let d = x - center;
        Complex64::from_polar((-d * d / (4.0 * sigma * sigma)).exp(), momentum * x)
    });
    psi.normalize()
}

fn gaussian_mass_outside(center: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    use statrs::function::erf::erfc;
    let s = sigma * std::f64::consts::SQRT_2;
    0.5 * erfc((center - lo) / s) + 0.5 * erfc((hi - center) / s)
}

/// GRW hitting: multiply by `(α/π)^{1/4} e^{−(α/2)(x−center)²}`.
pub fn gaussian_hit(psi: &WaveFunction, center: f64, alpha: f64) -> Result<WaveFunction> {
    let mut out = psi.clone();
    gaussian_hit_in_place(&mut out.amplitudes, &psi.grid, center, alpha)?;
    out.label = StateLabel::Raw;
    Ok(out)
}

pub(crate) fn gaussian_hit_in_place(
    amplitudes: &mut [Complex64],
    grid: &Grid,
    center: f64,
    alpha: f64,
) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid(format!("alpha must be positive, got {alpha}")));
    }
    let prefactor = (alpha / PI).powf(0.25);
    for (j, a) in amplitudes.iter_mut().enumerate() {
        let d = grid.x(j) - center;
        *a *= prefactor * (-0.5 * alpha * d * d).exp();
    }
    Ok(())
}

/// Exact collapse flow `A_{s,t} = exp(√λ·x·Δξ − λ·x²·Δt)`.
pub fn collapse_flow(psi: &WaveFunction, c: CollapseSpec, dxi: f64, dt: f64) -> Result<WaveFunction> {
    let mut out = psi.clone();
    collapse_flow_in_place(&mut out.amplitudes, &psi.grid, c.lambda(), dxi, dt)?;
    out.label = StateLabel::Raw;
    Ok(out)
}

pub(crate) fn check_collapse_step(grid: &Grid, lambda: f64, dt: f64) -> Result<()> {
    if !(dt >= 0.0) {
        return Err(invalid(format!("dt must be non-negative, got {dt}")));
    }
    let m = grid.max_abs_x();
    let exponent = lambda * m * m * dt;
    if exponent > MAX_COLLAPSE_EXPONENT {
        return Err(CollapseError::StepTooLarge(format!(
            "lambda*x_max^2*dt = {exponent} exceeds {MAX_COLLAPSE_EXPONENT}"
        )));
    }
    Ok(())
}

pub(crate) fn collapse_flow_in_place(
    amplitudes: &mut [Complex64],
    grid: &Grid,
    lambda: f64,
    dxi: f64,
    dt: f64,
) -> Result<()> {
    check_collapse_step(grid, lambda, dt)?;
    if dxi == 0.0 && dt == 0.0 {
        return Ok(());
    }
    let sl = lambda.sqrt();
    for (j, a) in amplitudes.iter_mut().enumerate() {
        let x = grid.x(j);
        *a *= (sl * x * dxi - lambda * x * x * dt).exp();
    }
    Ok(())
}

/// FFT plans and wavenumbers for one grid.
#[derive(Clone)]
pub struct Spectral {
    grid: Grid,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    k: Vec<f64>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish()
    }
}

impl Spectral {
    pub fn new(grid: Grid) -> Self {
        let mut planner = FftPlanner::new();
        let n = grid.n_points();
        Spectral {
            grid,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            k: grid.wavenumbers(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn wavenumbers(&self) -> &[f64] {
        &self.k
    }

    pub fn scratch(&self) -> Vec<Complex64> {
        let len = self
            .forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len());
        vec![Complex64::new(0.0, 0.0); len]
    }

    /// Applies the Fourier multiplier `m(k)` in place.
    pub fn apply_multiplier(
        &self,
        amplitudes: &mut [Complex64],
        multiplier: impl Fn(usize, f64) -> Complex64,
        scratch: &mut [Complex64],
    ) {
        self.forward.process_with_scratch(amplitudes, scratch);
        let norm = 1.0 / self.grid.n_points() as f64;
        for (j, (a, k)) in amplitudes.iter_mut().zip(&self.k).enumerate() {
            *a *= multiplier(j, *k) * norm;
        }
        self.inverse.process_with_scratch(amplitudes, scratch);
    }

    /// Spectral derivative of the given order (Nyquist mode zeroed for odd orders).
    pub fn derivative(&self, amplitudes: &[Complex64], order: u32) -> Vec<Complex64> {
        let mut out = amplitudes.to_vec();
        let mut scratch = self.scratch();
        let nyquist = self.grid.n_points() / 2;
        self.apply_multiplier(
            &mut out,
            |j, k| {
                if order % 2 == 1 && j == nyquist {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, k).powu(order)
                }
            },
            &mut scratch,
        );
        out
    }

    /// Fraction of spectral power in the outer quarter of the wavenumber range.
    pub fn high_frequency_fraction(&self, amplitudes: &[Complex64]) -> f64 {
        let mut buf = amplitudes.to_vec();
        let mut scratch = self.scratch();
        self.forward.process_with_scratch(&mut buf, &mut scratch);
        let kmax = PI / self.grid.dx();
        let total: f64 = buf.iter().map(|a| a.norm_sqr()).sum();
        let high: f64 = buf
            .iter()
            .zip(&self.k)
            .filter(|(_, k)| k.abs() > 0.75 * kmax)
            .map(|(a, _)| a.norm_sqr())
            .sum();
        if total > 0.0 {
            high / total
        } else {
            0.0
        }
    }
}

/// Split-step propagator for `e^{−i·dt·H}`: half potential, full kinetic, half potential.
#[derive(Debug, Clone)]
pub struct Propagator {
    spectral: Spectral,
    hamiltonian: HamiltonianSpec,
    max_step: f64,
}

/// Precomputed phases for repeated steps of one fixed `dt`.
#[derive(Debug, Clone)]
pub struct StepKernel {
    dt: f64,
    half_potential: Option<Vec<Complex64>>,
    kinetic: Option<Vec<Complex64>>,
}

impl Propagator {
    /// `max_step` bounds the Strang substep used by [`Propagator::evolve`] when
    /// both kinetic and potential terms are present.
    pub fn new(grid: Grid, hamiltonian: HamiltonianSpec, max_step: f64) -> Result<Self> {
        if hamiltonian.potential.len() != grid.n_points() {
            return Err(CollapseError::GridMismatch);
        }
        if !(max_step > 0.0) {
            return Err(invalid("max_step must be positive"));
        }
        Ok(Propagator {
            spectral: Spectral::new(grid),
            hamiltonian,
            max_step,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.spectral.grid()
    }

    pub fn hamiltonian(&self) -> &HamiltonianSpec {
        &self.hamiltonian
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    pub fn scratch(&self) -> Vec<Complex64> {
        self.spectral.scratch()
    }

    /// True when a single split step is exact for any duration.
    pub fn is_exact(&self) -> bool {
        !(self.hamiltonian.kinetic && self.hamiltonian.has_potential())
    }

    pub fn kernel(&self, dt: f64) -> StepKernel {
        let h = &self.hamiltonian;
        let half_potential = h.has_potential().then(|| {
            h.potential
                .iter()
                .map(|v| Complex64::from_polar(1.0, -0.5 * dt * v))
                .collect()
        });
        let kinetic = h.kinetic.then(|| {
            self.spectral
                .wavenumbers()
                .iter()
                .map(|k| Complex64::from_polar(1.0, -0.5 * dt * k * k))
                .collect()
        });
        StepKernel {
            dt,
            half_potential,
            kinetic,
        }
    }

    pub fn apply_kernel(&self, kernel: &StepKernel, amplitudes: &mut [Complex64], scratch: &mut [Complex64]) {
        if kernel.dt == 0.0 {
            return;
        }
        if let Some(hp) = &kernel.half_potential {
            amplitudes.iter_mut().zip(hp).for_each(|(a, p)| *a *= p);
        }
        if let Some(kin) = &kernel.kinetic {
            self.spectral
                .apply_multiplier(amplitudes, |j, _| kin[j], scratch);
        }
        if let Some(hp) = &kernel.half_potential {
            amplitudes.iter_mut().zip(hp).for_each(|(a, p)| *a *= p);
        }
    }

    /// One symmetric split step of length `dt`.
    pub fn step(&self, psi: &WaveFunction, dt: f64) -> Result<WaveFunction> {
        if !(dt >= 0.0) {
            return Err(invalid(format!("dt must be non-negative, got {dt}")));
        }
        if psi.grid() != self.grid() {
            return Err(CollapseError::GridMismatch);
        }
        let mut out = psi.clone();
        if dt > 0.0 {
            let mut scratch = self.scratch();
            self.apply_kernel(&self.kernel(dt), &mut out.amplitudes, &mut scratch);
        }
        Ok(out)
    }

    /// Evolves by `duration`, subdividing into equal substeps no longer than
    /// `max_step` unless the split step is exact.
    pub fn evolve_in_place(&self, amplitudes: &mut [Complex64], duration: f64, scratch: &mut [Complex64]) {
        if duration <= 0.0 {
            return;
        }
        let n = if self.is_exact() {
            1
        } else {
            (duration / self.max_step).ceil().max(1.0) as usize
        };
        let kernel = self.kernel(duration / n as f64);
        for _ in 0..n {
            self.apply_kernel(&kernel, amplitudes, scratch);
        }
    }

    pub fn evolve(&self, psi: &WaveFunction, duration: f64) -> Result<WaveFunction> {
        if !(duration >= 0.0) {
            return Err(invalid(format!("duration must be non-negative, got {duration}")));
        }
        let mut out = psi.clone();
        let mut scratch = self.scratch();
        self.evolve_in_place(&mut out.amplitudes, duration, &mut scratch);
        Ok(out)
    }
}

/// `e^{−i·dt·H}` by one symmetric split step.
pub fn schrodinger_step(psi: &WaveFunction, h: &HamiltonianSpec, dt: f64) -> Result<WaveFunction> {
    Propagator::new(*psi.grid(), h.clone(), f64::INFINITY)?.step(psi, dt)
}

/// Dense matrix of `H` on the grid: spectral kinetic part plus diagonal potential.
pub fn hamiltonian_matrix(grid: &Grid, h: &HamiltonianSpec) -> nalgebra::DMatrix<f64> {
    let n = grid.n_points();
    let k = grid.wavenumbers();
    let mut kernel = vec![0.0; n];
    if h.kinetic {
        for (d, slot) in kernel.iter_mut().enumerate() {
            let phase = 2.0 * PI * d as f64 / n as f64;
            *slot = k
                .iter()
                .enumerate()
                .map(|(m, km)| {
                    let f = if m < n / 2 { m as f64 } else { m as f64 - n as f64 };
                    0.5 * km * km * (phase * f).cos()
                })
                .sum::<f64>()
                / n as f64;
        }
    }
    nalgebra::DMatrix::from_fn(n, n, |i, j| {
        let d = (i + n - j) % n;
        kernel[d] + if i == j { h.potential[i] } else { 0.0 }
    })
}
