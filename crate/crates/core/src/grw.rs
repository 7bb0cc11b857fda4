//! The GRW jump process: unitary evolution interrupted at Poisson times by
//! Gaussian hits whose centers follow the smeared position density.

use std::f64::consts::PI;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CollapseError, Result};
use crate::grid::{gaussian_hit_in_place, norm2_of, Propagator, StateLabel, WaveFunction};
use crate::rng::{exp1, open_unit, standard_normal, StreamKey, StreamRole};
use crate::trajectory::{check_schedule, FlashEvent, ModelKind, Snapshot, TrajectoryRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrwParams {
    /// Collapse rate (jumps per unit time).
    pub mu: f64,
    /// Inverse squared hitting width.
    pub alpha: f64,
    pub t_max: f64,
    pub sample_times: Vec<f64>,
    /// Replace the exponential waiting times by `X_k ≡ 1`.
    #[serde(default)]
    pub deterministic_times: bool,
}

impl GrwParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(invalid(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        check_schedule(self.t_max, &self.sample_times)
    }
}

/// Jump times `T_n = Σ_{k≤n} X_k/μ ≤ t_max` with `X_k ~ Exp(1)`.
pub fn sample_jump_times<R: RngCore>(mu: f64, t_max: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(mu > 0.0) || !(t_max > 0.0) {
        return Err(invalid("mu and t_max must be positive"));
    }
    let mut times = Vec::new();
    let mut t = 0.0;
    loop {
        t += exp1(rng) / mu;
        if t > t_max {
            return Ok(times);
        }
        times.push(t);
    }
}

/// Draws a flash center with density `√(α/π)∫e^{−α(x−y)²}|ψ(x)|²dx`:
/// a grid position from `|ψ_j|²dx`, plus `N(0, 1/(2α))` noise.
pub fn sample_flash_center<R: RngCore>(
    psi: &WaveFunction,
    alpha: f64,
    position_rng: &mut R,
    noise_rng: &mut R,
) -> Result<f64> {
    let x = sample_position(psi.amplitudes(), psi.grid(), position_rng)?;
    Ok(x + standard_normal(noise_rng) / (2.0 * alpha).sqrt())
}

fn sample_position<R: RngCore>(
    amplitudes: &[num_complex::Complex64],
    grid: &crate::grid::Grid,
    rng: &mut R,
) -> Result<f64> {
    let total: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
    if !(total * grid.dx() > 1e-300) {
        return Err(CollapseError::DegenerateState {
            norm2: total * grid.dx(),
        });
    }
    let target = open_unit(rng) * total;
    let mut acc = 0.0;
    for (j, a) in amplitudes.iter().enumerate() {
        acc += a.norm_sqr();
        if acc >= target {
            return Ok(grid.x(j));
        }
    }
    // Rounding left `acc` marginally short of `target`: take the last
    // populated cell.
    let last = amplitudes.iter().rposition(|a| a.norm_sqr() > 0.0).unwrap_or(0);
    Ok(grid.x(last))
}

/// `√(α/π)·Σ_j e^{−α(x_j−y)²}|ψ_j|²·dx`.
pub fn flash_density(psi: &WaveFunction, alpha: f64, y: f64) -> f64 {
    let g = psi.grid();
    let s: f64 = psi
        .amplitudes()
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let d = g.x(j) - y;
            (-alpha * d * d).exp() * a.norm_sqr()
        })
        .sum();
    (alpha / PI).sqrt() * s * g.dx()
}

/// CDF of [`flash_density`]: `Σ_j |ψ_j|²dx·Φ(√(2α)(y − x_j))`.
pub fn flash_cdf(psi: &WaveFunction, alpha: f64, y: f64) -> f64 {
    use statrs::function::erf::erfc;
    let g = psi.grid();
    let s = alpha.sqrt();
    psi.amplitudes()
        .iter()
        .enumerate()
        .map(|(j, a)| a.norm_sqr() * 0.5 * erfc(-(y - g.x(j)) * s))
        .sum::<f64>()
        * g.dx()
}

/// One GRW realization. The center of hit `n` is sampled from the state
/// already evolved across the waiting gap; the state is renormalized after
/// every hit.
pub fn grw_trajectory(
    phi0: &WaveFunction,
    propagator: &Propagator,
    p: &GrwParams,
    key: StreamKey,
) -> Result<TrajectoryRecord> {
    p.validate()?;
    if phi0.grid() != propagator.grid() {
        return Err(CollapseError::GridMismatch);
    }
    let grid = *phi0.grid();
    let dx = grid.dx();
    let mut jump_rng = key.stream(StreamRole::JumpTimes);
    let mut position_rng = key.stream(StreamRole::FlashPosition);
    let mut noise_rng = key.stream(StreamRole::FlashNoise);
    let mut next_gap = || {
        if p.deterministic_times {
            1.0 / p.mu
        } else {
            exp1(&mut jump_rng) / p.mu
        }
    };

    let mut psi = phi0.normalize()?.into_amplitudes();
    let mut scratch = propagator.scratch();
    let mut t_now = 0.0;
    let mut next_jump = next_gap();
    let mut flashes = Vec::new();
    let mut snapshots = Vec::with_capacity(p.sample_times.len());
    let mut boundary_flag = false;

    let mut advance_to = |t_target: f64,
                          psi: &mut Vec<num_complex::Complex64>,
                          t_now: &mut f64,
                          next_jump: &mut f64,
                          flashes: &mut Vec<FlashEvent>|
     -> Result<()> {
        while *next_jump <= t_target {
            propagator.evolve_in_place(psi, *next_jump - *t_now, &mut scratch);
            *t_now = *next_jump;
            let center = sample_position(psi, &grid, &mut position_rng)?
                + standard_normal(&mut noise_rng) / (2.0 * p.alpha).sqrt();
            gaussian_hit_in_place(psi, &grid, center, p.alpha)?;
            let n2 = norm2_of(psi, dx);
            if !(n2 > 1e-300) {
                return Err(CollapseError::DegenerateState { norm2: n2 });
            }
            let s = 1.0 / n2.sqrt();
            psi.iter_mut().for_each(|a| *a *= s);
            flashes.push(FlashEvent {
                time: *t_now,
                center,
                pre_collapse_norm2: n2,
            });
            *next_jump = if p.deterministic_times {
                // Index-based so that the n-th jump lands exactly on n/μ.
                (flashes.len() + 1) as f64 / p.mu
            } else {
                *next_jump + next_gap()
            };
        }
        propagator.evolve_in_place(psi, t_target - *t_now, &mut scratch);
        *t_now = t_target;
        Ok(())
    };

    for &t in &p.sample_times {
        advance_to(t, &mut psi, &mut t_now, &mut next_jump, &mut flashes)?;
        let state = WaveFunction::from_parts(grid, psi.clone(), StateLabel::Normalized);
        boundary_flag |= state.near_boundary();
        snapshots.push(Snapshot {
            time: t,
            raw_norm2: 1.0,
            state,
        });
    }
    advance_to(p.t_max, &mut psi, &mut t_now, &mut next_jump, &mut flashes)?;
    boundary_flag |= WaveFunction::from_parts(grid, psi, StateLabel::Normalized).near_boundary();

    Ok(TrajectoryRecord {
        model: ModelKind::Grw,
        key,
        flashes,
        snapshots,
        weight: 1.0,
        boundary_flag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_gaussian_packet, Grid, HamiltonianSpec};
    use crate::stats::{chi_square_gof, ks_one_sample, Estimate};

    fn grid() -> Grid {
        Grid::new(256, -16.0, 16.0).unwrap()
    }

    #[test]
    fn jump_count_mean_is_poisson() {
        let n = 10_000;
        let counts: Vec<f64> = (0..n)
            .map(|i| {
                let mut rng = StreamKey::new(5, i).stream(StreamRole::JumpTimes);
                sample_jump_times(10.0, 1.0, &mut rng).unwrap().len() as f64
            })
            .collect();
        let e = Estimate::of(&counts);
        // Poisson oracle: mean 10, SE √(10/n).
        assert!((e.mean - 10.0).abs() <= 3.0 * (10.0f64 / n as f64).sqrt(), "{e:?}");
        assert!((e.se * e.se * n as f64 - 10.0).abs() < 1.0);
    }

    #[test]
    fn jump_count_chi_square() {
        let n = 10_000u64;
        let (mu, t) = (3.0, 1.0);
        let mut observed = vec![0u64; 16];
        for i in 0..n {
            let mut rng = StreamKey::new(9, i).stream(StreamRole::JumpTimes);
            let k = sample_jump_times(mu, t, &mut rng).unwrap().len().min(15);
            observed[k] += 1;
        }
        let lam = mu * t;
        let mut probs: Vec<f64> = (0..15)
            .map(|k| {
                let lnp = k as f64 * f64::ln(lam) - lam - statrs::function::factorial::ln_factorial(k as u64);
                lnp.exp()
            })
            .collect();
        probs.push(1.0 - probs.iter().sum::<f64>());
        let r = chi_square_gof(&observed, &probs).unwrap();
        assert!(r.p_value >= 0.01, "{r:?}");
    }

    #[test]
    fn vanishing_window_has_no_jumps() {
        let mut rng = StreamKey::new(1, 0).stream(StreamRole::JumpTimes);
        assert!(sample_jump_times(5.0, 1e-12, &mut rng).unwrap().is_empty());
        assert!(sample_jump_times(0.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn gaps_are_exponential() {
        let mu = 7.0;
        let mut rng = StreamKey::new(2, 0).stream(StreamRole::JumpTimes);
        let times = sample_jump_times(mu, 10_001.0 / mu * 1.05, &mut rng).unwrap();
        let gaps: Vec<f64> = times.windows(2).take(10_000).map(|w| mu * (w[1] - w[0])).collect();
        assert_eq!(gaps.len(), 10_000);
        let r = ks_one_sample(&gaps, |x| 1.0 - (-x).exp()).unwrap();
        assert!(r.p_value >= 0.01, "{r:?}");
    }

    #[test]
    fn flash_center_variance_is_convolved() {
        let (sigma, alpha) = (1.0, 0.8);
        let psi = make_gaussian_packet(grid(), 0.0, sigma, 0.0).unwrap();
        let key = StreamKey::new(3, 0);
        let mut pr = key.stream(StreamRole::FlashPosition);
        let mut nr = key.stream(StreamRole::FlashNoise);
        let ys: Vec<f64> = (0..100_000)
            .map(|_| sample_flash_center(&psi, alpha, &mut pr, &mut nr).unwrap())
            .collect();
        let mean = Estimate::of(&ys);
        assert!(mean.within(0.0, 3.0), "{mean:?}");
        let sq: Vec<f64> = ys.iter().map(|y| y * y).collect();
        let var = Estimate::of(&sq);
        // Grid variance of |φ|² differs from σ² by rectangle-rule error only.
        let target = psi.position_variance() + 1.0 / (2.0 * alpha);
        assert!((target - (sigma * sigma + 1.0 / (2.0 * alpha))).abs() < 1e-10);
        assert!(var.within(target, 3.0), "{var:?} vs {target}");
    }

    #[test]
    fn sharp_packet_gives_sharp_centers() {
        let psi = make_gaussian_packet(Grid::new(1024, -4.0, 4.0).unwrap(), 2.5, 0.05, 0.0).unwrap();
        let key = StreamKey::new(4, 0);
        let mut pr = key.stream(StreamRole::FlashPosition);
        let mut nr = key.stream(StreamRole::FlashNoise);
        let ys: Vec<f64> = (0..2000)
            .map(|_| sample_flash_center(&psi, 1e6, &mut pr, &mut nr).unwrap())
            .collect();
        let e = Estimate::of(&ys);
        assert!((e.mean - 2.5).abs() < 5e-3, "{e:?}");
    }

    #[test]
    fn flash_density_identities() {
        let g = grid();
        let psi = make_gaussian_packet(g, 0.0, 1.0, 0.0).unwrap();
        let alpha = 2.0;
        let total: f64 = g.points().iter().map(|y| flash_density(&psi, alpha, *y)).sum::<f64>() * g.dx();
        assert!((total - 1.0).abs() < 1e-6);
        for y in g.points().iter().step_by(7) {
            let hit = crate::grid::gaussian_hit(&psi, *y, alpha).unwrap().norm2();
            let fd = flash_density(&psi, alpha, *y);
            assert!((hit - fd).abs() <= 1e-12 * fd.max(1e-300), "{hit} {fd}");
        }
        // N(0,1) ⊛ N(0, 1/(2α)) at 0.
        let closed = 1.0 / (2.0 * PI * (1.0 + 1.0 / (2.0 * alpha))).sqrt();
        assert!((flash_density(&psi, alpha, 0.0) - closed).abs() < 1e-12);
        assert!((flash_cdf(&psi, alpha, 0.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_hamiltonian_trajectory_is_gaussian_product() {
        let g = grid();
        let phi0 = make_gaussian_packet(g, 0.3, 1.5, 0.7).unwrap();
        let prop = Propagator::new(g, HamiltonianSpec::zero(&g), 0.01).unwrap();
        let p = GrwParams {
            mu: 4.0,
            alpha: 0.5,
            t_max: 2.0,
            sample_times: vec![0.5, 1.0, 2.0],
            deterministic_times: false,
        };
        let rec = grw_trajectory(&phi0, &prop, &p, StreamKey::new(8, 1)).unwrap();
        assert!(!rec.flashes.is_empty());
        for snap in &rec.snapshots {
            let ys: Vec<f64> = rec.flashes.iter().filter(|f| f.time <= snap.time).map(|f| f.center).collect();
            let amps = g
                .points()
                .iter()
                .zip(phi0.amplitudes())
                .map(|(x, a)| {
                    let e: f64 = ys.iter().map(|y| (x - y).powi(2)).sum();
                    a * (-0.5 * p.alpha * e).exp()
                })
                .collect();
            let direct = WaveFunction::new(g, amps).unwrap().normalize().unwrap();
            assert!((snap.state.norm2() - 1.0).abs() < 1e-10);
            for (a, b) in snap.state.amplitudes().iter().zip(direct.amplitudes()) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn tiny_rate_is_pure_schrodinger() {
        let g = grid();
        let phi0 = make_gaussian_packet(g, 0.0, 1.0, 1.0).unwrap();
        let h = HamiltonianSpec::with_potential(&g, |x| (-x * x).exp()).unwrap();
        let prop = Propagator::new(g, h, 0.01).unwrap();
        let p = GrwParams {
            mu: 1e-9,
            alpha: 1.0,
            t_max: 1.0,
            sample_times: vec![1.0],
            deterministic_times: false,
        };
        let rec = grw_trajectory(&phi0, &prop, &p, StreamKey::new(1, 0)).unwrap();
        assert!(rec.flashes.is_empty());
        let pure = prop.evolve(&phi0, 1.0).unwrap();
        assert!(rec.snapshots[0].state.distance(&pure).unwrap() < 1e-12);
    }

    #[test]
    fn trajectories_are_deterministic() {
        let g = grid();
        let phi0 = make_gaussian_packet(g, 0.0, 1.0, 0.0).unwrap();
        let prop = Propagator::new(g, HamiltonianSpec::free(&g), 0.01).unwrap();
        let p = GrwParams {
            mu: 10.0,
            alpha: 1.0,
            t_max: 1.0,
            sample_times: vec![0.25, 1.0],
            deterministic_times: false,
        };
        let a = grw_trajectory(&phi0, &prop, &p, StreamKey::new(42, 7)).unwrap();
        let b = grw_trajectory(&phi0, &prop, &p, StreamKey::new(42, 7)).unwrap();
        assert_eq!(a, b);
        let c = grw_trajectory(&phi0, &prop, &p, StreamKey::new(42, 8)).unwrap();
        assert_ne!(a.flashes, c.flashes);
    }

    #[test]
    fn params_validation() {
        let mut p = GrwParams {
            mu: 1.0,
            alpha: 1.0,
            t_max: 1.0,
            sample_times: vec![0.5, 0.25],
            deterministic_times: false,
        };
        assert!(p.validate().is_err());
        p.sample_times = vec![0.5, 2.0];
        assert!(p.validate().is_err());
        p.sample_times = vec![0.5];
        p.alpha = -1.0;
        assert!(p.validate().is_err());
    }
}
