//! The linear Diósi equation
//! `dψ = (−iH − ½A²)ψ dt + Aψ dξ`, `A = √λ·x`, under the reference measure Q.
//!
//! The reference integrator alternates one split Schrödinger step with the
//! exact collapse flow over each mesh cell. The hybrid process follows the
//! GRW clock for the unitary parts (random durations `X_{k+1}/μ`) while its
//! collapse flows always span the deterministic cells `[k/μ, (k+1)/μ]`.
//! Physical expectations are obtained by weighting with `‖ψ_t‖²`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, CollapseError, Result};
use crate::grid::{check_collapse_step, collapse_flow_in_place, norm2_of, Propagator, StateLabel, WaveFunction};
use crate::rng::{exp1, StreamKey, StreamRole, WienerPath};
use crate::stats::{effective_sample_size, Estimate};
use crate::trajectory::{check_schedule, FlashEvent, ModelKind, Snapshot, TrajectoryRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiosiParams {
    pub lambda: f64,
    /// Mesh cells per unit time; the step is `dt = 1/n_substeps_per_unit_time`.
    pub n_substeps_per_unit_time: u64,
    pub t_max: f64,
    pub sample_times: Vec<f64>,
}

impl DiosiParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.n_substeps_per_unit_time == 0 {
            return Err(invalid("n_substeps_per_unit_time must be at least 1"));
        }
        check_schedule(self.t_max, &self.sample_times)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n_substeps_per_unit_time as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridParams {
    pub lambda: f64,
    pub mu: f64,
    pub t_max: f64,
    pub sample_times: Vec<f64>,
    /// Use `X_k ≡ 1` instead of exponential waiting times.
    #[serde(default)]
    pub deterministic_times: bool,
    /// When set, Wiener increments are aggregated from a mesh of this many
    /// cells per unit time (shared with a Diósi run of the same resolution).
    /// `wiener_cells_per_unit / mu` must then be an integer.
    #[serde(default)]
    pub wiener_cells_per_unit: Option<u64>,
}

impl HybridParams {
    /// `α = 2λ/μ`.
    pub fn alpha(&self) -> f64 {
        2.0 * self.lambda / self.mu
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(invalid(format!("mu must be positive, got {}", self.mu)));
        }
        self.cells_per_collapse()?;
        check_schedule(self.t_max, &self.sample_times)
    }

    /// Fine Wiener cells aggregated into one collapse cell of width `1/μ`.
    fn cells_per_collapse(&self) -> Result<u64> {
        match self.wiener_cells_per_unit {
            None => Ok(1),
            Some(m) => {
                let r = m as f64 / self.mu;
                let ri = r.round();
                if ri < 1.0 || (r - ri).abs() > 1e-9 * r.max(1.0) {
                    return Err(invalid(format!(
                        "Wiener resolution {m} is not an integer multiple of mu = {}",
                        self.mu
                    )));
                }
                Ok(ri as u64)
            }
        }
    }
}

fn mesh_index(t: f64, dt: f64) -> Result<u64> {
    let k = (t / dt).round();
    if (k * dt - t).abs() > 1e-9 * dt.max(t) {
        return Err(CollapseError::ScheduleMismatch(format!(
            "time {t} is not on the integration mesh of step {dt}"
        )));
    }
    Ok(k as u64)
}

fn raw_snapshot(grid: crate::grid::Grid, psi: &[num_complex::Complex64], t: f64) -> Result<(Snapshot, bool)> {
    let raw = WaveFunction::from_parts(grid, psi.to_vec(), StateLabel::Raw);
    let state = raw.normalize()?;
    let flag = state.near_boundary();
    Ok((
        Snapshot {
            time: t,
            raw_norm2: raw.norm2(),
            state,
        },
        flag,
    ))
}

/// Reference integration of the linear Diósi equation. Sample times and
/// `t_max` must lie on the step mesh.
pub fn diosi_trajectory(
    phi0: &WaveFunction,
    propagator: &Propagator,
    p: &DiosiParams,
    key: StreamKey,
) -> Result<TrajectoryRecord> {
    p.validate()?;
    if phi0.grid() != propagator.grid() {
        return Err(CollapseError::GridMismatch);
    }
    let grid = *phi0.grid();
    let dt = p.dt();
    check_collapse_step(&grid, p.lambda, dt)?;
    let total_steps = mesh_index(p.t_max, dt)?;
    let sample_steps = p
        .sample_times
        .iter()
        .map(|t| mesh_index(*t, dt))
        .collect::<Result<Vec<_>>>()?;

    let kernel = propagator.kernel(dt);
    let mut scratch = propagator.scratch();
    let mut wiener = WienerPath::new(key, p.n_substeps_per_unit_time as f64)?;
    let mut psi = phi0.normalize()?.into_amplitudes();
    let mut snapshots = Vec::with_capacity(sample_steps.len());
    let mut boundary_flag = false;
    let mut next_sample = sample_steps.iter().zip(&p.sample_times).peekable();

    for step in 0..=total_steps {
        while let Some((_, &t)) = next_sample.next_if(|(s, _)| **s == step) {
            let (snap, flag) = raw_snapshot(grid, &psi, t)?;
            boundary_flag |= flag;
            snapshots.push(snap);
        }
        if step == total_steps {
            break;
        }
        propagator.apply_kernel(&kernel, &mut psi, &mut scratch);
        let dxi = wiener.cell_increment(step);
        collapse_flow_in_place(&mut psi, &grid, p.lambda, dxi, dt)?;
    }

    let weight = norm2_of(&psi, grid.dx());
    boundary_flag |= WaveFunction::from_parts(grid, psi, StateLabel::Raw).near_boundary();
    Ok(TrajectoryRecord {
        model: ModelKind::Diosi,
        key,
        flashes: Vec::new(),
        snapshots,
        weight,
        boundary_flag,
    })
}

/// The GRW-coupled product
/// `e^{−i(t−T_κ)H} Π_{k<κ} A_{k/μ,(k+1)/μ} e^{−i(X_{k+1}/μ)H} φ₀`
/// with `κ = κ_μ(t)` jumps by time `t`. Jump times and Wiener increments use
/// independent streams. Flash events record `(T_k, Z_k)`.
pub fn hybrid_trajectory(
    phi0: &WaveFunction,
    propagator: &Propagator,
    p: &HybridParams,
    key: StreamKey,
) -> Result<TrajectoryRecord> {
    p.validate()?;
    if phi0.grid() != propagator.grid() {
        return Err(CollapseError::GridMismatch);
    }
    let grid = *phi0.grid();
    let cell = 1.0 / p.mu;
    check_collapse_step(&grid, p.lambda, cell)?;
    let fine_per_cell = p.cells_per_collapse()?;
    let cells_per_unit = p.wiener_cells_per_unit.map_or(p.mu, |m| m as f64);
    let mut wiener = WienerPath::new(key, cells_per_unit)?;
    let mut jump_rng = key.stream(StreamRole::JumpTimes);
    let z_scale = p.mu / (2.0 * p.lambda.sqrt());

    let mut psi = phi0.normalize()?.into_amplitudes();
    let mut scratch = propagator.scratch();
    let mut t_now = 0.0;
    let mut n_jumps: u64 = 0;
    let mut next_jump = if p.deterministic_times {
        cell
    } else {
        exp1(&mut jump_rng) / p.mu
    };
    let mut flashes = Vec::new();
    let mut snapshots = Vec::with_capacity(p.sample_times.len());
    let mut boundary_flag = false;

    let targets = p.sample_times.iter().map(|t| (*t, true)).chain(std::iter::once((p.t_max, false)));
    for (target, record) in targets {
        while next_jump <= target {
            propagator.evolve_in_place(&mut psi, next_jump - t_now, &mut scratch);
            t_now = next_jump;
            let (start, end) = (n_jumps * fine_per_cell, (n_jumps + 1) * fine_per_cell);
            // Collapse cells follow the deterministic mesh k/μ whatever the realized jump times.
            debug_assert!((start as f64 / cells_per_unit - n_jumps as f64 * cell).abs() <= 1e-12 * (1.0 + n_jumps as f64 * cell));
            let dxi = wiener.increment(start, end);
            collapse_flow_in_place(&mut psi, &grid, p.lambda, dxi, cell)?;
            n_jumps += 1;
            flashes.push(FlashEvent {
                time: t_now,
                center: z_scale * dxi,
                pre_collapse_norm2: norm2_of(&psi, grid.dx()),
            });
            next_jump = if p.deterministic_times {
                (n_jumps + 1) as f64 * cell
            } else {
                next_jump + exp1(&mut jump_rng) / p.mu
            };
        }
        propagator.evolve_in_place(&mut psi, target - t_now, &mut scratch);
        t_now = target;
        if record {
            let (snap, flag) = raw_snapshot(grid, &psi, target)?;
            boundary_flag |= flag;
            snapshots.push(snap);
        }
    }

    let weight = norm2_of(&psi, grid.dx());
    boundary_flag |= WaveFunction::from_parts(grid, psi, StateLabel::Raw).near_boundary();
    Ok(TrajectoryRecord {
        model: ModelKind::Hybrid,
        key,
        flashes,
        snapshots,
        weight,
        boundary_flag,
    })
}

/// Normalized states with their importance weights at one time.
#[derive(Debug, Clone)]
pub struct WeightedEnsemble {
    pub time: f64,
    pub states: Vec<WaveFunction>,
    pub weights: Vec<f64>,
}

impl WeightedEnsemble {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `Σ w_i f(φ_i) / N` with its standard error. Not self-normalized: the
    /// physical measure has unit mass only through the martingale property.
    pub fn expectation(&self, f: impl Fn(&WaveFunction) -> f64) -> Estimate {
        let terms: Vec<f64> = self.states.iter().zip(&self.weights).map(|(s, w)| w * f(s)).collect();
        Estimate::of(&terms)
    }

    /// `Σ w_i / N`, which should be 1 within Monte Carlo error.
    pub fn mean_weight(&self) -> Estimate {
        Estimate::of(&self.weights)
    }

    pub fn effective_sample_size(&self) -> f64 {
        effective_sample_size(&self.weights)
    }
}

/// Collects `(φ_i, ‖ψ_i‖²)` at time `t`. GRW records carry unit weights.
pub fn reweight_ensemble(records: &[TrajectoryRecord], t: f64) -> Result<WeightedEnsemble> {
    let mut states = Vec::with_capacity(records.len());
    let mut weights = Vec::with_capacity(records.len());
    for r in records {
        let s = r.require_snapshot(t)?;
        states.push(s.state.clone());
        weights.push(s.raw_norm2);
    }
    Ok(WeightedEnsemble { time: t, states, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_gaussian_packet, Grid, HamiltonianSpec};
    use rayon::prelude::*;

    fn grid() -> Grid {
        Grid::new(128, -10.0, 10.0).unwrap()
    }

    fn diosi(lambda: f64, n: u64, times: Vec<f64>) -> DiosiParams {
        DiosiParams {
            lambda,
            n_substeps_per_unit_time: n,
            t_max: *times.last().unwrap(),
            sample_times: times,
        }
    }

    #[test]
    fn zero_hamiltonian_matches_closed_form() {
        let g = grid();
        let phi0 = make_gaussian_packet(g, 0.2, 1.0, 0.5).unwrap();
        let prop = Propagator::new(g, HamiltonianSpec::zero(&g), 1.0).unwrap();
        let p = diosi(0.7, 64, vec![0.5, 1.0]);
        let key = StreamKey::new(3, 11);
        let rec = diosi_trajectory(&phi0, &prop, &p, key).unwrap();
        let mut w = WienerPath::new(key, 64.0).unwrap();
        for snap in &rec.snapshots {
            let steps = (snap.time * 64.0).round() as u64;
            let xi: f64 = (0..steps).map(|k| w.cell_increment(k)).sum();
            let sl = p.lambda.sqrt();
            let amps: Vec<_> = g
                .points()
                .iter()
                .zip(phi0.amplitudes())
                .map(|(x, a)| a * (sl * x * xi - p.lambda * x * x * snap.time).exp())
                .collect();
            let exact = WaveFunction::new(g, amps).unwrap();
            assert!((snap.raw_norm2 - exact.norm2()).abs() <= 1e-12 * exact.norm2());
            let exact = exact.normalize().unwrap();
            for (a, b) in snap.state.amplitudes().iter().zip(exact.amplitudes()) {
                assert!((a - b).norm() <= 1e-12 * (1.0 + b.norm()));
            }
        }
    }

    #[test]
    fn vanishing_coupling_is_schrodinger() {
        let g = grid();
        let phi0 = make_gaussian_packet(g, 0.0, 1.0, 1.0).unwrap();
        let h = HamiltonianSpec::with_potential(&g, |x| 0.5 * (-x * x).exp()).unwrap();
        let prop = Propagator::new(g, h, 1.0 / 256.0).unwrap();
        let rec = diosi_trajectory(&phi0, &prop, &diosi(1e-12, 256, vec![1.0]), StreamKey::new(1, 0)).unwrap();
        let pure = prop.evolve(&phi0, 1.0).unwrap();
        assert!(rec.snapshots[0].state.distance(&pure).unwrap() < 1e-5);
        assert!((rec.weight - 1.0).abs() < 1e-6);
    }

    #[test]
    fn norm_is_a_martingale_in_mean() {
        let g = grid();
        let phi0 = make_gaussian_packet(g, 0.0, 0.5, 0.0).unwrap();
        let prop = Propagator::new(g, HamiltonianSpec::free(&g), 1.0).unwrap();
        let p = diosi(1.0, 160, vec![0.1, 0.5, 1.0]);
        let recs: Vec<TrajectoryRecord> = (0..10_000u64)
            .into_par_iter()
            .map(|i| diosi_trajectory(&phi0, &prop, &p, StreamKey::new(77, i)).unwrap())
            .collect();
        for t in [0.1, 0.5, 1.0] {
            let e = reweight_ensemble(&recs, t).unwrap().mean_weight();
            assert!(e.within(1.0, 3.0), "t={t}: {e:?}");
        }
    }

    #[test]
    fn off_mesh_times_are_rejected() {
        let g = grid();
        let phi0 = make_gaussian_packet(g, 0.0, 1.0, 0.0).unwrap();
        let prop = Propagator::new(g, HamiltonianSpec::free(&g), 1.0).unwrap();
        let p = DiosiParams {
            lambda: 1.0,
            n_substeps_per_unit_time: 10,
            t_max: 1.0,
            sample_times: vec![0.123],
        };
        assert!(matches!(
            diosi_trajectory(&phi0, &prop, &p, StreamKey::new(0, 0)),
            Err(CollapseError::ScheduleMismatch(_))
        ));
        let p = DiosiParams {
            lambda: 10.0,
            n_substeps_per_unit_time: 1,
            t_max: 10.0,
            sample_times: vec![],
        };
        assert!(matches!(
            diosi_trajectory(&phi0, &prop, &p, StreamKey::new(0, 0)),
            Err(CollapseError::StepTooLarge(_))
        ));
    }

    #[test]
    fn hybrid_zero_hamiltonian_is_gaussian_product_of_increments() {
        let g = grid();
        let phi0 = make_gaussian_packet(g, -0.4, 1.2, 0.3).unwrap();
        let prop = Propagator::new(g, HamiltonianSpec::zero(&g), 1.0).unwrap();
        let p = HybridParams {
            lambda: 0.5,
            mu: 8.0,
            t_max: 1.0,
            sample_times: vec![0.5, 1.0],
            deterministic_times: true,
            wiener_cells_per_unit: None,
        };
        let rec = hybrid_trajectory(&phi0, &prop, &p, StreamKey::new(5, 2)).unwrap();
        assert_eq!(rec.flashes.len(), 8);
        let alpha = p.alpha();
        for snap in &rec.snapshots {
            let zs: Vec<f64> = rec.flashes.iter().filter(|f| f.time <= snap.time + 1e-12).map(|f| f.center).collect();
            assert_eq!(zs.len(), (snap.time * 8.0).round() as usize);
            let amps: Vec<_> = g
                .points()
                .iter()
                .zip(phi0.amplitudes())
                .map(|(x, a)| a * (-0.5 * alpha * zs.iter().map(|z| (x - z).powi(2)).sum::<f64>()).exp())
                .collect();
            let exact = WaveFunction::new(g, amps).unwrap().normalize().unwrap();
            for (a, b) in snap.state.amplitudes().iter().zip(exact.amplitudes()) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn increment_variance_is_inverse_two_alpha() {
        let (lambda, mu) = (0.25, 2.0);
        let alpha = 2.0 * lambda / mu;
        let z_scale = mu / (2.0 * f64::sqrt(lambda));
        let zs: Vec<f64> = (0..100_000u64)
            .map(|i| {
                let mut w = WienerPath::new(StreamKey::new(6, i), mu).unwrap();
                z_scale * w.cell_increment(0)
            })
            .collect();
        let sq: Vec<f64> = zs.iter().map(|z| z * z).collect();
        let e = Estimate::of(&sq);
        assert!(e.within(1.0 / (2.0 * alpha), 3.0), "{e:?}");
    }

    #[test]
    fn hybrid_shares_wiener_path_with_fine_mesh() {
        let g = grid();
        let phi0 = make_gaussian_packet(g, 0.0, 1.0, 0.0).unwrap();
        let prop = Propagator::new(g, HamiltonianSpec::zero(&g), 1.0).unwrap();
        let p = HybridParams {
            lambda: 1.0,
            mu: 16.0,
            t_max: 1.0,
            sample_times: vec![1.0],
            deterministic_times: true,
            wiener_cells_per_unit: Some(256),
        };
        let key = StreamKey::new(12, 3);
        let rec = hybrid_trajectory(&phi0, &prop, &p, key).unwrap();
        let d = diosi_trajectory(&phi0, &prop, &diosi(1.0, 256, vec![1.0]), key).unwrap();
        // H = 0 and deterministic times: both are the pure collapse solution at t = 1.
        assert!(rec.snapshots[0].state.distance(&d.snapshots[0].state).unwrap() < 1e-12);
        assert!((rec.weight - d.weight).abs() < 1e-12 * d.weight);
        let bad = HybridParams {
            wiener_cells_per_unit: Some(100),
            ..p
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hybrid_is_deterministic_and_reweights() {
        let g = grid();
        let phi0 = make_gaussian_packet(g, 0.0, 0.7, 0.0).unwrap();
        let prop = Propagator::new(g, HamiltonianSpec::free(&g), 0.01).unwrap();
        let p = HybridParams {
            lambda: 1e-12,
            mu: 16.0,
            t_max: 1.0,
            sample_times: vec![0.5, 1.0],
            deterministic_times: false,
            wiener_cells_per_unit: None,
        };
        let recs: Vec<_> = (0..20)
            .map(|i| hybrid_trajectory(&phi0, &prop, &p, StreamKey::new(9, i)).unwrap())
            .collect();
        assert_eq!(recs[3], hybrid_trajectory(&phi0, &prop, &p, StreamKey::new(9, 3)).unwrap());
        let ens = reweight_ensemble(&recs, 0.5).unwrap();
        assert!(ens.weights.iter().all(|w| (w - 1.0).abs() < 1e-6));
        let weighted = ens.expectation(|s| s.mean_position());
        let plain: f64 = ens.states.iter().map(|s| s.mean_position()).sum::<f64>() / 20.0;
        assert!((weighted.mean - plain).abs() < 1e-6);
        assert!(matches!(reweight_ensemble(&recs, 0.7), Err(CollapseError::ScheduleMismatch(_))));
    }
}
