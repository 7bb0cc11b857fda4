use serde::{Deserialize, Serialize};

use crate::error::{invalid, CollapseError, Result};
use crate::grid::WaveFunction;
use crate::rng::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Grw,
    Diosi,
    Hybrid,
}

impl ModelKind {
    pub fn code(self) -> u8 {
        match self {
            ModelKind::Grw => 0,
            ModelKind::Diosi => 1,
            ModelKind::Hybrid => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ModelKind::Grw),
            1 => Ok(ModelKind::Diosi),
            2 => Ok(ModelKind::Hybrid),
            _ => Err(CollapseError::Format(format!("unknown model code {code}"))),
        }
    }
}

/// A collapse event. For the hybrid process `center` is the rescaled Wiener
/// increment `Z_k = μ/(2√λ)·Δξ_k`, the counterpart of the GRW center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlashEvent {
    pub time: f64,
    pub center: f64,
    /// Squared norm right after the collapse multiplication, before any
    /// renormalization.
    pub pre_collapse_norm2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    /// `‖ψ_t‖²` of the unnormalized state (1 for GRW).
    pub raw_norm2: f64,
    /// Normalized state `φ_t`.
    pub state: WaveFunction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub model: ModelKind,
    pub key: StreamKey,
    pub flashes: Vec<FlashEvent>,
    pub snapshots: Vec<Snapshot>,
    /// Importance weight `‖ψ_{t_max}‖²`; exactly 1 for GRW.
    pub weight: f64,
    /// Set when the outer 10% of the window held more than 1e−6 of the mass.
    pub boundary_flag: bool,
}

impl TrajectoryRecord {
    pub fn snapshot_at(&self, t: f64) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| same_time(s.time, t))
    }

    pub fn require_snapshot(&self, t: f64) -> Result<&Snapshot> {
        self.snapshot_at(t)
            .ok_or_else(|| CollapseError::ScheduleMismatch(format!("no snapshot at t = {t}")))
    }
}

pub(crate) fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

pub(crate) fn check_schedule(t_max: f64, sample_times: &[f64]) -> Result<()> {
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(invalid(format!("t_max must be positive, got {t_max}")));
    }
    if sample_times.iter().any(|t| !(*t >= 0.0) || *t > t_max) {
        return Err(invalid("sample times must lie in [0, t_max]"));
    }
    if sample_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("sample times must be strictly increasing"));
    }
    Ok(())
}

/// Evaluates `f(0..n)` on the rayon pool and returns the results in index
/// order, so downstream reductions do not depend on the worker count.
pub fn run_indexed<T, F>(n: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}
