//! The acceptance suite: fixed problem set-ups for every check in
//! [`crate::verify`], grouped into numbered criteria.
//!
//! Sizes and seeds live in [`SuiteConfig`]; its JSON form can be overridden
//! key by key with dotted paths (`flash.n_samples = 1000`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, CollapseError, Result};
use crate::grid::{bounded_well, make_gaussian_packet, Grid, HamiltonianSpec, Propagator};
use crate::verify::{
    test_condition_i_bound, test_ensemble_vs_master, test_fdd_convergence, test_flash_vs_increment,
    test_flow_composition, test_free_gaussian, test_kappa_lemma, test_master_closed_forms, test_norm_martingale,
    test_rate_agreement, test_splitting_order, test_unitarity, EnsembleModel, FddConfig, FlashIncrementConfig,
    KappaConfig, MartingaleModel, Outcome, TestFunctional, TestReport,
};
use crate::diosi::{DiosiParams, HybridParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_points: usize,
    pub x_min: f64,
    pub x_max: f64,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        Grid::new(self.n_points, self.x_min, self.x_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlashSuite {
    pub grid: GridSpec,
    pub sigma: f64,
    pub alpha: f64,
    pub mu: f64,
    pub n_jumps: u64,
    pub n_samples: u64,
    pub control_alpha: f64,
    pub significance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSuite {
    pub grid: GridSpec,
    pub sigma: f64,
    pub lambda: f64,
    pub hybrid_mu: f64,
    pub diosi_substeps: u64,
    pub t_list: Vec<f64>,
    pub potential_amplitude: f64,
    pub potential_width: f64,
    pub n_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSuite {
    pub grid: GridSpec,
    pub sigma: f64,
    pub lambda: f64,
    pub mu_list: Vec<f64>,
    pub t_list: Vec<f64>,
    pub reference_substeps: u64,
    /// Width of the Gaussian reference state of the overlap functional.
    pub reference_sigma: f64,
    pub reference_center: f64,
    pub potential_amplitude: f64,
    pub potential_width: f64,
    pub n_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LindbladSuite {
    pub grid: GridSpec,
    pub sigma: f64,
    pub t: f64,
    pub grw_mu: f64,
    pub grw_alpha: f64,
    pub lambda: f64,
    pub diosi_substeps: u64,
    pub master_dt: f64,
    pub potential_amplitude: f64,
    pub potential_width: f64,
    pub rate_mu: f64,
    pub rate_alpha: f64,
    /// The negative control compares against the master equation with the
    /// collapse rate multiplied by this factor.
    pub control_rate_factor: f64,
    pub n_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSuite {
    pub grid: GridSpec,
    pub sigma: f64,
    pub t_list: Vec<f64>,
    pub n_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericsSuite {
    pub free_grid: GridSpec,
    pub free_steps: u64,
    pub free_dt: f64,
    pub unitarity_steps: u64,
    pub unitarity_dt: f64,
    pub order_grid: GridSpec,
    pub order_steps: Vec<u64>,
    pub composition_trials: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub flash: FlashSuite,
    pub martingale: MartingaleSuite,
    pub convergence: ConvergenceSuite,
    pub lindblad: LindbladSuite,
    pub kappa: KappaConfig,
    pub condition: ConditionSuite,
    pub numerics: NumericsSuite,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 20_240_601,
            flash: FlashSuite {
                grid: GridSpec {
                    n_points: 256,
                    x_min: -16.0,
                    x_max: 16.0,
                },
                sigma: 1.0,
                alpha: 0.5,
                mu: 1.0,
                n_jumps: 1,
                n_samples: 100_000,
                control_alpha: 1.0,
                significance: 0.01,
            },
            martingale: MartingaleSuite {
                grid: GridSpec {
                    n_points: 128,
                    x_min: -10.0,
                    x_max: 10.0,
                },
                sigma: 0.5,
                lambda: 1.0,
                hybrid_mu: 16.0,
                diosi_substeps: 160,
                t_list: vec![0.1, 0.5, 1.0],
                potential_amplitude: 1.0,
                potential_width: 2.0,
                n_samples: 10_000,
            },
            convergence: ConvergenceSuite {
                grid: GridSpec {
                    n_points: 128,
                    x_min: -10.0,
                    x_max: 10.0,
                },
                sigma: 0.5,
                lambda: 1.0,
                mu_list: vec![4.0, 16.0, 64.0, 256.0],
                t_list: vec![0.25, 0.5],
                reference_substeps: 4096,
                reference_sigma: 0.5,
                reference_center: 0.0,
                potential_amplitude: 1.0,
                potential_width: 2.0,
                n_samples: 4_000,
            },
            lindblad: LindbladSuite {
                grid: GridSpec {
                    n_points: 32,
                    x_min: -5.0,
                    x_max: 5.0,
                },
                sigma: 0.5,
                t: 0.5,
                grw_mu: 4.0,
                grw_alpha: 0.5,
                lambda: 1.0,
                diosi_substeps: 1000,
                master_dt: 1e-3,
                potential_amplitude: 1.0,
                potential_width: 2.0,
                rate_mu: 400.0,
                rate_alpha: 0.005,
                control_rate_factor: 2.0,
                n_samples: 1_000,
            },
            kappa: KappaConfig {
                mu_list: vec![10.0, 100.0, 1000.0],
                tail_mu_list: vec![1.0, 2.0],
                s: 0.0,
                t: 1.0,
                n_samples: 100_000,
                seed: 0,
            },
            condition: ConditionSuite {
                grid: GridSpec {
                    n_points: 256,
                    x_min: -15.0,
                    x_max: 15.0,
                },
                sigma: 1.0,
                t_list: vec![1e-1, 1e-2, 1e-3, 1e-4],
                n_samples: 10_000,
            },
            numerics: NumericsSuite {
                free_grid: GridSpec {
                    n_points: 512,
                    x_min: -20.0,
                    x_max: 20.0,
                },
                free_steps: 25,
                free_dt: 0.1,
                unitarity_steps: 1000,
                unitarity_dt: 0.01,
                order_grid: GridSpec {
                    n_points: 128,
                    x_min: -10.0,
                    x_max: 10.0,
                },
                order_steps: vec![8, 16, 32, 64],
                composition_trials: 1000,
            },
        }
    }
}

impl SuiteConfig {
    /// Applies dotted-path overrides (`"flash.n_samples" → "1000"`); values
    /// are parsed as JSON, falling back to plain strings.
    pub fn with_overrides(&self, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let mut v = serde_json::to_value(self).map_err(|e| CollapseError::Config(e.to_string()))?;
        for (key, raw) in overrides {
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .get_mut(part)
                    .ok_or_else(|| CollapseError::Config(format!("unknown suite key '{key}'")))?;
            }
            let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            *slot = parsed;
        }
        serde_json::from_value(v).map_err(|e| CollapseError::Config(format!("invalid suite override: {e}")))
    }

    fn sub_seed(&self, criterion: u64) -> u64 {
        self.seed.wrapping_mul(1_000).wrapping_add(criterion)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub title: String,
    pub pass: bool,
    pub reports: Vec<TestReport>,
    /// Negative controls; each must fail outright for the criterion to pass.
    pub controls: Vec<TestReport>,
}

impl CriterionResult {
    fn new(id: u32, title: &str, reports: Vec<TestReport>, controls: Vec<TestReport>) -> Self {
        let pass = reports.iter().all(|r| r.pass) && controls.iter().all(|c| c.outcome == Outcome::Fail);
        CriterionResult {
            id,
            title: title.to_string(),
            pass,
            reports,
            controls,
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "criterion {} [{}] {}",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.title
        )
    }
}

pub const CRITERIA: [(u32, &str); 8] = [
    (1, "exact-law identity of GRW flashes and reweighted increments"),
    (2, "norm-squared martingale"),
    (3, "scaling-limit convergence to the Diosi process"),
    (4, "Lindblad consistency"),
    (5, "jump-count lemma"),
    (6, "regularity bound for the free Hamiltonian"),
    (7, "numerics baseline"),
    (8, "reproducibility across runs and worker counts"),
];

fn title(id: u32) -> &'static str {
    CRITERIA.iter().find(|c| c.0 == id).map(|c| c.1).unwrap_or("")
}

/// Runs one of criteria 1–7.
pub fn run_criterion(id: u32, cfg: &SuiteConfig) -> Result<CriterionResult> {
    let seed = cfg.sub_seed(id as u64);
    match id {
        1 => {
            let c = &cfg.flash;
            let grid = c.grid.build()?;
            let phi0 = make_gaussian_packet(grid, 0.0, c.sigma, 0.0)?;
            let mut f = FlashIncrementConfig {
                alpha: c.alpha,
                mu: c.mu,
                n_jumps: c.n_jumps,
                n_samples: c.n_samples,
                seed,
                grw_alpha: None,
                significance: c.significance,
            };
            let main = test_flash_vs_increment(&phi0, &f)?;
            f.grw_alpha = Some(c.control_alpha);
            let mut control = test_flash_vs_increment(&phi0, &f)?;
            control.name = "flash_vs_increment_negative_control".to_string();
            Ok(CriterionResult::new(id, title(id), vec![main], vec![control]))
        }
        2 => {
            let c = &cfg.martingale;
            let grid = c.grid.build()?;
            let phi0 = make_gaussian_packet(grid, 0.0, c.sigma, 0.0)?;
            let t_max = *c.t_list.last().ok_or_else(|| invalid("martingale.t_list is empty"))?;
            let diosi = MartingaleModel::Diosi(DiosiParams {
                lambda: c.lambda,
                n_substeps_per_unit_time: c.diosi_substeps,
                t_max,
                sample_times: c.t_list.clone(),
            });
            let hybrid = MartingaleModel::Hybrid(HybridParams {
                lambda: c.lambda,
                mu: c.hybrid_mu,
                t_max,
                sample_times: c.t_list.clone(),
                deterministic_times: false,
                wiener_cells_per_unit: None,
            });
            let dt = 1.0 / c.diosi_substeps as f64;
            let mut reports = Vec::new();
            for (label, h) in [
                ("free", HamiltonianSpec::free(&grid)),
                ("potential", bounded_well(&grid, c.potential_amplitude, c.potential_width)?),
            ] {
                let prop = Propagator::new(grid, h, dt)?;
                for (k, m) in [&diosi, &hybrid].into_iter().enumerate() {
                    let mut r = test_norm_martingale(&phi0, &prop, m, c.n_samples, seed + k as u64)?;
                    r.name = format!("{}_{label}", r.name);
                    reports.push(r);
                }
            }
            Ok(CriterionResult::new(id, title(id), reports, vec![]))
        }
        3 => {
            let c = &cfg.convergence;
            let grid = c.grid.build()?;
            let phi0 = make_gaussian_packet(grid, 0.0, c.sigma, 0.0)?;
            let reference = make_gaussian_packet(grid, c.reference_center, c.reference_sigma, 0.0)?;
            let f = TestFunctional::overlap_modulus(&reference, 1.0)?;
            let fdd = FddConfig {
                lambda: c.lambda,
                mu_list: c.mu_list.clone(),
                t_list: c.t_list.clone(),
                reference_substeps: c.reference_substeps,
                n_samples: c.n_samples,
                seed,
            };
            let dt = 1.0 / c.reference_substeps as f64;
            let mut reports = Vec::new();
            for (label, h) in [
                ("free", HamiltonianSpec::free(&grid)),
                ("potential", bounded_well(&grid, c.potential_amplitude, c.potential_width)?),
            ] {
                let prop = Propagator::new(grid, h, dt)?;
                let mut r = test_fdd_convergence(&phi0, &prop, &fdd, &f)?;
                r.name = format!("{}_{label}", r.name);
                reports.push(r);
            }
            Ok(CriterionResult::new(id, title(id), reports, vec![]))
        }
        4 => {
            let c = &cfg.lindblad;
            let grid = c.grid.build()?;
            let phi0 = make_gaussian_packet(grid, 0.0, c.sigma, 0.0)?;
            let mut reports = vec![
                test_master_closed_forms(&phi0, c.grw_mu, c.grw_alpha, c.lambda, c.t, c.master_dt)?,
                test_rate_agreement(&grid, c.rate_mu, c.rate_alpha)?,
            ];
            let dt = 1.0 / c.diosi_substeps as f64;
            let models = [
                EnsembleModel::Grw {
                    mu: c.grw_mu,
                    alpha: c.grw_alpha,
                },
                EnsembleModel::Diosi {
                    lambda: c.lambda,
                    n_substeps_per_unit_time: c.diosi_substeps,
                },
            ];
            let mut controls = Vec::new();
            for (label, h) in [
                ("zero", HamiltonianSpec::zero(&grid)),
                ("potential", bounded_well(&grid, c.potential_amplitude, c.potential_width)?),
            ] {
                let prop = Propagator::new(grid, h, dt)?;
                for (k, m) in models.iter().enumerate() {
                    let run = |master: &EnsembleModel| {
                        test_ensemble_vs_master(&phi0, &prop, m, master, c.t, c.master_dt, c.n_samples, seed + k as u64)
                    };
                    let mut r = run(m)?;
                    r.name = format!("{}_{label}", r.name);
                    reports.push(r);
                    if label != "zero" {
                        let mut r = run(&m.with_rate_scaled(c.control_rate_factor))?;
                        r.name = format!("{}_{label}_negative_control", r.name);
                        controls.push(r);
                    }
                }
            }
            Ok(CriterionResult::new(id, title(id), reports, controls))
        }
        5 => {
            let k = KappaConfig {
                seed,
                ..cfg.kappa.clone()
            };
            Ok(CriterionResult::new(id, title(id), vec![test_kappa_lemma(&k)?], vec![]))
        }
        6 => {
            let c = &cfg.condition;
            let grid = c.grid.build()?;
            let phi = make_gaussian_packet(grid, 0.0, c.sigma, 0.0)?;
            let r = test_condition_i_bound(&phi, &c.t_list, c.n_samples, seed)?;
            Ok(CriterionResult::new(id, title(id), vec![r], vec![]))
        }
        7 => {
            let c = &cfg.numerics;
            let free = c.free_grid.build()?;
            let og = c.order_grid.build()?;
            let h = bounded_well(&og, 2.0, 1.0)?;
            let phi = make_gaussian_packet(og, -1.0, 1.0, 1.0)?;
            let reports = vec![
                test_free_gaussian(free, -2.0, 1.0, 1.0, c.free_dt, c.free_steps)?,
                test_unitarity(&phi, &h, c.unitarity_dt, c.unitarity_steps)?,
                test_splitting_order(&phi, &h, 1.0, &c.order_steps)?,
                test_flow_composition(&phi, 1.0, c.composition_trials, seed)?,
            ];
            Ok(CriterionResult::new(id, title(id), reports, vec![]))
        }
        _ => Err(invalid(format!("unknown criterion {id}"))),
    }
}

/// Canonical serialized artifact of a criterion result.
pub fn artifact_bytes(result: &CriterionResult) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(result).map_err(|e| CollapseError::Format(e.to_string()))
}

/// Runs `ids` on a dedicated pool of `workers` threads.
pub fn run_with_workers(ids: &[u32], cfg: &SuiteConfig, workers: usize) -> Result<Vec<CriterionResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| invalid(e.to_string()))?;
    pool.install(|| ids.iter().map(|id| run_criterion(*id, cfg)).collect())
}

/// Compares artifacts of `first` with a rerun of the same criteria on a pool
/// of `workers` threads.
pub fn reproducibility(first: &[CriterionResult], cfg: &SuiteConfig, workers: usize) -> Result<CriterionResult> {
    let ids: Vec<u32> = first.iter().map(|r| r.id).collect();
    let second = run_with_workers(&ids, cfg, workers)?;
    let mut mismatched = Vec::new();
    for (a, b) in first.iter().zip(&second) {
        if artifact_bytes(a)? != artifact_bytes(b)? {
            mismatched.push(a.id);
        }
    }
    let mut details = BTreeMap::new();
    details.insert("criteria".to_string(), serde_json::json!(ids));
    details.insert("rerun_workers".to_string(), serde_json::json!(workers));
    details.insert("mismatched".to_string(), serde_json::json!(mismatched));
    let n = mismatched.len() as f64;
    let report = TestReport {
        name: "artifact_reproducibility".to_string(),
        statistic: n,
        threshold: 0.0,
        comparison: crate::verify::Comparison::AtMost,
        n_samples: ids.len() as u64,
        standard_error: None,
        conditions: BTreeMap::new(),
        pass: mismatched.is_empty(),
        outcome: if mismatched.is_empty() { Outcome::Pass } else { Outcome::Fail },
        details,
    };
    Ok(CriterionResult::new(8, title(8), vec![report], vec![]))
}
