//! Run configuration, the `CLDN1` trajectory archive, and CSV output.
//!
//! # Config format
//!
//! Flat `key = value` lines; `#` starts a comment. Lists are comma
//! separated. Keys prefixed with `suite.` override [`SuiteConfig`] fields by
//! dotted path for `model = verify`.
//!
//! # Archive layout (all integers and floats little-endian)
//!
//! ```text
//! header:
//!   magic            8 bytes  "CLDN1\0\0\0"
//!   config_hash     32 bytes  sha256 of the canonical config text
//!   seed             u64
//!   model            u8       0 grw, 1 diosi, 2 hybrid
//!   n_points         u64
//!   x_min, x_max     f64, f64
//!   n_times          u64
//!   sample_times     f64 × n_times
//!   n_records        u64
//!   header_digest   32 bytes  sha256 of every preceding header byte
//! record (n_records times, in trajectory-index order):
//!   index            u64
//!   weight           f64
//!   boundary_flag    u8
//!   n_flashes        u64
//!   flashes          (time f64, center f64, pre_collapse_norm2 f64) × n_flashes
//!   snapshots        (time f64, raw_norm2 f64, (re f32, im f32) × n_points) × n_times
//! ```
//!
//! Amplitudes are stored in single precision, so a record read back carries
//! states normalized only to ~1e−7; writing it again reproduces the same bytes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diosi::{diosi_trajectory, hybrid_trajectory, DiosiParams, HybridParams};
use crate::error::{CollapseError, Result};
use crate::grid::{bounded_well, make_gaussian_packet, Grid, HamiltonianSpec, Propagator, StateLabel, WaveFunction};
use crate::grw::{grw_trajectory, GrwParams};
use crate::master::{evolve_diosi_master, evolve_grw_master, DensityMatrix};
use crate::rng::StreamKey;
use crate::stats::Estimate;
use crate::suite::{reproducibility, run_criterion, CriterionResult, SuiteConfig};
use crate::trajectory::{check_schedule, run_indexed, same_time, FlashEvent, ModelKind, Snapshot, TrajectoryRecord};

pub const FORMAT_VERSION: &str = "CLDN1";
const MAGIC: [u8; 8] = *b"CLDN1\0\0\0";
/// Relative tolerance of the `α = 2λ/μ` check.
pub const ALPHA_RELATIVE_TOLERANCE: f64 = 1e-12;
/// Trajectories simulated per parallel batch before being appended.
const BATCH: u64 = 512;

fn config_err(msg: impl Into<String>) -> CollapseError {
    CollapseError::Config(msg.into())
}

fn format_err(msg: impl Into<String>) -> CollapseError {
    CollapseError::Format(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunModel {
    Grw,
    Diosi,
    Hybrid,
    Master,
    Verify,
}

impl RunModel {
    fn name(self) -> &'static str {
        match self {
            RunModel::Grw => "grw",
            RunModel::Diosi => "diosi",
            RunModel::Hybrid => "hybrid",
            RunModel::Master => "master",
            RunModel::Verify => "verify",
        }
    }
}

impl FromStr for RunModel {
    type Err = CollapseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grw" => Ok(RunModel::Grw),
            "diosi" => Ok(RunModel::Diosi),
            "hybrid" => Ok(RunModel::Hybrid),
            "master" => Ok(RunModel::Master),
            "verify" => Ok(RunModel::Verify),
            _ => Err(config_err(format!("unknown model '{s}'"))),
        }
    }
}

/// Which collapse term the `master` model integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MasterCollapse {
    Grw,
    Diosi,
}

/// Kinetic term on (`free`, `H = −½Δ + V`) or off (`zero`, `H = V`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HamiltonianKind {
    Free,
    Zero,
}

/// Every recognised key, in canonical order.
pub const CONFIG_KEYS: &[&str] = &[
    "model",
    "seed",
    "output_dir",
    "lambda",
    "mu",
    "alpha",
    "n_points",
    "x_min",
    "x_max",
    "t_max",
    "sample_times",
    "n_trajectories",
    "n_substeps",
    "psi0_center",
    "psi0_sigma",
    "psi0_momentum",
    "hamiltonian",
    "potential_amplitude",
    "potential_width",
    "deterministic_times",
    "master_collapse",
    "density_stride",
    "criteria",
];

/// A validated run description. `alpha` and `lambda` are filled in from the
/// scaling relation `μα/2 = λ` whenever two of the three are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: RunModel,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub alpha: Option<f64>,
    pub n_points: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub t_max: f64,
    pub sample_times: Vec<f64>,
    pub n_trajectories: u64,
    /// Steps per unit time: the Diósi mesh, the propagator's largest Strang
    /// step and the master-equation step.
    pub n_substeps: u64,
    pub psi0_center: f64,
    pub psi0_sigma: f64,
    pub psi0_momentum: f64,
    pub hamiltonian: HamiltonianKind,
    pub potential_amplitude: f64,
    pub potential_width: f64,
    pub deterministic_times: bool,
    pub master_collapse: MasterCollapse,
    /// Every `density_stride`-th grid point is written to density CSVs.
    pub density_stride: usize,
    pub criteria: Vec<u32>,
    pub suite_overrides: BTreeMap<String, String>,
}

/// Parses `key = value` lines into a map, rejecting malformed lines and
/// duplicate keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(config_err(format!("line {}: empty key", n + 1)));
        }
        if map.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(config_err(format!("line {}: duplicate key '{k}'", n + 1)));
        }
    }
    Ok(map)
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| config_err(format!("{key}: cannot parse '{raw}'")))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(config_err(format!("{key} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Builds and validates a config from raw key/value pairs.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut suite_overrides = BTreeMap::new();
        for (k, v) in pairs {
            if let Some(path) = k.strip_prefix("suite.") {
                suite_overrides.insert(path.to_string(), v.clone());
            } else if !CONFIG_KEYS.contains(&k.as_str()) {
                return Err(config_err(format!("unknown key '{k}'")));
            }
        }
        let get = |k: &str| pairs.get(k).map(String::as_str);
        let opt_f64 = |k: &str| -> Result<Option<f64>> { get(k).map(|v| parse_value::<f64>(k, v)).transpose() };
        let f64_or = |k: &str, d: f64| -> Result<f64> { Ok(opt_f64(k)?.unwrap_or(d)) };

        let model: RunModel = parse_value("model", get("model").ok_or_else(|| config_err("model is mandatory"))?)?;
        let seed: u64 = parse_value("seed", get("seed").ok_or_else(|| config_err("seed is mandatory"))?)?;
        let (lambda, mu, alpha) = resolve_scaling(opt_f64("lambda")?, opt_f64("mu")?, opt_f64("alpha")?)?;
        let t_max = positive("t_max", f64_or("t_max", 1.0)?)?;
        let sample_times = match get("sample_times") {
            Some(v) => parse_list("sample_times", v)?,
            None => vec![t_max],
        };
        let criteria = match get("criteria") {
            Some(v) => parse_list("criteria", v)?,
            None => (1..=8).collect(),
        };
        let cfg = RunConfig {
            model,
            seed,
            output_dir: PathBuf::from(get("output_dir").unwrap_or("out")),
            lambda,
            mu,
            alpha,
            n_points: get("n_points").map(|v| parse_value("n_points", v)).transpose()?.unwrap_or(256),
            x_min: f64_or("x_min", -20.0)?,
            x_max: f64_or("x_max", 20.0)?,
            t_max,
            sample_times,
            n_trajectories: get("n_trajectories")
                .map(|v| parse_value("n_trajectories", v))
                .transpose()?
                .unwrap_or(1000),
            n_substeps: get("n_substeps").map(|v| parse_value("n_substeps", v)).transpose()?.unwrap_or(1000),
            psi0_center: f64_or("psi0_center", 0.0)?,
            psi0_sigma: positive("psi0_sigma", f64_or("psi0_sigma", 1.0)?)?,
            psi0_momentum: f64_or("psi0_momentum", 0.0)?,
            hamiltonian: match get("hamiltonian").unwrap_or("free") {
                "free" => HamiltonianKind::Free,
                "zero" => HamiltonianKind::Zero,
                other => return Err(config_err(format!("hamiltonian must be free or zero, got '{other}'"))),
            },
            potential_amplitude: f64_or("potential_amplitude", 0.0)?,
            potential_width: positive("potential_width", f64_or("potential_width", 1.0)?)?,
            deterministic_times: get("deterministic_times")
                .map(|v| parse_value("deterministic_times", v))
                .transpose()?
                .unwrap_or(false),
            master_collapse: match get("master_collapse").unwrap_or("diosi") {
                "grw" => MasterCollapse::Grw,
                "diosi" => MasterCollapse::Diosi,
                other => return Err(config_err(format!("master_collapse must be grw or diosi, got '{other}'"))),
            },
            density_stride: get("density_stride")
                .map(|v| parse_value("density_stride", v))
                .transpose()?
                .unwrap_or(1),
            criteria,
            suite_overrides,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.grid()?;
        check_schedule(self.t_max, &self.sample_times).map_err(|e| config_err(e.to_string()))?;
        if self.n_substeps == 0 {
            return Err(config_err("n_substeps must be at least 1"));
        }
        if self.density_stride == 0 {
            return Err(config_err("density_stride must be at least 1"));
        }
        if !self.potential_amplitude.is_finite() || !self.psi0_center.is_finite() || !self.psi0_momentum.is_finite() {
            return Err(config_err("psi0_center, psi0_momentum and potential_amplitude must be finite"));
        }
        let need = |k: &str, v: Option<f64>| v.map(|_| ()).ok_or_else(|| config_err(format!("model {} needs {k}", self.model.name())));
        match self.model {
            RunModel::Grw => {
                need("mu", self.mu)?;
                need("alpha", self.alpha)?;
            }
            RunModel::Diosi => need("lambda", self.lambda)?,
            RunModel::Hybrid => {
                need("lambda", self.lambda)?;
                need("mu", self.mu)?;
            }
            RunModel::Master => match self.master_collapse {
                MasterCollapse::Grw => {
                    need("mu", self.mu)?;
                    need("alpha", self.alpha)?;
                }
                MasterCollapse::Diosi => need("lambda", self.lambda)?,
            },
            RunModel::Verify => {
                if self.criteria.iter().any(|c| !(1..=8).contains(c)) {
                    return Err(config_err("criteria must lie in 1..=8"));
                }
                self.suite_config()?;
            }
        }
        if self.model != RunModel::Verify && !self.suite_overrides.is_empty() {
            return Err(config_err("suite.* keys are only valid with model = verify"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.n_points, self.x_min, self.x_max).map_err(|e| config_err(e.to_string()))
    }

    pub fn hamiltonian_spec(&self) -> Result<HamiltonianSpec> {
        let grid = self.grid()?;
        let v = bounded_well(&grid, self.potential_amplitude, self.potential_width)?;
        HamiltonianSpec::new(&grid, v.potential, self.hamiltonian == HamiltonianKind::Free)
    }

    pub fn initial_state(&self) -> Result<WaveFunction> {
        make_gaussian_packet(self.grid()?, self.psi0_center, self.psi0_sigma, self.psi0_momentum)
    }

    /// The acceptance-suite configuration with `seed` and `suite.*` keys applied.
    pub fn suite_config(&self) -> Result<SuiteConfig> {
        let mut cfg = SuiteConfig::default().with_overrides(&self.suite_overrides)?;
        cfg.seed = self.seed;
        Ok(cfg)
    }

    /// Sorted `key=value` lines of every resolved setting except
    /// `output_dir`, which cannot affect results.
    pub fn canonical_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        kv.insert("model".into(), self.model.name().into());
        kv.insert("seed".into(), self.seed.to_string());
        kv.insert("lambda".into(), opt(self.lambda));
        kv.insert("mu".into(), opt(self.mu));
        kv.insert("alpha".into(), opt(self.alpha));
        kv.insert("n_points".into(), self.n_points.to_string());
        kv.insert("x_min".into(), format!("{:?}", self.x_min));
        kv.insert("x_max".into(), format!("{:?}", self.x_max));
        kv.insert("t_max".into(), format!("{:?}", self.t_max));
        kv.insert("sample_times".into(), list(&self.sample_times));
        kv.insert("n_trajectories".into(), self.n_trajectories.to_string());
        kv.insert("n_substeps".into(), self.n_substeps.to_string());
        kv.insert("psi0_center".into(), format!("{:?}", self.psi0_center));
        kv.insert("psi0_sigma".into(), format!("{:?}", self.psi0_sigma));
        kv.insert("psi0_momentum".into(), format!("{:?}", self.psi0_momentum));
        kv.insert(
            "hamiltonian".into(),
            match self.hamiltonian {
                HamiltonianKind::Free => "free",
                HamiltonianKind::Zero => "zero",
            }
            .into(),
        );
        kv.insert("potential_amplitude".into(), format!("{:?}", self.potential_amplitude));
        kv.insert("potential_width".into(), format!("{:?}", self.potential_width));
        kv.insert("deterministic_times".into(), self.deterministic_times.to_string());
        kv.insert(
            "master_collapse".into(),
            match self.master_collapse {
                MasterCollapse::Grw => "grw",
                MasterCollapse::Diosi => "diosi",
            }
            .into(),
        );
        kv.insert("density_stride".into(), self.density_stride.to_string());
        kv.insert(
            "criteria".into(),
            self.criteria.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
        );
        for (k, v) in &self.suite_overrides {
            kv.insert(format!("suite.{k}"), v.clone());
        }
        kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn config_hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }

    fn model_kind(&self) -> Result<ModelKind> {
        match self.model {
            RunModel::Grw => Ok(ModelKind::Grw),
            RunModel::Diosi => Ok(ModelKind::Diosi),
            RunModel::Hybrid => Ok(ModelKind::Hybrid),
            m => Err(config_err(format!("model {} produces no trajectories", m.name()))),
        }
    }
}

/// Applies `μα/2 = λ`: a given `α` must match `2λ/μ` to
/// [`ALPHA_RELATIVE_TOLERANCE`]; a missing member of the triple is derived.
fn resolve_scaling(
    lambda: Option<f64>,
    mu: Option<f64>,
    alpha: Option<f64>,
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let lambda = lambda.map(|v| positive("lambda", v)).transpose()?;
    let mu = mu.map(|v| positive("mu", v)).transpose()?;
    let alpha = alpha.map(|v| positive("alpha", v)).transpose()?;
    Ok(match (lambda, mu, alpha) {
        (Some(l), Some(m), Some(a)) => {
            let expected = 2.0 * l / m;
            if (a - expected).abs() > ALPHA_RELATIVE_TOLERANCE * expected {
                return Err(config_err(format!(
                    "alpha = {a} violates alpha = 2*lambda/mu = {expected}"
                )));
            }
            (Some(l), Some(m), Some(a))
        }
        (Some(l), Some(m), None) => (Some(l), Some(m), Some(2.0 * l / m)),
        (None, Some(m), Some(a)) => (Some(m * a / 2.0), Some(m), Some(a)),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveHeader {
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub model: ModelKind,
    pub grid: Grid,
    pub sample_times: Vec<f64>,
    pub n_records: u64,
}

impl ArchiveHeader {
    pub fn for_config(cfg: &RunConfig) -> Result<Self> {
        Ok(ArchiveHeader {
            config_hash: cfg.config_hash(),
            seed: cfg.seed,
            model: cfg.model_kind()?,
            grid: cfg.grid()?,
            sample_times: cfg.sample_times.clone(),
            n_records: cfg.n_trajectories,
        })
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(128 + 8 * self.sample_times.len());
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&self.config_hash);
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.push(self.model.code());
        b.extend_from_slice(&(self.grid.n_points() as u64).to_le_bytes());
        b.extend_from_slice(&self.grid.x_min().to_le_bytes());
        b.extend_from_slice(&self.grid.x_max().to_le_bytes());
        b.extend_from_slice(&(self.sample_times.len() as u64).to_le_bytes());
        for t in &self.sample_times {
            b.extend_from_slice(&t.to_le_bytes());
        }
        b.extend_from_slice(&self.n_records.to_le_bytes());
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    /// Fails unless the header was produced by `cfg`.
    pub fn check_config(&self, cfg: &RunConfig) -> Result<()> {
        if self.config_hash != cfg.config_hash() {
            return Err(format_err("archive was not produced by this config (hash mismatch)"));
        }
        Ok(())
    }

    fn time_index(&self, t: f64) -> Result<usize> {
        self.sample_times
            .iter()
            .position(|s| same_time(*s, t))
            .ok_or_else(|| CollapseError::ScheduleMismatch(format!("time {t} is not a sample time of the archive")))
    }
}

/// Reads exactly `N` bytes, recording them for the header digest.
struct Input<R> {
    inner: R,
    digest: Option<Sha256>,
}

impl<R: Read> Input<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => format_err("archive is truncated"),
            _ => CollapseError::Io(e),
        })?;
        if let Some(d) = self.digest.as_mut() {
            d.update(buf);
        }
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    /// Length field bounded by `limit` so corrupted input cannot request
    /// absurd allocations.
    fn len(&mut self, what: &str, limit: u64) -> Result<usize> {
        let n = self.u64()?;
        if n > limit {
            return Err(format_err(format!("{what} count {n} exceeds {limit}")));
        }
        Ok(n as usize)
    }
}

/// Streams records into an archive in trajectory-index order.
pub struct ArchiveWriter<W: Write> {
    out: W,
    header: ArchiveHeader,
    written: u64,
}

impl<W: Write> ArchiveWriter<W> {
    pub fn new(mut out: W, header: ArchiveHeader) -> Result<Self> {
        out.write_all(&header.to_bytes())?;
        Ok(ArchiveWriter {
            out,
            header,
            written: 0,
        })
    }

    pub fn append(&mut self, rec: &TrajectoryRecord) -> Result<()> {
        let h = &self.header;
        if self.written >= h.n_records {
            return Err(format_err("more records than declared in the header"));
        }
        if rec.key != StreamKey::new(h.seed, self.written) {
            return Err(format_err(format!(
                "record for trajectory {} appended at position {}",
                rec.key.index, self.written
            )));
        }
        if rec.model != h.model {
            return Err(format_err("record model differs from the archive model"));
        }
        if rec.snapshots.len() != h.sample_times.len()
            || rec.snapshots.iter().zip(&h.sample_times).any(|(s, t)| !same_time(s.time, *t))
        {
            return Err(CollapseError::ScheduleMismatch("record snapshots differ from the archive schedule".into()));
        }
        let mut b = Vec::with_capacity(64 + rec.snapshots.len() * (16 + 8 * h.grid.n_points()));
        b.extend_from_slice(&rec.key.index.to_le_bytes());
        b.extend_from_slice(&rec.weight.to_le_bytes());
        b.push(rec.boundary_flag as u8);
        b.extend_from_slice(&(rec.flashes.len() as u64).to_le_bytes());
        for f in &rec.flashes {
            b.extend_from_slice(&f.time.to_le_bytes());
            b.extend_from_slice(&f.center.to_le_bytes());
            b.extend_from_slice(&f.pre_collapse_norm2.to_le_bytes());
        }
        for s in &rec.snapshots {
            if *s.state.grid() != h.grid {
                return Err(CollapseError::GridMismatch);
            }
            b.extend_from_slice(&s.time.to_le_bytes());
            b.extend_from_slice(&s.raw_norm2.to_le_bytes());
            for a in s.state.amplitudes() {
                b.extend_from_slice(&(a.re as f32).to_le_bytes());
                b.extend_from_slice(&(a.im as f32).to_le_bytes());
            }
        }
        self.out.write_all(&b)?;
        self.written += 1;
        Ok(())
    }

    /// Checks the declared record count and flushes.
    pub fn finish(mut self) -> Result<W> {
        if self.written != self.header.n_records {
            return Err(format_err(format!(
                "header declares {} records, {} written",
                self.header.n_records, self.written
            )));
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Streams records out of an archive, verifying the header digest first.
pub struct ArchiveReader<R: Read> {
    input: Input<R>,
    header: ArchiveHeader,
    read: u64,
}

impl<R: Read> ArchiveReader<R> {
    pub fn new(inner: R) -> Result<Self> {
        let mut input = Input {
            inner,
            digest: Some(Sha256::new()),
        };
        if input.bytes::<8>()? != MAGIC {
            return Err(format_err(format!("not a {FORMAT_VERSION} archive")));
        }
        let config_hash = input.bytes::<32>()?;
        let seed = input.u64()?;
        let model = ModelKind::from_code(input.u8()?)?;
        let n_points = input.len("grid point", 1 << 24)?;
        let x_min = input.f64()?;
        let x_max = input.f64()?;
        let grid = Grid::new(n_points, x_min, x_max).map_err(|e| format_err(e.to_string()))?;
        let n_times = input.len("sample time", 1 << 20)?;
        let sample_times = (0..n_times).map(|_| input.f64()).collect::<Result<Vec<_>>>()?;
        let n_records = input.u64()?;
        let computed: [u8; 32] = input.digest.take().map(|d| d.finalize().into()).unwrap_or_default();
        if input.bytes::<32>()? != computed {
            return Err(format_err("header digest mismatch"));
        }
        Ok(ArchiveReader {
            input,
            header: ArchiveHeader {
                config_hash,
                seed,
                model,
                grid,
                sample_times,
                n_records,
            },
            read: 0,
        })
    }

    pub fn header(&self) -> &ArchiveHeader {
        &self.header
    }

    /// The next record, or `None` after the last one (trailing bytes are an error).
    pub fn next_record(&mut self) -> Result<Option<TrajectoryRecord>> {
        let h = &self.header;
        if self.read == h.n_records {
            let mut probe = [0u8; 1];
            return match self.input.inner.read(&mut probe)? {
                0 => Ok(None),
                _ => Err(format_err("trailing bytes after the last record")),
            };
        }
        let index = self.input.u64()?;
        if index != self.read {
            return Err(format_err(format!("record {} carries index {index}", self.read)));
        }
        let weight = self.input.f64()?;
        let boundary_flag = match self.input.u8()? {
            0 => false,
            1 => true,
            v => return Err(format_err(format!("invalid boundary flag {v}"))),
        };
        let n_flashes = self.input.len("flash", 1 << 32)?;
        let mut flashes = Vec::with_capacity(n_flashes.min(1 << 16));
        for _ in 0..n_flashes {
            flashes.push(FlashEvent {
                time: self.input.f64()?,
                center: self.input.f64()?,
                pre_collapse_norm2: self.input.f64()?,
            });
        }
        let grid = h.grid;
        let n_times = h.sample_times.len();
        let mut snapshots = Vec::with_capacity(n_times);
        for _ in 0..n_times {
            let time = self.input.f64()?;
            let raw_norm2 = self.input.f64()?;
            let mut amps = Vec::with_capacity(grid.n_points());
            for _ in 0..grid.n_points() {
                let re = self.input.f32()?;
                let im = self.input.f32()?;
                amps.push(Complex64::new(re as f64, im as f64));
            }
            snapshots.push(Snapshot {
                time,
                raw_norm2,
                state: WaveFunction::from_parts(grid, amps, StateLabel::Normalized),
            });
        }
        self.read += 1;
        Ok(Some(TrajectoryRecord {
            model: h.model,
            key: StreamKey::new(h.seed, index),
            flashes,
            snapshots,
            weight,
            boundary_flag,
        }))
    }
}

/// A whole archive held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryArchive {
    pub header: ArchiveHeader,
    pub records: Vec<TrajectoryRecord>,
}

impl TrajectoryArchive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ArchiveWriter::new(Vec::new(), self.header.clone())?;
        for r in &self.records {
            w.append(r)?;
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn read_from(input: impl Read) -> Result<Self> {
        let mut reader = ArchiveReader::new(input)?;
        let mut records = Vec::new();
        while let Some(r) = reader.next_record()? {
            records.push(r);
        }
        Ok(TrajectoryArchive {
            header: reader.header.clone(),
            records,
        })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// `{:.16e}`: 17 significant digits, which round-trips every `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    let wrap = |e: csv::Error| format_err(e.to_string());
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format_float(*v))).map_err(wrap)?;
    }
    let bytes = w.into_inner().map_err(|e| format_err(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| format_err(e.to_string()))
}

/// Welford accumulator of one column of per-trajectory values, updated in
/// trajectory-index order.
#[derive(Debug, Clone, Default)]
struct Running {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn se(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
        }
    }
}

/// Weighted ensemble density `Σ w_i |φ_i(x)|² / N` with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub time: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub se: Vec<f64>,
    pub n_trajectories: u64,
}

impl DensityTable {
    /// RFC-4180 CSV with columns `x,density,se`; header only when empty.
    pub fn to_csv(&self) -> Result<String> {
        let rows = (0..self.x.len()).map(|j| vec![self.x[j], self.density[j], self.se[j]]);
        if self.n_trajectories == 0 {
            return csv_string(&["x", "density", "se"], std::iter::empty());
        }
        csv_string(&["x", "density", "se"], rows)
    }
}

/// Per-sample-time ensemble summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub time: f64,
    /// `Σ w_i ⟨x⟩_i / N`.
    pub mean_position: f64,
    /// Variance of the ensemble position density: `Σ w_i ⟨x²⟩_i / N − mean²`.
    pub position_variance: f64,
    pub mean_weight: f64,
    pub mean_weight_se: f64,
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    csv_string(
        &["time", "mean_position", "position_variance", "mean_weight", "mean_weight_se"],
        rows.iter()
            .map(|r| vec![r.time, r.mean_position, r.position_variance, r.mean_weight, r.mean_weight_se]),
    )
}

/// Everything derived from one pass over an archive.
#[derive(Debug, Clone)]
pub struct ArchiveDigest {
    pub summary: Vec<SummaryRow>,
    pub densities: Vec<DensityTable>,
}

/// Reads every record once and accumulates the summary and the density of
/// every sample time on every `stride`-th grid point.
pub fn digest_archive<R: Read>(mut reader: ArchiveReader<R>, stride: usize) -> Result<ArchiveDigest> {
    if stride == 0 {
        return Err(config_err("stride must be at least 1"));
    }
    let h = reader.header().clone();
    let cols: Vec<usize> = (0..h.grid.n_points()).step_by(stride).collect();
    let n_times = h.sample_times.len();
    let mut dens = vec![vec![Running::default(); cols.len()]; n_times];
    let mut w = vec![Vec::new(); n_times];
    let mut wx = vec![Vec::new(); n_times];
    let mut wx2 = vec![Vec::new(); n_times];
    while let Some(rec) = reader.next_record()? {
        for (k, s) in rec.snapshots.iter().enumerate() {
            let weight = s.raw_norm2;
            let amps = s.state.amplitudes();
            for (acc, &j) in dens[k].iter_mut().zip(&cols) {
                acc.push(weight * amps[j].norm_sqr());
            }
            let m = s.state.mean_position();
            w[k].push(weight);
            wx[k].push(weight * m);
            wx2[k].push(weight * (s.state.position_variance() + m * m));
        }
    }
    let mut summary = Vec::new();
    let mut densities = Vec::new();
    for k in 0..n_times {
        let t = h.sample_times[k];
        if h.n_records > 0 {
            let mw = Estimate::of(&w[k]);
            let mx = Estimate::of(&wx[k]).mean;
            let mx2 = Estimate::of(&wx2[k]).mean;
            summary.push(SummaryRow {
                time: t,
                mean_position: mx,
                position_variance: mx2 - mx * mx,
                mean_weight: mw.mean,
                mean_weight_se: mw.se,
            });
        }
        densities.push(DensityTable {
            time: t,
            x: cols.iter().map(|&j| h.grid.x(j)).collect(),
            density: dens[k].iter().map(|a| a.mean).collect(),
            se: dens[k].iter().map(Running::se).collect(),
            n_trajectories: h.n_records,
        });
    }
    Ok(ArchiveDigest { summary, densities })
}

/// Density CSV of one sampled time; times off the archive schedule are a
/// schedule mismatch.
pub fn export_density_csv<R: Read>(reader: ArchiveReader<R>, time: f64, stride: usize) -> Result<String> {
    let k = reader.header().time_index(time)?;
    let mut d = digest_archive(reader, stride)?;
    d.densities.swap_remove(k).to_csv()
}

/// Files written by [`run`] plus any verification results.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub criteria: Vec<CriterionResult>,
}

impl RunOutcome {
    /// False only when a verification criterion failed.
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.pass)
    }
}

/// Removes everything it created unless disarmed.
struct Cleanup {
    files: Vec<PathBuf>,
    created_dir: Option<PathBuf>,
    armed: bool,
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if self.armed {
            for f in &self.files {
                let _ = fs::remove_file(f);
            }
            if let Some(d) = &self.created_dir {
                let _ = fs::remove_dir(d);
            }
        }
    }
}

impl Cleanup {
    fn write(&mut self, path: PathBuf, contents: &[u8]) -> Result<()> {
        self.files.push(path.clone());
        fs::write(&path, contents)?;
        Ok(())
    }
}

pub const ARCHIVE_FILE: &str = "trajectories.cldn";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "verify_report.json";

pub fn density_file_name(k: usize) -> String {
    format!("density_t{k}.csv")
}

/// Executes `cfg`, writing its artifacts under `cfg.output_dir`. On error
/// every file this call created is removed.
///
/// `rerun_workers` is the pool size used for the reproducibility rerun of
/// criterion 8; it never changes any result.
pub fn run(cfg: &RunConfig, rerun_workers: usize) -> Result<RunOutcome> {
    let dir = cfg.output_dir.clone();
    let mut guard = Cleanup {
        files: Vec::new(),
        created_dir: (!dir.exists()).then(|| dir.clone()),
        armed: true,
    };
    fs::create_dir_all(&dir)?;
    let mut outcome = RunOutcome::default();
    match cfg.model {
        RunModel::Grw | RunModel::Diosi | RunModel::Hybrid => {
            let path = dir.join(ARCHIVE_FILE);
            guard.files.push(path.clone());
            simulate_to(cfg, BufWriter::new(File::create(&path)?))?;
            let reader = ArchiveReader::new(BufReader::new(File::open(&path)?))?;
            let digest = digest_archive(reader, cfg.density_stride)?;
            guard.write(dir.join(SUMMARY_FILE), summary_csv(&digest.summary)?.as_bytes())?;
            for (k, d) in digest.densities.iter().enumerate() {
                guard.write(dir.join(density_file_name(k)), d.to_csv()?.as_bytes())?;
            }
        }
        RunModel::Master => {
            let (summary, densities) = run_master(cfg)?;
            guard.write(dir.join(SUMMARY_FILE), summary_csv(&summary)?.as_bytes())?;
            for (k, d) in densities.iter().enumerate() {
                guard.write(dir.join(density_file_name(k)), d.to_csv()?.as_bytes())?;
            }
        }
        RunModel::Verify => {
            let suite = cfg.suite_config()?;
            let mut results = Vec::new();
            for &id in cfg.criteria.iter().filter(|id| **id <= 7) {
                results.push(run_criterion(id, &suite)?);
            }
            if cfg.criteria.contains(&8) {
                let r = reproducibility(&results, &suite, rerun_workers)?;
                results.push(r);
            }
            let json = serde_json::to_vec_pretty(&results).map_err(|e| format_err(e.to_string()))?;
            guard.write(dir.join(REPORT_FILE), &json)?;
            outcome.criteria = results;
        }
    }
    guard.armed = false;
    outcome.files = guard.files.clone();
    Ok(outcome)
}

/// Simulates every trajectory of `cfg` and streams them into an archive.
pub fn simulate_to<W: Write>(cfg: &RunConfig, out: W) -> Result<W> {
    let grid = cfg.grid()?;
    let phi0 = cfg.initial_state()?;
    let dt = 1.0 / cfg.n_substeps as f64;
    let prop = Propagator::new(grid, cfg.hamiltonian_spec()?, dt)?;
    let mut writer = ArchiveWriter::new(out, ArchiveHeader::for_config(cfg)?)?;
    let seed = cfg.seed;
    let param_err = |k: &str| config_err(format!("missing {k}"));
    let one: Box<dyn Fn(u64) -> Result<TrajectoryRecord> + Sync + Send> = match cfg.model {
        RunModel::Grw => {
            let p = GrwParams {
                mu: cfg.mu.ok_or_else(|| param_err("mu"))?,
                alpha: cfg.alpha.ok_or_else(|| param_err("alpha"))?,
                t_max: cfg.t_max,
                sample_times: cfg.sample_times.clone(),
                deterministic_times: cfg.deterministic_times,
            };
            p.validate()?;
            Box::new(move |i| grw_trajectory(&phi0, &prop, &p, StreamKey::new(seed, i)))
        }
        RunModel::Diosi => {
            let p = DiosiParams {
                lambda: cfg.lambda.ok_or_else(|| param_err("lambda"))?,
                n_substeps_per_unit_time: cfg.n_substeps,
                t_max: cfg.t_max,
                sample_times: cfg.sample_times.clone(),
            };
            p.validate()?;
            Box::new(move |i| diosi_trajectory(&phi0, &prop, &p, StreamKey::new(seed, i)))
        }
        RunModel::Hybrid => {
            let p = HybridParams {
                lambda: cfg.lambda.ok_or_else(|| param_err("lambda"))?,
                mu: cfg.mu.ok_or_else(|| param_err("mu"))?,
                t_max: cfg.t_max,
                sample_times: cfg.sample_times.clone(),
                deterministic_times: cfg.deterministic_times,
                wiener_cells_per_unit: None,
            };
            p.validate()?;
            Box::new(move |i| hybrid_trajectory(&phi0, &prop, &p, StreamKey::new(seed, i)))
        }
        m => return Err(config_err(format!("model {} produces no trajectories", m.name()))),
    };
    let mut start = 0;
    while start < cfg.n_trajectories {
        let n = BATCH.min(cfg.n_trajectories - start);
        for rec in run_indexed(n, |j| one(start + j))? {
            writer.append(&rec)?;
        }
        start += n;
    }
    writer.finish()
}

/// Integrates the master equation through the sample times; the density
/// columns carry zero standard error and the weight column is the trace.
pub fn run_master(cfg: &RunConfig) -> Result<(Vec<SummaryRow>, Vec<DensityTable>)> {
    let grid = cfg.grid()?;
    let h = cfg.hamiltonian_spec()?;
    let dt = 1.0 / cfg.n_substeps as f64;
    let mut rho = DensityMatrix::from_pure(&cfg.initial_state()?)?;
    let mut now = 0.0;
    let mut summary = Vec::new();
    let mut densities = Vec::new();
    let cols: Vec<usize> = (0..grid.n_points()).step_by(cfg.density_stride).collect();
    for &t in &cfg.sample_times {
        if t > now {
            rho = match cfg.master_collapse {
                MasterCollapse::Grw => evolve_grw_master(
                    &rho,
                    &h,
                    cfg.mu.ok_or_else(|| config_err("missing mu"))?,
                    cfg.alpha.ok_or_else(|| config_err("missing alpha"))?,
                    t - now,
                    dt,
                )?,
                MasterCollapse::Diosi => {
                    evolve_diosi_master(&rho, &h, cfg.lambda.ok_or_else(|| config_err("missing lambda"))?, t - now, dt)?
                }
            };
            now = t;
        }
        let p = rho.diagonal();
        let trace = rho.trace();
        let dx = grid.dx();
        let m1: f64 = (0..p.len()).map(|j| p[j] * grid.x(j) * dx).sum::<f64>() / trace;
        let m2: f64 = (0..p.len()).map(|j| p[j] * grid.x(j).powi(2) * dx).sum::<f64>() / trace;
        summary.push(SummaryRow {
            time: t,
            mean_position: m1,
            position_variance: m2 - m1 * m1,
            mean_weight: trace,
            mean_weight_se: 0.0,
        });
        densities.push(DensityTable {
            time: t,
            x: cols.iter().map(|&j| grid.x(j)).collect(),
            density: cols.iter().map(|&j| p[j]).collect(),
            se: vec![0.0; cols.len()],
            n_trajectories: 1,
        });
    }
    Ok((summary, densities))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRW: &str = "model = grw\nseed = 7\nmu = 2\nalpha = 0.5\nn_points = 64\nx_min = -10\nx_max = 10\n\
                       t_max = 1\nsample_times = 0.5, 1\nn_trajectories = 5\nn_substeps = 100\n";

    #[test]
    fn comments_blank_lines_and_duplicates() {
        let m = parse_pairs("# c\n\na = 1 # tail\n b= x \n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x");
        assert!(parse_pairs("a = 1\na = 2\n").is_err());
        assert!(parse_pairs("novalue\n").is_err());
    }

    #[test]
    fn seed_is_mandatory_and_unknown_keys_rejected() {
        let e = RunConfig::parse("model = grw\nmu = 1\nalpha = 1\n").unwrap_err();
        assert!(e.to_string().contains("seed"));
        assert!(RunConfig::parse(&format!("{GRW}bogus = 1\n")).is_err());
    }

    #[test]
    fn alpha_is_derived_or_checked() {
        let c = RunConfig::parse("model = hybrid\nseed = 1\nlambda = 1\nmu = 8\n").unwrap();
        assert_eq!(c.alpha, Some(0.25));
        let ok = RunConfig::parse("model = hybrid\nseed = 1\nlambda = 1\nmu = 8\nalpha = 0.25\n");
        assert!(ok.is_ok());
        let bad = RunConfig::parse("model = hybrid\nseed = 1\nlambda = 1\nmu = 8\nalpha = 0.2500001\n");
        assert!(matches!(bad, Err(CollapseError::Config(_))));
        let c = RunConfig::parse("model = grw\nseed = 1\nmu = 4\nalpha = 0.5\n").unwrap();
        assert_eq!(c.lambda, Some(1.0));
    }

    #[test]
    fn hash_ignores_output_dir_but_not_parameters() {
        let a = RunConfig::parse(GRW).unwrap();
        let b = RunConfig::parse(&format!("{GRW}output_dir = elsewhere\n")).unwrap();
        let c = RunConfig::parse(&GRW.replace("seed = 7", "seed = 8")).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn canonical_text_reparses_to_the_same_config() {
        let a = RunConfig::parse(GRW).unwrap();
        let b = RunConfig::parse(&a.canonical_text()).unwrap();
        assert_eq!(a.canonical_text(), b.canonical_text());
    }

    #[test]
    fn archive_round_trip_is_bit_identical() {
        let cfg = RunConfig::parse(GRW).unwrap();
        let bytes = simulate_to(&cfg, Vec::new()).unwrap();
        let a = TrajectoryArchive::from_bytes(&bytes).unwrap();
        assert_eq!(a.records.len(), 5);
        assert_eq!(a.to_bytes().unwrap(), bytes);
        a.header.check_config(&cfg).unwrap();
    }

    #[test]
    fn mutated_header_or_trailing_bytes_fail_closed() {
        let cfg = RunConfig::parse(GRW).unwrap();
        let bytes = simulate_to(&cfg, Vec::new()).unwrap();
        for pos in [8, 40, 49, 60, 80] {
            let mut m = bytes.clone();
            m[pos] ^= 1;
            assert!(TrajectoryArchive::from_bytes(&m).is_err(), "byte {pos}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(TrajectoryArchive::from_bytes(&long).is_err());
        assert!(TrajectoryArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn other_config_is_rejected_by_hash() {
        let cfg = RunConfig::parse(GRW).unwrap();
        let other = RunConfig::parse(&GRW.replace("mu = 2", "mu = 3")).unwrap();
        let a = TrajectoryArchive::from_bytes(&simulate_to(&cfg, Vec::new()).unwrap()).unwrap();
        assert!(a.header.check_config(&other).is_err());
    }

    #[test]
    fn export_rejects_unsampled_time() {
        let cfg = RunConfig::parse(GRW).unwrap();
        let bytes = simulate_to(&cfg, Vec::new()).unwrap();
        let r = ArchiveReader::new(&bytes[..]).unwrap();
        assert!(matches!(export_density_csv(r, 0.75, 1), Err(CollapseError::ScheduleMismatch(_))));
    }

    #[test]
    fn single_trajectory_density_is_reproduced_exactly() {
        let cfg = RunConfig::parse(&GRW.replace("n_trajectories = 5", "n_trajectories = 1")).unwrap();
        let bytes = simulate_to(&cfg, Vec::new()).unwrap();
        let a = TrajectoryArchive::from_bytes(&bytes).unwrap();
        let d = digest_archive(ArchiveReader::new(&bytes[..]).unwrap(), 1).unwrap();
        let expected = a.records[0].snapshots[1].state.density();
        assert_eq!(d.densities[1].density, expected);
        assert!(d.densities[1].se.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn csv_is_crlf_with_round_tripping_floats() {
        let s = csv_string(&["a", "b"], vec![vec![0.1, -1.0 / 3.0]]).unwrap();
        assert_eq!(s.lines().count(), 2);
        assert!(s.ends_with("\r\n"));
        let row = s.split("\r\n").nth(1).unwrap();
        let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v, vec![0.1, -1.0 / 3.0]);
    }

    #[test]
    fn master_run_conserves_trace() {
        let cfg = RunConfig::parse(
            "model = master\nseed = 1\nlambda = 1\nn_points = 32\nx_min = -6\nx_max = 6\n\
             psi0_sigma = 0.7\nsample_times = 0, 0.25, 0.5\nt_max = 0.5\nn_substeps = 1000\n",
        )
        .unwrap();
        let (summary, dens) = run_master(&cfg).unwrap();
        assert_eq!(summary.len(), 3);
        for r in &summary {
            assert!((r.mean_weight - 1.0).abs() < 1e-10);
        }
        assert!(summary[2].position_variance > summary[0].position_variance);
        assert_eq!(dens[0].density.len(), 32);
    }
}
