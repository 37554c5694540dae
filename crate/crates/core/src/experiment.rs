//! End-to-end experiment drivers used by the `kdv-mz` binary.
//!
//! Every command takes an [`ExperimentConfig`], writes CSV and JSON files
//! into the configured output directory and returns a serializable report.
//! All CSV files start with a `# config_hash: <sha256>` line naming the
//! configuration that produced them; rerunning a configuration reproduces
//! the files byte for byte.
//!
//! Renormalization coefficients live in an append-only JSON-lines database
//! ([`CoefficientDb`]); each line carries the SHA-256 of its own content as
//! its key, so identical results are never stored twice.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fit::{
    fit_alphas, fit_scaling_law, fit_window_robustness, nondimensionalize, predict_alphas,
    DatasetBuilder, FitResult, MassDerivativeDataset, MassTarget, NondimParams, ScalingLaw,
    ScalingPoint, WindowReport,
};
use crate::rom::{MemoryEvaluator, RomConfig, RomNonlinearity, MAX_ORDER};
use crate::solver::{
    dispersion_multipliers, integrate_observed, run_semilinear, step_count, FullModelConfig,
};
use crate::spectral::{relative_l2_error, ModePartition, SpectralField, TransformCount, C64};
use crate::symbolic::{
    bch_operator_terms, canonicalize, complete_memory_operator_terms, memory_term,
};

/// Transform-plus-inverse pairs per time step reported for the renormalized
/// second- and fourth-order models in the literature.
pub const REFERENCE_PAIRS_ROM2: u64 = 6;
pub const REFERENCE_PAIRS_ROM4: u64 = 22;

/// Right-hand-side evaluations per step of the fourth-order exponential
/// integrator.
pub const RHS_PER_STEP: u64 = 4;

const TIME_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// One Fourier mode of a user-specified initial condition; the conjugate
/// mode `-k` is implied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub k: i64,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialCondition {
    /// `u₀ = sin(x)`.
    #[default]
    Sin,
    Modes {
        modes: Vec<ModeSpec>,
    },
}

impl InitialCondition {
    pub fn field(&self, k_max: usize) -> Result<SpectralField> {
        match self {
            InitialCondition::Sin => Ok(SpectralField::sine(k_max)),
            InitialCondition::Modes { modes } => {
                if modes.is_empty() {
                    return Err(Error::InvalidConfig("mode list is empty".into()));
                }
                let mut f = SpectralField::zeros(k_max);
                for m in modes {
                    if m.k < 0 || m.k as usize > k_max {
                        return Err(Error::InvalidConfig(format!(
                            "mode k = {} must satisfy 0 <= k <= {k_max}; negative modes are implied",
                            m.k
                        )));
                    }
                    if m.k == 0 && m.im != 0.0 {
                        return Err(Error::InvalidConfig("the mean mode must be real".into()));
                    }
                    let c = C64::new(m.re, m.im);
                    f.set(m.k, c);
                    f.set(-m.k, c.conj());
                }
                Ok(f)
            }
        }
    }
}

/// `sin` or a comma-separated list `k:re:im` (the imaginary part may be
/// omitted).
impl FromStr for InitialCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("sin") {
            return Ok(InitialCondition::Sin);
        }
        let bad = || {
            Error::Parse(format!(
                "initial condition `{s}`: expected `sin` or `k:re[:im],...`"
            ))
        };
        let modes = s
            .split(',')
            .map(|item| {
                let parts: Vec<&str> = item.trim().split(':').collect();
                if !(2..=3).contains(&parts.len()) {
                    return Err(bad());
                }
                let k = parts[0].trim().parse().map_err(|_| bad())?;
                let re = parts[1].trim().parse().map_err(|_| bad())?;
                let im = match parts.get(2) {
                    Some(p) => p.trim().parse().map_err(|_| bad())?,
                    None => 0.0,
                };
                Ok(ModeSpec { k, re, im })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(InitialCondition::Modes { modes })
    }
}

/// Models that `compare` and `run-rom` know how to integrate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Exact,
    Markov,
    Rom2,
    Rom4,
    Rom4Raw,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Exact,
        ModelKind::Markov,
        ModelKind::Rom2,
        ModelKind::Rom4,
        ModelKind::Rom4Raw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Exact => "exact",
            ModelKind::Markov => "markov",
            ModelKind::Rom2 => "rom2",
            ModelKind::Rom4 => "rom4",
            ModelKind::Rom4Raw => "rom4-raw",
        }
    }

    /// `(order, renormalized)`, `None` for the full model.
    pub fn rom(self) -> Option<(usize, bool)> {
        match self {
            ModelKind::Exact => None,
            ModelKind::Markov => Some((0, false)),
            ModelKind::Rom2 => Some((2, true)),
            ModelKind::Rom4 => Some((4, true)),
            ModelKind::Rom4Raw => Some((4, false)),
        }
    }

    pub fn reference_pairs(self) -> Option<u64> {
        match self {
            ModelKind::Rom2 => Some(REFERENCE_PAIRS_ROM2),
            ModelKind::Rom4 | ModelKind::Rom4Raw => Some(REFERENCE_PAIRS_ROM4),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| {
                Error::Parse(format!(
                    "unknown model `{s}`; expected one of exact, markov, rom2, rom4, rom4-raw"
                ))
            })
    }
}

/// Where renormalized models take their coefficients from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientSource {
    /// A fit at the same `(ε, N)` if present, otherwise the scaling laws.
    #[default]
    Auto,
    Fitted,
    Scaling,
}

impl FromStr for CoefficientSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(Self::Auto),
            "fitted" => Ok(Self::Fitted),
            "scaling" => Ok(Self::Scaling),
            _ => Err(Error::Parse(format!(
                "unknown coefficient source `{s}`; expected auto, fitted or scaling"
            ))),
        }
    }
}

/// Settings shared by all commands. Every field has a default, so a config
/// file only needs the keys it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub initial_condition: InitialCondition,
    pub epsilons: Vec<f64>,
    pub n_grid: Vec<usize>,
    pub m_full: usize,
    pub dt: f64,
    pub t_end: f64,
    /// Fit window `[t_a, t_b]`.
    pub window: (f64, f64),
    /// Use every `stride`-th step inside the fit window.
    pub stride: usize,
    pub target: MassTarget,
    /// Orders included in the complete fit.
    pub fit_orders: Vec<usize>,
    /// Window widths for the robustness check (widths wider than the fit
    /// window are skipped).
    pub window_widths: Vec<f64>,
    /// Export the per-mode mass-rate datasets as CSV.
    pub export_datasets: bool,
    pub models: Vec<ModelKind>,
    pub coefficient_source: CoefficientSource,
    /// Order of the model integrated by `run-rom`.
    pub rom_order: usize,
    pub renormalized: bool,
    /// Spacing of resolved-mass samples.
    pub mass_interval: f64,
    /// Spacing of trajectory snapshots.
    pub snapshot_interval: f64,
    /// Times at which model errors are measured.
    pub checkpoints: Vec<f64>,
    /// Highest order written by `derive`.
    pub derive_order: usize,
    pub out: PathBuf,
    /// Coefficient database; defaults to `<out>/coefficients.jsonl`.
    pub database: Option<PathBuf>,
    /// Concurrent sweep points; zero means one per available core.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            initial_condition: InitialCondition::Sin,
            epsilons: vec![0.1],
            n_grid: vec![20],
            m_full: 256,
            dt: 1e-3,
            t_end: 100.0,
            window: (0.0, 10.0),
            stride: 1,
            target: MassTarget::MemoryOnly,
            fit_orders: vec![1, 2, 3, 4],
            window_widths: vec![1.0, 2.0, 3.0, 5.0, 10.0],
            export_datasets: false,
            models: ModelKind::ALL.to_vec(),
            coefficient_source: CoefficientSource::Auto,
            rom_order: 4,
            renormalized: true,
            mass_interval: 0.1,
            snapshot_interval: 1.0,
            checkpoints: vec![10.0, 25.0, 50.0, 75.0, 100.0],
            derive_order: 4,
            out: PathBuf::from("out"),
            database: None,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    /// Reads a TOML file, or JSON when the extension is `.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&text)
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epsilons.is_empty() || self.n_grid.is_empty() {
            return bad("epsilon and N grids must be nonempty".into());
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return bad(format!("epsilon must be positive and finite, got {e}"));
        }
        if let Some(n) = self.n_grid.iter().find(|&&n| n < 2 || 2 * n > self.m_full) {
            return bad(format!(
                "N = {n} must satisfy 2 <= N and 2N <= M = {}",
                self.m_full
            ));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return bad(format!("t_end must be nonnegative, got {}", self.t_end));
        }
        let (a, b) = self.window;
        if !(a.is_finite() && b.is_finite() && 0.0 <= a && a < b) {
            return bad(format!(
                "fit window must satisfy 0 <= t_a < t_b, got [{a}, {b}]"
            ));
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        if self.fit_orders.is_empty() || self.fit_orders.iter().any(|&i| i == 0 || i > MAX_ORDER) {
            return bad(format!("fit orders must lie in 1..={MAX_ORDER}"));
        }
        if self.rom_order > MAX_ORDER {
            return bad(format!("rom order must be at most {MAX_ORDER}"));
        }
        for (name, v) in [
            ("mass_interval", self.mass_interval),
            ("snapshot_interval", self.snapshot_interval),
        ] {
            if !(v.is_finite() && v >= self.dt * (1.0 - TIME_TOL)) {
                return bad(format!("{name} must be at least dt, got {v}"));
            }
        }
        if self
            .checkpoints
            .iter()
            .any(|t| !(t.is_finite() && *t >= 0.0))
        {
            return bad("checkpoints must be nonnegative".into());
        }
        if self.derive_order == 0 {
            return bad("derive order must be at least 1".into());
        }
        if self.models.is_empty() {
            return bad("model list is empty".into());
        }
        Ok(())
    }

    /// SHA-256 of everything that influences results (output locations and
    /// the worker count are excluded).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            for key in ["out", "database", "workers"] {
                map.remove(key);
            }
        }
        sha256_hex(v.to_string().as_bytes())
    }

    /// SHA-256 of the settings that determine a fit at a given `(ε, N)`.
    pub fn fit_context_hash(&self) -> String {
        let v = serde_json::json!({
            "initial_condition": self.initial_condition,
            "m_full": self.m_full,
            "dt": self.dt,
            "window": self.window,
            "stride": self.stride,
            "target": self.target,
        });
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn database_path(&self) -> PathBuf {
        self.database
            .clone()
            .unwrap_or_else(|| self.out.join("coefficients.jsonl"))
    }

    pub fn worker_count(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    fn full_model(&self, epsilon: f64, t_end: f64) -> FullModelConfig {
        FullModelConfig {
            epsilon,
            m: self.m_full,
            dt: self.dt,
            t_end,
        }
    }

    fn initial_field(&self) -> Result<SpectralField> {
        self.initial_condition.field(self.m_full - 1)
    }

    fn steps_per(&self, interval: f64) -> u64 {
        ((interval / self.dt).round() as u64).max(1)
    }

    fn fit_command_hint(&self, epsilon: f64, n: usize) -> String {
        format!(
            "kdv-mz fit --epsilon {epsilon} --n-resolved {n} --window {},{} --m-full {} --dt {} --out {}",
            self.window.0,
            self.window.1,
            self.m_full,
            self.dt,
            self.out.display()
        )
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-test");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    write_file(path, &s)
}

/// CSV text with the config-hash header line.
struct Csv {
    text: String,
}

impl Csv {
    fn new(config_hash: &str, columns: &[&str]) -> Self {
        let mut text = format!("# config_hash: {config_hash}\n");
        text.push_str(&columns.join(","));
        text.push('\n');
        Self { text }
    }

    fn row(&mut self, fields: &[String]) {
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.text)
    }
}

fn num(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-3..1e7).contains(&a) || !a.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn opt_num(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".into(), num)
}

fn tag(epsilon: f64, n: Option<usize>) -> String {
    match n {
        Some(n) => format!("eps{epsilon}_n{n}"),
        None => format!("eps{epsilon}"),
    }
}

fn trajectory_rows(csv: &mut Csv, t: f64, u: &SpectralField) {
    for k in 0..=u.k_max() as i64 {
        let c = u.get(k);
        csv.row(&[num(t), k.to_string(), num(c.re), num(c.im)]);
    }
}

/// Runs `job` for every item on up to `workers` threads, keeping the input
/// order in the output.
fn parallel_map<T, R, F>(items: &[T], workers: usize, job: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = job(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

// ---------------------------------------------------------------------------
// Coefficient database
// ---------------------------------------------------------------------------

/// Which fit a record belongs to: `complete` uses the configured orders,
/// `second-order` fits `α₂` alone.
pub const LABEL_COMPLETE: &str = "complete";
pub const LABEL_SECOND: &str = "second-order";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub label: String,
    pub context: String,
    pub epsilon: f64,
    pub n: usize,
    pub window: (f64, f64),
    pub orders: Vec<usize>,
    pub alphas: [f64; MAX_ORDER],
    pub pi: [f64; MAX_ORDER],
    pub re: f64,
    pub lambda: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub label: String,
    pub context: String,
    pub law: ScalingLaw,
    /// `(ε, N)` points the law was fitted on.
    pub grid: Vec<(f64, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum DbRecord {
    Fit(FitRecord),
    Scaling(ScalingRecord),
}

impl DbRecord {
    pub fn key(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("record serializes")
                .as_bytes(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbEntry {
    pub key: String,
    #[serde(flatten)]
    pub record: DbRecord,
}

/// Append-only JSON-lines store. All writes go through
/// [`CoefficientDb::append`], which callers invoke from a single thread.
#[derive(Clone, Debug)]
pub struct CoefficientDb {
    path: PathBuf,
}

impl CoefficientDb {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All entries in file order; a missing file is an empty database.
    pub fn entries(&self) -> Result<Vec<DbEntry>> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&self.path, e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| {
                    Error::Parse(format!("{} line {}: {e}", self.path.display(), i + 1))
                })
            })
            .collect()
    }

    /// Appends the records whose keys are not stored yet and returns how
    /// many were new.
    pub fn append(&self, records: &[DbRecord]) -> Result<usize> {
        let mut seen: BTreeSet<String> = self.entries()?.into_iter().map(|e| e.key).collect();
        let mut out = String::new();
        let mut added = 0;
        for record in records {
            let key = record.key();
            if seen.insert(key.clone()) {
                let entry = DbEntry {
                    key,
                    record: record.clone(),
                };
                out.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
                out.push('\n');
                added += 1;
            }
        }
        if added > 0 {
            if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(|e| Error::io(&self.path, e))?;
            f.write_all(out.as_bytes())
                .map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(added)
    }

    /// Most recent fit with the given label at `(ε, N)`.
    pub fn find_fit(
        &self,
        context: &str,
        label: &str,
        epsilon: f64,
        n: usize,
    ) -> Result<Option<FitRecord>> {
        Ok(self
            .entries()?
            .into_iter()
            .rev()
            .find_map(|e| match e.record {
                DbRecord::Fit(f)
                    if f.context == context
                        && f.label == label
                        && f.n == n
                        && same(f.epsilon, epsilon) =>
                {
                    Some(f)
                }
                _ => None,
            }))
    }

    /// Most recent scaling law for each order under the given label.
    pub fn find_laws(&self, context: &str, label: &str) -> Result<Vec<ScalingLaw>> {
        let mut laws: BTreeMap<usize, ScalingLaw> = BTreeMap::new();
        for e in self.entries()? {
            if let DbRecord::Scaling(s) = e.record {
                if s.context == context && s.label == label {
                    laws.insert(s.law.order, s.law);
                }
            }
        }
        Ok(laws.into_values().collect())
    }
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

// ---------------------------------------------------------------------------
// solve-full
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    pub epsilon: f64,
    pub steps: u64,
    pub snapshots: usize,
    pub initial_mass: f64,
    pub final_mass: f64,
    pub max_mass_drift: f64,
    /// Largest `(M₀ - M_N(t)) / M₀` over the run for each N of the grid.
    pub max_resolved_departure: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub config_hash: String,
    pub runs: Vec<ConservationReport>,
}

/// Integrates the full model for every ε of the grid, writing
/// `trajectory_eps<ε>.csv` (`t,k,re,im` for `k >= 0`), `mass_eps<ε>.csv`
/// and `conservation_eps<ε>.json`.
pub fn cmd_solve_full(config: &ExperimentConfig) -> Result<SolveReport> {
    config.validate()?;
    prepare_dir(&config.out)?;
    let hash = config.hash();
    let u0 = config.initial_field()?;
    let results = parallel_map(&config.epsilons, config.worker_count(), |&eps| {
        solve_one(config, &hash, &u0, eps)
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let report = SolveReport {
        config_hash: hash,
        runs,
    };
    write_json(&config.out.join("solve_full_report.json"), &report)?;
    Ok(report)
}

fn solve_one(
    config: &ExperimentConfig,
    hash: &str,
    u0: &SpectralField,
    eps: f64,
) -> Result<ConservationReport> {
    let full = config.full_model(eps, config.t_end);
    let steps = full.steps();
    let snap = config.steps_per(config.snapshot_interval);
    let every = config.steps_per(config.mass_interval);
    let mut traj = Csv::new(hash, &["t", "k", "re", "im"]);
    let mut cols = vec!["t".to_string(), "total".to_string()];
    cols.extend(config.n_grid.iter().map(|n| format!("resolved_n{n}")));
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut mass = Csv::new(hash, &col_refs);
    let m0 = u0.total_mass();
    let mut departure: BTreeMap<usize, f64> = config.n_grid.iter().map(|&n| (n, 0.0)).collect();
    let mut snapshots = 0;
    let mut final_mass = m0;
    let (_, drift) = integrate_observed(u0, &full, |s, t, u| {
        if s % snap == 0 || s == steps {
            trajectory_rows(&mut traj, t, u);
            snapshots += 1;
        }
        let mut row = vec![num(t), num(u.total_mass())];
        for (&n, d) in departure.iter_mut() {
            let m = u.mass_below(n);
            *d = d.max((m0 - m) / m0);
        }
        if s % every == 0 || s == steps {
            row.extend(config.n_grid.iter().map(|&n| num(u.mass_below(n))));
            mass.row(&row);
        }
        final_mass = u.total_mass();
    })?;
    let t = tag(eps, None);
    traj.write(&config.out.join(format!("trajectory_{t}.csv")))?;
    mass.write(&config.out.join(format!("mass_{t}.csv")))?;
    let report = ConservationReport {
        epsilon: eps,
        steps,
        snapshots,
        initial_mass: m0,
        final_mass,
        max_mass_drift: drift,
        max_resolved_departure: departure,
    };
    write_json(&config.out.join(format!("conservation_{t}.json")), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// fit and scaling
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelledFit {
    pub label: String,
    pub fit: Option<FitResult>,
    pub pi: Option<[f64; MAX_ORDER]>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub epsilon: f64,
    pub n: usize,
    pub scales: Option<NondimParams>,
    pub samples: usize,
    pub fits: Vec<LabelledFit>,
    /// `|α_i| ‖ΔM^i‖ / (|α₂| ‖ΔM²‖)` for the complete fit.
    pub contribution_ratios: Option<[f64; MAX_ORDER]>,
    pub odd_terms_negligible: Option<bool>,
    /// Correlation of the total mass rate with each `ΔM^i` summed over modes.
    pub aggregate_correlation: Option<[f64; MAX_ORDER]>,
    pub modal_correlation: Option<[f64; MAX_ORDER]>,
    pub window_robustness: Option<WindowReport>,
    pub error: Option<String>,
}

impl FitPoint {
    pub fn fit(&self, label: &str) -> Option<&FitResult> {
        self.fits
            .iter()
            .find(|f| f.label == label)
            .and_then(|f| f.fit.as_ref())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawOutcome {
    pub label: String,
    pub order: usize,
    pub law: Option<ScalingLaw>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config_hash: String,
    pub context: String,
    pub points: Vec<FitPoint>,
    pub laws: Vec<LawOutcome>,
    pub database: PathBuf,
    pub new_records: usize,
}

impl FitReport {
    pub fn law(&self, label: &str, order: usize) -> Option<&ScalingLaw> {
        self.laws
            .iter()
            .find(|l| l.label == label && l.order == order)
            .and_then(|l| l.law.as_ref())
    }
}

/// Fits the renormalization coefficients at every `(ε, N)` of the grid and,
/// when at least three points succeed, the scaling laws. Failures at one
/// point are recorded in the report and do not stop the sweep.
///
/// Outputs: `fits.csv`, `scaling.csv`, `fit_report.json`, optional
/// `dataset_eps<ε>_n<N>.csv`, and new database records.
pub fn cmd_fit(config: &ExperimentConfig) -> Result<FitReport> {
    config.validate()?;
    prepare_dir(&config.out)?;
    let hash = config.hash();
    let context = config.fit_context_hash();
    let u0 = config.initial_field()?;
    let per_eps = parallel_map(&config.epsilons, config.worker_count(), |&eps| {
        fit_epsilon(config, &hash, &u0, eps)
    });
    let points: Vec<FitPoint> = per_eps.into_iter().flatten().collect();
    let laws = scaling_from_points(config, &points);

    let mut records = Vec::new();
    for p in &points {
        for lf in &p.fits {
            if let (Some(fit), Some(pi), Some(s)) = (&lf.fit, lf.pi, p.scales) {
                records.push(DbRecord::Fit(FitRecord {
                    label: lf.label.clone(),
                    context: context.clone(),
                    epsilon: p.epsilon,
                    n: p.n,
                    window: fit.window,
                    orders: fit.orders.clone(),
                    alphas: fit.alphas,
                    pi,
                    re: s.re,
                    lambda: s.lambda,
                    residual: fit.residual,
                }));
            }
        }
    }
    records.extend(law_records(&context, &points, &laws));
    let db = CoefficientDb::new(config.database_path());
    let new_records = db.append(&records)?;

    write_fit_csv(config, &hash, &points)?;
    write_scaling_csv(config, &hash, &laws)?;
    let report = FitReport {
        config_hash: hash,
        context,
        points,
        laws,
        database: db.path().to_path_buf(),
        new_records,
    };
    write_json(&config.out.join("fit_report.json"), &report)?;
    Ok(report)
}

fn fit_epsilon(
    config: &ExperimentConfig,
    hash: &str,
    u0: &SpectralField,
    eps: f64,
) -> Vec<FitPoint> {
    let failed = |n: usize, e: &Error| FitPoint {
        epsilon: eps,
        n,
        scales: None,
        samples: 0,
        fits: Vec::new(),
        contribution_ratios: None,
        odd_terms_negligible: None,
        aggregate_correlation: None,
        modal_correlation: None,
        window_robustness: None,
        error: Some(e.to_string()),
    };
    let datasets = match collect_datasets(config, u0, eps) {
        Ok(d) => d,
        Err(e) => return config.n_grid.iter().map(|&n| failed(n, &e)).collect(),
    };
    datasets
        .into_iter()
        .map(|data| {
            let n = data.n;
            if config.export_datasets {
                let path = config
                    .out
                    .join(format!("dataset_{}.csv", tag(eps, Some(n))));
                if let Err(e) = write_dataset_csv(&path, hash, &data) {
                    return failed(n, &e);
                }
            }
            fit_point(config, u0, &data)
        })
        .collect()
}

/// Runs the full model over the fit window once and samples the mass-rate
/// dataset for every N of the grid.
fn collect_datasets(
    config: &ExperimentConfig,
    u0: &SpectralField,
    eps: f64,
) -> Result<Vec<MassDerivativeDataset>> {
    let (t_a, t_b) = config.window;
    let mut builders = config
        .n_grid
        .iter()
        .map(|&n| DatasetBuilder::new(n, eps, config.window, config.stride, config.target))
        .collect::<Result<Vec<_>>>()?;
    let first = (t_a / config.dt).round() as u64;
    let stride = config.stride as u64;
    integrate_observed(u0, &config.full_model(eps, t_b), |s, t, u| {
        if s >= first && (s - first).is_multiple_of(stride) && t <= t_b + TIME_TOL {
            for b in builders.iter_mut() {
                b.push(t, u);
            }
        }
    })?;
    Ok(builders.into_iter().map(DatasetBuilder::finish).collect())
}

fn fit_point(
    config: &ExperimentConfig,
    u0: &SpectralField,
    data: &MassDerivativeDataset,
) -> FitPoint {
    let mut point = FitPoint {
        epsilon: data.epsilon,
        n: data.n,
        scales: None,
        samples: data.len(),
        fits: Vec::new(),
        contribution_ratios: None,
        odd_terms_negligible: None,
        aggregate_correlation: Some(std::array::from_fn(|i| data.aggregate_correlation(i + 1))),
        modal_correlation: Some(std::array::from_fn(|i| data.modal_correlation(i + 1))),
        window_robustness: None,
        error: None,
    };
    match NondimParams::new(data.epsilon, data.n, u0) {
        Ok(s) => point.scales = Some(s),
        Err(e) => point.error = Some(e.to_string()),
    }
    for (label, orders) in [
        (LABEL_COMPLETE, config.fit_orders.as_slice()),
        (LABEL_SECOND, &[2][..]),
    ] {
        let entry = match fit_alphas(data, orders) {
            Ok(fit) => {
                let pi = nondimensionalize(&fit.alphas, data.epsilon, data.n, u0)
                    .ok()
                    .map(|(pi, _)| std::array::from_fn(|i| pi[i]));
                LabelledFit {
                    label: label.into(),
                    fit: Some(fit),
                    pi,
                    error: None,
                }
            }
            Err(e) => LabelledFit {
                label: label.into(),
                fit: None,
                pi: None,
                error: Some(e.to_string()),
            },
        };
        point.fits.push(entry);
    }
    if let Some(fit) = point.fit(LABEL_COMPLETE).cloned() {
        let reference = fit.contribution(data, 2);
        if reference > 0.0 {
            point.contribution_ratios = Some(std::array::from_fn(|i| {
                fit.contribution(data, i + 1) / reference
            }));
        }
        point.odd_terms_negligible = Some(fit.odd_terms_negligible(data));
    }
    let width = config.window.1 - config.window.0;
    let widths: Vec<f64> = config
        .window_widths
        .iter()
        .copied()
        .filter(|w| *w > 0.0 && *w <= width + TIME_TOL)
        .collect();
    if widths.len() > 1 {
        point.window_robustness = fit_window_robustness(data, &widths).ok();
    }
    point
}

fn write_dataset_csv(path: &Path, hash: &str, data: &MassDerivativeDataset) -> Result<()> {
    let mut csv = Csv::new(
        hash,
        &["t", "k", "dM_exact", "dM_1", "dM_2", "dM_3", "dM_4"],
    );
    for (j, t) in data.times.iter().enumerate() {
        for (m, k) in data.wavenumbers.iter().enumerate() {
            let mut row = vec![num(*t), k.to_string(), num(data.exact[j][m])];
            row.extend((0..MAX_ORDER).map(|i| num(data.terms[i][j][m])));
            csv.row(&row);
        }
    }
    csv.write(path)
}

/// Points that a scaling law can use, one per `(ε, N)`.
fn scaling_inputs(
    points: &[(f64, usize, [f64; MAX_ORDER], f64, f64)],
    order: usize,
) -> Vec<ScalingPoint> {
    points
        .iter()
        .map(|&(_, _, pi, re, lambda)| ScalingPoint {
            pi: pi[order - 1],
            re,
            lambda,
        })
        .collect()
}

fn fit_laws(
    label: &str,
    orders: &[usize],
    points: &[(f64, usize, [f64; MAX_ORDER], f64, f64)],
) -> Vec<LawOutcome> {
    orders
        .iter()
        .map(|&order| {
            let outcome = if points.len() < 3 {
                Err(Error::SingularFit(format!(
                    "{} grid point(s); a scaling law needs at least 3",
                    points.len()
                )))
            } else {
                fit_scaling_law(order, &scaling_inputs(points, order))
            };
            match outcome {
                Ok(law) => LawOutcome {
                    label: label.into(),
                    order,
                    law: Some(law),
                    error: None,
                },
                Err(e) => LawOutcome {
                    label: label.into(),
                    order,
                    law: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

fn point_tuples(points: &[FitPoint], label: &str) -> Vec<(f64, usize, [f64; MAX_ORDER], f64, f64)> {
    points
        .iter()
        .filter_map(|p| {
            let lf = p.fits.iter().find(|f| f.label == label)?;
            let s = p.scales?;
            Some((p.epsilon, p.n, lf.pi?, s.re, s.lambda))
        })
        .collect()
}

fn scaling_from_points(config: &ExperimentConfig, points: &[FitPoint]) -> Vec<LawOutcome> {
    let mut laws = fit_laws(
        LABEL_COMPLETE,
        &config.fit_orders,
        &point_tuples(points, LABEL_COMPLETE),
    );
    laws.extend(fit_laws(
        LABEL_SECOND,
        &[2],
        &point_tuples(points, LABEL_SECOND),
    ));
    laws
}

fn law_records(context: &str, points: &[FitPoint], laws: &[LawOutcome]) -> Vec<DbRecord> {
    laws.iter()
        .filter_map(|l| {
            let law = l.law.clone()?;
            let grid = point_tuples(points, &l.label)
                .into_iter()
                .map(|(e, n, ..)| (e, n))
                .collect();
            Some(DbRecord::Scaling(ScalingRecord {
                label: l.label.clone(),
                context: context.into(),
                law,
                grid,
            }))
        })
        .collect()
}

fn write_fit_csv(config: &ExperimentConfig, hash: &str, points: &[FitPoint]) -> Result<()> {
    let mut csv = Csv::new(
        hash,
        &[
            "label",
            "epsilon",
            "n",
            "re",
            "lambda",
            "alpha1",
            "alpha2",
            "alpha3",
            "alpha4",
            "pi1",
            "pi2",
            "pi3",
            "pi4",
            "residual",
            "odd_negligible",
            "status",
        ],
    );
    for p in points {
        for label in [LABEL_COMPLETE, LABEL_SECOND] {
            let lf = p.fits.iter().find(|f| f.label == label);
            let mut row = vec![
                label.to_string(),
                num(p.epsilon),
                p.n.to_string(),
                opt_num(p.scales.map(|s| s.re)),
                opt_num(p.scales.map(|s| s.lambda)),
            ];
            let fit = lf.and_then(|f| f.fit.as_ref());
            let pi = lf.and_then(|f| f.pi);
            row.extend((0..MAX_ORDER).map(|i| opt_num(fit.map(|f| f.alphas[i]))));
            row.extend((0..MAX_ORDER).map(|i| opt_num(pi.map(|p| p[i]))));
            row.push(opt_num(fit.map(|f| f.residual)));
            row.push(match (label, p.odd_terms_negligible) {
                (LABEL_COMPLETE, Some(b)) => b.to_string(),
                _ => String::new(),
            });
            let status = p
                .error
                .clone()
                .or_else(|| lf.and_then(|f| f.error.clone()))
                .map_or_else(|| "ok".to_string(), |e| csv_text(&e));
            row.push(status);
            csv.row(&row);
        }
    }
    csv.write(&config.out.join("fits.csv"))
}

fn write_scaling_csv(config: &ExperimentConfig, hash: &str, laws: &[LawOutcome]) -> Result<()> {
    let mut csv = Csv::new(
        hash,
        &[
            "label",
            "order",
            "a",
            "b",
            "c",
            "r_squared",
            "n_points",
            "status",
        ],
    );
    for l in laws {
        let law = l.law.as_ref();
        csv.row(&[
            l.label.clone(),
            l.order.to_string(),
            opt_num(law.map(|x| x.a)),
            opt_num(law.map(|x| x.b)),
            opt_num(law.map(|x| x.c)),
            opt_num(law.map(|x| x.r_squared)),
            law.map_or_else(String::new, |x| x.n_points.to_string()),
            l.error
                .as_deref()
                .map_or_else(|| "ok".to_string(), csv_text),
        ]);
    }
    csv.write(&config.out.join("scaling.csv"))
}

fn csv_text(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "'"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub config_hash: String,
    pub context: String,
    pub points_used: Vec<(f64, usize)>,
    pub laws: Vec<LawOutcome>,
    pub new_records: usize,
}

/// Refits the scaling laws from the database fits on the configured grid.
pub fn cmd_scaling(config: &ExperimentConfig) -> Result<ScalingReport> {
    config.validate()?;
    prepare_dir(&config.out)?;
    let hash = config.hash();
    let context = config.fit_context_hash();
    let db = CoefficientDb::new(config.database_path());
    let mut points = Vec::new();
    for &eps in &config.epsilons {
        for &n in &config.n_grid {
            let complete = db.find_fit(&context, LABEL_COMPLETE, eps, n)?;
            let second = db.find_fit(&context, LABEL_SECOND, eps, n)?;
            if complete.is_none() && second.is_none() {
                continue;
            }
            let scales = complete.as_ref().or(second.as_ref()).map(|r| NondimParams {
                l: crate::fit::DOMAIN_LENGTH,
                u: 0.0,
                t: 0.0,
                re: r.re,
                lambda: r.lambda,
            });
            let fits = [(LABEL_COMPLETE, complete), (LABEL_SECOND, second)]
                .into_iter()
                .filter_map(|(label, r)| {
                    r.map(|r| LabelledFit {
                        label: label.into(),
                        fit: Some(FitResult {
                            orders: r.orders.clone(),
                            alphas: r.alphas,
                            residual: r.residual,
                            window: r.window,
                            stride: config.stride,
                        }),
                        pi: Some(r.pi),
                        error: None,
                    })
                })
                .collect();
            points.push(FitPoint {
                epsilon: eps,
                n,
                scales,
                samples: 0,
                fits,
                contribution_ratios: None,
                odd_terms_negligible: None,
                aggregate_correlation: None,
                modal_correlation: None,
                window_robustness: None,
                error: None,
            });
        }
    }
    if points.is_empty() {
        return Err(Error::MissingCoefficients(format!(
            "no fits in {} match this configuration; run `{}` first",
            db.path().display(),
            config.fit_command_hint(config.epsilons[0], config.n_grid[0])
        )));
    }
    let laws = scaling_from_points(config, &points);
    let new_records = db.append(&law_records(&context, &points, &laws))?;
    write_scaling_csv(config, &hash, &laws)?;
    let report = ScalingReport {
        config_hash: hash,
        context,
        points_used: points.iter().map(|p| (p.epsilon, p.n)).collect(),
        laws,
        new_records,
    };
    write_json(&config.out.join("scaling_report.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Reduced model runs
// ---------------------------------------------------------------------------

/// Coefficients for a renormalized model of the given order.
///
/// Order 2 uses the second-order fit. Other orders use the complete fit;
/// for even orders the odd coefficients are dropped, matching the
/// observation that their contributions are negligible.
pub fn resolve_alphas(
    config: &ExperimentConfig,
    db: &CoefficientDb,
    epsilon: f64,
    n: usize,
    order: usize,
) -> Result<(Vec<f64>, String)> {
    let label = if order == 2 {
        LABEL_SECOND
    } else {
        LABEL_COMPLETE
    };
    let context = config.fit_context_hash();
    let shape = |mut a: Vec<f64>| {
        if order.is_multiple_of(2) {
            for (i, v) in a.iter_mut().enumerate() {
                if i % 2 == 0 {
                    *v = 0.0;
                }
            }
        }
        a
    };
    if config.coefficient_source != CoefficientSource::Scaling {
        if let Some(r) = db.find_fit(&context, label, epsilon, n)? {
            return Ok((shape(r.alphas[..order].to_vec()), format!("{label} fit")));
        }
    }
    if config.coefficient_source != CoefficientSource::Fitted {
        let laws = db.find_laws(&context, label)?;
        let needed: Vec<usize> = (1..=order)
            .filter(|i| order % 2 == 1 || i % 2 == 0)
            .collect();
        if needed.iter().all(|i| laws.iter().any(|l| l.order == *i)) {
            let u0 = config.initial_field()?;
            let alphas = predict_alphas(epsilon, n, &laws, &u0, order)?;
            return Ok((shape(alphas), format!("{label} scaling law")));
        }
    }
    Err(Error::MissingCoefficients(format!(
        "no {label} coefficients for a renormalized order-{order} model at epsilon = {epsilon}, N = {n} in {}; run `{}` first (or fit a grid of at least three points to obtain scaling laws)",
        db.path().display(),
        config.fit_command_hint(epsilon, n)
    )))
}

fn rom_config(
    config: &ExperimentConfig,
    db: &CoefficientDb,
    epsilon: f64,
    n: usize,
    order: usize,
    renormalized: bool,
) -> Result<(RomConfig, String)> {
    if order == 0 {
        return Ok((RomConfig::markov(n, epsilon), "none".into()));
    }
    if !renormalized {
        return Ok((RomConfig::raw(n, epsilon, order), "Taylor weights".into()));
    }
    let (alphas, source) = resolve_alphas(config, db, epsilon, n, order)?;
    Ok((RomConfig::renormalized(n, epsilon, alphas), source))
}

/// Observations of one reduced model run.
struct RomRun {
    times: Vec<f64>,
    masses: Vec<f64>,
    states: Vec<(f64, SpectralField)>,
    steps_done: u64,
    blow_up: Option<f64>,
    count: TransformCount,
}

/// Integrates a reduced model, sampling the resolved mass every
/// `mass_every` steps and the state at the requested steps.
fn run_rom(
    rom: &RomConfig,
    u0: &SpectralField,
    dt: f64,
    steps: u64,
    mass_every: u64,
    state_steps: &BTreeSet<u64>,
) -> Result<RomRun> {
    let mut nl = RomNonlinearity::new(rom.clone())?;
    let u = u0.resized(rom.n - 1);
    let linear = dispersion_multipliers(rom.n - 1, rom.epsilon);
    let mut run = RomRun {
        times: Vec::new(),
        masses: Vec::new(),
        states: Vec::new(),
        steps_done: 0,
        blow_up: None,
        count: TransformCount::default(),
    };
    let result = run_semilinear(&u, &linear, dt, steps, &mut nl, |s, t, u| {
        if s % mass_every == 0 || s == steps {
            run.times.push(t);
            run.masses.push(u.total_mass());
        }
        if state_steps.contains(&s) {
            run.states.push((t, u.clone()));
        }
        run.steps_done = s;
    });
    match result {
        Ok(_) => {}
        Err(Error::BlowUp { time, .. }) => run.blow_up = Some(time),
        Err(e) => return Err(e),
    }
    run.count = nl.transform_count();
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RomRunReport {
    pub epsilon: f64,
    pub n: usize,
    pub order: usize,
    pub renormalized: bool,
    pub alphas: Vec<f64>,
    pub coefficient_source: String,
    pub stable: bool,
    pub blow_up_time: Option<f64>,
    pub initial_mass: f64,
    pub final_mass: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRomReport {
    pub config_hash: String,
    pub runs: Vec<RomRunReport>,
}

fn rom_label(order: usize, renormalized: bool) -> String {
    match (order, renormalized) {
        (0, _) => "markov".into(),
        (o, true) => format!("rom{o}"),
        (o, false) => format!("rom{o}-raw"),
    }
}

/// Integrates the configured reduced model at every `(ε, N)`, writing
/// `rom_<model>_eps<ε>_n<N>.csv` snapshots and `rommass_...csv` resolved
/// mass series. A blow-up is reported after all runs finish.
pub fn cmd_run_rom(config: &ExperimentConfig) -> Result<RunRomReport> {
    config.validate()?;
    prepare_dir(&config.out)?;
    let hash = config.hash();
    let db = CoefficientDb::new(config.database_path());
    let u0 = config.initial_field()?;
    let (order, renorm) = (config.rom_order, config.renormalized);
    let label = rom_label(order, renorm);
    let mut jobs = Vec::new();
    for &eps in &config.epsilons {
        for &n in &config.n_grid {
            let (rom, source) = rom_config(config, &db, eps, n, order, renorm)?;
            jobs.push((eps, n, rom, source));
        }
    }
    let steps = step_count(config.t_end, config.dt);
    let snap = config.steps_per(config.snapshot_interval);
    let every = config.steps_per(config.mass_interval);
    let snap_steps: BTreeSet<u64> = (0..=steps)
        .filter(|s| s % snap == 0 || *s == steps)
        .collect();
    let results = parallel_map(&jobs, config.worker_count(), |(eps, n, rom, source)| {
        let run = run_rom(rom, &u0, config.dt, steps, every, &snap_steps)?;
        let t = tag(*eps, Some(*n));
        let mut traj = Csv::new(&hash, &["t", "k", "re", "im"]);
        for (time, u) in &run.states {
            trajectory_rows(&mut traj, *time, u);
        }
        traj.write(&config.out.join(format!("rom_{label}_{t}.csv")))?;
        let mut mass = Csv::new(&hash, &["t", "resolved_mass"]);
        for (time, m) in run.times.iter().zip(&run.masses) {
            mass.row(&[num(*time), num(*m)]);
        }
        mass.write(&config.out.join(format!("rommass_{label}_{t}.csv")))?;
        Ok(RomRunReport {
            epsilon: *eps,
            n: *n,
            order,
            renormalized: renorm,
            alphas: rom.alphas.clone(),
            coefficient_source: source.clone(),
            stable: run.blow_up.is_none(),
            blow_up_time: run.blow_up,
            initial_mass: u0.mass_below(*n),
            final_mass: run.blow_up.map_or(run.masses.last().copied(), |_| None),
        })
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let report = RunRomReport {
        config_hash: hash,
        runs,
    };
    write_json(
        &config.out.join(format!("run_rom_{label}_report.json")),
        &report,
    )?;
    if let Some(r) = report.runs.iter().find(|r| !r.stable) {
        return Err(Error::BlowUp {
            step: (r.blow_up_time.unwrap_or(0.0) / config.dt).round() as u64,
            time: r.blow_up_time.unwrap_or(0.0),
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkCounter {
    pub forward: u64,
    pub inverse: u64,
    pub rhs_evaluations: u64,
    pub pairs_per_rhs: f64,
    pub pairs_per_step: f64,
    pub reference_pairs: Option<u64>,
    /// `pairs_per_rhs / reference_pairs`.
    pub ratio: Option<f64>,
    pub within_factor_two: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub model: ModelKind,
    pub n: usize,
    pub alphas: Vec<f64>,
    pub coefficient_source: String,
    pub stable: bool,
    pub blow_up_time: Option<f64>,
    /// Resolved mass at each mass checkpoint; `None` after a blow-up.
    pub mass: Vec<Option<f64>>,
    /// Largest `|M(t) - M(0)| / M(0)` before any blow-up.
    pub max_mass_departure: f64,
    /// Relative real-space L2 error at each error checkpoint.
    pub errors: Vec<Option<f64>>,
    pub work: Option<WorkCounter>,
}

impl ModelOutcome {
    pub fn error_at(&self, report: &ComparisonReport, t: f64) -> Option<f64> {
        let j = report
            .error_times
            .iter()
            .position(|s| (s - t).abs() < TIME_TOL)?;
        self.errors[j]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config_hash: String,
    pub epsilon: f64,
    pub t_end: f64,
    pub mass_times: Vec<f64>,
    pub error_times: Vec<f64>,
    pub exact_mass_drift: f64,
    pub outcomes: Vec<ModelOutcome>,
    pub work_note: String,
}

impl ComparisonReport {
    pub fn outcome(&self, model: ModelKind, n: usize) -> Option<&ModelOutcome> {
        self.outcomes.iter().find(|o| o.model == model && o.n == n)
    }
}

const WORK_NOTE: &str = "Counts are transform-plus-inverse pairs per right-hand-side \
evaluation of the reduced model (the integrator makes four evaluations per step). The \
memory kernels share the physical-space fields of u, R0 and the unresolved convolution, \
so orders 1 to 4 need 5 pairs at second order and 11 at fourth order; the reference \
counts are 6 and 22.";

/// Integrates the exact model and every requested reduced model for each ε
/// of the grid, writing `compare_mass_eps<ε>.csv`, `compare_errors_eps<ε>.csv`,
/// `compare_work_eps<ε>.csv` and `compare_report_eps<ε>.json`.
pub fn cmd_compare(config: &ExperimentConfig) -> Result<Vec<ComparisonReport>> {
    config.validate()?;
    prepare_dir(&config.out)?;
    let db = CoefficientDb::new(config.database_path());
    let mut jobs = Vec::new();
    for &eps in &config.epsilons {
        for &n in &config.n_grid {
            for &model in &config.models {
                if let Some((order, renorm)) = model.rom() {
                    let (rom, source) = rom_config(config, &db, eps, n, order, renorm)?;
                    jobs.push((eps, n, model, rom, source));
                }
            }
        }
    }
    config
        .epsilons
        .iter()
        .map(|&eps| {
            let mine: Vec<_> = jobs.iter().filter(|j| j.0 == eps).cloned().collect();
            compare_epsilon(config, eps, &mine)
        })
        .collect()
}

fn compare_epsilon(
    config: &ExperimentConfig,
    eps: f64,
    jobs: &[(f64, usize, ModelKind, RomConfig, String)],
) -> Result<ComparisonReport> {
    let hash = config.hash();
    let u0 = config.initial_field()?;
    let full = config.full_model(eps, config.t_end);
    let steps = full.steps();
    let every = config.steps_per(config.mass_interval);
    let mut error_times: Vec<f64> = config
        .checkpoints
        .iter()
        .copied()
        .filter(|t| *t <= config.t_end + TIME_TOL)
        .collect();
    error_times.sort_by(f64::total_cmp);
    error_times.dedup();
    let error_steps: BTreeSet<u64> = error_times
        .iter()
        .map(|t| (t / config.dt).round() as u64)
        .collect();

    let mut mass_times = Vec::new();
    let mut exact_mass: BTreeMap<usize, Vec<f64>> =
        config.n_grid.iter().map(|&n| (n, Vec::new())).collect();
    let mut exact_states = BTreeMap::new();
    let (_, drift) = integrate_observed(&u0, &full, |s, t, u| {
        if s % every == 0 || s == steps {
            mass_times.push(t);
            for (n, v) in exact_mass.iter_mut() {
                v.push(u.mass_below(*n));
            }
        }
        if error_steps.contains(&s) {
            exact_states.insert(s, u.clone());
        }
    })?;

    let mut outcomes: Vec<ModelOutcome> = Vec::new();
    if config.models.contains(&ModelKind::Exact) {
        for (&n, masses) in &exact_mass {
            outcomes.push(ModelOutcome {
                model: ModelKind::Exact,
                n,
                alphas: Vec::new(),
                coefficient_source: "none".into(),
                stable: true,
                blow_up_time: None,
                mass: masses.iter().map(|m| Some(*m)).collect(),
                max_mass_departure: max_departure(masses),
                errors: error_times.iter().map(|_| Some(0.0)).collect(),
                work: None,
            });
        }
    }
    let rom_outcomes = parallel_map(jobs, config.worker_count(), |(_, n, model, rom, source)| {
        let run = run_rom(rom, &u0, config.dt, steps, every, &error_steps)?;
        let errors = error_steps
            .iter()
            .map(|s| {
                let (_, u) = run
                    .states
                    .iter()
                    .find(|(t, _)| (t / config.dt).round() as u64 == *s)?;
                Some(relative_l2_error(&exact_states[s], u))
            })
            .collect();
        let mut mass: Vec<Option<f64>> = run.masses.iter().map(|m| Some(*m)).collect();
        mass.resize(mass_times.len(), None);
        // A blow-up is detected after the offending step has been taken.
        let attempted = run.steps_done + u64::from(run.blow_up.is_some());
        let rhs = RHS_PER_STEP * attempted;
        let work = (rhs > 0).then(|| {
            let pairs = run.count.pairs() as f64;
            let per_rhs = pairs / rhs as f64;
            let reference = model.reference_pairs();
            let ratio = reference.map(|r| per_rhs / r as f64);
            WorkCounter {
                forward: run.count.forward,
                inverse: run.count.inverse,
                rhs_evaluations: rhs,
                pairs_per_rhs: per_rhs,
                pairs_per_step: pairs / attempted as f64,
                reference_pairs: reference,
                ratio,
                within_factor_two: ratio.map(|r| (0.5..=2.0).contains(&r)),
            }
        });
        Ok(ModelOutcome {
            model: *model,
            n: *n,
            alphas: rom.alphas.clone(),
            coefficient_source: source.clone(),
            stable: run.blow_up.is_none(),
            blow_up_time: run.blow_up,
            mass,
            max_mass_departure: max_departure(&run.masses),
            errors,
            work,
        })
    });
    for o in rom_outcomes {
        outcomes.push(o?);
    }
    outcomes.sort_by_key(|o| (o.n, o.model));

    let report = ComparisonReport {
        config_hash: hash.clone(),
        epsilon: eps,
        t_end: config.t_end,
        mass_times,
        error_times,
        exact_mass_drift: drift,
        outcomes,
        work_note: WORK_NOTE.into(),
    };
    write_comparison(config, &report)?;
    Ok(report)
}

fn max_departure(masses: &[f64]) -> f64 {
    let Some(&m0) = masses.first() else {
        return 0.0;
    };
    if m0 == 0.0 {
        return 0.0;
    }
    masses
        .iter()
        .map(|m| (m - m0).abs() / m0)
        .fold(0.0, f64::max)
}

fn write_comparison(config: &ExperimentConfig, r: &ComparisonReport) -> Result<()> {
    let t = tag(r.epsilon, None);
    let hash = &r.config_hash;
    let mut mass = Csv::new(hash, &["t", "model", "n", "resolved_mass"]);
    for o in &r.outcomes {
        for (time, m) in r.mass_times.iter().zip(&o.mass) {
            mass.row(&[
                num(*time),
                o.model.to_string(),
                o.n.to_string(),
                opt_num(*m),
            ]);
        }
    }
    mass.write(&config.out.join(format!("compare_mass_{t}.csv")))?;
    let mut err = Csv::new(hash, &["t", "model", "n", "relative_error", "stable"]);
    for o in &r.outcomes {
        for (time, e) in r.error_times.iter().zip(&o.errors) {
            err.row(&[
                num(*time),
                o.model.to_string(),
                o.n.to_string(),
                opt_num(*e),
                o.stable.to_string(),
            ]);
        }
    }
    err.write(&config.out.join(format!("compare_errors_{t}.csv")))?;
    let mut work = Csv::new(
        hash,
        &[
            "model",
            "n",
            "forward",
            "inverse",
            "rhs_evaluations",
            "pairs_per_rhs",
            "reference_pairs",
            "ratio",
        ],
    );
    for o in &r.outcomes {
        if let Some(w) = &o.work {
            work.row(&[
                o.model.to_string(),
                o.n.to_string(),
                w.forward.to_string(),
                w.inverse.to_string(),
                w.rhs_evaluations.to_string(),
                num(w.pairs_per_rhs),
                w.reference_pairs
                    .map_or_else(String::new, |p| p.to_string()),
                opt_num(w.ratio),
            ]);
        }
    }
    work.write(&config.out.join(format!("compare_work_{t}.csv")))?;
    write_json(&config.out.join(format!("compare_report_{t}.json")), r)
}

// ---------------------------------------------------------------------------
// derive
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceEntry {
    pub order: usize,
    pub epsilon: f64,
    pub samples: usize,
    pub max_relative_difference: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeriveReport {
    pub order: usize,
    /// Human-readable complete-memory polynomials, one per order.
    pub polynomials: Vec<String>,
    /// Whether each order agrees with the BCH form after commuting
    /// canonicalization.
    pub bch_agreement: Vec<bool>,
    pub equivalence: Vec<EquivalenceEntry>,
    pub files: Vec<PathBuf>,
}

/// Relative tolerance of the symbolic against hand-coded kernel check.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-10;

/// Writes `operator_order<i>.{txt,sexpr,json}` and `memory_order<i>.{sexpr,json}`
/// for `i = 1..=order`, plus `derive_report.json` with the BCH comparison
/// and the agreement of the symbolic trees with the hand-coded kernels.
pub fn cmd_derive(config: &ExperimentConfig) -> Result<DeriveReport> {
    let order = config.derive_order;
    if order == 0 {
        return Err(Error::InvalidConfig(
            "derive order must be at least 1".into(),
        ));
    }
    prepare_dir(&config.out)?;
    let polys = complete_memory_operator_terms(order);
    let bch = bch_operator_terms(order);
    let mut files = Vec::new();
    let mut report = DeriveReport {
        order,
        polynomials: Vec::new(),
        bch_agreement: Vec::new(),
        equivalence: Vec::new(),
        files: Vec::new(),
    };
    for (p, b) in polys.iter().zip(&bch) {
        let i = p.order;
        report.polynomials.push(p.to_string());
        report
            .bch_agreement
            .push(canonicalize(p, true) == canonicalize(b, true));
        let base = config.out.join(format!("operator_order{i}"));
        for (ext, text) in [
            ("txt", format!("{p}\n")),
            ("sexpr", format!("{}\n", p.to_sexpr())),
            (
                "json",
                format!(
                    "{}\n",
                    serde_json::to_string_pretty(p).expect("poly serializes")
                ),
            ),
        ] {
            let path = base.with_extension(ext);
            write_file(&path, &text)?;
            files.push(path);
        }
        let expr = memory_term(i)?;
        let base = config.out.join(format!("memory_order{i}"));
        for (ext, text) in [
            ("sexpr", format!("{}\n", expr.to_sexpr_shared())),
            ("json", format!("{}\n", expr.to_json())),
        ] {
            let path = base.with_extension(ext);
            write_file(&path, &text)?;
            files.push(path);
        }
    }
    for i in 1..=order.min(MAX_ORDER) {
        for eps in [0.0, 0.1] {
            report.equivalence.push(equivalence_check(i, eps, 8, 10)?);
        }
    }
    report.files = files;
    write_json(&config.out.join("derive_report.json"), &report)?;
    Ok(report)
}

/// Random Hermitian field on `|k| < n` with components in `[-1, 1]`.
pub fn random_resolved_field(n: usize, seed: u64) -> SpectralField {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut f = SpectralField::zeros(n - 1);
    f.set(0, C64::new(rng.random_range(-1.0..1.0), 0.0));
    for k in 1..n as i64 {
        let c = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        f.set(k, c);
        f.set(-k, c.conj());
    }
    f
}

/// Compares the symbolic tree for `R^order` with the hand-coded kernel on
/// `samples` random fields at resolution `n`.
pub fn equivalence_check(
    order: usize,
    epsilon: f64,
    n: usize,
    samples: usize,
) -> Result<EquivalenceEntry> {
    let partition = ModePartition::rom(n)?;
    let expr = memory_term(order)?;
    let mut eval = MemoryEvaluator::new(partition, epsilon);
    let mut worst = 0.0f64;
    for seed in 0..samples as u64 {
        let u = random_resolved_field(n, 1000 * order as u64 + seed);
        let symbolic = expr.evaluate(&u, epsilon, &partition)?.resized(n - 1);
        let coded = eval.term(&u, order);
        let scale = symbolic.l2_norm().max(f64::MIN_POSITIVE);
        worst = worst.max(symbolic.distance_sqr(&coded).sqrt() / scale);
    }
    Ok(EquivalenceEntry {
        order,
        epsilon,
        samples,
        max_relative_difference: worst,
        passed: worst <= EQUIVALENCE_TOLERANCE,
    })
}

/// Short human-readable summary used by the binary.
pub fn summarize_fit(report: &FitReport) -> String {
    let mut s = String::new();
    for p in &report.points {
        match (p.fit(LABEL_COMPLETE), &p.error) {
            (Some(f), _) => {
                let _ = writeln!(
                    s,
                    "eps {} N {}: alpha = [{:.4e}, {:.4e}, {:.4e}, {:.4e}]",
                    p.epsilon, p.n, f.alphas[0], f.alphas[1], f.alphas[2], f.alphas[3]
                );
            }
            (None, Some(e)) => {
                let _ = writeln!(s, "eps {} N {}: failed: {e}", p.epsilon, p.n);
            }
            (None, None) => {
                let _ = writeln!(s, "eps {} N {}: complete fit failed", p.epsilon, p.n);
            }
        }
    }
    for l in &report.laws {
        match (&l.law, &l.error) {
            (Some(law), _) => {
                let _ = writeln!(
                    s,
                    "{} law order {}: a = {:.4}, b = {:.4}, c = {:.4} (R^2 = {:.4})",
                    l.label, l.order, law.a, law.b, law.c, law.r_squared
                );
            }
            (None, Some(e)) => {
                let _ = writeln!(s, "{} law order {}: {e}", l.label, l.order);
            }
            _ => {}
        }
    }
    s
}
