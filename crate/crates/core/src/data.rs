//! Trial and run datasets: CSV ingestion, run splits, benchmark torques,
//! and the synthetic data generator.
//!
//! On-disk layout: one directory per run named `run_<load>kg_<idx>` holding
//! `trial_<k>.csv` files, plus a `manifest.json` at the dataset root.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, JointState, LimbModel};
use crate::signals::{self, EnvelopeConfig, FilterSpec, GaussianConfig, SignalError, UniformSeries};

pub const EMG_CHANNELS: usize = 4;
pub const EMG_COLUMNS: [&str; EMG_CHANNELS] =
    ["emg_bic_long", "emg_bic_short", "emg_tri_long", "emg_tri_lat"];
pub const BASE_COLUMNS: [&str; 7] = [
    "t",
    "emg_bic_long",
    "emg_bic_short",
    "emg_tri_long",
    "emg_tri_lat",
    "q_shoulder",
    "q_elbow",
];
pub const DERIVED_COLUMNS: [&str; 6] = [
    "qd_shoulder",
    "qd_elbow",
    "qdd_shoulder",
    "qdd_elbow",
    "tau_shoulder",
    "tau_elbow",
];
pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ANGLE_RATE: f64 = 125.0;
/// Post-MVC envelopes may modestly exceed 1.
pub const EMG_MAX: f64 = 1.5;
const UNIFORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: line {line}, column `{column}`: {message}")]
    Schema {
        path: String,
        line: usize,
        column: String,
        message: String,
    },
    #[error("{path}: non-uniform sampling at line {line} (dt {dt}, expected {expected})")]
    NonUniformSampling {
        path: String,
        line: usize,
        dt: f64,
        expected: f64,
    },
    #[error("invalid trial: {0}")]
    InvalidTrial(String),
    #[error("load {load_kg} kg has {available} runs, split needs {needed}")]
    InsufficientRuns {
        load_kg: f64,
        available: usize,
        needed: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("trial has no torque columns; run benchmark_torque first")]
    MissingTorque,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Velocities, accelerations and benchmark torques of a trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Derived {
    pub qd: Vec<[f64; 2]>,
    pub qdd: Vec<[f64; 2]>,
    pub tau: Vec<[f64; 2]>,
}

/// One movement repetition: time-aligned EMG envelopes and joint angles.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub load_kg: f64,
    pub rate: f64,
    pub t: Vec<f64>,
    /// MVC-normalized envelopes in [`EMG_COLUMNS`] order.
    pub emg: Vec<[f64; EMG_CHANNELS]>,
    /// `[shoulder, elbow]`, rad.
    pub q: Vec<[f64; 2]>,
    pub derived: Option<Derived>,
}

impl Trial {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn duration(&self) -> f64 {
        match (self.t.first(), self.t.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// Time normalized to `[0, 1]` over the trial.
    pub fn normalized_time(&self, i: usize) -> f64 {
        (self.t[i] - self.t[0]) / self.duration()
    }

    pub fn torques(&self) -> Result<&[[f64; 2]], DataError> {
        self.derived
            .as_ref()
            .map(|d| d.tau.as_slice())
            .ok_or(DataError::MissingTorque)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.t.len();
        if n < 3 {
            return Err(DataError::InvalidTrial(format!("{n} samples, need at least 3")));
        }
        if self.emg.len() != n || self.q.len() != n {
            return Err(DataError::InvalidTrial("column lengths differ".into()));
        }
        if !(self.load_kg >= 0.0 && self.load_kg.is_finite()) {
            return Err(DataError::InvalidTrial(format!("load {} kg", self.load_kg)));
        }
        let dt = 1.0 / self.rate;
        for i in 1..n {
            let step = self.t[i] - self.t[i - 1];
            if !(step > 0.0) || (step - dt).abs() > UNIFORM_TOLERANCE.max(1e-9 * self.t[i].abs()) {
                return Err(DataError::InvalidTrial(format!(
                    "time not uniform at sample {i}: dt {step}, expected {dt}"
                )));
            }
        }
        for (i, e) in self.emg.iter().enumerate() {
            if e.iter().any(|v| !(0.0..=EMG_MAX).contains(v)) {
                return Err(DataError::InvalidTrial(format!("EMG out of [0, {EMG_MAX}] at sample {i}: {e:?}")));
            }
        }
        if self.q.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DataError::InvalidTrial("non-finite angle".into()));
        }
        if let Some(d) = &self.derived {
            if d.qd.len() != n || d.qdd.len() != n || d.tau.len() != n {
                return Err(DataError::InvalidTrial("derived column lengths differ".into()));
            }
            if d.qd.iter().chain(&d.qdd).chain(&d.tau).flatten().any(|v| !v.is_finite()) {
                return Err(DataError::InvalidTrial("non-finite derived value".into()));
            }
        }
        Ok(())
    }

    pub fn angle_series(&self) -> Result<UniformSeries, SignalError> {
        UniformSeries::from_frames(self.rate, self.t[0], &self.q)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = BASE_COLUMNS.to_vec();
        if self.derived.is_some() {
            header.extend(DERIVED_COLUMNS);
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = Vec::with_capacity(header.len());
            row.push(self.t[i].to_string());
            row.extend(self.emg[i].iter().map(|v| v.to_string()));
            row.extend(self.q[i].iter().map(|v| v.to_string()));
            if let Some(d) = &self.derived {
                for v in [d.qd[i], d.qdd[i], d.tau[i]] {
                    row.extend(v.iter().map(|x| x.to_string()));
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|e| DataError::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            })
    }

    /// Parses the trial CSV schema. `rate` is inferred from the time column
    /// when not given; `source` names the input in error messages.
    pub fn read_csv<R: Read>(
        reader: R,
        load_kg: f64,
        rate: Option<f64>,
        source: &str,
    ) -> Result<Self, DataError> {
        let schema = |line: usize, column: &str, message: String| DataError::Schema {
            path: source.to_string(),
            line,
            column: column.to_string(),
            message,
        };
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header: Vec<String> = r
            .headers()
            .map_err(|e| schema(1, "header", e.to_string()))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        let with_derived: Vec<&str> = BASE_COLUMNS.iter().chain(&DERIVED_COLUMNS).copied().collect();
        let has_derived = if header == BASE_COLUMNS {
            false
        } else if header == with_derived {
            true
        } else {
            return Err(schema(
                1,
                "header",
                format!("expected `{}` optionally followed by `{}`", BASE_COLUMNS.join(","), DERIVED_COLUMNS.join(",")),
            ));
        };

        let mut t = Vec::new();
        let mut emg = Vec::new();
        let mut q = Vec::new();
        let (mut qd, mut qdd, mut tau) = (Vec::new(), Vec::new(), Vec::new());
        for (k, record) in r.records().enumerate() {
            let line = k + 2;
            let record = record.map_err(|e| schema(line, "row", e.to_string()))?;
            if record.len() != header.len() {
                return Err(schema(line, "row", format!("{} fields, expected {}", record.len(), header.len())));
            }
            let mut vals = Vec::with_capacity(header.len());
            for (field, name) in record.iter().zip(&header) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| schema(line, name, format!("`{field}` is not a number")))?;
                if !v.is_finite() {
                    return Err(schema(line, name, format!("non-finite value `{field}`")));
                }
                vals.push(v);
            }
            t.push(vals[0]);
            emg.push([vals[1], vals[2], vals[3], vals[4]]);
            q.push([vals[5], vals[6]]);
            if has_derived {
                qd.push([vals[7], vals[8]]);
                qdd.push([vals[9], vals[10]]);
                tau.push([vals[11], vals[12]]);
            }
        }
        if t.len() < 3 {
            return Err(schema(t.len() + 1, "row", format!("{} data rows, need at least 3", t.len())));
        }
        let rate = rate.unwrap_or_else(|| (t.len() - 1) as f64 / (t[t.len() - 1] - t[0]));
        let dt = 1.0 / rate;
        for i in 1..t.len() {
            let step = t[i] - t[i - 1];
            if !(step > 0.0) || (step - dt).abs() > UNIFORM_TOLERANCE.max(1e-9 * t[i].abs()) {
                return Err(DataError::NonUniformSampling {
                    path: source.to_string(),
                    line: i + 2,
                    dt: step,
                    expected: dt,
                });
            }
        }
        for (i, e) in emg.iter().enumerate() {
            for (c, v) in e.iter().enumerate() {
                if !(0.0..=EMG_MAX).contains(v) {
                    return Err(schema(i + 2, EMG_COLUMNS[c], format!("EMG value {v} outside [0, {EMG_MAX}]")));
                }
            }
        }
        let trial = Trial {
            load_kg,
            rate,
            t,
            emg,
            q,
            derived: has_derived.then_some(Derived { qd, qdd, tau }),
        };
        trial.validate()?;
        Ok(trial)
    }

    pub fn load(path: &Path, load_kg: f64, rate: Option<f64>) -> Result<Self, DataError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        Self::read_csv(std::io::BufReader::new(file), load_kg, rate, &path.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub load_kg: f64,
    pub index: usize,
    pub trials: Vec<Trial>,
}

impl Run {
    pub fn dir_name(&self) -> String {
        format!("run_{}kg_{}", format_load(self.load_kg), self.index)
    }
}

/// Runs grouped by load.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSet {
    pub runs: Vec<Run>,
}

impl RunSet {
    /// Distinct loads in ascending order.
    pub fn loads(&self) -> Vec<f64> {
        let mut loads: Vec<f64> = self.runs.iter().map(|r| r.load_kg).collect();
        loads.sort_by(f64::total_cmp);
        loads.dedup();
        loads
    }

    pub fn runs_for(&self, load_kg: f64) -> impl Iterator<Item = &Run> {
        self.runs.iter().filter(move |r| r.load_kg == load_kg)
    }

    pub fn trials(&self) -> impl Iterator<Item = &Trial> {
        self.runs.iter().flat_map(|r| r.trials.iter())
    }

    pub fn trials_for(&self, load_kg: f64) -> impl Iterator<Item = &Trial> {
        self.runs_for(load_kg).flat_map(|r| r.trials.iter())
    }

    pub fn trial_count(&self) -> usize {
        self.runs.iter().map(|r| r.trials.len()).sum()
    }

    pub fn sample_count(&self) -> usize {
        self.trials().map(Trial::len).sum()
    }
}

/// `2` → "2", `2.5` → "2.5".
pub fn format_load(load_kg: f64) -> String {
    if load_kg.fract() == 0.0 {
        format!("{}", load_kg as i64)
    } else {
        format!("{load_kg}")
    }
}

fn parse_run_dir(name: &str) -> Option<(f64, usize)> {
    let rest = name.strip_prefix("run_")?;
    let (load, idx) = rest.split_once("kg_")?;
    Some((load.parse().ok()?, idx.parse().ok()?))
}

fn parse_trial_file(name: &str) -> Option<usize> {
    name.strip_prefix("trial_")?.strip_suffix(".csv")?.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub loads: Vec<f64>,
    pub angle_rate: f64,
    pub runs_per_load: usize,
    pub trials_per_run: usize,
    pub seed: Option<u64>,
    /// Generator settings for synthetic datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthConfig>,
}

/// Summary returned by [`load_trials`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub runs: usize,
    pub trials: usize,
    pub rows: usize,
}

/// Reads every `run_<load>kg_<idx>/trial_<k>.csv` below `root`.
pub fn load_trials(root: &Path) -> Result<(RunSet, Option<Manifest>, LoadReport), DataError> {
    let manifest_path = root.join("manifest.json");
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(DataError::Manifest(format!(
                "schema version {} unsupported (expected {SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        Some(m)
    } else {
        None
    };
    let rate = manifest.as_ref().map(|m| m.angle_rate);

    let mut run_dirs: Vec<(f64, usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some((load, idx)) = parse_run_dir(&name) {
            if entry.path().is_dir() {
                run_dirs.push((load, idx, entry.path()));
            }
        }
    }
    run_dirs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut runs = Vec::with_capacity(run_dirs.len());
    for (load_kg, index, dir) in run_dirs {
        let mut files: Vec<(usize, PathBuf)> = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            if let Some(k) = parse_trial_file(&entry.file_name().to_string_lossy()) {
                files.push((k, entry.path()));
            }
        }
        files.sort();
        let trials = files
            .iter()
            .map(|(_, p)| Trial::load(p, load_kg, rate))
            .collect::<Result<Vec<_>, _>>()?;
        runs.push(Run {
            load_kg,
            index,
            trials,
        });
    }
    let set = RunSet { runs };
    let report = LoadReport {
        runs: set.runs.len(),
        trials: set.trial_count(),
        rows: set.sample_count(),
    };
    Ok((set, manifest, report))
}

pub fn save_runset(root: &Path, set: &RunSet, manifest: &Manifest) -> Result<(), DataError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for run in &set.runs {
        let dir = root.join(run.dir_name());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (k, trial) in run.trials.iter().enumerate() {
            trial.save(&dir.join(format!("trial_{k}.csv")))?;
        }
    }
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_runs: usize,
    pub val_runs: usize,
    pub test_runs: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_runs: 2,
            val_runs: 1,
            test_runs: 1,
        }
    }
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.train_runs + self.val_runs + self.test_runs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: RunSet,
    pub val: RunSet,
    pub test: RunSet,
}

/// Per-load seeded permutation of runs into train/val/test.
pub fn split(runs: &RunSet, spec: &SplitSpec, seed: u64) -> Result<Split, DataError> {
    let mut out = Split {
        train: RunSet::default(),
        val: RunSet::default(),
        test: RunSet::default(),
    };
    for load in runs.loads() {
        let mut group: Vec<&Run> = runs.runs_for(load).collect();
        if group.len() != spec.total() {
            return Err(DataError::InsufficientRuns {
                load_kg: load,
                available: group.len(),
                needed: spec.total(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[load.to_bits()]));
        group.shuffle(&mut rng);
        let (train, rest) = group.split_at(spec.train_runs);
        let (val, test) = rest.split_at(spec.val_runs);
        out.train.runs.extend(train.iter().map(|r| (*r).clone()));
        out.val.runs.extend(val.iter().map(|r| (*r).clone()));
        out.test.runs.extend(test.iter().map(|r| (*r).clone()));
    }
    Ok(out)
}

/// Deterministic seed derivation (splitmix64 over the parts).
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed;
    for p in std::iter::once(&0x9E37_79B9_7F4A_7C15u64).chain(parts) {
        h ^= *p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Smooths the angles, differentiates them, and appends inverse-dynamics
/// torques computed with the trial's load folded into `model`.
pub fn benchmark_torque(trial: &Trial, model: &LimbModel, smoothing: &GaussianConfig) -> Result<Trial, DataError> {
    trial.validate()?;
    let loaded = model.with_load(trial.load_kg);
    loaded.validate()?;
    let angles = trial.angle_series()?;
    let smooth = signals::gaussian_smooth(&angles, smoothing.sigma_samples, smoothing.half_width_samples)?;
    let vel = signals::central_difference(&smooth, 1)?;
    let acc = signals::central_difference(&smooth, 2)?;
    let n = trial.len();
    let mut derived = Derived {
        qd: Vec::with_capacity(n),
        qdd: Vec::with_capacity(n),
        tau: Vec::with_capacity(n),
    };
    for i in 0..n {
        let state = JointState {
            q: [smooth.channel(0)[i], smooth.channel(1)[i]],
            qd: [vel.channel(0)[i], vel.channel(1)[i]],
            qdd: [acc.channel(0)[i], acc.channel(1)[i]],
        };
        derived.qd.push(state.qd);
        derived.qdd.push(state.qdd);
        derived.tau.push(loaded.inverse_dynamics(&state).tau);
    }
    Ok(Trial {
        derived: Some(derived),
        ..trial.clone()
    })
}

/// Minimum-jerk position profile `s(u) = 10u³ − 15u⁴ + 6u⁵` and its first
/// two derivatives with respect to `u ∈ [0, 1]`.
pub fn min_jerk(u: f64) -> (f64, f64, f64) {
    let u = u.clamp(0.0, 1.0);
    let (u2, u3) = (u * u, u * u * u);
    (
        u3 * (10.0 - 15.0 * u + 6.0 * u2),
        30.0 * u2 * (1.0 - u).powi(2),
        60.0 * u * (1.0 - 3.0 * u + 2.0 * u2),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// Trial duration, s.
    pub duration: f64,
    /// Flexion–extension cycles per trial.
    pub reps: usize,
    pub elbow_offset: f64,
    pub elbow_amplitude: f64,
    pub shoulder_offset: f64,
    pub shoulder_amplitude: f64,
    /// Relative per-trial jitter of the amplitudes (uniform, ±).
    #[serde(default)]
    pub amplitude_jitter: f64,
    /// Relative per-trial jitter of the duration (uniform, ±).
    #[serde(default)]
    pub duration_jitter: f64,
    #[serde(default = "default_rate")]
    pub rate: f64,
}

fn default_rate() -> f64 {
    DEFAULT_ANGLE_RATE
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            duration: 1.0,
            reps: 1,
            elbow_offset: 0.35,
            elbow_amplitude: 1.6,
            shoulder_offset: 0.1,
            shoulder_amplitude: 0.15,
            amplitude_jitter: 0.1,
            duration_jitter: 0.1,
            rate: DEFAULT_ANGLE_RATE,
        }
    }
}

/// Upper limit of plausible elbow flexion, rad.
pub const ELBOW_MAX: f64 = 2.6;

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if !(self.duration > 0.0) || self.reps == 0 || !(self.rate > 0.0) {
            return bad(format!("duration, reps and rate must be positive: {self:?}"));
        }
        if !(0.0..1.0).contains(&self.amplitude_jitter) || !(0.0..1.0).contains(&self.duration_jitter) {
            return bad("jitter must lie in [0, 1)".into());
        }
        let j = 1.0 + self.amplitude_jitter;
        if self.elbow_offset < 0.0 || self.elbow_offset + self.elbow_amplitude * j > ELBOW_MAX || self.elbow_amplitude <= 0.0 {
            return bad(format!(
                "elbow range [{}, {}] outside [0, {ELBOW_MAX}] rad",
                self.elbow_offset,
                self.elbow_offset + self.elbow_amplitude * j
            ));
        }
        if self.shoulder_amplitude.abs() * j > 1.0 {
            return bad("shoulder amplitude above 1 rad".into());
        }
        if (self.duration * (1.0 - self.duration_jitter) * self.rate) < 3.0 {
            return bad("trial shorter than 3 samples".into());
        }
        Ok(())
    }
}

/// Analytic flexion–extension trajectory: each cycle flexes the elbow by
/// the amplitude along a minimum-jerk profile and returns; the shoulder
/// follows the same profile with its own amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlexionProfile {
    pub duration: f64,
    pub reps: usize,
    pub elbow_offset: f64,
    pub elbow_amplitude: f64,
    pub shoulder_offset: f64,
    pub shoulder_amplitude: f64,
}

impl FlexionProfile {
    /// Draws one trial's profile from `cfg` with seeded jitter.
    pub fn sample(cfg: &TrajectoryConfig, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |j: f64| if j > 0.0 { 1.0 + rng.gen_range(-j..j) } else { 1.0 };
        let duration = cfg.duration * jitter(cfg.duration_jitter);
        let elbow_amplitude = cfg.elbow_amplitude * jitter(cfg.amplitude_jitter);
        let shoulder_amplitude = cfg.shoulder_amplitude * jitter(cfg.amplitude_jitter);
        Self {
            duration,
            reps: cfg.reps,
            elbow_offset: cfg.elbow_offset,
            elbow_amplitude,
            shoulder_offset: cfg.shoulder_offset,
            shoulder_amplitude,
        }
    }

    /// Normalized displacement (0 → 1 → 0 per cycle) and its time derivatives.
    fn shape(&self, t: f64) -> (f64, f64, f64) {
        let cycle = self.duration / self.reps as f64;
        let half = cycle / 2.0;
        let tc = t.clamp(0.0, self.duration);
        let within = (tc - cycle * (tc / cycle).floor().min(self.reps as f64 - 1.0)).min(cycle);
        if within <= half {
            let (s, ds, dds) = min_jerk(within / half);
            (s, ds / half, dds / (half * half))
        } else {
            let (s, ds, dds) = min_jerk((within - half) / half);
            (1.0 - s, -ds / half, -dds / (half * half))
        }
    }

    /// Joint state at time `t` (clamped to the trial).
    pub fn state(&self, t: f64) -> JointState {
        let (s, ds, dds) = self.shape(t);
        JointState {
            q: [
                self.shoulder_offset + self.shoulder_amplitude * s,
                self.elbow_offset + self.elbow_amplitude * s,
            ],
            qd: [self.shoulder_amplitude * ds, self.elbow_amplitude * ds],
            qdd: [self.shoulder_amplitude * dds, self.elbow_amplitude * dds],
        }
    }

    pub fn sample_count(&self, rate: f64) -> usize {
        (self.duration * rate).round() as usize + 1
    }
}

/// Angle trace sampled at `cfg.rate`, as `(t, q)` columns.
pub fn synth_trajectory(cfg: &TrajectoryConfig, seed: u64) -> Result<(Vec<f64>, Vec<[f64; 2]>), DataError> {
    cfg.validate()?;
    let profile = FlexionProfile::sample(cfg, seed);
    let n = profile.sample_count(cfg.rate);
    let t: Vec<f64> = (0..n).map(|i| i as f64 / cfg.rate).collect();
    let q = t.iter().map(|&ti| profile.state(ti).q).collect();
    Ok((t, q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmgSynthConfig {
    pub noise_std: f64,
    pub activation_gain: f64,
    /// Torque that maps to full activation, N·m. Non-positive means "derive
    /// from the heaviest load" when building a dataset.
    #[serde(default)]
    pub mvc_torque: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EmgSynthConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.0,
            activation_gain: 1.0,
            mvc_torque: 0.0,
            seed: 0,
        }
    }
}

/// Relative weights of the two agonist (biceps) and two antagonist
/// (triceps) channels.
pub const CHANNEL_WEIGHTS: [f64; EMG_CHANNELS] = [1.0, 0.85, 1.0, 0.85];

/// Torque-driven envelopes: biceps channels follow positive (flexing) elbow
/// torque, triceps channels follow negative elbow torque, both smoothed by
/// the zero-phase `lowpass`.
pub fn synth_emg(trial: &Trial, cfg: &EmgSynthConfig, lowpass: &FilterSpec) -> Result<Vec<[f64; EMG_CHANNELS]>, DataError> {
    let tau = trial.torques()?;
    if !(cfg.noise_std >= 0.0) || !(cfg.activation_gain > 0.0) || !(cfg.mvc_torque > 0.0) {
        return Err(DataError::Config(format!(
            "synth_emg needs noise_std >= 0, activation_gain > 0, mvc_torque > 0: {cfg:?}"
        )));
    }
    let flex: Vec<f64> = tau.iter().map(|t| t[1].max(0.0)).collect();
    let ext: Vec<f64> = tau.iter().map(|t| (-t[1]).max(0.0)).collect();
    let series = UniformSeries::new(trial.rate, trial.t[0], vec![flex, ext])?;
    let env = signals::butterworth_filter(&series, lowpass, true)?;

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = cfg.activation_gain / cfg.mvc_torque;
    let out = (0..trial.len())
        .map(|i| {
            let mut frame = [0.0; EMG_CHANNELS];
            for (c, slot) in frame.iter_mut().enumerate() {
                let source = if c < 2 { env.channel(0)[i] } else { env.channel(1)[i] };
                let clean = (CHANNEL_WEIGHTS[c] * scale * source.max(0.0)).clamp(0.0, 1.0);
                let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                *slot = (clean + n).clamp(0.0, EMG_MAX);
            }
            frame
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub loads: Vec<f64>,
    pub runs_per_load: usize,
    pub trials_per_run: usize,
    pub trajectory: TrajectoryConfig,
    pub emg: EmgSynthConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            loads: vec![0.0, 2.0, 4.0],
            runs_per_load: 4,
            trials_per_run: 10,
            trajectory: TrajectoryConfig::default(),
            emg: EmgSynthConfig::default(),
            seed: 2024,
        }
    }
}

impl SynthConfig {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            schema_version: SCHEMA_VERSION,
            loads: self.loads.clone(),
            angle_rate: self.trajectory.rate,
            runs_per_load: self.runs_per_load,
            trials_per_run: self.trials_per_run,
            seed: Some(self.seed),
            synthetic: Some(self.clone()),
        }
    }
}

/// Elbow gravity torque of `model` carrying the heaviest of `loads` with
/// the forearm horizontal; used as the synthetic MVC reference.
pub fn reference_elbow_torque(model: &LimbModel, loads: &[f64]) -> f64 {
    let heaviest = loads.iter().copied().fold(0.0, f64::max);
    model
        .with_load(heaviest)
        .gravity_vector([0.0, std::f64::consts::FRAC_PI_2])[1]
}

/// Signal-processing settings shared by ingestion and synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Processing {
    pub envelope: EnvelopeConfig,
    pub smoothing: GaussianConfig,
}

/// Builds a full run set: trajectory → benchmark torque → EMG, per trial.
pub fn make_synthetic_dataset(model: &LimbModel, cfg: &SynthConfig, processing: &Processing) -> Result<RunSet, DataError> {
    model.validate()?;
    cfg.trajectory.validate()?;
    if cfg.loads.is_empty() || cfg.runs_per_load == 0 || cfg.trials_per_run == 0 {
        return Err(DataError::Config("loads, runs_per_load and trials_per_run must be nonempty".into()));
    }
    if cfg.loads.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(DataError::Config(format!("loads must be >= 0: {:?}", cfg.loads)));
    }
    let mut emg_cfg = cfg.emg;
    if emg_cfg.mvc_torque <= 0.0 {
        emg_cfg.mvc_torque = reference_elbow_torque(model, &cfg.loads);
    }
    let mut runs = Vec::new();
    for &load in &cfg.loads {
        for run_idx in 0..cfg.runs_per_load {
            let mut trials = Vec::with_capacity(cfg.trials_per_run);
            for k in 0..cfg.trials_per_run {
                let trial_seed = mix_seed(cfg.seed, &[load.to_bits(), run_idx as u64, k as u64]);
                let (t, q) = synth_trajectory(&cfg.trajectory, trial_seed)?;
                let n = t.len();
                let bare = Trial {
                    load_kg: load,
                    rate: cfg.trajectory.rate,
                    t,
                    emg: vec![[0.0; EMG_CHANNELS]; n],
                    q,
                    derived: None,
                };
                let mut trial = benchmark_torque(&bare, model, &processing.smoothing)?;
                let emg_seed = EmgSynthConfig {
                    seed: mix_seed(trial_seed, &[emg_cfg.seed]),
                    ..emg_cfg
                };
                trial.emg = synth_emg(&trial, &emg_seed, &processing.envelope.lowpass())?;
                trial.validate()?;
                trials.push(trial);
            }
            runs.push(Run {
                load_kg: load,
                index: run_idx,
                trials,
            });
        }
    }
    Ok(RunSet { runs })
}

/// Groups trials by load, preserving order.
pub fn by_load<'a>(trials: impl Iterator<Item = &'a Trial>) -> BTreeMap<u64, Vec<&'a Trial>> {
    let mut map: BTreeMap<u64, Vec<&Trial>> = BTreeMap::new();
    for t in trials {
        map.entry(t.load_kg.to_bits()).or_default().push(t);
    }
    map
}
