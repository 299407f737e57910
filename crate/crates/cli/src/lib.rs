//! Batch commands over the `emgpinn` library. Every command writes its
//! resolved configuration next to its outputs.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use emgpinn::autodiff::Primitive;
use emgpinn::data::{self, benchmark_torque, load_trials, make_synthetic_dataset, save_runset, split, DataError, Trial};
use emgpinn::dynamics::DynamicsError;
use emgpinn::eval::{self, EvalError, EvalReport};
use emgpinn::gradcheck::{self, CheckResult};
use emgpinn::network::Checkpoint;
use emgpinn::training::{self, TrainError, TrainMode, TrainOptions};
use thiserror::Error;

pub use config::Config;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Dynamics(d) => d.into(),
            DataError::Config(m) => CliError::Config(m),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::SingularMassMatrix { .. } | DynamicsError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::Autodiff(_) => CliError::Numeric(e.to_string()),
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Data(d) => d.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::ConstantInput | EvalError::ConstantTrial { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Generates the synthetic dataset described by `cfg.data.synth` into `out`.
pub fn cmd_synth(cfg: &Config, out: &Path) -> Result<data::LoadReport, CliError> {
    let model = cfg.model.limb_model()?;
    let set = make_synthetic_dataset(&model, &cfg.data.synth, &cfg.signals)?;
    save_runset(out, &set, &cfg.data.synth.manifest())?;
    cfg.write_snapshot(out)?;
    let report = data::LoadReport {
        runs: set.runs.len(),
        trials: set.trial_count(),
        rows: set.sample_count(),
    };
    log::info!("wrote {} runs, {} trials, {} rows to {}", report.runs, report.trials, report.rows, out.display());
    Ok(report)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainSummary {
    pub mode: &'static str,
    pub epochs: usize,
    pub final_j: f64,
    pub best_val_j: f64,
    pub alphas: Vec<(f64, f64)>,
    pub config_hash: String,
}

/// Trains on the train/val runs of `data_dir` and writes `checkpoint.json`
/// (best validation loss in the final load block), `checkpoint_final.json`,
/// `train_log.csv` and `train_summary.json` into `out`.
pub fn cmd_train(cfg: &Config, data_dir: &Path, mode: TrainMode, out: &Path) -> Result<TrainSummary, CliError> {
    let model = cfg.model.limb_model()?;
    let (runs, _, loaded) = load_trials(data_dir)?;
    log::info!("loaded {} runs / {} trials / {} rows", loaded.runs, loaded.trials, loaded.rows);
    let parts = split(&runs, &cfg.data.split, cfg.data.split_seed)?;
    cfg.write_snapshot(out)?;

    let log_path = out.join("train_log.csv");
    let file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log_file = std::io::BufWriter::new(file);
    writeln!(log_file, "{}", training::EpochLog::CSV_HEADER).map_err(|e| CliError::io(&log_path, e))?;
    let mut write_err = None;
    let outcome = training::train(&parts.train, &parts.val, &model, &cfg.training, mode, TrainOptions::default(), |row| {
        if let Err(e) = writeln!(log_file, "{}", row.csv_row()) {
            write_err.get_or_insert(e);
        }
        if row.epoch_in_load % 100 == 0 || row.epoch_in_load + 1 == cfg.training.epochs_per_load {
            log::info!(
                "epoch {:>5} load {} kg: J {:.4e} (L_q {:.4e}, L_tau {:.4e}) val {:.4e}",
                row.epoch,
                row.load_kg,
                row.j_total,
                row.l_q,
                row.l_tau,
                row.val_j
            );
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(&log_path, e));
    }
    log_file.flush().map_err(|e| CliError::io(&log_path, e))?;

    let hash = cfg.hash();
    let tag = mode.name();
    write_file(&out.join("checkpoint.json"), &Checkpoint::new(&outcome.best_params, &outcome.norm, &hash, tag).to_json())?;
    write_file(&out.join("checkpoint_final.json"), &Checkpoint::new(&outcome.final_params, &outcome.norm, &hash, tag).to_json())?;
    let summary = TrainSummary {
        mode: tag,
        epochs: outcome.log.len(),
        final_j: outcome.log.last().map_or(f64::NAN, |r| r.j_total),
        best_val_j: outcome.best_val,
        alphas: outcome.alphas,
        config_hash: hash,
    };
    write_file(&out.join("train_summary.json"), &to_json(&summary))?;
    Ok(summary)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))?;
    Checkpoint::from_json(&text).map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))
}

/// Evaluates each checkpoint on the test runs of `data_dir`; writes
/// `report.csv` (loads × models table), `report.json`, `trials.csv` and,
/// when enabled, per-trial traces under `traces/<tag>/`.
pub fn cmd_eval(cfg: &Config, checkpoints: &[PathBuf], data_dir: &Path, out: &Path) -> Result<Vec<EvalReport>, CliError> {
    if checkpoints.is_empty() {
        return Err(CliError::Config("at least one --checkpoint is required".into()));
    }
    let loaded: Vec<Checkpoint> = checkpoints.iter().map(|p| read_checkpoint(p)).collect::<Result<_, _>>()?;
    let (runs, _, _) = load_trials(data_dir)?;
    let test = split(&runs, &cfg.data.split, cfg.data.split_seed)?.test;
    cfg.write_snapshot(out)?;

    let mut reports = Vec::new();
    for (i, ck) in loaded.iter().enumerate() {
        let params = ck.mlp().map_err(|e| CliError::Config(e.to_string()))?;
        let mut tag = ck.tag.clone();
        if loaded[..i].iter().any(|o| o.tag == ck.tag) {
            tag = format!("{tag}{i}");
        }
        let report = eval::evaluate(&params, &test, &ck.norm, &tag)?;
        if cfg.eval.traces {
            for run in &test.runs {
                for (k, trial) in run.trials.iter().enumerate() {
                    let path = out.join("traces").join(&tag).join(format!("{}_trial_{k}.csv", run.dir_name()));
                    write_file(&path, &eval::trace_csv(&params, trial, &ck.norm)?)?;
                }
            }
        }
        reports.push(report);
    }
    write_file(&out.join("report.csv"), &eval::summary_table(&cfg.eval.dataset_name, &reports))?;
    write_file(&out.join("report.json"), &to_json(&reports))?;
    let mut trials = String::new();
    for (i, r) in reports.iter().enumerate() {
        let csv = r.trials_csv();
        trials.push_str(if i == 0 { &csv } else { csv.split_once('\n').map_or("", |x| x.1) });
    }
    write_file(&out.join("trials.csv"), &trials)?;
    Ok(reports)
}

/// Appends velocities, accelerations and benchmark torques to one trial CSV.
pub fn cmd_invdyn(cfg: &Config, trial_csv: &Path, load_kg: f64, rate: Option<f64>, out_csv: &Path) -> Result<Trial, CliError> {
    let model = cfg.model.limb_model()?;
    let trial = Trial::load(trial_csv, load_kg, rate)?;
    let with_tau = benchmark_torque(&trial, &model, &cfg.signals.smoothing)?;
    if let Some(dir) = out_csv.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        cfg.write_snapshot(dir)?;
    }
    with_tau.save(out_csv)?;
    Ok(with_tau)
}

/// Runs every gradient check. Only setup problems are errors here; see
/// [`gradcheck_verdict`] for the pass/fail decision.
pub fn cmd_gradcheck(cfg: &Config, seed: u64, draws: usize, fault: Option<Primitive>, out: Option<&Path>) -> Result<Vec<CheckResult>, CliError> {
    let model = cfg.model.limb_model()?;
    let results = gradcheck::run_all(&model, draws, seed, fault);
    if let Some(dir) = out {
        cfg.write_snapshot(dir)?;
        write_file(&dir.join("gradcheck.json"), &to_json(&results))?;
    }
    Ok(results)
}

/// Numeric failure naming every failing check.
pub fn gradcheck_verdict(results: &[CheckResult]) -> Result<(), CliError> {
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} (max rel error {:.3e})", r.name, r.max_rel_error))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

/// One line per check: `PASS|FAIL  name  max_rel_error`.
pub fn format_checks(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{}  {:<60} max_rel_error={:.3e} draws={}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.draws
        ));
    }
    s
}
