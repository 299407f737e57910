//! Prediction metrics, per-load aggregation and trace export.
//!
//! Metrics are computed per test trial in normalized angle space (RMSE in
//! radians is reported alongside) and aggregated as mean ± sample standard
//! deviation across trials.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::data::{format_load, RunSet, Trial, EMG_CHANNELS};
use crate::network::{MlpParams, NetworkError, NormSpec};

pub const JOINT_NAMES: [&str; 2] = ["shoulder", "elbow"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("constant input: correlation undefined (zero variance)")]
    ConstantInput,
    #[error("{joint} R undefined on load {load_kg} kg, run {run}, trial {trial}: constant series")]
    ConstantTrial {
        joint: &'static str,
        load_kg: f64,
        run: usize,
        trial: usize,
    },
    #[error("empty test set")]
    EmptyTestSet,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch(y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    let ss: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / y.len() as f64).sqrt())
}

/// Within this distance of ±1 the coefficient is treated as exact.
const UNIT_SNAP: f64 = 1e-14;

/// Pearson correlation. Results are clamped to `[-1, 1]` and values within
/// rounding distance of ±1 snap to ±1.
pub fn pearson_r(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch(y.len(), yhat.len()));
    }
    if y.len() < 2 {
        return Err(EvalError::Empty);
    }
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mh = yhat.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        let (da, db) = (a - my, b - mh);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ConstantInput);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(if 1.0 - r.abs() <= UNIT_SNAP { r.signum() } else { r })
}

/// Mean and sample standard deviation (n − 1; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Network predictions for a trial, normalized, `[shoulder, elbow]` per sample.
pub fn predict_normalized(params: &MlpParams, norm: &NormSpec, trial: &Trial) -> Result<Vec<[f64; 2]>, EvalError> {
    let n = trial.len();
    let mut x = Array2::zeros((EMG_CHANNELS + 1, n));
    for i in 0..n {
        for c in 0..EMG_CHANNELS {
            x[[c, i]] = norm.normalize_emg(c, trial.emg[i][c]);
        }
        x[[EMG_CHANNELS, i]] = trial.normalized_time(i);
    }
    let y = params.forward_batch(&x)?;
    Ok((0..n).map(|i| [y[[0, i]], y[[1, i]]]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialMetrics {
    pub load_kg: f64,
    pub run: usize,
    pub trial: usize,
    pub joint: &'static str,
    pub rmse: f64,
    pub rmse_rad: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub load_kg: f64,
    pub joint: &'static str,
    pub n_trials: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub rmse_rad_mean: f64,
    pub rmse_rad_std: f64,
    pub r_mean: f64,
    pub r_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tag: String,
    /// What the ± spread is taken over.
    pub spread: &'static str,
    pub trials: Vec<TrialMetrics>,
    pub cells: Vec<CellSummary>,
}

impl EvalReport {
    pub fn cell(&self, load_kg: f64, joint: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.load_kg == load_kg && c.joint == joint)
    }

    pub fn mean_r(&self) -> f64 {
        self.cells.iter().map(|c| c.r_mean).sum::<f64>() / self.cells.len() as f64
    }

    pub fn trials_csv(&self) -> String {
        let mut out = String::from("model,load_kg,run,trial,joint,rmse,rmse_rad,r\n");
        for t in &self.trials {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.tag, t.load_kg, t.run, t.trial, t.joint, t.rmse, t.rmse_rad, t.r
            );
        }
        out
    }
}

/// Per-trial metrics on every test trial and their per-(load, joint)
/// summaries.
pub fn evaluate(params: &MlpParams, test: &RunSet, norm: &NormSpec, tag: &str) -> Result<EvalReport, EvalError> {
    if test.trial_count() == 0 {
        return Err(EvalError::EmptyTestSet);
    }
    let mut trials = Vec::new();
    let mut cells = Vec::new();
    for load in test.loads() {
        let mut per_joint: [Vec<&TrialMetrics>; 2] = [Vec::new(), Vec::new()];
        let start = trials.len();
        for run in test.runs_for(load) {
            for (k, trial) in run.trials.iter().enumerate() {
                let pred = predict_normalized(params, norm, trial)?;
                for (j, joint) in JOINT_NAMES.iter().enumerate() {
                    let truth: Vec<f64> = trial.q.iter().map(|q| norm.normalize_angle(j, q[j])).collect();
                    let yhat: Vec<f64> = pred.iter().map(|p| p[j]).collect();
                    let truth_rad: Vec<f64> = trial.q.iter().map(|q| q[j]).collect();
                    let yhat_rad: Vec<f64> = yhat.iter().map(|v| norm.denormalize_angle(j, *v)).collect();
                    let r = pearson_r(&truth, &yhat).map_err(|e| match e {
                        EvalError::ConstantInput => EvalError::ConstantTrial {
                            joint,
                            load_kg: load,
                            run: run.index,
                            trial: k,
                        },
                        other => other,
                    })?;
                    trials.push(TrialMetrics {
                        load_kg: load,
                        run: run.index,
                        trial: k,
                        joint,
                        rmse: rmse(&truth, &yhat)?,
                        rmse_rad: rmse(&truth_rad, &yhat_rad)?,
                        r,
                    });
                }
            }
        }
        for t in &trials[start..] {
            let j = JOINT_NAMES.iter().position(|n| *n == t.joint).expect("known joint");
            per_joint[j].push(t);
        }
        for (j, rows) in per_joint.iter().enumerate() {
            let pick = |f: fn(&TrialMetrics) -> f64| mean_std(&rows.iter().map(|t| f(t)).collect::<Vec<_>>());
            let (rmse_mean, rmse_std) = pick(|t| t.rmse);
            let (rmse_rad_mean, rmse_rad_std) = pick(|t| t.rmse_rad);
            let (r_mean, r_std) = pick(|t| t.r);
            cells.push(CellSummary {
                load_kg: load,
                joint: JOINT_NAMES[j],
                n_trials: rows.len(),
                rmse_mean,
                rmse_std,
                rmse_rad_mean,
                rmse_rad_std,
                r_mean,
                r_std,
            });
        }
    }
    Ok(EvalReport {
        tag: tag.to_string(),
        spread: "sample standard deviation across test trials",
        trials,
        cells,
    })
}

/// Table layout: one row per (dataset, joint, metric), one column per
/// (load, model), cells formatted `mean ± std`.
pub fn summary_table(dataset: &str, reports: &[EvalReport]) -> String {
    let mut loads: Vec<f64> = reports.iter().flat_map(|r| r.cells.iter().map(|c| c.load_kg)).collect();
    loads.sort_by(f64::total_cmp);
    loads.dedup();
    let mut out = String::from("# mean ± sample std across test trials\ndataset,joint,metric");
    for load in &loads {
        for r in reports {
            let _ = write!(out, ",{}kg_{}", format_load(*load), r.tag);
        }
    }
    out.push('\n');
    type Pick = fn(&CellSummary) -> (f64, f64);
    let metrics: [(&str, Pick); 3] = [
        ("R", |c| (c.r_mean, c.r_std)),
        ("RMSE", |c| (c.rmse_mean, c.rmse_std)),
        ("RMSE_rad", |c| (c.rmse_rad_mean, c.rmse_rad_std)),
    ];
    for joint in JOINT_NAMES {
        for (name, pick) in metrics {
            let _ = write!(out, "{dataset},{joint},{name}");
            for load in &loads {
                for r in reports {
                    match r.cell(*load, joint) {
                        Some(c) => {
                            let (m, s) = pick(c);
                            let _ = write!(out, ",{m:.4} ± {s:.4}");
                        }
                        None => out.push(','),
                    }
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Trace CSV `t,q_true_shoulder,q_pred_shoulder,q_true_elbow,q_pred_elbow`
/// in normalized angle units.
pub fn trace_csv(params: &MlpParams, trial: &Trial, norm: &NormSpec) -> Result<String, EvalError> {
    let pred = predict_normalized(params, norm, trial)?;
    let mut out = String::from("t,q_true_shoulder,q_pred_shoulder,q_true_elbow,q_pred_elbow\n");
    for (i, p) in pred.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            trial.t[i],
            norm.normalize_angle(0, trial.q[i][0]),
            p[0],
            norm.normalize_angle(1, trial.q[i][1]),
            p[1]
        );
    }
    Ok(out)
}

pub fn export_traces(params: &MlpParams, trial: &Trial, norm: &NormSpec, out: &Path) -> Result<(), EvalError> {
    let text = trace_csv(params, trial, norm)?;
    std::fs::write(out, text).map_err(|source| EvalError::Io {
        path: out.display().to_string(),
        source,
    })
}
