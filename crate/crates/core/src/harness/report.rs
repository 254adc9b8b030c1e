use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentOutcome, TrialOutcome};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub power_mean: Option<f64>,
    pub power_se: Option<f64>,
    pub fdr_mean: Option<f64>,
    pub fdr_se: Option<f64>,
    pub rmse_mean: Option<f64>,
    pub rmse_se: Option<f64>,
    pub lambda_mean: Option<f64>,
    pub trials_ok: usize,
    pub trials_failed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub spec_version: String,
    pub trials: usize,
    pub base_seed: u64,
    pub note: String,
    /// Keyed by method label, in configuration order.
    pub methods: Vec<(String, MethodSummary)>,
}

impl Summary {
    pub fn method(&self, label: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|(l, _)| l == label).map(|(_, s)| s)
    }
}

fn mean_se(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some((var / n as f64).sqrt()))
}

/// Mean and standard error of each metric per method over successful trials.
pub fn summarize(cfg: &ExperimentConfig, trials: &[TrialOutcome]) -> Summary {
    let methods = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let records: Vec<_> = trials.iter().map(|t| &t.methods[i].record).collect();
            let ok: Vec<_> = records.iter().filter(|r| r.ok()).collect();
            let pick = |f: &dyn Fn(&super::TrialRecord) -> Option<f64>| -> Vec<f64> {
                ok.iter().filter_map(|r| f(r)).collect()
            };
            let (power_mean, power_se) = mean_se(&pick(&|r| r.power));
            let (fdr_mean, fdr_se) = mean_se(&pick(&|r| r.fdp));
            let (rmse_mean, rmse_se) = mean_se(&pick(&|r| r.rmse));
            let (lambda_mean, _) = mean_se(&pick(&|r| r.lambda));
            (
                spec.label(),
                MethodSummary {
                    power_mean,
                    power_se,
                    fdr_mean,
                    fdr_se,
                    rmse_mean,
                    rmse_se,
                    lambda_mean,
                    trials_ok: ok.len(),
                    trials_failed: records.iter().filter(|r| !r.ok()).map(|r| r.trial).collect(),
                },
            )
        })
        .collect();
    Summary {
        spec_version: cfg.spec_version.clone(),
        trials: cfg.trials,
        base_seed: cfg.base_seed,
        note: format!(
            "{} trials per method; standard errors shrink as 1/sqrt(trials), raise `trials` for tighter estimates",
            cfg.trials
        ),
        methods,
    }
}

/// One row of `qq_data.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqRow {
    pub method: String,
    pub group: String,
    pub rank: usize,
    pub pvalue: f64,
    pub uniform_quantile: f64,
}

/// P-values pooled over trials, split into null and non-null groups per
/// method and sorted, each paired with the uniform quantile `rank / (count + 1)`.
pub fn qq_rows(outcome: &ExperimentOutcome) -> Vec<QqRow> {
    let mut groups: BTreeMap<(usize, String, &'static str), Vec<f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for t in &outcome.trials {
        let Some(truth) = &t.truth else { continue };
        for (i, m) in t.methods.iter().enumerate() {
            if order.len() <= i {
                order.push(m.record.method.clone());
            }
            let Some(rep) = &m.report else { continue };
            for (c, &j) in rep.features.iter().enumerate() {
                let g = if truth.contains(&j) { "nonnull" } else { "null" };
                groups.entry((i, m.record.method.clone(), g)).or_default().push(rep.pvalues[c]);
            }
        }
    }
    let mut rows = Vec::new();
    for ((_, method, group), mut p) in groups {
        p.sort_by(f64::total_cmp);
        let n = p.len();
        for (r, v) in p.into_iter().enumerate() {
            rows.push(QqRow {
                method: method.clone(),
                group: group.to_string(),
                rank: r + 1,
                pvalue: v,
                uniform_quantile: (r + 1) as f64 / (n + 1) as f64,
            });
        }
    }
    rows
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `trials.csv`, `summary.json`, one `pvalues_<trial>_<method>.csv`
/// per successful fit, `qq_data.csv`, and `rd_trajectory.csv` when any
/// method traced its training.
pub fn emit_reports(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    if outcome.trials.is_empty() {
        return Err(Error::Config("no trial records to write".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join("trials.csv"), outcome.records())?;
    let summary = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&SummaryDoc::from(&outcome.summary))
        .map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&summary, text + "\n").map_err(|e| Error::io(&summary, e))?;
    for t in &outcome.trials {
        for m in &t.methods {
            if let Some(rep) = &m.report {
                rep.write_csv(&dir.join(&m.record.pvalues_file))?;
            }
        }
    }
    write_csv(&dir.join("qq_data.csv"), qq_rows(outcome))?;
    let traj: Vec<_> = outcome
        .trials
        .iter()
        .flat_map(|t| t.methods.iter().flat_map(|m| m.trajectory.iter()))
        .collect();
    if !traj.is_empty() {
        write_csv(&dir.join("rd_trajectory.csv"), traj)?;
    }
    Ok(())
}

/// `summary.json` layout: methods as an object keyed by label.
#[derive(Serialize)]
struct SummaryDoc<'a> {
    spec_version: &'a str,
    trials: usize,
    base_seed: u64,
    note: &'a str,
    methods: serde_json::Map<String, serde_json::Value>,
}

impl<'a> From<&'a Summary> for SummaryDoc<'a> {
    fn from(s: &'a Summary) -> Self {
        let methods = s
            .methods
            .iter()
            .map(|(l, m)| (l.clone(), serde_json::to_value(m).expect("summary serializes")))
            .collect();
        Self {
            spec_version: &s.spec_version,
            trials: s.trials,
            base_seed: s.base_seed,
            note: &s.note,
            methods,
        }
    }
}
