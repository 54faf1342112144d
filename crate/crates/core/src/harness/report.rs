use std::fs;
use std::path::Path;

use super::metrics::AccuracyMatrix;
use super::plot::learning_curve_svg;
use crate::error::{DpatError, Result};
use crate::trainer::EpochRecord;

pub const METRICS_FILE: &str = "metrics.csv";
pub const R_FILE: &str = "r_matrix.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const PLOT_FILE: &str = "learning_curve.svg";
pub const FINGERPRINT_FILE: &str = "fingerprint.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const TASKS_FILE: &str = "tasks.csv";
pub const PARTIAL_FILE: &str = "PARTIAL";

/// Outcome of a continual run.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub fingerprint: String,
    pub config_toml: String,
    pub r: AccuracyMatrix,
    /// Final average accuracy; `None` until every task ran.
    pub acc: Option<f64>,
    /// Backward forgetting; `None` for single-task streams or partial runs.
    pub bwf: Option<f64>,
    /// Fraction of final-row test clips whose selected task is their own.
    pub matching_accuracy: Option<f64>,
    /// Mean accuracy over seen tasks after each task.
    pub curve: Vec<f64>,
    pub task_classes: Vec<Vec<usize>>,
    pub log: Vec<EpochRecord>,
    pub complete: bool,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "undefined".into())
}

impl Report {
    pub fn metrics_csv(&self) -> String {
        format!(
            "metric,value\nacc,{}\nbwf,{}\nmatching_accuracy,{}\ntasks,{}\ncomplete,{}\n",
            opt(self.acc),
            opt(self.bwf),
            opt(self.matching_accuracy),
            self.r.tasks(),
            self.complete
        )
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("task,mean_accuracy\n");
        for (i, v) in self.curve.iter().enumerate() {
            s.push_str(&format!("{},{v}\n", i + 1));
        }
        s
    }
}

/// Writes every report file into `dir`. A `PARTIAL` marker holding
/// `failure` is added when the run is incomplete.
pub fn write_report(dir: &Path, report: &Report, failure: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(METRICS_FILE), report.metrics_csv())?;
    fs::write(dir.join(R_FILE), report.r.to_csv())?;
    fs::write(dir.join(CURVE_FILE), report.curve_csv())?;
    let label = short(&report.fingerprint);
    fs::write(dir.join(PLOT_FILE), learning_curve_svg(&[(label, report.curve.clone())]))?;
    fs::write(dir.join(FINGERPRINT_FILE), format!("{}\n", report.fingerprint))?;
    fs::write(dir.join(CONFIG_FILE), &report.config_toml)?;
    let mut tasks = String::from("task,classes\n");
    for (i, c) in report.task_classes.iter().enumerate() {
        let ids: Vec<String> = c.iter().map(usize::to_string).collect();
        tasks.push_str(&format!("{},{}\n", i + 1, ids.join(" ")));
    }
    fs::write(dir.join(TASKS_FILE), tasks)?;
    let mut log = String::new();
    for rec in &report.log {
        log.push_str(&serde_json::to_string(rec).map_err(|e| DpatError::Data(e.to_string()))?);
        log.push('\n');
    }
    fs::write(dir.join(LOG_FILE), log)?;
    let marker = dir.join(PARTIAL_FILE);
    if !report.complete || failure.is_some() {
        fs::write(marker, format!("{}\n", failure.unwrap_or("run did not finish")))?;
    } else if marker.exists() {
        fs::remove_file(marker)?;
    }
    Ok(())
}

/// First 12 hex digits of a fingerprint.
pub fn short(fingerprint: &str) -> String {
    fingerprint.chars().take(12).collect()
}

/// Reads `curve.csv` from a run directory.
pub fn read_curve(dir: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(dir.join(CURVE_FILE))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v = l
                .split(',')
                .nth(1)
                .ok_or_else(|| DpatError::Data(format!("bad curve line {l:?}")))?;
            v.trim()
                .parse()
                .map_err(|e| DpatError::Data(format!("bad curve value {v:?}: {e}")))
        })
        .collect()
}

pub fn read_fingerprint(dir: &Path) -> Result<String> {
    Ok(fs::read_to_string(dir.join(FINGERPRINT_FILE))?.trim().to_string())
}

/// Overlays the learning curves of several run directories, labelled by
/// their config fingerprints.
pub fn overlay_runs(dirs: &[&Path]) -> Result<String> {
    let series = dirs
        .iter()
        .map(|d| Ok((short(&read_fingerprint(d)?), read_curve(d)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(learning_curve_svg(&series))
}
