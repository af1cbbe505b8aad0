//! Run directories: config echo, measurement log, trajectory, images and
//! metrics, plus replay from the log alone.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::config::ExperimentConfig;
use crate::experiment::run::{execute, predictor_for, summarize, RunRecord, Scenario};
use crate::forward::Measurement;
use crate::io::write_image;

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "measurements.jsonl";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const METRICS_FILE: &str = "metrics.csv";

/// One line of the measurement log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Acquisition step, starting at 0 with the warm-up steps.
    pub step: usize,
    pub scored: bool,
    pub index: usize,
    pub angle: f64,
    pub intensity: f64,
    pub counts: Vec<u64>,
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_log(path: &Path, scenario: &Scenario) -> Result<()> {
    let mut out = create(path)?;
    let mut index = 0;
    for (step, ms) in scenario.steps.iter().enumerate() {
        for m in ms {
            let rec = LogRecord {
                step,
                scored: step >= scenario.warmup(),
                index,
                angle: m.angle,
                intensity: m.intensity,
                counts: m.counts.clone(),
            };
            let line = serde_json::to_string(&rec).expect("log record serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
            index += 1;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a measurement log back into per-step groups.
pub fn read_log(path: &Path) -> Result<Vec<Vec<Measurement>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut steps: Vec<Vec<Measurement>> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if rec.step != steps.len().saturating_sub(1) && rec.step != steps.len() {
            return Err(Error::format(path, format!("line {}: step {} out of order", n + 1, rec.step)));
        }
        if rec.step == steps.len() {
            steps.push(Vec::new());
        }
        steps[rec.step].push(Measurement::new(rec.angle, rec.intensity, rec.counts)?);
    }
    Ok(steps)
}

pub fn trajectory_header(record: &RunRecord) -> Vec<String> {
    let mut h: Vec<String> = ["step", "index", "views", "beta", "threshold", "increment", "sandwich"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for c in &record.candidates {
        h.push(format!("nll_{c}"));
        h.push(format!("member_{c}"));
    }
    h
}

pub fn write_trajectory(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(trajectory_header(record)).map_err(|e| csv_error(path, e))?;
    let slack = record.slack();
    for r in &record.rows {
        let threshold = r.beta + slack;
        let mut row = vec![
            r.step.to_string(),
            r.index.to_string(),
            r.views.to_string(),
            r.beta.to_string(),
            threshold.to_string(),
            r.increment.to_string(),
            r.sandwich.to_string(),
        ];
        for &l in &r.nll {
            row.push(l.to_string());
            row.push((l <= threshold).to_string());
        }
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Stored trajectory: `beta` and every `nll_*` column by name.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTrajectory {
    pub beta: Vec<f64>,
    pub nll: BTreeMap<String, Vec<f64>>,
}

pub fn read_trajectory(path: &Path) -> Result<StoredTrajectory> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let beta_col = header
        .iter()
        .position(|h| h == "beta")
        .ok_or_else(|| Error::format(path, "missing beta column"))?;
    let nll_cols: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("nll_").map(|n| (i, n.to_owned())))
        .collect();
    let mut out = StoredTrajectory {
        beta: Vec::new(),
        nll: nll_cols.iter().map(|(_, n)| (n.clone(), Vec::new())).collect(),
    };
    let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::format(path, format!("{s}: {e}")));
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        out.beta.push(parse(&rec[beta_col])?);
        for (i, n) in &nll_cols {
            out.nll.get_mut(n).expect("inserted above").push(parse(&rec[*i])?);
        }
    }
    Ok(out)
}

pub fn metrics_header(record: &RunRecord) -> Vec<String> {
    let mut h: Vec<String> = [
        "family", "phantom", "seed", "method", "mode", "final_beta", "threshold", "truth_nll", "gap", "crossed", "psnr",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(record.candidates.iter().map(|c| format!("member_{c}")));
    h
}

pub fn write_metrics(path: &Path, scenario: &Scenario, record: &RunRecord) -> Result<()> {
    let s = summarize(scenario, record)?;
    let c = &scenario.config;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(metrics_header(record)).map_err(|e| csv_error(path, e))?;
    let mut row = vec![
        c.phantom.family.to_string(),
        c.phantom.index.to_string(),
        c.seed.to_string(),
        record.method.clone(),
        format!("{:?}", c.acquisition.mode).to_lowercase(),
        s.final_beta.to_string(),
        s.threshold.to_string(),
        s.truth_nll.to_string(),
        s.gap.to_string(),
        s.crossed.to_string(),
        s.psnr.to_string(),
    ];
    row.extend(s.members.iter().map(|(_, m)| m.to_string()));
    w.write_record(&row).map_err(|e| csv_error(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes every artifact of a run into `dir`.
pub fn write_run(dir: &Path, scenario: &Scenario, record: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = dir.join(CONFIG_FILE);
    fs::write(&cfg, scenario.config.to_toml()).map_err(|e| Error::io(&cfg, e))?;
    write_log(&dir.join(LOG_FILE), scenario)?;
    write_trajectory(&dir.join(TRAJECTORY_FILE), record)?;
    write_metrics(&dir.join(METRICS_FILE), scenario, record)?;
    let prov = |what: &str| {
        let mut p = BTreeMap::new();
        p.insert("content".to_owned(), what.to_owned());
        p.insert("predictor".to_owned(), record.method.clone());
        p.insert("step".to_owned(), record.rows.len().to_string());
        p.insert("config_hash".to_owned(), config_hash(&scenario.config));
        p
    };
    write_image(&dir.join("truth.f32"), &scenario.truth, prov("truth"))?;
    write_image(&dir.join("recon.f32"), &record.final_estimate(), prov("reconstruction"))?;
    Ok(())
}

/// FNV-1a of the canonical TOML echo.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in config.to_toml().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Largest deviations between a replayed and a stored trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub steps: usize,
    pub max_beta_error: f64,
    pub max_nll_error: f64,
}

impl ReplayReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_beta_error <= tol && self.max_nll_error <= tol
    }
}

/// Recomputes β and every candidate NLL from the config and measurement log
/// of a run directory and compares them with the stored trajectory.
pub fn replay(dir: &Path) -> Result<ReplayReport> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let steps = read_log(&dir.join(LOG_FILE))?;
    let stored = read_trajectory(&dir.join(TRAJECTORY_FILE))?;
    let scenario = Scenario::from_log(&config, steps)?;
    let mut predictor = predictor_for(&config)?;
    let record = execute(&scenario, predictor.as_mut(), None)?;
    if record.rows.len() != stored.beta.len() {
        return Err(Error::format(
            dir.join(TRAJECTORY_FILE),
            format!("{} stored steps, replay produced {}", stored.beta.len(), record.rows.len()),
        ));
    }
    let mut max_beta: f64 = 0.0;
    let mut max_nll: f64 = 0.0;
    for (t, row) in record.rows.iter().enumerate() {
        max_beta = max_beta.max((row.beta - stored.beta[t]).abs());
        for (c, name) in record.candidates.iter().enumerate() {
            let col = stored
                .nll
                .get(name)
                .ok_or_else(|| Error::format(dir.join(TRAJECTORY_FILE), format!("missing nll_{name}")))?;
            max_nll = max_nll.max((row.nll[c] - col[t]).abs());
        }
    }
    Ok(ReplayReport {
        steps: record.rows.len(),
        max_beta_error: max_beta,
        max_nll_error: max_nll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::{PredictorConfig, PredictorKind};
    use crate::experiment::run::run;
    use crate::phantoms::PhantomFamily;

    fn cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::sparse(PhantomFamily::Manhattan, 16, 1e5);
        c.acquisition.angles = 10;
        c.acquisition.warmup = 2;
        c.predictor = PredictorConfig::of_kind(PredictorKind::Mle);
        c.predictor.optimizer.steps = 15;
        c.predictor.refit_steps = Some(5);
        c
    }

    #[test]
    fn byte_identical_and_replayable() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg();
        for name in ["a", "b"] {
            let (s, r) = run(&c).unwrap();
            write_run(&dir.path().join(name), &s, &r).unwrap();
        }
        for f in [CONFIG_FILE, LOG_FILE, TRAJECTORY_FILE, METRICS_FILE, "truth.f32", "recon.f32", "recon.json"] {
            let a = fs::read(dir.path().join("a").join(f)).unwrap();
            let b = fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f} differs");
        }
        let rep = replay(&dir.path().join("a")).unwrap();
        assert_eq!(rep.steps, 8);
        assert!(rep.within(1e-9), "{rep:?}");
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = Scenario::simulate(&cfg()).unwrap();
        let p = dir.path().join(LOG_FILE);
        write_log(&p, &s).unwrap();
        assert_eq!(read_log(&p).unwrap(), s.steps);
    }

    #[test]
    fn replay_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let (s, r) = run(&cfg()).unwrap();
        write_run(dir.path(), &s, &r).unwrap();
        let p = dir.path().join(LOG_FILE);
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
        let mut rec: LogRecord = serde_json::from_str(&lines[5]).unwrap();
        rec.counts[3] += 50;
        lines[5] = serde_json::to_string(&rec).unwrap();
        fs::write(&p, lines.join("\n")).unwrap();
        assert!(!replay(dir.path()).unwrap().within(1e-9));
    }
}
