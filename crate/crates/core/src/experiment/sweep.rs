//! Grid sweeps over families, phantoms, intensities, seeds and predictors,
//! aggregated into per-figure tables.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::artifacts::{csv_error, write_run};
use crate::experiment::config::{ExperimentConfig, PredictorConfig, SCHEMA_VERSION};
use crate::experiment::hallucination::hallucination_run;
use crate::experiment::intervals::compute_intervals;
use crate::experiment::run::{derive_seed, execute, rotation_name, summarize, Scenario};
use crate::forward::AcquisitionMode;
use crate::metrics::{calibration_curve, MeanSem, Rate, TruthTrajectory};
use crate::phantoms::PhantomFamily;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub schema_version: u32,
    pub base: ExperimentConfig,
    pub grid: SweepGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub families: Vec<PhantomFamily>,
    /// Phantom indices `0..phantoms` of every family.
    pub phantoms: u64,
    /// Sparse: total intensities. Dense: ignored (the base grid is used).
    #[serde(default)]
    pub intensities: Vec<f64>,
    pub seeds: Vec<u64>,
    pub predictors: Vec<PredictorConfig>,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    /// Corruption fraction of the hallucination check; absent disables it.
    #[serde(default)]
    pub hallucination: Option<f64>,
    #[serde(default)]
    pub intervals: bool,
    /// Write full run directories for every cell.
    #[serde(default)]
    pub write_runs: bool,
}

pub fn default_deltas() -> Vec<f64> {
    vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5]
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("toml").to_owned();
            Error::config(field, e.message().to_owned())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("sweep config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config("schema_version", format!("expected {SCHEMA_VERSION}")));
        }
        self.base.validate()?;
        let g = &self.grid;
        if g.families.is_empty() {
            return Err(Error::config("grid.families", "must not be empty"));
        }
        if g.phantoms == 0 {
            return Err(Error::config("grid.phantoms", "must be at least 1"));
        }
        if g.seeds.is_empty() {
            return Err(Error::config("grid.seeds", "must not be empty"));
        }
        if g.predictors.is_empty() {
            return Err(Error::config("grid.predictors", "must not be empty"));
        }
        for p in &g.predictors {
            p.validate()?;
        }
        if self.base.acquisition.mode == AcquisitionMode::Sparse && g.intensities.is_empty() {
            return Err(Error::config("grid.intensities", "sparse sweeps need at least one intensity"));
        }
        if g.intensities.iter().any(|i| !(*i > 0.0 && i.is_finite())) {
            return Err(Error::config("grid.intensities", "must be positive"));
        }
        if g.deltas.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return Err(Error::config("grid.deltas", "must lie in (0, 1]"));
        }
        if let Some(f) = g.hallucination {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config("grid.hallucination", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Data cells: one simulation each, shared by every predictor.
    pub fn cells(&self) -> Vec<Cell> {
        let g = &self.grid;
        let intensities: Vec<Option<f64>> = match self.base.acquisition.mode {
            AcquisitionMode::Sparse => g.intensities.iter().map(|&i| Some(i)).collect(),
            AcquisitionMode::Dense => vec![None],
        };
        let mut out = Vec::new();
        for &family in &g.families {
            for &intensity in &intensities {
                for phantom in 0..g.phantoms {
                    for &seed in &g.seeds {
                        out.push(Cell {
                            family,
                            phantom,
                            intensity,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn cell_config(&self, cell: &Cell) -> ExperimentConfig {
        let mut c = self.base.clone();
        c.phantom.family = cell.family;
        c.phantom.index = cell.phantom;
        c.seed = cell.seed;
        if let Some(i) = cell.intensity {
            c.acquisition.total_intensity = Some(i);
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub family: PhantomFamily,
    pub phantom: u64,
    pub intensity: Option<f64>,
    pub seed: u64,
}

impl Cell {
    pub fn label(&self) -> String {
        format!(
            "{}_p{}_i{}_s{}",
            self.family,
            self.phantom,
            self.intensity.map_or("dense".to_owned(), |i| format!("{i:e}")),
            self.seed
        )
    }

    fn intensity_key(&self) -> f64 {
        self.intensity.unwrap_or(0.0)
    }
}

/// One (cell, predictor) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub cell: Cell,
    pub method: String,
    pub final_beta: f64,
    pub truth_nll: f64,
    pub gap: f64,
    pub crossed: bool,
    pub psnr: f64,
    pub sandwich: bool,
    pub members: Vec<(String, bool)>,
    pub trajectory: TruthTrajectory,
    pub hallucination: Option<HallucinationRow>,
    pub intervals: Vec<IntervalRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HallucinationRow {
    pub flag_rate: f64,
    pub clean_flag_rate: f64,
    pub corrupted_flag_rate: f64,
    pub psnr_in_set: Option<f64>,
    pub psnr_out_of_set: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRow {
    pub method: String,
    pub coverage: f64,
    pub width: f64,
    pub ause: f64,
    pub in_set: usize,
    pub total: usize,
    pub flagged: usize,
    pub audited: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub cell: String,
    pub method: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct SweepResult {
    pub rows: Vec<RunRow>,
    pub failures: Vec<Failure>,
}

fn run_cell(sweep: &SweepConfig, cell: &Cell, out_dir: Option<&Path>) -> (Vec<RunRow>, Vec<Failure>) {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let fail = |method: &str, e: Error| Failure {
        cell: cell.label(),
        method: method.to_owned(),
        message: e.to_string(),
    };
    let base_cfg = sweep.cell_config(cell);
    let scenario = match Scenario::simulate(&base_cfg) {
        Ok(s) => s,
        Err(e) => {
            failures.push(fail("*", e));
            return (rows, failures);
        }
    };
    for pc in &sweep.grid.predictors {
        let label = pc.label();
        let result = (|| -> Result<RunRow> {
            let mut cfg = base_cfg.clone();
            cfg.predictor = pc.clone();
            let mut sc = scenario.clone();
            sc.config = cfg.clone();
            let mut predictor = crate::experiment::run::predictor_for(&cfg)?;
            let (record, hallu) = match sweep.grid.hallucination {
                Some(f) => {
                    let seed = derive_seed(&[cell.seed, cell.phantom, 0x6861]);
                    let (r, h) = hallucination_run(&sc, predictor.as_mut(), f, 1, seed)?;
                    (r, Some(h))
                }
                None => (execute(&sc, predictor.as_mut(), None)?, None),
            };
            let s = summarize(&sc, &record)?;
            let intervals = if sweep.grid.intervals {
                compute_intervals(&sc, &record, &cfg.intervals)?
                    .into_iter()
                    .map(|o| IntervalRow {
                        method: o.method,
                        coverage: o.coverage,
                        width: o.width,
                        ause: o.ause,
                        in_set: o.in_set,
                        total: o.total,
                        flagged: o.flagged,
                        audited: o.audited,
                    })
                    .collect()
            } else {
                Vec::new()
            };
            if let Some(dir) = out_dir {
                write_run(&dir.join("runs").join(cell.label()).join(&label), &sc, &record)?;
            }
            Ok(RunRow {
                cell: *cell,
                method: label.clone(),
                final_beta: s.final_beta,
                truth_nll: s.truth_nll,
                gap: s.gap,
                crossed: s.crossed,
                psnr: s.psnr,
                sandwich: record.sandwich_holds(),
                members: s.members,
                trajectory: record.truth_trajectory(),
                hallucination: hallu.map(|h| HallucinationRow {
                    flag_rate: h.report.flag_rate,
                    clean_flag_rate: h.clean_flag_rate,
                    corrupted_flag_rate: h.corrupted_flag_rate,
                    psnr_in_set: h.report.psnr_in_set,
                    psnr_out_of_set: h.report.psnr_out_of_set,
                }),
                intervals,
            })
        })();
        match result {
            Ok(r) => rows.push(r),
            Err(e) => failures.push(fail(&label, e)),
        }
    }
    (rows, failures)
}

/// Runs every cell in parallel. Failures are recorded and the sweep goes on.
/// With `out_dir` and `write_runs`, every run directory is written too.
pub fn run_sweep(sweep: &SweepConfig, out_dir: Option<&Path>) -> Result<SweepResult> {
    sweep.validate()?;
    let runs_dir = if sweep.grid.write_runs { out_dir } else { None };
    let parts: Vec<(Vec<RunRow>, Vec<Failure>)> =
        sweep.cells().par_iter().map(|c| run_cell(sweep, c, runs_dir)).collect();
    let mut result = SweepResult::default();
    for (rows, failures) in parts {
        result.rows.extend(rows);
        result.failures.extend(failures);
    }
    Ok(result)
}

/// Groups rows by (family, intensity, method), in first-seen order.
fn groups(rows: &[RunRow]) -> Vec<((PhantomFamily, f64, String), Vec<&RunRow>)> {
    let mut out: Vec<((PhantomFamily, f64, String), Vec<&RunRow>)> = Vec::new();
    for r in rows {
        let key = (r.cell.family, r.cell.intensity_key(), r.method.clone());
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => out.push((key, vec![r])),
        }
    }
    out
}

/// A CSV table held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(&self.header).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header = r.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_owned).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec.map_err(|e| csv_error(path, e))?.iter().map(str::to_owned).collect());
        }
        Ok(Self { header, rows })
    }

    /// Column by name, parsed as `f64`.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("no column {name}")))?;
        self.rows
            .iter()
            .map(|r| r[i].parse::<f64>().map_err(|e| Error::invalid(format!("{}: {e}", r[i]))))
            .collect()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn runs_table(result: &SweepResult) -> Table {
    let mut t = Table::new(&[
        "family", "phantom", "intensity", "seed", "method", "final_beta", "truth_nll", "gap", "crossed", "psnr", "sandwich",
    ]);
    let cands: Vec<String> = result.rows.first().map(|r| r.members.iter().map(|m| m.0.clone()).collect()).unwrap_or_default();
    t.header.extend(cands.iter().map(|c| format!("member_{c}")));
    for r in &result.rows {
        let mut row = vec![
            r.cell.family.to_string(),
            r.cell.phantom.to_string(),
            r.cell.intensity_key().to_string(),
            r.cell.seed.to_string(),
            r.method.clone(),
            r.final_beta.to_string(),
            r.truth_nll.to_string(),
            r.gap.to_string(),
            r.crossed.to_string(),
            r.psnr.to_string(),
            r.sandwich.to_string(),
        ];
        row.extend(r.members.iter().map(|m| m.1.to_string()));
        t.rows.push(row);
    }
    t
}

pub fn tightness_table(result: &SweepResult) -> Table {
    let mut t = Table::new(&["family", "intensity", "method", "mean_gap", "sem", "n"]);
    for ((fam, i, m), rows) in groups(&result.rows) {
        let gaps: Vec<f64> = rows.iter().map(|r| r.gap).collect();
        let ms = MeanSem::of(&gaps).expect("non-empty group");
        t.rows.push(vec![fam.to_string(), i.to_string(), m, ms.mean.to_string(), ms.sem.to_string(), gaps.len().to_string()]);
    }
    t
}

pub fn rates_table(result: &SweepResult) -> Result<Table> {
    let mut t = Table::new(&["family", "intensity", "method", "crossover_rate", "sem", "n"]);
    for ((fam, i, m), rows) in groups(&result.rows) {
        let r = Rate::from_flags(rows.iter().map(|r| r.crossed))?;
        t.rows.push(vec![fam.to_string(), i.to_string(), m, r.rate.to_string(), r.sem.to_string(), r.n.to_string()]);
    }
    Ok(t)
}

pub fn exclusion_table(result: &SweepResult, rotations: &[f64]) -> Result<Table> {
    let mut t = Table::new(&["family", "intensity", "method", "angle", "exclusion_rate", "sem", "n"]);
    for ((fam, i, m), rows) in groups(&result.rows) {
        for &deg in rotations {
            let name = rotation_name(deg);
            let flags = rows.iter().map(|r| {
                r.members.iter().find(|(n, _)| *n == name).map(|(_, member)| !member).unwrap_or(false)
            });
            let r = Rate::from_flags(flags)?;
            t.rows.push(vec![
                fam.to_string(),
                i.to_string(),
                m.clone(),
                deg.to_string(),
                r.rate.to_string(),
                r.sem.to_string(),
                r.n.to_string(),
            ]);
        }
    }
    Ok(t)
}

pub fn calibration_table(result: &SweepResult, deltas: &[f64]) -> Result<Table> {
    let mut t = Table::new(&["family", "intensity", "method", "delta", "crossover_rate", "sem", "n"]);
    for ((fam, i, m), rows) in groups(&result.rows) {
        let trajs: Vec<TruthTrajectory> = rows.iter().map(|r| r.trajectory.clone()).collect();
        for (d, r) in calibration_curve(&trajs, deltas)? {
            t.rows.push(vec![
                fam.to_string(),
                i.to_string(),
                m.clone(),
                d.to_string(),
                r.rate.to_string(),
                r.sem.to_string(),
                r.n.to_string(),
            ]);
        }
    }
    Ok(t)
}

pub fn hallucination_table(result: &SweepResult) -> Table {
    let mut t = Table::new(&[
        "family", "intensity", "method", "phantom", "seed", "flag_rate", "clean_flag_rate", "corrupted_flag_rate",
        "psnr_in_set", "psnr_out_of_set",
    ]);
    for r in &result.rows {
        if let Some(h) = &r.hallucination {
            t.rows.push(vec![
                r.cell.family.to_string(),
                r.cell.intensity_key().to_string(),
                r.method.clone(),
                r.cell.phantom.to_string(),
                r.cell.seed.to_string(),
                h.flag_rate.to_string(),
                h.clean_flag_rate.to_string(),
                h.corrupted_flag_rate.to_string(),
                opt(h.psnr_in_set),
                opt(h.psnr_out_of_set),
            ]);
        }
    }
    t
}

pub fn interval_table(result: &SweepResult) -> Table {
    let mut t = Table::new(&[
        "family", "intensity", "method", "phantom", "seed", "interval", "coverage", "width", "ause", "in_set", "total",
        "flagged", "audited",
    ]);
    for r in &result.rows {
        for iv in &r.intervals {
            t.rows.push(vec![
                r.cell.family.to_string(),
                r.cell.intensity_key().to_string(),
                r.method.clone(),
                r.cell.phantom.to_string(),
                r.cell.seed.to_string(),
                iv.method.clone(),
                iv.coverage.to_string(),
                iv.width.to_string(),
                iv.ause.to_string(),
                iv.in_set.to_string(),
                iv.total.to_string(),
                iv.flagged.to_string(),
                iv.audited.to_string(),
            ]);
        }
    }
    t
}

pub fn failures_table(result: &SweepResult) -> Table {
    let mut t = Table::new(&["cell", "method", "message"]);
    for f in &result.failures {
        t.rows.push(vec![f.cell.clone(), f.method.clone(), f.message.clone()]);
    }
    t
}

/// Table file names written by [`write_tables`].
pub const TABLES: [&str; 8] = [
    "runs.csv",
    "tightness.csv",
    "rates.csv",
    "exclusion.csv",
    "calibration.csv",
    "hallucination.csv",
    "intervals.csv",
    "failures.csv",
];

/// Writes every summary table into `dir` and returns their paths.
pub fn write_tables(dir: &Path, sweep: &SweepConfig, result: &SweepResult) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let echo = dir.join("sweep.toml");
    fs::write(&echo, sweep.to_toml()).map_err(|e| Error::io(&echo, e))?;
    let tables = [
        runs_table(result),
        tightness_table(result),
        rates_table(result)?,
        exclusion_table(result, &sweep.base.candidates.rotations)?,
        calibration_table(result, &sweep.grid.deltas)?,
        hallucination_table(result),
        interval_table(result),
        failures_table(result),
    ];
    let mut paths = Vec::new();
    for (name, t) in TABLES.iter().zip(tables) {
        let p = dir.join(name);
        t.write(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::PredictorKind;

    fn tiny() -> SweepConfig {
        let mut base = ExperimentConfig::sparse(PhantomFamily::Ellipses, 16, 1e5);
        base.acquisition.angles = 8;
        base.acquisition.warmup = 2;
        base.candidates.rotations = vec![0.0, 8.0];
        let mut mle = PredictorConfig::of_kind(PredictorKind::Mle);
        mle.optimizer.steps = 10;
        SweepConfig {
            schema_version: SCHEMA_VERSION,
            base,
            grid: SweepGrid {
                families: vec![PhantomFamily::Ellipses, PhantomFamily::Manhattan],
                phantoms: 1,
                intensities: vec![1e4, 1e6],
                seeds: vec![0, 1],
                predictors: vec![PredictorConfig::of_kind(PredictorKind::Fbp), mle],
                deltas: default_deltas(),
                hallucination: None,
                intervals: false,
                write_runs: false,
            },
        }
    }

    #[test]
    fn cardinality_and_shared_measurements() {
        let s = tiny();
        assert_eq!(s.cells().len(), 8);
        let res = run_sweep(&s, None).unwrap();
        assert!(res.failures.is_empty(), "{:?}", res.failures);
        assert_eq!(res.rows.len(), 16);
        let dir = tempfile::tempdir().unwrap();
        write_tables(dir.path(), &s, &res).unwrap();
        let runs = Table::read(&dir.path().join("runs.csv")).unwrap();
        assert_eq!(runs.rows.len(), 16);
        let tight = Table::read(&dir.path().join("tightness.csv")).unwrap();
        assert_eq!(&tight.header[..4], &["family", "intensity", "method", "mean_gap"]);
        let gaps = tight.column("mean_gap").unwrap();
        let again = tightness_table(&res);
        for (a, r) in gaps.iter().zip(&again.rows) {
            assert!((a - r[3].parse::<f64>().unwrap()).abs() <= 1e-9);
        }
        let sweep_back = SweepConfig::load(&dir.path().join("sweep.toml")).unwrap();
        assert_eq!(sweep_back, s);
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let mut s = tiny();
        s.grid.families = vec![PhantomFamily::Ellipses];
        s.grid.intensities = vec![1e5];
        s.grid.seeds = vec![0];
        let cells = s.cells();
        let mut broken = s.clone();
        broken.base.candidates.rotations = vec![90.0];
        let (rows, failures) = run_cell(&broken, &cells[0], None);
        assert!(rows.is_empty());
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].method, "*");
        assert!(failures[0].message.contains("candidates.rotations"));
    }

    #[test]
    fn dense_sweep_has_one_intensity_cell() {
        let mut s = tiny();
        s.base = ExperimentConfig::dense(PhantomFamily::Ellipses, 16, 4, 1e4, 1e6, 3);
        s.grid.intensities.clear();
        assert_eq!(s.cells().len(), 4);
    }
}
