//! Per-figure tables and greyscale maps from sweep and run directories.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::sweep::Table;
use crate::grid::Grid;
use crate::io::{read_image, write_png};
use crate::metrics::MeanSem;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExportReport {
    pub written: Vec<PathBuf>,
    pub missing: Vec<PathBuf>,
}

fn column_index(t: &Table, name: &str) -> Result<usize> {
    t.header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::invalid(format!("no column {name}")))
}

/// Mean ± SEM of `value` grouped by the `keys` columns, in first-seen order.
pub fn aggregate(t: &Table, keys: &[&str], value: &str) -> Result<Table> {
    let key_idx: Vec<usize> = keys.iter().map(|k| column_index(t, k)).collect::<Result<_>>()?;
    let v_idx = column_index(t, value)?;
    let mut groups: Vec<(Vec<String>, Vec<f64>)> = Vec::new();
    for row in &t.rows {
        if row[v_idx].is_empty() {
            continue;
        }
        let key: Vec<String> = key_idx.iter().map(|&i| row[i].clone()).collect();
        let v: f64 = row[v_idx]
            .parse()
            .map_err(|e| Error::invalid(format!("{}: {e}", row[v_idx])))?;
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, vs)) => vs.push(v),
            None => groups.push((key, vec![v])),
        }
    }
    let mut header: Vec<String> = keys.iter().map(|s| s.to_string()).collect();
    header.extend([format!("mean_{value}"), "sem".into(), "n".into()]);
    let rows = groups
        .into_iter()
        .map(|(mut key, vs)| {
            let ms = MeanSem::of(&vs).expect("non-empty group");
            key.extend([ms.mean.to_string(), ms.sem.to_string(), vs.len().to_string()]);
            key
        })
        .collect();
    Ok(Table { header, rows })
}

/// `β^mean − β^mix` for every run whose method `X_mean` pairs with `X`.
pub fn mixture_gap(runs: &Table) -> Result<Table> {
    let idx = |n: &str| column_index(runs, n);
    let (fam, ph, int, seed, method, beta) =
        (idx("family")?, idx("phantom")?, idx("intensity")?, idx("seed")?, idx("method")?, idx("final_beta")?);
    let mut t = Table {
        header: ["family", "phantom", "intensity", "seed", "method", "beta_mean_minus_mix"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        rows: Vec::new(),
    };
    for r in &runs.rows {
        let Some(base) = r[method].strip_suffix("_mean") else { continue };
        let partner = runs.rows.iter().find(|o| {
            o[method] == base && o[fam] == r[fam] && o[ph] == r[ph] && o[int] == r[int] && o[seed] == r[seed]
        });
        if let Some(o) = partner {
            let a: f64 = r[beta].parse().map_err(|e| Error::invalid(format!("{e}")))?;
            let b: f64 = o[beta].parse().map_err(|e| Error::invalid(format!("{e}")))?;
            t.rows.push(vec![
                r[fam].clone(),
                r[ph].clone(),
                r[int].clone(),
                r[seed].clone(),
                base.to_owned(),
                (a - b).to_string(),
            ]);
        }
    }
    Ok(t)
}

fn find_files(dir: &Path, suffix: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_files(&p, suffix, out)?;
        } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)) {
            out.push(p);
        }
    }
    Ok(())
}

fn relative_png(input: &Path, output: &Path, file: &Path, stem_suffix: &str) -> PathBuf {
    let rel = file.strip_prefix(input).unwrap_or(file);
    let flat = rel.with_extension("").to_string_lossy().replace(['/', '\\'], "__");
    output.join("maps").join(format!("{flat}{stem_suffix}.png"))
}

/// Writes figure tables from the sweep tables in `input` and renders every
/// reconstruction, absolute-error and half-width map found below it.
/// Missing inputs are listed in the report, not fatal.
pub fn export(input: &Path, output: &Path, white_point: f64) -> Result<ExportReport> {
    if !input.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", input.display())));
    }
    fs::create_dir_all(output.join("maps")).map_err(|e| Error::io(output, e))?;
    let mut report = ExportReport::default();
    let read = |name: &str, report: &mut ExportReport| -> Result<Option<Table>> {
        let p = input.join(name);
        if p.is_file() {
            Table::read(&p).map(Some)
        } else {
            report.missing.push(p);
            Ok(None)
        }
    };
    let emit = |name: &str, t: Table, report: &mut ExportReport| -> Result<()> {
        let p = output.join(name);
        t.write(&p)?;
        report.written.push(p);
        Ok(())
    };

    if let Some(runs) = read("runs.csv", &mut report)? {
        emit("fig2_psnr.csv", aggregate(&runs, &["family", "intensity", "method"], "psnr")?, &mut report)?;
        emit("fig8_mixture_gap.csv", mixture_gap(&runs)?, &mut report)?;
    }
    for (src, dst) in [
        ("tightness.csv", "fig3_tightness.csv"),
        ("rates.csv", "fig4_crossover.csv"),
        ("exclusion.csv", "fig10_exclusion.csv"),
        ("calibration.csv", "fig6_calibration.csv"),
    ] {
        if let Some(t) = read(src, &mut report)? {
            emit(dst, t, &mut report)?;
        }
    }
    if let Some(iv) = read("intervals.csv", &mut report)? {
        let keys = ["family", "intensity", "interval"];
        let mut merged = aggregate(&iv, &keys, "coverage")?;
        let width = aggregate(&iv, &keys, "width")?;
        let au = aggregate(&iv, &keys, "ause")?;
        merged.header = ["family", "intensity", "interval", "coverage", "coverage_sem", "n", "width", "width_sem", "ause", "ause_sem"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for ((row, w), a) in merged.rows.iter_mut().zip(&width.rows).zip(&au.rows) {
            row.extend([w[3].clone(), w[4].clone(), a[3].clone(), a[4].clone()]);
        }
        emit("fig5_intervals.csv", merged, &mut report)?;
    }
    if let Some(h) = read("hallucination.csv", &mut report)? {
        let keys = ["family", "intensity", "method"];
        let mut t = aggregate(&h, &keys, "corrupted_flag_rate")?;
        for col in ["clean_flag_rate", "psnr_in_set", "psnr_out_of_set"] {
            let other = aggregate(&h, &keys, col)?;
            t.header.extend([format!("mean_{col}"), format!("{col}_sem")]);
            for row in t.rows.iter_mut() {
                match other.rows.iter().find(|o| o[..3] == row[..3]) {
                    Some(o) => row.extend([o[3].clone(), o[4].clone()]),
                    None => row.extend([String::new(), String::new()]),
                }
            }
        }
        emit("fig12_hallucination.csv", t, &mut report)?;
    }

    let mut recons = Vec::new();
    find_files(input, "recon.f32", &mut recons)?;
    for recon in recons {
        let truth = recon.with_file_name("truth.f32");
        if !truth.is_file() {
            report.missing.push(truth);
            continue;
        }
        let (r, _) = read_image(&recon)?;
        let (t, _) = read_image(&truth)?;
        let err = Grid::from_vec(
            r.side(),
            r.as_slice().iter().zip(t.as_slice()).map(|(a, b)| (a - b).abs()).collect(),
        )?;
        for (grid, suffix, white) in [(&r, "", 1.0), (&t, "_truth", 1.0), (&err, "_abs_error", white_point)] {
            let p = relative_png(input, output, &recon, suffix);
            write_png(&p, grid, white)?;
            report.written.push(p);
        }
    }
    let mut halves = Vec::new();
    find_files(input, "_halfwidth.f32", &mut halves)?;
    for hw in halves {
        let (g, _) = read_image(&hw)?;
        let p = relative_png(input, output, &hw, "");
        write_png(&p, &g, white_point)?;
        report.written.push(p);
    }

    let listing = output.join("missing.txt");
    let text: String = report.missing.iter().map(|p| format!("{}\n", p.display())).collect();
    fs::write(&listing, text).map_err(|e| Error::io(&listing, e))?;
    Ok(report)
}
