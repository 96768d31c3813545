//! Batch artifacts: `episodes.jsonl`, `summary.csv` and `curve.csv`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::{cumulative_success, mean_std, CellResult, EpisodeRecord, SeedRun};
use crate::error::{invalid, Result};

#[derive(Serialize)]
struct CellLine<'a> {
    cell: &'a str,
    #[serde(flatten)]
    record: &'a EpisodeRecord,
}

fn json_line<T: Serialize>(out: &mut impl Write, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| invalid(e.to_string()))?;
    writeln!(out, "{line}")?;
    Ok(())
}

/// Seed-averaged cumulative success curve.
fn mean_curve(runs: &[SeedRun]) -> Vec<f64> {
    let curves: Vec<Vec<f64>> = runs.iter().map(|r| cumulative_success(&r.records)).collect();
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
        .collect()
}

fn write_curve(path: &Path, columns: &[(&str, Vec<f64>)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "episode")?;
    for (name, _) in columns {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    let len = columns.iter().map(|c| c.1.len()).min().unwrap_or(0);
    for i in 0..len {
        write!(out, "{}", i + 1)?;
        for (_, c) in columns {
            write!(out, ",{:.6}", c[i])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the artifacts of a single deployment, labelling the curve column
/// with `label`.
pub fn write_deployment_outputs(dir: &Path, label: &str, runs: &[SeedRun]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut episodes = BufWriter::new(File::create(dir.join("episodes.jsonl"))?);
    for run in runs {
        for r in &run.records {
            json_line(&mut episodes, r)?;
        }
    }
    episodes.flush()?;

    let mut summary = BufWriter::new(File::create(dir.join("summary.csv"))?);
    writeln!(summary, "seed,final_success,episodes,aborted")?;
    for run in runs {
        writeln!(
            summary,
            "{},{:.6},{},{}",
            run.seed,
            run.final_success(),
            run.records.len(),
            run.aborted()
        )?;
    }
    let (mean, std) = mean_std(&runs.iter().map(SeedRun::final_success).collect::<Vec<_>>());
    writeln!(summary, "mean,{mean:.6},,")?;
    writeln!(summary, "std,{std:.6},,")?;
    summary.flush()?;

    write_curve(&dir.join("curve.csv"), &[(label, mean_curve(runs))])
}

/// Writes the artifacts of an ablation sweep, one summary row and one curve
/// column per cell.
pub fn write_ablation_outputs(dir: &Path, cells: &[CellResult]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut episodes = BufWriter::new(File::create(dir.join("episodes.jsonl"))?);
    for cell in cells {
        for run in &cell.runs {
            for r in &run.records {
                json_line(&mut episodes, &CellLine { cell: &cell.name, record: r })?;
            }
        }
    }
    episodes.flush()?;

    let mut summary = BufWriter::new(File::create(dir.join("summary.csv"))?);
    writeln!(summary, "cell,mean_final_success,std_final_success,seed_finals")?;
    for cell in cells {
        let (mean, std) = cell.mean_std();
        let finals: Vec<String> = cell.finals().iter().map(|f| format!("{f:.6}")).collect();
        writeln!(summary, "\"{}\",{mean:.6},{std:.6},{}", cell.name, finals.join(" "))?;
    }
    summary.flush()?;

    let columns: Vec<(&str, Vec<f64>)> = cells.iter().map(|c| (c.name.as_str(), mean_curve(&c.runs))).collect();
    write_curve(&dir.join("curve.csv"), &columns)
}
