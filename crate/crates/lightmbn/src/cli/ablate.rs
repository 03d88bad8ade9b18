//! Ablation harness: run a matrix of branch/technique toggles with a
//! shared seed and emit a results table (config columns + r1 + both mAPs).

use std::path::{Path, PathBuf};

use crate::model::BranchSet;

use super::config::RunConfig;
use super::train::cmd_train;
use super::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationRow {
    pub branches: BranchSet,
    pub wca: bool,
    pub ms: bool,
    pub db: bool,
}

impl AblationRow {
    pub fn label(&self) -> String {
        format!(
            "{}_wca{}_ms{}_db{}",
            self.branches.label().replace('+', ""),
            self.wca as u8,
            self.ms as u8,
            self.db as u8
        )
    }
}

#[derive(Debug)]
pub struct AblationResult {
    pub row: AblationRow,
    pub rank1: f64,
    pub map_modern: f64,
    pub map_legacy: f64,
}

/// Parse the matrix file: a CSV whose header names a subset of
/// {branches, wca, ms, db}; missing columns default to the full model
/// (G+C+P, all techniques on).
pub fn parse_matrix(path: &Path) -> Result<Vec<AblationRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read matrix {}: {e}", path.display())))?;
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| CliError::Usage("matrix file is empty".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    for col in &columns {
        if !matches!(*col, "branches" | "wca" | "ms" | "db") {
            return Err(CliError::Usage(format!(
                "matrix column '{col}' (expected branches, wca, ms, db)"
            )));
        }
    }

    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let values: Vec<&str> = line.split(',').map(str::trim).collect();
        if values.len() != columns.len() {
            return Err(CliError::Usage(format!(
                "matrix row {}: {} values for {} columns",
                lineno + 2,
                values.len(),
                columns.len()
            )));
        }
        let mut row = AblationRow {
            branches: BranchSet::default(),
            wca: true,
            ms: true,
            db: true,
        };
        for (col, val) in columns.iter().zip(values) {
            match *col {
                "branches" => {
                    row.branches =
                        BranchSet::parse(val).map_err(|e| CliError::Usage(e.to_string()))?
                }
                "wca" => row.wca = parse_toggle(val)?,
                "ms" => row.ms = parse_toggle(val)?,
                "db" => row.db = parse_toggle(val)?,
                _ => unreachable!(),
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Usage("matrix file lists no configurations".into()));
    }

    // duplicates collapse with a warning
    let mut deduped: Vec<AblationRow> = Vec::new();
    for row in rows {
        if deduped.contains(&row) {
            eprintln!("warning: duplicate matrix row {} — skipped", row.label());
        } else {
            deduped.push(row);
        }
    }
    Ok(deduped)
}

fn parse_toggle(v: &str) -> Result<bool> {
    match v {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("matrix toggle '{v}' (expected 0|1)"))),
    }
}

/// Run every configuration with the shared seed and collect final
/// metrics. Each run gets its own subdirectory of `out_dir`.
pub fn cmd_ablate(matrix: &Path, base: &RunConfig, out_dir: &Path) -> Result<Vec<AblationResult>> {
    let rows = parse_matrix(matrix)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut results = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.branches = row.branches;
        cfg.wca = row.wca;
        cfg.ranking_ms = row.ms;
        cfg.drop_block = row.db;
        cfg.final_eval = true;
        cfg.out_dir = out_dir.join(format!("row{:02}_{}", i, row.label()));

        let outcome = cmd_train(&cfg)?;
        let metrics = outcome.manifest.final_metrics.ok_or_else(|| {
            CliError::Data(format!("ablation row {} produced no metrics", row.label()))
        })?;
        results.push(AblationResult {
            row: row.clone(),
            rank1: metrics.rank1,
            map_modern: metrics.map_modern,
            map_legacy: metrics.map_legacy,
        });
    }

    let mut csv = String::from("branches,wca,ms,db,r1,map_modern,map_legacy\n");
    for r in &results {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.row.branches.label(),
            r.row.wca as u8,
            r.row.ms as u8,
            r.row.db as u8,
            r.rank1,
            r.map_modern,
            r.map_legacy
        ));
    }
    std::fs::write(out_dir.join("results.csv"), &csv)
        .map_err(|e| CliError::Data(e.to_string()))?;

    println!("{:<8} {:>4} {:>4} {:>4} {:>8} {:>11} {:>11}", "branches", "wca", "ms", "db", "r1", "map_modern", "map_legacy");
    for r in &results {
        println!(
            "{:<8} {:>4} {:>4} {:>4} {:>8.4} {:>11.4} {:>11.4}",
            r.row.branches.label(),
            r.row.wca as u8,
            r.row.ms as u8,
            r.row.db as u8,
            r.rank1,
            r.map_modern,
            r.map_legacy
        );
    }
    Ok(results)
}
