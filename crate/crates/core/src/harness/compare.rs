//! Cross-run comparison table: one row per run, columns BM/BT/FM/FT for
//! Dice and ASD, plus the gradient-alignment diagnostics summary.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{EngineError, Result};
use crate::harness::config::Method;
use crate::harness::stream::{read_alignment, read_manifest, FtReference};
use crate::metrics::{
    backward_measure, backward_transfer, forward_measure, forward_transfer, AccuracyMatrix,
};

/// One run's aggregates. BT is absent for single-round streams; FT is
/// absent until `ft-reference` has been run on the run directory; the
/// alignment means are absent when nothing logged them (plain finetune).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompareRow {
    pub method: Method,
    pub init_seed: u64,
    pub train_seed: u64,
    pub bm_dsc: f64,
    pub bm_asd: Option<f64>,
    pub bt_dsc: Option<f64>,
    pub bt_asd: Option<f64>,
    pub fm_dsc: f64,
    pub fm_asd: Option<f64>,
    pub ft_dsc: Option<f64>,
    pub ft_asd: Option<f64>,
    /// Mean per-iteration G_D . G_P over rounds with a buffer.
    pub mean_dp_inner: Option<f64>,
    /// Mean per-iteration G_Ctr . G_Cte over the same rounds.
    pub mean_ctr_cte_inner: Option<f64>,
    pub run_dir: String,
}

/// The comparison table plus the data identity every run had to share.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompareReport {
    pub data_seed: u64,
    pub stream: Vec<u32>,
    pub held_out: u32,
    pub rows: Vec<CompareRow>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn csv_err(e: csv::Error) -> EngineError {
    EngineError::Integrity(format!("compare csv: {e}"))
}

/// Build the table from completed run directories and write it to
/// `out_csv` plus a JSON sibling (same path, `.json` extension). Runs must
/// share data seed, stream, and held-out site; anything else is not a
/// like-for-like comparison and is rejected.
pub fn compare_report(run_dirs: &[PathBuf], out_csv: &Path) -> Result<CompareReport> {
    if run_dirs.is_empty() {
        return Err(EngineError::Config("compare needs at least one run".into()));
    }
    let mut key: Option<(u64, Vec<u32>, u32)> = None;
    let mut rows = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let manifest = read_manifest(&dir.join("manifest.json"))?;
        let config = &manifest.config;
        let this_key = (config.data_seed, config.stream.clone(), config.held_out);
        match &key {
            None => key = Some(this_key),
            Some(k) if *k != this_key => {
                return Err(EngineError::Config(format!(
                    "{} was run on different data (seed, stream, or held-out site); \
                     its metrics are not comparable to the other runs",
                    dir.display()
                )))
            }
            Some(_) => {}
        }
        if manifest.rounds.len() != config.stream.len() {
            return Err(EngineError::Config(format!(
                "{} completed {} of {} rounds",
                dir.display(),
                manifest.rounds.len(),
                config.stream.len()
            )));
        }
        let matrix = AccuracyMatrix::from_csv(&dir.join("metrics.csv"))?;
        let t = config.stream.len();
        let bm = backward_measure(&matrix, &config.stream, t)?;
        let (bt_dsc, bt_asd) = if t >= 2 {
            let bt = backward_transfer(&matrix, &config.stream, t)?;
            (Some(bt.dsc), bt.asd)
        } else {
            (None, None)
        };
        let fm = forward_measure(&matrix, &config.stream, config.held_out, t)?;
        let ft_path = dir.join("ft_reference.json");
        let (ft_dsc, ft_asd) = if ft_path.exists() {
            let reference: FtReference =
                serde_json::from_str(&std::fs::read_to_string(&ft_path)?)?;
            let ft = forward_transfer(&fm, &reference.as_pair());
            (Some(ft.dsc), ft.asd)
        } else {
            (None, None)
        };
        let alignment = read_alignment(&dir.join("alignment.csv"))?;
        let inner: Vec<f64> = alignment.iter().filter_map(|r| r.dp_inner).collect();
        let cross: Vec<f64> = alignment.iter().filter_map(|r| r.ctr_cte_inner).collect();
        rows.push(CompareRow {
            method: config.method,
            init_seed: config.init_seed,
            train_seed: config.train_seed,
            bm_dsc: bm.dsc,
            bm_asd: bm.asd,
            bt_dsc,
            bt_asd,
            fm_dsc: fm.dsc,
            fm_asd: fm.asd,
            ft_dsc,
            ft_asd,
            mean_dp_inner: mean(&inner),
            mean_ctr_cte_inner: mean(&cross),
            run_dir: dir.display().to_string(),
        });
    }
    let (data_seed, stream, held_out) = key.expect("at least one run was read");
    let report = CompareReport {
        data_seed,
        stream,
        held_out,
        rows,
    };
    let mut w = csv::Writer::from_path(out_csv).map_err(csv_err)?;
    for row in &report.rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(out_csv.with_extension("json"), text)?;
    Ok(report)
}
