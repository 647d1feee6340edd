use std::fs;
use std::path::{Path, PathBuf};

use latprobe_core::analysis::{
    build_curves, mean_magnitude_table, threshold_tradeoff, CurveSeries, Dispositions, Labels, TableCell, TradeoffRow,
};
use latprobe_core::AttackRecord;
use latprobe_labeling::Disposition;
use serde::Serialize;

use crate::failure::Failure;
use crate::records::{distinct_hashes, read_records};

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub records: Vec<PathBuf>,
    pub dispositions: Option<PathBuf>,
    pub group_size: usize,
    pub grid: Option<Vec<f64>>,
    pub max_magnitude: Option<f64>,
    pub force: bool,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct Series {
    pub classifier: String,
    pub layer_subset: String,
    #[serde(flatten)]
    pub curve: CurveSeries,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub config_hash: String,
    pub version: String,
    pub labels: &'static str,
    pub group_size: usize,
    pub curves: Vec<Series>,
    pub table: Vec<TableCell>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tradeoff: Option<Vec<TradeoffRow>>,
}

pub fn read_dispositions(path: &Path) -> Result<Dispositions, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    let list: Vec<Disposition> =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    Ok(list.into_iter().map(|d| (d.image_id, d.outcome)).collect())
}

pub fn analyze(records: &[AttackRecord], disp: Option<&Dispositions>, opts: &AnalyzeOptions) -> Result<Report, Failure> {
    let hashes = distinct_hashes(records);
    if hashes.len() > 1 && !opts.force {
        return Err(Failure::usage(format!(
            "records come from {} different configs ({}); pass --force to mix them",
            hashes.len(),
            hashes.join(", ")
        )));
    }
    let labels = match (disp, opts.max_magnitude) {
        (Some(_), Some(_)) => return Err(Failure::usage("--max-magnitude only applies without dispositions")),
        (Some(d), None) => Labels::Human(d),
        (None, cap) => Labels::HumanFree { max_magnitude: cap },
    };
    let curves = build_curves(records, labels, opts.group_size)?
        .into_iter()
        .map(|((classifier, layer_subset), curve)| Series {
            classifier,
            layer_subset,
            curve,
        })
        .collect();
    let table = mean_magnitude_table(records, labels)?;
    let tradeoff = match (&opts.grid, disp) {
        (Some(grid), Some(d)) => Some(threshold_tradeoff(records, d, grid)?),
        (Some(_), None) => return Err(Failure::usage("--grid needs --dispositions")),
        (None, _) => None,
    };
    Ok(Report {
        config_hash: hashes.join("+"),
        version: latprobe_core::VERSION.to_string(),
        labels: if disp.is_some() { "human" } else { "human_free" },
        group_size: opts.group_size,
        curves,
        table,
        tradeoff,
    })
}

pub fn run_analyze(opts: &AnalyzeOptions) -> Result<Report, Failure> {
    let mut records = Vec::new();
    for path in &opts.records {
        if !path.exists() {
            return Err(Failure::usage(format!("no records at {}", path.display())));
        }
        records.extend(read_records(path, false)?);
    }
    if records.is_empty() {
        return Err(Failure::usage("no attack records to analyse"));
    }
    let disp = opts.dispositions.as_deref().map(read_dispositions).transpose()?;
    let report = analyze(&records, disp.as_ref(), opts)?;
    write_report(&report, &opts.out)?;
    Ok(report)
}

fn write_report(r: &Report, dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("analysis.json"), serde_json::to_string_pretty(r)?)?;

    let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
    w.write_record(["classifier", "layer_subset", "magnitude", "proportion", "group_mean", "group_std", "config_hash", "version"])?;
    for s in &r.curves {
        let c = &s.curve;
        for k in 0..c.grid.len() {
            w.write_record([
                s.classifier.clone(),
                s.layer_subset.clone(),
                c.grid[k].to_string(),
                c.proportion[k].to_string(),
                c.group_mean[k].to_string(),
                c.group_std[k].to_string(),
                r.config_hash.clone(),
                r.version.clone(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("table.csv"))?;
    w.write_record(["classifier", "layer_subset", "mean_magnitude", "count", "config_hash", "version"])?;
    for cell in &r.table {
        w.write_record([
            cell.classifier.clone(),
            cell.layer_subset.clone(),
            cell.mean.map(|m| m.to_string()).unwrap_or_default(),
            cell.count.to_string(),
            r.config_hash.clone(),
            r.version.clone(),
        ])?;
    }
    w.flush()?;

    if let Some(rows) = &r.tradeoff {
        let mut w = csv::Writer::from_path(dir.join("tradeoff.csv"))?;
        w.write_record(["bound", "success_count", "class_changed_count", "config_hash", "version"])?;
        for row in rows {
            w.write_record([
                row.bound.to_string(),
                row.success_count.to_string(),
                row.class_changed_count.to_string(),
                r.config_hash.clone(),
                r.version.clone(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}
