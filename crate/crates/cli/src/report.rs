//! Consolidated summary over all runs, rebuilt from stored artifacts.

use std::path::PathBuf;

use cimq_core::crossbar::CostReport;
use cimq_core::quant::compression_ratio;
use serde::{Deserialize, Serialize};

use crate::error::{InStage, Result};
use crate::io::write_bytes;
use crate::stages::{
    accuracy_path, cost_json_path, AccuracyReport, Ctx, Run, Stage, REPORT_CSV, REPORT_JSON,
};

/// One row per run: accuracy, energy breakdown and utilization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub cr: f64,
    pub q: usize,
    pub p_low: usize,
    pub accuracy: f64,
    pub reference_accuracy: f64,
    pub float_accuracy: f64,
    pub energy_adc: f64,
    pub energy_accum: f64,
    pub energy_other: f64,
    pub energy_total: f64,
    pub adc_share: f64,
    pub latency: f64,
    pub utilization_high: f64,
    pub utilization_low: f64,
    pub tiles_high: usize,
    pub tiles_low: usize,
}

/// Rows for `runs`, sorted by compression ratio then run name.
pub fn collect_rows(ctx: &Ctx<'_>, runs: &[Run]) -> Result<Vec<ReportRow>> {
    let stage = Stage::Report;
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        let map = ctx.map(stage, &run.name)?;
        let cost: CostReport = ctx.json(stage, Stage::Simulate, &cost_json_path(&run.name))?;
        let acc: AccuracyReport = ctx.json(stage, Stage::Simulate, &accuracy_path(&run.name))?;
        let t = &cost.total;
        rows.push(ReportRow {
            run: run.name.clone(),
            cr: compression_ratio(&map),
            q: map.q(),
            p_low: map.p_low(),
            accuracy: acc.paths.crossbar_accuracy,
            reference_accuracy: acc.paths.reference_accuracy,
            float_accuracy: acc.float_accuracy,
            energy_adc: t.energy_adc,
            energy_accum: t.energy_accum,
            energy_other: t.energy_other,
            energy_total: t.energy_total,
            adc_share: t.adc_share(),
            latency: t.latency,
            utilization_high: t.utilization_high,
            utilization_low: t.utilization_low,
            tiles_high: t.tiles_high,
            tiles_low: t.tiles_low,
        });
    }
    rows.sort_by(|a, b| a.cr.total_cmp(&b.cr).then_with(|| a.run.cmp(&b.run)));
    Ok(rows)
}

pub(crate) fn write_report(ctx: &Ctx<'_>, runs: &[Run]) -> Result<Vec<PathBuf>> {
    let stage = Stage::Report;
    let rows = collect_rows(ctx, runs)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).expect("report rows serialize");
    }
    let csv = w.into_inner().expect("in-memory writer");
    let json = serde_json::to_string_pretty(&rows).expect("report rows serialize") + "\n";
    let (csv_path, json_path) = (ctx.out.join(REPORT_CSV), ctx.out.join(REPORT_JSON));
    write_bytes(&csv_path, &csv).in_stage(stage)?;
    write_bytes(&json_path, json.as_bytes()).in_stage(stage)?;
    for r in &rows {
        println!(
            "report: {:<10} CR {:.3} acc {:.4} energy {:e} J (ADC {:.1}%) util 8-bit {:.2}% 4-bit {:.2}%",
            r.run,
            r.cr,
            r.accuracy,
            r.energy_total,
            100.0 * r.adc_share,
            r.utilization_high,
            r.utilization_low
        );
    }
    Ok(vec![csv_path, json_path])
}

/// Reads `report/summary.json` back.
pub fn read_rows(out: &std::path::Path) -> std::io::Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(out.join(REPORT_JSON))?;
    serde_json::from_str(&text).map_err(std::io::Error::other)
}
