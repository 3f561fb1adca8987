//! Flow report (JSON) and CSV tables.

use std::path::Path;

use fxpnet_core::finetune::HistoryEntry;
use fxpnet_core::quantflow::{FlowOutcome, SweepRow};
use fxpnet_core::net::DatapathReport;
use fxpnet_core::Part;
use serde_json::{json, Value};

use super::profile::profile_sha256;
use crate::error::{Error, Result};

/// Note recorded whenever the combined check had to widen a part.
pub const RECHECK_POLICY: &str = "combined scheme missed the budget; the part with the lowest \
single-part accuracy was widened one bit at a time and re-checked";

fn part_name(p: Option<Part>) -> &'static str {
    p.map_or("shared", |p| p.name())
}

pub fn flow_report(outcome: &FlowOutcome, seed: u64) -> Value {
    let s = &outcome.scheme;
    json!({
        "format": "fxpnet-flow-report",
        "version": 1,
        "seed": seed,
        "mode": s.mode.name(),
        "budget": {
            "max_accuracy_drop": outcome.config.max_accuracy_drop,
            "calibration_baseline": outcome.calibration_baseline,
            "validation_baseline": outcome.validation_baseline,
        },
        "search_range": [outcome.config.b_lo, outcome.config.b_hi],
        "stages": [
            {"stage": 1, "name": "weight_analysis",
             "weights": outcome.profile.layers.iter().map(|l| json!({
                 "layer": l.name, "part": l.part.name(), "max_abs": l.weight_max_abs})).collect::<Vec<_>>()},
            {"stage": 2, "name": "activation_statistics",
             "samples": outcome.profile.sample_count,
             "profile_sha256": profile_sha256(&outcome.profile),
             "input_max_abs": outcome.profile.input_max_abs,
             "outputs": outcome.profile.layers.iter().map(|l| json!({
                 "layer": l.name, "max_abs": l.output_max_abs})).collect::<Vec<_>>()},
            {"stage": 3, "name": "bit_width_search",
             "searches": outcome.searches.iter().map(|r| json!({
                 "part": part_name(r.part),
                 "chosen_bits": r.chosen_bits,
                 "accuracy_at_chosen": r.accuracy_at_chosen,
                 "unmeetable": r.unmeetable,
                 "probes": r.trace.len(),
                 "trace": r.trace.iter().map(|p| json!({"bits": p.bits, "accuracy": p.accuracy})).collect::<Vec<_>>(),
             })).collect::<Vec<_>>()},
            {"stage": 4, "name": "combined_check",
             "policy": if outcome.rechecks.len() > 1 { Some(RECHECK_POLICY) } else { None },
             "rechecks": outcome.rechecks.iter().map(|r| json!({
                 "bits": bits_json(r.bits),
                 "accuracy": r.accuracy,
                 "widened": r.widened.map(|p| p.name()),
             })).collect::<Vec<_>>()},
        ],
        "scheme": {
            "bits": bits_json(s.bits),
            "input_fl": s.input_frac_len,
            "layers": s.layers.iter().map(|l| json!({
                "layer": l.name, "weight_fl": l.weight, "output_fl": l.output})).collect::<Vec<_>>(),
        },
        "combined_accuracy": outcome.combined_accuracy,
        "probe_count": outcome.probe_count(),
        "unmeetable": outcome.unmeetable,
    })
}

fn bits_json(b: fxpnet_core::stats::PartBits) -> Value {
    json!({"conv_weights": b.conv_weights, "fc_weights": b.fc_weights, "layer_outputs": b.layer_outputs})
}

pub fn datapath_json(report: &DatapathReport) -> Value {
    Value::Array(
        report
            .rows
            .iter()
            .map(|r| {
                json!({
                    "layer": r.layer, "m": r.m, "n": r.n, "x": r.x,
                    "product_width": r.product_width,
                    "adder_level_widths": r.adder_level_widths,
                    "accumulator_width": r.accumulator_width,
                    "bias_stage_width": r.bias_stage_width,
                })
            })
            .collect(),
    )
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    super::write_bytes(path, text)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_history_csv(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["iteration", "train_loss", "val_accuracy"])?;
    for h in history {
        w.write_record([
            h.iteration.to_string(),
            h.train_loss.map_or_else(String::new, |l| l.to_string()),
            h.val_accuracy.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryEntry>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let bad = |i: usize| Error::Usage(format!("{}: bad history field `{}`", path.display(), field(i)));
            Ok(HistoryEntry {
                iteration: field(0).parse().map_err(|_| bad(0))?,
                train_loss: match field(1) {
                    "" => None,
                    v => Some(v.parse().map_err(|_| bad(1))?),
                },
                val_accuracy: field(2).parse().map_err(|_| bad(2))?,
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["bits", "static_accuracy", "dynamic_accuracy"])?;
    for r in rows {
        w.write_record([r.bits.to_string(), r.static_accuracy.to_string(), r.dynamic_accuracy.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
