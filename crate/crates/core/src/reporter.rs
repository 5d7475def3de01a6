//! Plain-text delta tables, plot-ready CSV, and the run manifest.
//!
//! Metric values are unit-scaled everywhere else; this module multiplies by
//! 100 and rounds to two decimals. Lower is better for every metric.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fairmetrics::{Metric, MetricCell};
use crate::promptkit::PromptFrame;
use crate::stattools::PairComparison;

/// Cells pooled over regimes, keyed by (model, frame).
pub type TableCells = BTreeMap<(String, PromptFrame), MetricCell>;
/// Cells per regime, keyed by (model, regime, frame).
pub type RegimeCells = BTreeMap<(String, String, PromptFrame), MetricCell>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub regime: String,
    #[serde(flatten)]
    pub comparison: PairComparison,
}

/// Report units (x100) rounded half away from zero to two decimals.
fn report_units(v: f64) -> f64 {
    let r = (v * 100.0 * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn scaled(v: f64) -> String {
    format!("{:.2}", report_units(v))
}

fn signed(delta: f64) -> String {
    format!("{:+.2}", report_units(delta))
}

/// Signed, bracketed delta in report units; a rounded zero prints as `(+0.00)`.
pub fn format_delta(delta: f64) -> String {
    format!("({})", signed(delta))
}

const NAME_WIDTH: usize = 22;
const COL_WIDTH: usize = 10;

fn row(out: &mut String, name: &str, values: &[String], n: usize) {
    let _ = write!(out, "{name:<NAME_WIDTH$}");
    for v in values {
        let _ = write!(out, "{v:>COL_WIDTH$}");
    }
    let _ = writeln!(out, "{n:>COL_WIDTH$}");
}

fn models(cells: &TableCells) -> Vec<&str> {
    let mut models: Vec<&str> = cells.keys().map(|(m, _)| m.as_str()).collect();
    models.dedup();
    models
}

/// Base rows carry absolute values; each REFER row carries its change from the base.
pub fn render_delta_table(cells: &TableCells) -> String {
    let mut out = String::new();
    out.push_str("Fairness by framework (x100; lower is better). Bracketed rows give the REFER change from the row above.\n");
    let mut notes = Vec::new();
    for model in models(cells) {
        let _ = writeln!(out, "\nModel: {model}");
        let _ = write!(out, "{:<NAME_WIDTH$}", "Frame");
        for m in Metric::ALL {
            let _ = write!(out, "{:>COL_WIDTH$}", m.as_str().to_uppercase());
        }
        let _ = writeln!(out, "{:>COL_WIDTH$}", "N");

        let frames = cells.keys().filter(|(m, _)| m == model).map(|(_, f)| *f);
        for frame in frames {
            let cell = &cells[&(model.to_string(), frame)];
            if let Some(base) = frame.base_counterpart() {
                if cells.contains_key(&(model.to_string(), base)) {
                    continue; // printed under its base row
                }
            }
            let values: Vec<String> = Metric::ALL.iter().map(|&m| scaled(cell.get(m))).collect();
            row(&mut out, frame.display_name(), &values, cell.n_trials);
            let Some(refer) = frame.refer_counterpart() else {
                continue;
            };
            match cells.get(&(model.to_string(), refer)) {
                Some(rc) => {
                    let deltas: Vec<String> = Metric::ALL
                        .iter()
                        .map(|&m| format_delta(rc.get(m) - cell.get(m)))
                        .collect();
                    row(&mut out, refer.display_name(), &deltas, rc.n_trials);
                }
                None => notes.push(format!(
                    "{model}: no {} cells, so {} has no delta row.",
                    refer.display_name(),
                    frame.display_name()
                )),
            }
        }
    }
    if !notes.is_empty() {
        out.push_str("\nNotes:\n");
        for n in notes {
            let _ = writeln!(out, "* {n}");
        }
    }
    out
}

fn variant(frame: PromptFrame) -> &'static str {
    if frame.oracle {
        "oracle"
    } else if frame.refer {
        "refer"
    } else {
        "base"
    }
}

/// One row per (model, frame): values x100 and, for REFER frames with a base
/// cell, the deltas from that base.
pub fn render_table_csv(cells: &TableCells) -> String {
    let mut out = String::from(
        "model,frame,variant,n_trials,spd,bur,uer,sof,delta_spd,delta_bur,delta_uer,delta_sof\n",
    );
    for ((model, frame), cell) in cells {
        let base = frame
            .base_counterpart()
            .and_then(|b| cells.get(&(model.clone(), b)));
        let _ = write!(out, "{model},{frame},{},{}", variant(*frame), cell.n_trials);
        for m in Metric::ALL {
            let _ = write!(out, ",{}", scaled(cell.get(m)));
        }
        for m in Metric::ALL {
            match base {
                Some(b) => {
                    let _ = write!(out, ",{}", signed(cell.get(m) - b.get(m)));
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Bar-chart data per regime. REFER rows carry the significance marker of
/// their comparison against the base frame.
pub fn render_bar_csv(cells: &RegimeCells, comparisons: &[ComparisonRow]) -> String {
    let mut out = String::from("model,regime,frame,variant,metric,value,marker\n");
    for ((model, regime, frame), cell) in cells {
        for m in Metric::ALL {
            let marker = comparisons
                .iter()
                .find(|c| {
                    frame.refer
                        && &c.model == model
                        && &c.regime == regime
                        && c.comparison.refer_frame == *frame
                        && c.comparison.metric == m
                })
                .map(|c| c.comparison.marker())
                .unwrap_or("");
            let _ = writeln!(
                out,
                "{model},{regime},{frame},{},{m},{},{marker}",
                variant(*frame),
                scaled(cell.get(m))
            );
        }
    }
    out
}

pub fn render_comparisons_csv(rows: &[ComparisonRow]) -> String {
    let mut out =
        String::from("model,regime,base_frame,refer_frame,metric,u,p,direction,significant\n");
    for r in rows {
        let c = &r.comparison;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{},{}",
            r.model,
            r.regime,
            c.base_frame,
            c.refer_frame,
            c.metric,
            c.u_statistic,
            c.p_value,
            c.direction.as_str(),
            c.significant
        );
    }
    out
}

/// Hex sha256 of the configuration text.
pub fn config_hash(config_text: &str) -> String {
    hex::encode(Sha256::digest(config_text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub sample_seed: u64,
    #[serde(default)]
    pub generation_seed: Option<u64>,
    pub models: Vec<String>,
    pub frames: Vec<PromptFrame>,
    pub provider: String,
    pub n_collections: usize,
    pub n_trials: usize,
    pub requests: u64,
    pub cache_hits: u64,
    pub provider_calls: u64,
    pub cache_hit_ratio: f64,
    pub error_count: u64,
    pub wall_time_secs: f64,
    /// Every requested trial finished.
    pub complete: bool,
}

pub fn render_run_manifest(manifest: &RunManifest) -> String {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serialises");
    text.push('\n');
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fairmetrics::FairnessScores;
    use crate::promptkit::Framework;

    fn cell(v: f64) -> MetricCell {
        MetricCell {
            mean_spd: v,
            bur: v,
            mean_uer: v,
            mean_sof: v,
            n_trials: 1,
            per_trial: Vec::<FairnessScores>::new(),
        }
    }

    #[test]
    fn delta_formatting() {
        assert_eq!(format_delta(0.3100 - 0.3507), "(-4.07)");
        assert_eq!(format_delta(0.0), "(+0.00)");
        assert_eq!(format_delta(-1e-17), "(+0.00)");
        assert_eq!(format_delta(0.0123), "(+1.23)");
    }

    #[test]
    fn table_pairs_base_with_refer() {
        let direct = PromptFrame::base(Framework::Direct);
        let mut cells = TableCells::new();
        cells.insert(("m".into(), direct), cell(0.3507));
        cells.insert(
            ("m".into(), PromptFrame::with_refer(Framework::Direct)),
            cell(0.31),
        );
        let text = render_delta_table(&cells);
        let lines: Vec<&str> = text.lines().collect();
        let base = lines
            .iter()
            .position(|l| l.starts_with("Direct Prompting"))
            .unwrap();
        assert!(lines[base].contains("35.07"));
        assert!(lines[base + 1].starts_with("REFER"));
        assert!(lines[base + 1].contains("(-4.07)"));
        assert!(!text.contains("Notes:"));
    }

    #[test]
    fn missing_refer_cell_gets_a_footnote() {
        let mut cells = TableCells::new();
        cells.insert(("m".into(), PromptFrame::base(Framework::Cot)), cell(0.2));
        let text = render_delta_table(&cells);
        assert!(text.contains("CoT "));
        assert!(text.contains("Notes:"));
        assert!(text.contains("no CoT-R cells"));
    }

    #[test]
    fn config_hash_changes_with_config() {
        assert_ne!(config_hash("a = 1"), config_hash("a = 2"));
        assert_eq!(config_hash("a"), config_hash("a"));
    }
}
