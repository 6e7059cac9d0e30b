//! Markdown summary of whatever result files exist in the output directory.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use crate::config::{config_error, ExperimentConfig};

fn csv_table(text: &str, columns: Option<&[&str]>) -> String {
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let Some(header) = lines.next() else {
        return String::new();
    };
    let names: Vec<&str> = header.split(',').collect();
    let keep: Vec<usize> = match columns {
        Some(cols) => cols.iter().filter_map(|c| names.iter().position(|n| n == c)).collect(),
        None => (0..names.len()).collect(),
    };
    let row = |cells: &[&str]| {
        let picked: Vec<&str> = keep.iter().map(|&i| cells.get(i).copied().unwrap_or("")).collect();
        format!("| {} |\n", picked.join(" | "))
    };
    let mut out = row(&names);
    out += &format!("|{}\n", "---|".repeat(keep.len()));
    for line in lines {
        out += &row(&line.split(',').collect::<Vec<_>>());
    }
    out
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    if path.exists() {
        Ok(Some(fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?))
    } else {
        Ok(None)
    }
}

pub fn render_report(cfg: &ExperimentConfig) -> Result<String> {
    let dir = &cfg.output;
    if !dir.is_dir() {
        return Err(config_error(format!("results directory {} does not exist", dir.display())));
    }
    let mut md = String::from("# Dilution sweep report\n\n");
    let model_dir = cfg.model.parent().unwrap_or(Path::new("."));
    if let Some(text) = read_optional(&model_dir.join("train_summary.json"))? {
        let v: serde_json::Value = serde_json::from_str(&text)?;
        md += &format!(
            "## Baseline model\n\nHeld-out DSC {} over {} samples after {} epochs (final loss {}).\n\n",
            v["eval_dsc"], v["eval_samples"], v["epochs"], v["final_loss"]
        );
    }
    if let Some(text) = read_optional(&dir.join("comparison.json"))? {
        let v: serde_json::Value = serde_json::from_str(&text)?;
        md += "## Best configurations\n\n| kind | placement | rate | R | UCE | DSC | divergence % |\n|---|---|---|---|---|---|---|\n";
        for key in ["best_frequency", "best_signal"] {
            let b = &v[key];
            if b.is_object() {
                md += &format!(
                    "| {} | {} | {} | {} | {} | {} | {} |\n",
                    b["kind"].as_str().unwrap_or(""),
                    b["placement"].as_str().unwrap_or(""),
                    b["rate"],
                    b["repetitions"],
                    b["uce"],
                    b["dsc_diluted"],
                    b["divergence_pct"]
                );
            }
        }
        md += &format!(
            "\nBest frequency UCE <= best signal UCE: {}\n\n",
            v["frequency_uce_le_signal"]
        );
    }
    if let Some(text) = read_optional(&dir.join("aggregate.csv"))? {
        md += "## Per-configuration aggregates\n\n";
        md += &csv_table(&text, None);
        md += "\n";
    }
    if let Some(text) = read_optional(&dir.join("bench_fit.csv"))? {
        md += "## Timing fits (log time vs log elements)\n\n";
        md += &csv_table(&text, None);
        md += "\n";
    }
    if let Some(text) = read_optional(&dir.join("bench.csv"))? {
        md += "## Timings\n\n";
        md += &csv_table(&text, Some(&["kind", "side", "ns_per_application"]));
        md += "\n";
    }
    Ok(md)
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<std::path::PathBuf> {
    let md = render_report(cfg)?;
    let path = cfg.output.join("report.md");
    fs::write(&path, md).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}
