//! Report files: accuracy matrix and table CSVs, JSON summary, SVG chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{FinetuneSummary, PretrainSummary, TeacherSummary};
use super::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub name: String,
    pub value: Option<f64>,
    pub at_least: Option<f64>,
    pub at_most: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seeds: Vec<u64>,
    pub teacher: Vec<TeacherSummary>,
    pub pretrain: Vec<PretrainSummary>,
    pub finetune: Vec<FinetuneSummary>,
    /// Mean top-1 in percent, by model then test set.
    pub matrix: BTreeMap<String, BTreeMap<String, f64>>,
    pub gates: Vec<GateResult>,
    pub passed: bool,
    pub trained_steps: usize,
    pub seconds: BTreeMap<String, f64>,
}

impl Summary {
    pub fn cell(&self, model: &str, testset: &str) -> Option<f64> {
        self.matrix.get(model)?.get(testset).copied()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn fmt1(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.1}"))
}

/// `matrix.csv`: one row per model, one column per configured test set.
pub fn write_matrix_csv(path: &Path, cfg: &ExperimentConfig, s: &Summary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["model".to_string()];
    header.extend(cfg.testsets.iter().map(|t| t.name.clone()));
    w.write_record(&header)?;
    for m in cfg
        .model_names()
        .iter()
        .filter(|m| s.matrix.contains_key(*m))
    {
        let mut row = vec![m.clone()];
        row.extend(cfg.testsets.iter().map(|t| fmt1(s.cell(m, &t.name))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `table.csv`: the configured table layout.
pub fn write_table_csv(path: &Path, cfg: &ExperimentConfig, s: &Summary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["row".to_string(), "testset".to_string()];
    header.extend(cfg.table.columns.iter().cloned());
    w.write_record(&header)?;
    for row in &cfg.table.rows {
        let mut rec = vec![row.label.clone(), row.testset.clone()];
        rec.extend(row.models.iter().map(|m| fmt1(s.cell(m, &row.testset))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

const COLORS: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

/// Grouped bar chart: one group per test set, one bar per model.
pub fn matrix_svg(cfg: &ExperimentConfig, s: &Summary) -> String {
    let names = cfg.model_names();
    let models: Vec<&String> = names.iter().filter(|m| s.matrix.contains_key(*m)).collect();
    let tests = &cfg.testsets;
    let (bar, gap, plot_h, left, top) = (12.0, 18.0, 200.0, 40.0, 20.0);
    let group_w = models.len() as f64 * bar + gap;
    let width = left + tests.len() as f64 * group_w + 160.0;
    let height = top + plot_h + 60.0;
    let mut o = String::new();
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    for pct in [0, 25, 50, 75, 100] {
        let y = top + plot_h * (1.0 - pct as f64 / 100.0);
        let _ = writeln!(
            o,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{pct}</text>"##,
            width - 160.0,
            left - 4.0,
            y + 3.0
        );
    }
    for (ti, t) in tests.iter().enumerate() {
        let x0 = left + ti as f64 * group_w + gap / 2.0;
        for (mi, m) in models.iter().enumerate() {
            if let Some(v) = s.cell(m, &t.name) {
                let h = plot_h * v / 100.0;
                let _ = writeln!(
                    o,
                    r#"<rect x="{:.1}" y="{:.1}" width="{bar}" height="{h:.1}" fill="{}"><title>{m} @ {}: {v:.1}</title></rect>"#,
                    x0 + mi as f64 * bar,
                    top + plot_h - h,
                    COLORS[mi % COLORS.len()],
                    t.name
                );
            }
        }
        let _ = writeln!(
            o,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + models.len() as f64 * bar / 2.0,
            top + plot_h + 14.0,
            t.name
        );
    }
    for (mi, m) in models.iter().enumerate() {
        let y = top + mi as f64 * 14.0;
        let x = width - 150.0;
        let _ = writeln!(
            o,
            r#"<rect x="{x}" y="{y}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{m}</text>"#,
            COLORS[mi % COLORS.len()],
            x + 14.0,
            y + 9.0
        );
    }
    o.push_str("</svg>\n");
    o
}

/// Writes every report file under `dir/reports`.
pub fn write_all(dir: &Path, cfg: &ExperimentConfig, s: &Summary) -> Result<()> {
    let r = dir.join("reports");
    std::fs::create_dir_all(&r)?;
    crate::eval::write_json(&r.join("summary.json"), s)?;
    if !s.matrix.is_empty() {
        write_matrix_csv(&r.join("matrix.csv"), cfg, s)?;
        std::fs::write(r.join("matrix.svg"), matrix_svg(cfg, s))?;
        if !cfg.table.rows.is_empty() {
            write_table_csv(&r.join("table.csv"), cfg, s)?;
        }
    }
    Ok(())
}

/// Plain-text rendering of the table (or the matrix) and the gates.
pub fn render_text(cfg: &ExperimentConfig, s: &Summary) -> String {
    let mut o = String::new();
    if cfg.table.rows.is_empty() {
        let widths: Vec<usize> = cfg
            .testsets
            .iter()
            .map(|t| t.name.len().max(10) + 2)
            .collect();
        let _ = write!(o, "{:<16}", "model");
        for (t, w) in cfg.testsets.iter().zip(&widths) {
            let _ = write!(o, "{:>w$}", t.name);
        }
        o.push('\n');
        for m in cfg
            .model_names()
            .iter()
            .filter(|m| s.matrix.contains_key(*m))
        {
            let _ = write!(o, "{m:<16}");
            for (t, w) in cfg.testsets.iter().zip(&widths) {
                let _ = write!(o, "{:>w$}", fmt1(s.cell(m, &t.name)));
            }
            o.push('\n');
        }
    } else {
        let _ = write!(o, "{:<46}", "");
        for c in &cfg.table.columns {
            let _ = write!(o, "{c:>11}");
        }
        o.push('\n');
        for row in &cfg.table.rows {
            let _ = write!(o, "{:<46}", row.label);
            for m in &row.models {
                let _ = write!(o, "{:>11}", fmt1(s.cell(m, &row.testset)));
            }
            o.push('\n');
        }
    }
    for g in &s.gates {
        let _ = writeln!(
            o,
            "{} {:<28} {}",
            if g.pass { "PASS" } else { "FAIL" },
            g.name,
            g.value.map_or("n/a".into(), |v| format!("{v:.1}"))
        );
    }
    o
}
