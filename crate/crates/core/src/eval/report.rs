use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPLIT_INTRA: &str = "test";
pub const SPLIT_HELD_OUT: &str = "held_out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucEntry {
    pub detector: String,
    pub method: String,
    pub split: String,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub stage1_config: String,
    pub stage2_config: String,
    pub train_methods: Vec<String>,
    pub held_out: Option<String>,
    pub entries: Vec<AucEntry>,
}

impl EvalReport {
    pub fn get(&self, detector: &str, method: &str, split: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.detector == detector && e.method == method && e.split == split)
            .map(|e| e.auc)
    }

    pub fn held_out_auc(&self, detector: &str) -> Option<f64> {
        let m = self.held_out.as_deref()?;
        self.get(detector, m, SPLIT_HELD_OUT)
    }

    /// Mean intra-domain AUC of `detector` over the training methods.
    pub fn intra_mean(&self, detector: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.detector == detector && e.split == SPLIT_INTRA)
            .map(|e| e.auc)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("detector,method,split,auc\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{},{:.6}", e.detector, e.method, e.split, e.auc);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn detectors(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.detector) {
                out.push(e.detector.clone());
            }
        }
        out
    }

    /// Bar chart of one detector's AUCs.
    pub fn to_svg(&self, detector: &str) -> String {
        let rows: Vec<&AucEntry> = self.entries.iter().filter(|e| e.detector == detector).collect();
        let (bar, gap, left, top, width) = (28.0, 12.0, 170.0, 40.0, 300.0);
        let height = top + rows.len() as f64 * (bar + gap) + 30.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
            left + width + 70.0
        );
        let _ = writeln!(s, r#"<text x="10" y="22" font-size="14">AUC, {detector}</text>"#);
        for (i, e) in rows.iter().enumerate() {
            let y = top + i as f64 * (bar + gap);
            let fill = if e.split == SPLIT_HELD_OUT { "#c0504d" } else { "#4f81bd" };
            let _ = writeln!(
                s,
                r#"<text x="10" y="{:.1}">{} ({})</text>"#,
                y + bar * 0.65,
                e.method,
                e.split
            );
            let _ = writeln!(
                s,
                r#"<rect x="{left}" y="{y:.1}" width="{:.1}" height="{bar}" fill="{fill}"/>"#,
                e.auc.clamp(0.0, 1.0) * width
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}">{:.3}</text>"#,
                left + e.auc.clamp(0.0, 1.0) * width + 6.0,
                y + bar * 0.65,
                e.auc
            );
        }
        let chance = left + 0.5 * width;
        let _ = writeln!(
            s,
            r##"<line x1="{chance}" y1="{}" x2="{chance}" y2="{:.1}" stroke="#888" stroke-dasharray="4 3"/>"##,
            top - 6.0,
            height - 24.0
        );
        s.push_str("</svg>\n");
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReportFormats {
    pub csv: bool,
    pub json: bool,
    pub svg: bool,
}

impl ReportFormats {
    pub const ALL: ReportFormats = ReportFormats {
        csv: true,
        json: true,
        svg: true,
    };
}

/// Write `report.csv`, `report.json` and `auc_<detector>.svg` as requested.
pub fn emit_report(report: &EvalReport, out_dir: &Path, formats: ReportFormats) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    if formats.csv {
        files.push((out_dir.join("report.csv"), report.to_csv()));
    }
    if formats.json {
        files.push((out_dir.join("report.json"), report.to_json()?));
    }
    if formats.svg {
        for d in report.detectors() {
            files.push((out_dir.join(format!("auc_{d}.svg")), report.to_svg(&d)));
        }
    }
    for (path, body) in &files {
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
