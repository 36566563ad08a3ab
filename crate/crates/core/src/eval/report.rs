use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Case, VectorSource};
use crate::arith::VectorStats;
use crate::error::{Error, Result};
use crate::synth::Emotion;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Provenance of a scenario run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config_hash: Option<String>,
    pub corpus_hash: Option<String>,
    pub pretrained_hash: String,
    pub embedder_hash: String,
    pub vector_hashes: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
}

/// SECS between emotional and neutral synthesis of the same speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecsRow {
    pub emotion: Emotion,
    pub alpha: f64,
    pub n: usize,
    pub mean: f64,
    pub half_width: f64,
}

/// Own-speaker SECS against the mean SECS to every other speaker's neutral synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub target: String,
    pub emotion: Emotion,
    pub alpha: f64,
    pub own_secs: f64,
    pub cross_secs: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityRow {
    pub emotion: Emotion,
    pub direction: Vec<f64>,
    /// Row-stochastic, indexed `[true level][perceived level]`, levels by ascending α.
    pub confusion: Vec<Vec<f64>>,
    pub mean_diagonal: f64,
    pub monotonic_fraction: f64,
    pub sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub schema_version: u32,
    pub name: String,
    pub case: Case,
    pub vector: VectorSource,
    pub targets: Vec<String>,
    pub emotions: Vec<Emotion>,
    pub alphas: Vec<f64>,
    pub test_sentences: usize,
    pub secs: Vec<SecsRow>,
    pub margins: Vec<MarginRow>,
    pub intensity: Vec<IntensityRow>,
    pub vector_stats: Vec<VectorStats>,
    pub run: RunInfo,
}

impl ScenarioReport {
    pub fn mean_margin(&self) -> f64 {
        self.margins.iter().map(|m| m.margin).sum::<f64>() / self.margins.len() as f64
    }

    pub fn min_margin(&self) -> f64 {
        self.margins.iter().map(|m| m.margin).fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("report serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_json(bytes: &[u8]) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

fn level_names(levels: usize) -> Vec<String> {
    if levels == 3 {
        ["weak", "medium", "strong"].map(String::from).to_vec()
    } else {
        (1..=levels).map(|i| format!("level {i}")).collect()
    }
}

pub fn render_markdown(report: &ScenarioReport) -> String {
    let mut md = String::new();
    let w = &mut md;
    // Writing to a String cannot fail.
    let _ = writeln!(w, "# Scenario `{}`\n", report.name);
    let _ = writeln!(w, "- case: {}", report.case);
    let _ = writeln!(w, "- vector: {}", report.vector);
    let _ = writeln!(w, "- targets: {}", report.targets.join(", "));
    let _ = writeln!(w, "- sentences per target: {}\n", report.test_sentences);

    let _ = writeln!(w, "## SECS (emotional vs. own neutral synthesis)\n");
    let header: Vec<String> = report.alphas.iter().map(|a| format!("α={a}")).collect();
    let _ = writeln!(w, "| Emotion | {} |", header.join(" | "));
    let _ = writeln!(w, "|---|{}", "---|".repeat(report.alphas.len()));
    for &e in &report.emotions {
        let cells: Vec<String> = report
            .alphas
            .iter()
            .map(|&a| {
                report
                    .secs
                    .iter()
                    .find(|r| r.emotion == e && r.alpha == a)
                    .map_or("-".to_string(), |r| format!("{:.4} ± {:.4}", r.mean, r.half_width))
            })
            .collect();
        let _ = writeln!(w, "| {e} | {} |", cells.join(" | "));
    }

    let _ = writeln!(w, "\n## Speaker margins\n");
    let _ = writeln!(w, "| Target | Emotion | α | own SECS | cross SECS | margin |");
    let _ = writeln!(w, "|---|---|---|---|---|---|");
    for m in &report.margins {
        let _ = writeln!(
            w,
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} |",
            m.target, m.emotion, m.alpha, m.own_secs, m.cross_secs, m.margin
        );
    }
    if !report.margins.is_empty() {
        let _ = writeln!(
            w,
            "\nMean margin {:.4}, minimum {:.4}.",
            report.mean_margin(),
            report.min_margin()
        );
    }

    for row in &report.intensity {
        let names = level_names(row.confusion.len());
        let _ = writeln!(w, "\n## Intensity ordering: {}\n", row.emotion);
        let _ = writeln!(w, "| true \\ perceived | {} |", names.join(" | "));
        let _ = writeln!(w, "|---|{}", "---|".repeat(names.len()));
        for (name, r) in names.iter().zip(&row.confusion) {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:.3}")).collect();
            let _ = writeln!(w, "| {name} | {} |", cells.join(" | "));
        }
        let _ = writeln!(
            w,
            "\nMean diagonal {:.4}; strictly increasing on {:.1}% of {} sentences.",
            row.mean_diagonal,
            100.0 * row.monotonic_fraction,
            row.sentences
        );
    }

    let _ = writeln!(w, "\n## Vectors\n");
    let _ = writeln!(w, "| Vector | global L2 | max abs | near-zero fraction |");
    let _ = writeln!(w, "|---|---|---|---|");
    for s in &report.vector_stats {
        let _ = writeln!(
            w,
            "| {} | {:.6} | {:.6} | {:.6} |",
            s.label, s.global_l2, s.max_abs, s.near_zero_fraction
        );
    }

    let _ = writeln!(w, "\n## Provenance\n");
    let run = &report.run;
    if let Some(h) = &run.config_hash {
        let _ = writeln!(w, "- config: `{h}`");
    }
    if let Some(h) = &run.corpus_hash {
        let _ = writeln!(w, "- corpus: `{h}`");
    }
    let _ = writeln!(w, "- pretrained: `{}`", run.pretrained_hash);
    let _ = writeln!(w, "- embedder: `{}`", run.embedder_hash);
    for (e, h) in &run.vector_hashes {
        let _ = writeln!(w, "- vector {e}: `{h}`");
    }
    for (k, s) in &run.seeds {
        let _ = writeln!(w, "- seed {k}: {s}");
    }
    md
}

/// Writes `report.json` and `report.md` into `dir`, creating it if needed.
pub fn write_report(report: &ScenarioReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    fs::write(&json, report.to_json()).map_err(|e| Error::io(&json, e))?;
    let md = dir.join("report.md");
    fs::write(&md, render_markdown(report)).map_err(|e| Error::io(&md, e))?;
    Ok(())
}
