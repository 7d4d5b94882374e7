//! One full run per description corpus, compared side by side.

use std::path::PathBuf;

use langadapt_core::corpus::load_corpus;
use langadapt_core::io::write_atomic;
use langadapt_core::metrics::{emit_plot_data, PlotData, RadarRow};
use langadapt_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::run_pipeline;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// Generator id recorded in the corpus.
    pub llm: String,
    pub corpus: PathBuf,
    /// Stage-1 accuracy on held-out descriptions.
    pub text_accuracy: Option<f64>,
    /// Stage-2 test accuracy.
    pub end_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub dataset_id: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "description sources on {}\n{:<28} {:>13} {:>13}\n",
            self.dataset_id, "llm", "text acc", "end acc"
        );
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28} {:>13} {:>13}\n",
                r.llm,
                fmt(r.text_accuracy),
                fmt(r.end_accuracy)
            ));
        }
        out
    }
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs the pipeline of `base` once per corpus (in
/// `<output_dir>/compare/<n>-<llm>`). All corpora must share one catalog.
pub fn compare_llms(base: &RunConfig, corpora: &[PathBuf]) -> Result<ComparisonTable> {
    if corpora.is_empty() {
        return Err(Error::validation("compare-llms needs at least one corpus"));
    }
    let loaded = corpora
        .iter()
        .map(|p| load_corpus(p))
        .collect::<Result<Vec<_>>>()?;
    let catalog = loaded[0].catalog().clone();
    for (c, p) in loaded.iter().zip(corpora).skip(1) {
        if c.catalog() != &catalog {
            return Err(Error::validation(format!(
                "corpus {} has a different class catalog than {}",
                p.display(),
                corpora[0].display()
            )));
        }
    }
    let mut rows = Vec::new();
    for (i, (corpus, path)) in loaded.iter().zip(corpora).enumerate() {
        let cfg = RunConfig {
            corpus: path.clone(),
            output_dir: base
                .output_dir
                .join("compare")
                .join(format!("{i}-{}", slug(corpus.generator()))),
            ..base.clone()
        };
        let summary = run_pipeline(&cfg)?;
        rows.push(ComparisonRow {
            llm: corpus.generator().to_string(),
            corpus: path.clone(),
            text_accuracy: summary.text_holdout_accuracy,
            end_accuracy: summary.accuracy,
        });
    }
    let table = ComparisonTable {
        dataset_id: catalog.dataset_id().to_string(),
        rows,
    };
    let dir = base.output_dir.join("compare");
    write_atomic(&dir.join("table.txt"), table.to_text().as_bytes())?;
    let mut json = serde_json::to_string_pretty(&table).expect("serializable");
    json.push('\n');
    write_atomic(&dir.join("table.json"), json.as_bytes())?;
    let radar: Vec<RadarRow> = table
        .rows
        .iter()
        .filter_map(|r| {
            r.text_accuracy.map(|value| RadarRow {
                series: r.llm.clone(),
                axis: table.dataset_id.clone(),
                value,
            })
        })
        .collect();
    if !radar.is_empty() {
        emit_plot_data(
            &PlotData::Radar(radar),
            &dir.join("text_accuracy_radar.csv"),
        )?;
    }
    Ok(table)
}
