//! Tabular plot data: one CSV per figure, first line a `#` comment naming
//! the plot kind and how to read the columns.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::gains;
use super::projection::ProjectionMethod;
use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Radar,
    GainBars,
    Projection2d,
}

impl PlotKind {
    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Radar => "radar",
            PlotKind::GainBars => "gain_bars",
            PlotKind::Projection2d => "projection_2d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarRow {
    /// One polygon per series (model or LLM).
    pub series: String,
    /// One spoke per axis (dataset).
    pub axis: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub axis: String,
    pub baseline: String,
    pub series: String,
    pub baseline_value: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPoint {
    pub item_id: String,
    /// Series the point is drawn in (the predicted class).
    pub series: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlotData {
    Radar(Vec<RadarRow>),
    GainBars(Vec<GainRow>),
    Projection2d {
        method: ProjectionMethod,
        points: Vec<ProjectionPoint>,
    },
}

impl PlotData {
    pub fn kind(&self) -> PlotKind {
        match self {
            PlotData::Radar(_) => PlotKind::Radar,
            PlotData::GainBars(_) => PlotKind::GainBars,
            PlotData::Projection2d { .. } => PlotKind::Projection2d,
        }
    }

    fn len(&self) -> usize {
        match self {
            PlotData::Radar(r) => r.len(),
            PlotData::GainBars(r) => r.len(),
            PlotData::Projection2d { points, .. } => points.len(),
        }
    }

    /// CSV text, including the leading comment line.
    pub fn render(&self) -> Result<String> {
        if self.len() == 0 {
            return Err(Error::validation(format!(
                "{} plot has no data",
                self.kind().name()
            )));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = match self {
            PlotData::Radar(rows) => {
                w.write_record(["series", "axis", "value"])
                    .map_err(csv_err)?;
                for r in rows {
                    w.write_record([r.series.clone(), r.axis.clone(), fmt(r.value)])
                        .map_err(csv_err)?;
                }
                "# plot=radar; one polygon per series, one spoke per axis".to_string()
            }
            PlotData::GainBars(rows) => {
                w.write_record([
                    "axis",
                    "baseline",
                    "series",
                    "baseline_value",
                    "value",
                    "gain_points",
                    "gain_relative",
                ])
                .map_err(csv_err)?;
                for r in rows {
                    let (abs, rel) = gains(r.baseline_value, r.value);
                    w.write_record([
                        r.axis.clone(),
                        r.baseline.clone(),
                        r.series.clone(),
                        fmt(r.baseline_value),
                        fmt(r.value),
                        fmt(abs),
                        rel.map(fmt).unwrap_or_default(),
                    ])
                    .map_err(csv_err)?;
                }
                "# plot=gain_bars; gain_points = value - baseline_value, gain_relative = gain_points / baseline_value"
                    .to_string()
            }
            PlotData::Projection2d { method, points } => {
                w.write_record(["item_id", "series", "x", "y"])
                    .map_err(csv_err)?;
                for p in points {
                    w.write_record([p.item_id.clone(), p.series.clone(), fmt(p.x), fmt(p.y)])
                        .map_err(csv_err)?;
                }
                format!(
                    "# plot=projection_2d; method={}; series = predicted class",
                    match method {
                        ProjectionMethod::Tsne => "tsne",
                        ProjectionMethod::Pca => "pca",
                    }
                )
            }
        };
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::data(e.to_string()))?)
            .expect("csv output is utf-8");
        Ok(format!("{header}\n{body}"))
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::data(format!("plot data: {e}"))
}

/// Writes `data` to `path` atomically.
pub fn emit_plot_data(data: &PlotData, path: &Path) -> Result<()> {
    write_atomic(path, data.render()?.as_bytes())
}
