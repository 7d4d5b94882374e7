//! Loss-function ablation: three consistency losses, each with and without
//! the strong-branch entropy term, on top of one shared stage-1 checkpoint.

use std::path::PathBuf;

use langadapt_core::io::write_atomic;
use langadapt_core::losses::LossKind;
use langadapt_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::pipeline::{run_stages, RunLayout, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub loss: LossKind,
    pub entropy: bool,
}

impl AblationCell {
    pub fn id(&self) -> String {
        format!(
            "{}{}",
            self.loss.label().to_lowercase(),
            if self.entropy { "-ent" } else { "" }
        )
    }

    pub fn label(&self) -> String {
        format!(
            "{}{}",
            self.loss.label(),
            if self.entropy { " + entropy" } else { "" }
        )
    }

    /// The configuration the method uses by default.
    pub fn is_default(&self) -> bool {
        self.loss == LossKind::Ce && self.entropy
    }
}

/// Loss kinds crossed with entropy off/on; rows without entropy first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub losses: Vec<LossKind>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            losses: vec![LossKind::Lsce, LossKind::Ncs, LossKind::Ce],
        }
    }
}

impl AblationGrid {
    pub fn cells(&self) -> Result<Vec<AblationCell>> {
        let mut distinct = self.losses.clone();
        distinct.sort_by_key(|k| k.label());
        distinct.dedup();
        if distinct.len() != LossKind::ALL.len() || self.losses.len() != LossKind::ALL.len() {
            return Err(Error::validation(
                "the ablation grid needs each loss kind exactly once",
            ));
        }
        Ok([false, true]
            .into_iter()
            .flat_map(|entropy| {
                self.losses
                    .iter()
                    .map(move |&loss| AblationCell { loss, entropy })
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub label: String,
    pub default: bool,
    pub accuracy: Option<f64>,
    pub final_strong_entropy: Option<f64>,
    /// Mean strong-branch loss per epoch.
    pub strong_loss_trace: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub dataset_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "loss ablation on {} (config {}, seed {})\n{:<18} {:>9}  {:>8}\n",
            self.dataset_id, self.config_hash, self.seed, "loss", "accuracy", "entropy"
        );
        for r in &self.rows {
            let fmt = |v: Option<f64>| {
                v.map(|x| format!("{x:.4}"))
                    .unwrap_or_else(|| "failed".into())
            };
            out.push_str(&format!(
                "{:<18} {:>9}  {:>8}{}\n",
                r.label,
                fmt(r.accuracy),
                fmt(r.final_strong_entropy),
                if r.default { "  (default)" } else { "" }
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "loss",
            "entropy",
            "default",
            "accuracy",
            "final_strong_entropy",
            "error",
        ])
        .expect("in-memory");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            w.write_record([
                r.cell.loss.label().to_string(),
                r.cell.entropy.to_string(),
                r.default.to_string(),
                opt(r.accuracy),
                opt(r.final_strong_entropy),
                r.error.clone().unwrap_or_default(),
            ])
            .expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
    }
}

fn read_json(path: PathBuf) -> Option<Value> {
    serde_json::from_slice(&std::fs::read(path).ok()?).ok()
}

fn cell_config(base: &RunConfig, cell: AblationCell) -> RunConfig {
    let mut cfg = base.clone();
    cfg.stage2.loss.kind = cell.loss;
    cfg.stage2.loss.entropy_enabled = cell.entropy;
    cfg
}

/// Runs corpus and stage 1 once in `cfg.output_dir`, then stage 2 and eval
/// for every cell under `ablation/<cell>/`. A failing cell is recorded and
/// the others still run.
pub fn run_ablation(cfg: &RunConfig, grid: &AblationGrid) -> Result<AblationTable> {
    let cells = grid.cells()?;
    let base = RunLayout::single(&cfg.output_dir);
    run_stages(cfg, &base, &[Stage::Corpus, Stage::Stage1])?;
    let dataset_id = read_json(base.corpus_summary())
        .and_then(|v| v["dataset_id"].as_str().map(str::to_string))
        .unwrap_or_default();

    let mut rows = Vec::new();
    for cell in cells {
        let layout = RunLayout {
            root: cfg.output_dir.clone(),
            cell: cfg.output_dir.join("ablation").join(cell.id()),
        };
        let outcome = run_stages(
            &cell_config(cfg, cell),
            &layout,
            &[Stage::Stage2, Stage::Eval],
        );
        let (accuracy, entropy, error) = match outcome {
            Ok(s) => (s.accuracy, s.final_strong_entropy, None),
            Err(e) => {
                log::error!("ablation cell {} failed: {e}", cell.label());
                (None, None, Some(e.to_string()))
            }
        };
        let trace = read_json(layout.stage2_log())
            .and_then(|v| {
                v["log"]["epochs"].as_array().map(|es| {
                    es.iter()
                        .skip(1)
                        .filter_map(|e| e["strong_loss"].as_f64())
                        .collect()
                })
            })
            .unwrap_or_default();
        rows.push(AblationRow {
            cell,
            label: cell.label(),
            default: cell.is_default(),
            accuracy,
            final_strong_entropy: entropy,
            strong_loss_trace: if error.is_none() { trace } else { Vec::new() },
            error,
        });
    }
    let table = AblationTable {
        dataset_id,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        rows,
    };
    let dir = cfg.output_dir.join("ablation");
    write_atomic(&dir.join("table.txt"), table.to_text().as_bytes())?;
    write_atomic(&dir.join("table.csv"), table.to_csv().as_bytes())?;
    let mut json = serde_json::to_string_pretty(&table).expect("serializable");
    json.push('\n');
    write_atomic(&dir.join("table.json"), json.as_bytes())?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_six_cells_with_one_default() {
        let cells = AblationGrid::default().cells().unwrap();
        assert_eq!(cells.len(), 6);
        let labels: Vec<String> = cells.iter().map(AblationCell::label).collect();
        assert_eq!(
            labels,
            [
                "LSCE",
                "NCS",
                "CE",
                "LSCE + entropy",
                "NCS + entropy",
                "CE + entropy"
            ]
        );
        let defaults: Vec<_> = cells.iter().filter(|c| c.is_default()).collect();
        assert_eq!(defaults.len(), 1);
        assert_eq!(defaults[0].label(), "CE + entropy");
    }

    #[test]
    fn grid_with_a_repeated_loss_is_rejected() {
        let grid = AblationGrid {
            losses: vec![LossKind::Ce, LossKind::Ce, LossKind::Ncs],
        };
        assert!(matches!(grid.cells(), Err(Error::Validation(_))));
    }
}
