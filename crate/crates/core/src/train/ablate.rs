use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;

use super::config::TrainConfig;
use super::trainer::{evaluate, train};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{InputMode, Level};

pub const ABLATION_HEADER: [&str; 4] = ["variant", "levels_or_mode", "cpm", "fp_tp_ratio"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Input assembly × GA at data load.
    Input,
    /// Pyramid level subsets × plain or GA pyramid.
    Fpn,
}

impl AblationMode {
    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Input => "input",
            AblationMode::Fpn => "fpn",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(AblationMode::Input),
            "fpn" => Ok(AblationMode::Fpn),
            other => Err(Error::Config(format!(
                "unknown ablation mode `{other}` (expected input or fpn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub variant: String,
    pub levels_or_mode: String,
    pub cpm: f64,
    pub fp_tp_ratio: f64,
    #[serde(skip)]
    pub split_hash: String,
}

#[derive(Serialize)]
struct CellLog<'a> {
    cell: usize,
    variant: &'a str,
    levels_or_mode: &'a str,
    split_hash: &'a str,
    cpm: f64,
    final_loss: f64,
}

/// `(variant, levels_or_mode, config)` for every cell, in table order.
pub fn grid(mode: AblationMode, base: &TrainConfig) -> Vec<(String, String, TrainConfig)> {
    let mut out = Vec::new();
    match mode {
        AblationMode::Input => {
            for input in [InputMode::MultiChannel25d, InputMode::Volume3d] {
                for (variant, ga) in [("without_ga", false), ("with_ga", true)] {
                    let mut cfg = base.clone();
                    cfg.network.input_mode = input;
                    cfg.network.ga_at_load = ga;
                    out.push((variant.to_string(), input.name().to_string(), cfg));
                }
            }
        }
        AblationMode::Fpn => {
            for top in (1..=4).rev() {
                let levels: Vec<Level> = (top..=4)
                    .rev()
                    .map(|k| Level::from_index(k).expect("1..=4"))
                    .collect();
                let label = levels
                    .iter()
                    .map(|l| l.name())
                    .collect::<Vec<_>>()
                    .join("+");
                for (variant, ga) in [("FPN", false), ("GA-FPN", true)] {
                    let mut cfg = base.clone();
                    cfg.network.active_levels = levels.clone();
                    cfg.network.ga_at_fpn = ga;
                    out.push((variant.to_string(), label.clone(), cfg));
                }
            }
        }
    }
    out
}

/// Loads the base data set and runs [`ablate_on`].
pub fn ablate(mode: AblationMode, base: &TrainConfig) -> Result<Vec<AblationCell>> {
    base.validate()?;
    let data = Dataset::load(&base.data_dir)?;
    ablate_on(mode, base, &data)
}

/// Trains and evaluates every cell of the grid with the shared seed and
/// split. Writes `ablation_<mode>.csv` and a per-cell JSON-lines log under
/// the base checkpoint directory; each cell checkpoints into its own
/// subdirectory.
pub fn ablate_on(
    mode: AblationMode,
    base: &TrainConfig,
    data: &Dataset,
) -> Result<Vec<AblationCell>> {
    let root = base.checkpoint_dir.clone();
    let mut cells = Vec::new();
    let mut log = String::new();
    for (i, (variant, label, mut cfg)) in grid(mode, base).into_iter().enumerate() {
        cfg.checkpoint_dir = root
            .join(format!("ablate_{mode}"))
            .join(format!("{i}_{variant}_{label}"));
        cfg.validate()?;
        let outcome = train::<f32>(&cfg, data)?;
        let eval_data = data.subset(outcome.split.eval_ids());
        let (report, _, _) = evaluate(&outcome.network, &outcome.store, &eval_data)?;
        let split_hash = outcome.split.hash();
        let entry = CellLog {
            cell: i,
            variant: &variant,
            levels_or_mode: &label,
            split_hash: &split_hash,
            cpm: report.cpm,
            final_loss: outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
        };
        log.push_str(&serde_json::to_string(&entry).map_err(|e| Error::json(&root, e))?);
        log.push('\n');
        cells.push(AblationCell {
            variant,
            levels_or_mode: label,
            cpm: report.cpm,
            fp_tp_ratio: report.fp_tp_ratio,
            split_hash,
        });
    }
    crate::data::io::write_csv(&csv_path(&root, mode), &ABLATION_HEADER, &cells)?;
    let log_path = root.join(format!("ablation_{mode}.jsonl"));
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    Ok(cells)
}

pub fn csv_path(root: &std::path::Path, mode: AblationMode) -> PathBuf {
    root.join(format!("ablation_{mode}.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layouts() {
        let base = TrainConfig::default();
        let input = grid(AblationMode::Input, &base);
        assert_eq!(input.len(), 4);
        let names: Vec<_> = input.iter().map(|(v, l, _)| format!("{v}/{l}")).collect();
        assert_eq!(
            names,
            [
                "without_ga/multi_channel_2_5d",
                "with_ga/multi_channel_2_5d",
                "without_ga/volume_3d",
                "with_ga/volume_3d"
            ]
        );
        let fpn = grid(AblationMode::Fpn, &base);
        let labels: Vec<_> = fpn.iter().map(|(v, l, _)| format!("{v}/{l}")).collect();
        assert_eq!(
            labels,
            [
                "FPN/P4",
                "GA-FPN/P4",
                "FPN/P4+P3",
                "GA-FPN/P4+P3",
                "FPN/P4+P3+P2",
                "GA-FPN/P4+P3+P2",
                "FPN/P4+P3+P2+P1",
                "GA-FPN/P4+P3+P2+P1"
            ]
        );
        assert!(fpn.iter().all(|(_, _, c)| c.validate().is_ok()));
        assert_eq!(fpn[7].2.network.levels(), Level::ALL.to_vec());
    }

    #[test]
    fn unknown_mode() {
        assert!(matches!(
            "table".parse::<AblationMode>(),
            Err(Error::Config(_))
        ));
        assert_eq!("fpn".parse::<AblationMode>().unwrap(), AblationMode::Fpn);
    }
}
