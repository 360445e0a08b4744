use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Category;
use crate::error::{Error, Result};
use crate::ga::GaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    P1,
    P2,
    P3,
    P4,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::P1, Level::P2, Level::P3, Level::P4];

    /// `k` in `P_k`; the level sits at stride `2^k` on H and W.
    pub fn index(self) -> usize {
        self as usize + 1
    }

    pub fn from_index(k: usize) -> Option<Self> {
        Self::ALL.get(k.checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        ["P1", "P2", "P3", "P4"][self as usize]
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputMode {
    /// `n_slices` adjacent slices on the channel axis, depth 1.
    #[serde(rename = "multi_channel_2_5d")]
    MultiChannel25d,
    /// Single-channel 3D crop.
    #[serde(rename = "volume_3d")]
    Volume3d,
}

impl InputMode {
    pub fn name(self) -> &'static str {
        match self {
            InputMode::MultiChannel25d => "multi_channel_2_5d",
            InputMode::Volume3d => "volume_3d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    /// Anchor side lengths in voxels, per level.
    pub scales: BTreeMap<Level, Vec<f64>>,
    /// Width/height aspect ratios.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: BTreeMap::from([
                (Level::P1, vec![4.0, 6.0]),
                (Level::P2, vec![8.0, 12.0]),
                (Level::P3, vec![16.0, 24.0]),
                (Level::P4, vec![32.0, 48.0]),
            ]),
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn scales_for(&self, level: Level) -> Result<&[f64]> {
        self.scales
            .get(&level)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("no anchor scales for {level}")))
    }

    pub fn per_position(&self, level: Level) -> Result<usize> {
        Ok(self.scales_for(level)?.len() * self.ratios.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub mining_ratio: usize,
    /// Weight of the regression term relative to classification.
    pub reg_weight: f64,
    pub nms_iou: f64,
    /// Detections below this probability are dropped at decode time.
    pub prob_floor: f64,
    /// Threshold for FP/TP ratio and per-category sensitivity.
    pub report_threshold: f64,
    pub max_per_scan: usize,
    /// Tile extents `[d, h, w]` used at inference (and for training crops).
    pub tile: [usize; 3],
    /// Fractional tile overlap on `[depth, height/width]`.
    pub tile_overlap: [f64; 2],
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.5,
            neg_iou: 0.4,
            mining_ratio: 3,
            reg_weight: 1.0,
            nms_iou: 0.3,
            prob_floor: 0.1,
            report_threshold: 0.5,
            max_per_scan: 100,
            tile: [32, 64, 64],
            tile_overlap: [0.25, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_mode: InputMode,
    pub ga_at_load: bool,
    pub ga_at_fpn: bool,
    pub active_levels: Vec<Level>,
    pub stem_channels: usize,
    pub cardinality: usize,
    pub blocks_per_stage: usize,
    pub pyramid_channels: usize,
    pub max_channels: usize,
    /// GA modules on pyramid levels.
    pub ga: GaConfig,
    /// GA module on the raw input; full-resolution inputs need a coarser key
    /// grid.
    pub ga_load: GaConfig,
    pub anchors: AnchorConfig,
    pub num_classes: usize,
    pub n_slices: usize,
    pub dropout: f64,
    pub detection: DetectionConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_mode: InputMode::Volume3d,
            ga_at_load: true,
            ga_at_fpn: true,
            active_levels: Level::ALL.to_vec(),
            stem_channels: 16,
            cardinality: 4,
            blocks_per_stage: 1,
            pyramid_channels: 32,
            max_channels: 128,
            ga: GaConfig {
                spatial_subsample: 2,
                ..GaConfig::default()
            },
            ga_load: GaConfig {
                spatial_subsample: 8,
                ..GaConfig::default()
            },
            anchors: AnchorConfig::default(),
            num_classes: 9,
            n_slices: 9,
            dropout: 0.0,
            detection: DetectionConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stem_channels", self.stem_channels),
            ("cardinality", self.cardinality),
            ("blocks_per_stage", self.blocks_per_stage),
            ("pyramid_channels", self.pyramid_channels),
            ("max_channels", self.max_channels),
            ("n_slices", self.n_slices),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.active_levels.is_empty() {
            return Err(Error::Config("active_levels must not be empty".into()));
        }
        if self.num_classes != Category::ALL.len() + 1 {
            return Err(Error::Config(format!(
                "num_classes must be {} (background plus every category)",
                Category::ALL.len() + 1
            )));
        }
        if self.n_slices.is_multiple_of(2) {
            return Err(Error::Config("n_slices must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        self.ga.validate()?;
        self.ga_load.validate()?;
        for &level in &self.active_levels {
            if self.anchors.scales_for(level)?.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config(format!(
                    "anchor scales for {level} must be positive"
                )));
            }
        }
        if self.anchors.ratios.is_empty() || self.anchors.ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config(
                "anchor ratios must be non-empty and positive".into(),
            ));
        }
        let d = &self.detection;
        if !(d.pos_iou > d.neg_iou) {
            return Err(Error::Config("pos_iou must exceed neg_iou".into()));
        }
        if !(d.nms_iou > 0.0 && d.nms_iou < 1.0) {
            return Err(Error::Config("nms_iou must lie in (0, 1)".into()));
        }
        if d.tile.contains(&0) || d.tile_overlap.iter().any(|o| !(0.0..1.0).contains(o)) {
            return Err(Error::Config(
                "tile extents must be positive, overlaps in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Sorted, de-duplicated active levels.
    pub fn levels(&self) -> Vec<Level> {
        let mut v = self.active_levels.clone();
        v.sort();
        v.dedup();
        v
    }

    pub fn input_channels(&self) -> usize {
        match self.input_mode {
            InputMode::MultiChannel25d => self.n_slices,
            InputMode::Volume3d => 1,
        }
    }

    /// Backbone width of stage `k` (`C_k`, with `C_1` the stem).
    pub fn stage_channels(&self, k: usize) -> usize {
        (self.stem_channels << (k - 1)).min(self.max_channels)
    }
}
