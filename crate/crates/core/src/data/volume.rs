use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The eight generated nodule categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    CalcSmall,
    CalcLarge,
    PleuralSmall,
    PleuralLarge,
    SolidSmall,
    SolidLarge,
    Pggn,
    Mggn,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::CalcSmall,
        Category::CalcLarge,
        Category::PleuralSmall,
        Category::PleuralLarge,
        Category::SolidSmall,
        Category::SolidLarge,
        Category::Pggn,
        Category::Mggn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::CalcSmall => "calc_small",
            Category::CalcLarge => "calc_large",
            Category::PleuralSmall => "pleural_small",
            Category::PleuralLarge => "pleural_large",
            Category::SolidSmall => "solid_small",
            Category::SolidLarge => "solid_large",
            Category::Pggn => "pggn",
            Category::Mggn => "mggn",
        }
    }

    /// Classifier label; 0 is background.
    pub fn class_index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed") + 1
    }

    pub fn from_class_index(idx: usize) -> Option<Category> {
        idx.checked_sub(1).and_then(|i| Self::ALL.get(i).copied())
    }

    pub fn is_pleural(self) -> bool {
        matches!(self, Category::PleuralSmall | Category::PleuralLarge)
    }

    pub fn is_calcified(self) -> bool {
        matches!(self, Category::CalcSmall | Category::CalcLarge)
    }

    pub fn is_solid(self) -> bool {
        matches!(self, Category::SolidSmall | Category::SolidLarge)
    }

    /// Diameter range in mm used when generating this category.
    pub fn diameter_range_mm(self) -> (f64, f64) {
        match self {
            Category::CalcSmall | Category::PleuralSmall | Category::SolidSmall => (3.0, 6.0),
            Category::CalcLarge | Category::PleuralLarge => (6.0, 12.0),
            Category::SolidLarge => (6.0, 15.0),
            Category::Pggn => (5.0, 12.0),
            Category::Mggn => (6.0, 14.0),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown nodule category `{s}`")))
    }
}

/// Longest-diameter bins used for solid nodules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SizeBin {
    D3To6,
    D6To10,
    D10To30,
    Mass,
}

impl SizeBin {
    pub fn from_diameter(mm: f64) -> SizeBin {
        if mm <= 6.0 {
            SizeBin::D3To6
        } else if mm <= 10.0 {
            SizeBin::D6To10
        } else if mm <= 30.0 {
            SizeBin::D10To30
        } else {
            SizeBin::Mass
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SizeBin::D3To6 => "3-6",
            SizeBin::D6To10 => "6-10",
            SizeBin::D10To30 => "10-30",
            SizeBin::Mass => "mass",
        }
    }
}

/// A labelled nodule. Coordinates are voxel indices `(x, y, z)` of the
/// source volume (voxel `i` is centred at coordinate `i`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleAnnotation {
    pub scan_id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub diameter_mm: f64,
    pub category: Category,
}

impl NoduleAnnotation {
    pub fn size_bin(&self) -> SizeBin {
        SizeBin::from_diameter(self.diameter_mm)
    }
}

/// A scan: `D x H x W` voxels (slices first) in Hounsfield-like units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub scan_id: String,
    pub shape: [usize; 3],
    /// `(z, y, x)` voxel spacing in mm.
    pub spacing_mm: [f64; 3],
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(
        scan_id: impl Into<String>,
        shape: [usize; 3],
        spacing_mm: [f64; 3],
        voxels: Vec<f32>,
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        if voxels.len() != n {
            return Err(Error::shape(
                "volume",
                format!("{shape:?} needs {n} voxels, got {}", voxels.len()),
            ));
        }
        if spacing_mm.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Input(format!(
                "spacing must be positive, got {spacing_mm:?}"
            )));
        }
        Ok(Self {
            scan_id: scan_id.into(),
            shape,
            spacing_mm,
            voxels,
        })
    }

    pub fn depth(&self) -> usize {
        self.shape[0]
    }
    pub fn height(&self) -> usize {
        self.shape[1]
    }
    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    /// Voxel value with out-of-bounds positions reading as `fill`.
    pub fn at_or(&self, z: isize, y: isize, x: isize, fill: f32) -> f32 {
        let [d, h, w] = self.shape;
        if z < 0 || y < 0 || x < 0 || z as usize >= d || y as usize >= h || x as usize >= w {
            fill
        } else {
            self.at(z as usize, y as usize, x as usize)
        }
    }
}
