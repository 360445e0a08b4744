//! Procedural CT-like phantoms: an ellipsoidal lung of parenchyma texture
//! inside a soft-tissue wall, with smooth-edged nodules of the eight
//! categories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::io::{save_annotations, save_volume};
use super::volume::{Category, NoduleAnnotation, Volume};
use crate::error::{Error, Result};
use crate::params::fnv1a;

pub const PARENCHYMA_HU: f32 = -850.0;
pub const WALL_HU: f32 = 0.0;
const SOLID_HU: f32 = 20.0;
const CALCIFIED_HU: f32 = 300.0;
const GGN_HU: f32 = -600.0;
/// Width of the soft nodule boundary, in mm.
const EDGE_MM: f64 = 1.0;
const MGGN_CORE_FRACTION: f64 = 0.45;
const LUNG_SEMI_AXIS_FRACTION: f64 = 0.45;
const PLACEMENT_RETRIES: usize = 500;
const MIN_GAP_MM: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_volumes: usize,
    /// `[D, H, W]` voxels.
    pub volume_extents: [usize; 3],
    /// `(z, y, x)` in mm.
    pub spacing_mm: [f64; 3],
    /// Inclusive `[min, max]` nodule count per volume.
    pub nodules_per_volume: [usize; 2],
    pub category_weights: BTreeMap<Category, f64>,
    /// Standard deviation of the smoothed texture noise, in HU.
    pub noise_sigma: f64,
    pub seed: u64,
    pub scan_prefix: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_volumes: 8,
            volume_extents: [32, 64, 64],
            spacing_mm: [1.25, 0.7, 0.7],
            nodules_per_volume: [2, 4],
            category_weights: Category::ALL.iter().map(|&c| (c, 1.0)).collect(),
            noise_sigma: 20.0,
            seed: 7,
            scan_prefix: "synth".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_volumes == 0 {
            return Err(Error::Config("n_volumes must be >= 1".into()));
        }
        if self.volume_extents.contains(&0) {
            return Err(Error::Config("volume extents must be positive".into()));
        }
        if !(0.8..=2.5).contains(&self.spacing_mm[0]) {
            return Err(Error::Config(format!(
                "slice spacing {} mm outside [0.8, 2.5]",
                self.spacing_mm[0]
            )));
        }
        if self.spacing_mm.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("spacing must be positive".into()));
        }
        if self.nodules_per_volume[0] > self.nodules_per_volume[1] {
            return Err(Error::Config(
                "nodules_per_volume must be [min, max]".into(),
            ));
        }
        if self.category_weights.values().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config(
                "category weights must be non-negative".into(),
            ));
        }
        if self.category_weights.values().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "category weights must not all be zero".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn scan_id(&self, index: usize) -> String {
        format!("{}_{index:04}", self.scan_prefix)
    }
}

/// Ellipsoidal lung mask in voxel coordinates.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Lung {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Lung {
    pub(crate) fn for_extents(extents: [usize; 3]) -> Self {
        Self {
            center: extents.map(|e| (e as f64 - 1.0) / 2.0),
            semi: extents.map(|e| e as f64 * LUNG_SEMI_AXIS_FRACTION),
        }
    }

    /// `<= 1` inside the lung.
    pub(crate) fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.semi[i]).powi(2))
            .sum()
    }
}

struct Placed {
    center: [f64; 3], // (z, y, x) voxels
    radius_mm: f64,
    category: Category,
}

fn dist_mm(a: [f64; 3], b: [f64; 3], spacing: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| ((a[i] - b[i]) * spacing[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn place(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    lung: &Lung,
    category: Category,
    radius_mm: f64,
    placed: &[Placed],
) -> Option<[f64; 3]> {
    let sp = spec.spacing_mm;
    let ext = spec.volume_extents;
    let r_vox = sp.map(|s| radius_mm / s);
    for _ in 0..PLACEMENT_RETRIES {
        let center = if category.is_pleural() {
            // Touch the lung boundary from inside: start at a surface point and
            // step one radius towards the lung centre (in mm).
            let mut u = [0.0f64; 3];
            for v in &mut u {
                *v = StandardNormal.sample(rng);
            }
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            let surf: [f64; 3] =
                std::array::from_fn(|i| lung.center[i] + lung.semi[i] * u[i] / norm);
            let inward: [f64; 3] = std::array::from_fn(|i| (lung.center[i] - surf[i]) * sp[i]);
            let len = inward.iter().map(|v| v * v).sum::<f64>().sqrt();
            if len < 1e-9 {
                continue;
            }
            std::array::from_fn(|i| surf[i] + inward[i] / len * radius_mm / sp[i])
        } else {
            let c: [f64; 3] = std::array::from_fn(|i| rng.random::<f64>() * (ext[i] as f64 - 1.0));
            // whole sphere inside the (shrunken) lung
            let shrunk: f64 = (0..3)
                .map(|i| {
                    ((c[i] - lung.center[i]) / (lung.semi[i] - r_vox[i] - 1.0).max(1e-6)).powi(2)
                })
                .sum();
            if shrunk > 1.0 {
                continue;
            }
            c
        };
        let in_bounds = (0..3)
            .all(|i| center[i] - r_vox[i] >= 0.0 && center[i] + r_vox[i] <= ext[i] as f64 - 1.0);
        if !in_bounds || lung.level(center) >= 1.0 {
            continue;
        }
        let clear = placed
            .iter()
            .all(|p| dist_mm(p.center, center, sp) >= p.radius_mm + radius_mm + MIN_GAP_MM);
        if clear {
            return Some(center);
        }
    }
    None
}

fn soft_inside(d: f64, r: f64) -> f32 {
    ((r - d) / EDGE_MM + 0.5).clamp(0.0, 1.0) as f32
}

fn render(voxels: &mut [f32], ext: [usize; 3], sp: [f64; 3], n: &Placed) {
    let r = n.radius_mm;
    let reach = sp.map(|s| (r + EDGE_MM) / s);
    let lo: [usize; 3] =
        std::array::from_fn(|i| (n.center[i] - reach[i]).floor().max(0.0) as usize);
    let hi: [usize; 3] =
        std::array::from_fn(|i| ((n.center[i] + reach[i]).ceil() as usize).min(ext[i] - 1));
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                let d = dist_mm(n.center, [z as f64, y as f64, x as f64], sp);
                let w = soft_inside(d, r);
                if w == 0.0 {
                    continue;
                }
                let target = match n.category {
                    Category::CalcSmall | Category::CalcLarge => CALCIFIED_HU,
                    Category::Pggn => GGN_HU,
                    Category::Mggn => {
                        let core = soft_inside(d, MGGN_CORE_FRACTION * r);
                        GGN_HU + core * (SOLID_HU - GGN_HU)
                    }
                    _ => SOLID_HU,
                };
                let i = (z * ext[1] + y) * ext[2] + x;
                voxels[i] = voxels[i] * (1.0 - w) + target * w;
            }
        }
    }
}

/// Separable 3-tap box blur with edge clamping.
fn box_blur(v: &mut [f32], ext: [usize; 3]) {
    let [d, h, w] = ext;
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let src = v.to_vec();
        let n = ext[axis];
        for i in 0..v.len() {
            let pos = (i / strides[axis]) % n;
            let prev = if pos > 0 {
                src[i - strides[axis]]
            } else {
                src[i]
            };
            let next = if pos + 1 < n {
                src[i + strides[axis]]
            } else {
                src[i]
            };
            v[i] = (prev + src[i] + next) / 3.0;
        }
    }
    let _ = d;
}

/// Generates volume `index` of a synthetic cohort. Deterministic in
/// `(spec.seed, index)`.
pub fn synth_volume(spec: &SynthSpec, index: usize) -> Result<(Volume, Vec<NoduleAnnotation>)> {
    spec.validate()?;
    let scan_id = spec.scan_id(index);
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(spec.seed, &format!("volume-{index}")));
    let ext = spec.volume_extents;
    let sp = spec.spacing_mm;
    let lung = Lung::for_extents(ext);

    let mut voxels = vec![WALL_HU; ext.iter().product()];
    for z in 0..ext[0] {
        for y in 0..ext[1] {
            for x in 0..ext[2] {
                if lung.level([z as f64, y as f64, x as f64]) <= 1.0 {
                    voxels[(z * ext[1] + y) * ext[2] + x] = PARENCHYMA_HU;
                }
            }
        }
    }

    let cats: Vec<Category> = Category::ALL.to_vec();
    let weights: Vec<f64> = cats
        .iter()
        .map(|c| spec.category_weights.get(c).copied().unwrap_or(0.0))
        .collect();
    let chooser = WeightedIndex::new(&weights)
        .map_err(|e| Error::Config(format!("category weights: {e}")))?;
    let [lo, hi] = spec.nodules_per_volume;
    let count = rng.random_range(lo..=hi);

    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for k in 0..count {
        let category = cats[chooser.sample(&mut rng)];
        let (dmin, dmax) = category.diameter_range_mm();
        let diameter = dmin + rng.random::<f64>() * (dmax - dmin);
        let center = place(&mut rng, spec, &lung, category, diameter / 2.0, &placed).ok_or_else(|| {
            Error::Generation {
                scan_id: scan_id.clone(),
                msg: format!("could not place nodule {k} ({category}, {diameter:.1} mm) after {PLACEMENT_RETRIES} attempts"),
            }
        })?;
        placed.push(Placed {
            center,
            radius_mm: diameter / 2.0,
            category,
        });
    }
    for n in &placed {
        render(&mut voxels, ext, sp, n);
    }

    if spec.noise_sigma > 0.0 {
        let mut noise: Vec<f32> = (0..voxels.len())
            .map(|_| Distribution::<f32>::sample(&StandardNormal, &mut rng))
            .collect();
        box_blur(&mut noise, ext);
        let n = noise.len() as f64;
        let mean = noise.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (noise
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        let k = if std > 0.0 {
            (spec.noise_sigma / std) as f32
        } else {
            0.0
        };
        for (v, e) in voxels.iter_mut().zip(&noise) {
            *v += k * (e - mean as f32);
        }
    }
    for v in &mut voxels {
        *v = v.clamp(-1000.0, 400.0);
    }

    let annotations = placed
        .iter()
        .map(|n| NoduleAnnotation {
            scan_id: scan_id.clone(),
            x: n.center[2],
            y: n.center[1],
            z: n.center[0],
            diameter_mm: 2.0 * n.radius_mm,
            category: n.category,
        })
        .collect();
    Ok((Volume::new(scan_id, ext, sp, voxels)?, annotations))
}

/// Generates every volume of `spec` into `out_dir`, along with
/// `annotations.csv` and the spec itself as `synth_spec.json`.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<NoduleAnnotation>> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let generated = crate::parallel::map_range(spec.n_volumes, |i| synth_volume(spec, i));
    let mut all = Vec::new();
    for g in generated {
        let (v, anns) = g?;
        save_volume(&v, out_dir)?;
        all.extend(anns);
    }
    save_annotations(&out_dir.join(super::ANNOTATIONS_FILE), &all)?;
    let spec_path = out_dir.join("synth_spec.json");
    let text = serde_json::to_string_pretty(spec).map_err(|e| Error::json(&spec_path, e))?;
    fs::write(&spec_path, text).map_err(|e| Error::io(&spec_path, e))?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn only(cat: Category) -> BTreeMap<Category, f64> {
        Category::ALL
            .iter()
            .map(|&c| (c, if c == cat { 1.0 } else { 0.0 }))
            .collect()
    }

    #[test]
    fn forced_mix_single_nodule() {
        let spec = SynthSpec {
            nodules_per_volume: [1, 1],
            category_weights: only(Category::SolidSmall),
            ..Default::default()
        };
        let (_, anns) = synth_volume(&spec, 0).unwrap();
        assert_eq!(anns.len(), 1);
        assert_eq!(anns[0].category, Category::SolidSmall);
        assert!((3.0..=6.0).contains(&anns[0].diameter_mm));
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let spec = SynthSpec::default();
        let a = synth_volume(&spec, 3).unwrap();
        let b = synth_volume(&spec, 3).unwrap();
        assert_eq!(a, b);
        let c = synth_volume(&spec, 4).unwrap();
        assert_ne!(a.0.voxels, c.0.voxels);
    }

    #[test]
    fn category_frequencies_follow_weights() {
        let spec = SynthSpec {
            n_volumes: 100,
            volume_extents: [32, 96, 96],
            nodules_per_volume: [3, 3],
            ..Default::default()
        };
        let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
        let mut total = 0;
        for i in 0..spec.n_volumes {
            for a in synth_volume(&spec, i).unwrap().1 {
                *counts.entry(a.category).or_default() += 1;
                total += 1;
            }
        }
        for c in Category::ALL {
            let freq = *counts.get(&c).unwrap_or(&0) as f64 / total as f64;
            assert!((freq - 0.125).abs() <= 0.05, "{c}: {freq}");
        }
    }

    #[test]
    fn nodules_inside_volume_and_non_overlapping() {
        let spec = SynthSpec::default();
        for i in 0..6 {
            let (v, anns) = synth_volume(&spec, i).unwrap();
            let lung = Lung::for_extents(v.shape);
            for (k, a) in anns.iter().enumerate() {
                assert!(a.x >= 0.0 && a.x <= (v.width() - 1) as f64);
                assert!(a.z >= 0.0 && a.z <= (v.depth() - 1) as f64);
                assert!(lung.level([a.z, a.y, a.x]) < 1.0);
                for b in &anns[k + 1..] {
                    let d = dist_mm([a.z, a.y, a.x], [b.z, b.y, b.x], v.spacing_mm);
                    assert!(d >= (a.diameter_mm + b.diameter_mm) / 2.0);
                }
            }
            assert!(v
                .voxels
                .iter()
                .all(|x| x.is_finite() && (-1000.0..=400.0).contains(x)));
        }
    }

    #[test]
    fn pleural_nodules_touch_boundary() {
        let spec = SynthSpec {
            category_weights: only(Category::PleuralLarge),
            ..Default::default()
        };
        let (v, anns) = synth_volume(&spec, 1).unwrap();
        let lung = Lung::for_extents(v.shape);
        let sp = v.spacing_mm;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for a in &anns {
            let r = a.diameter_mm / 2.0 * 1.05;
            let reaches_wall = (0..4000).any(|_| {
                let u: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let p = [
                    a.z + u[0] / n * r / sp[0],
                    a.y + u[1] / n * r / sp[1],
                    a.x + u[2] / n * r / sp[2],
                ];
                lung.level(p) >= 1.0
            });
            assert!(reaches_wall, "{a:?}");
        }
    }

    fn mean_inside(v: &Volume, a: &NoduleAnnotation, frac: f64) -> f64 {
        let sp = v.spacing_mm;
        let (mut acc, mut n) = (0.0, 0);
        for z in 0..v.depth() {
            for y in 0..v.height() {
                for x in 0..v.width() {
                    let d = dist_mm([a.z, a.y, a.x], [z as f64, y as f64, x as f64], sp);
                    if d <= frac * a.diameter_mm / 2.0 {
                        acc += v.at(z, y, x) as f64;
                        n += 1;
                    }
                }
            }
        }
        acc / n.max(1) as f64
    }

    #[test]
    fn rendered_intensity_ordering() {
        let mut means = BTreeMap::new();
        for cat in [Category::CalcLarge, Category::SolidLarge, Category::Pggn] {
            let spec = SynthSpec {
                nodules_per_volume: [1, 1],
                category_weights: only(cat),
                ..Default::default()
            };
            let (v, anns) = synth_volume(&spec, 0).unwrap();
            means.insert(cat, mean_inside(&v, &anns[0], 0.5));
        }
        let background = PARENCHYMA_HU as f64;
        assert!(means[&Category::CalcLarge] > means[&Category::SolidLarge]);
        assert!(means[&Category::SolidLarge] > means[&Category::Pggn]);
        assert!(means[&Category::Pggn] > background + 100.0);
    }

    #[test]
    fn infeasible_placement_names_volume() {
        let spec = SynthSpec {
            volume_extents: [8, 12, 12],
            nodules_per_volume: [3, 3],
            category_weights: only(Category::SolidLarge),
            ..Default::default()
        };
        match synth_volume(&spec, 2) {
            Err(Error::Generation { scan_id, .. }) => assert_eq!(scan_id, "synth_0002"),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn validation() {
        let mut spec = SynthSpec::default();
        spec.spacing_mm[0] = 3.0;
        assert!(spec.validate().is_err());
        let spec = SynthSpec {
            category_weights: Category::ALL.iter().map(|&c| (c, 0.0)).collect(),
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }
}
