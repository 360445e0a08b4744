//! FROC analysis, CPM, FP/TP ratio, and per-category sensitivity.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::io::write_csv;
use crate::data::{Category, NoduleAnnotation, SizeBin};
use crate::detection::Detection;
use crate::error::{Error, Result};

/// False-positive rates per scan at which CPM samples the FROC curve.
pub const CPM_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

/// The scans under evaluation: spacing of each known scan, and the scan
/// count used as the FP-rate denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanIndex {
    spacing: BTreeMap<String, [f64; 3]>,
    n_scans: usize,
}

impl ScanIndex {
    pub fn new(spacing: BTreeMap<String, [f64; 3]>) -> Result<Self> {
        let n = spacing.len();
        Self::with_count(spacing, n)
    }

    /// `n_scans` may exceed the listed scans (scans without findings).
    pub fn with_count(spacing: BTreeMap<String, [f64; 3]>, n_scans: usize) -> Result<Self> {
        if n_scans == 0 {
            return Err(Error::Input("evaluation needs at least one scan".into()));
        }
        if spacing.len() > n_scans {
            return Err(Error::Input(format!(
                "{} distinct scans referenced but only {n_scans} declared",
                spacing.len()
            )));
        }
        Ok(Self { spacing, n_scans })
    }

    /// Every scan named by `dets` or `anns`, all with the same spacing.
    pub fn uniform(
        dets: &[Detection],
        anns: &[NoduleAnnotation],
        spacing: [f64; 3],
        n_scans: usize,
    ) -> Result<Self> {
        let ids: BTreeSet<&str> = dets
            .iter()
            .map(|d| d.scan_id.as_str())
            .chain(anns.iter().map(|a| a.scan_id.as_str()))
            .collect();
        Self::with_count(
            ids.into_iter().map(|s| (s.to_string(), spacing)).collect(),
            n_scans,
        )
    }

    pub fn n_scans(&self) -> usize {
        self.n_scans
    }

    pub fn spacing(&self, scan_id: &str) -> Result<[f64; 3]> {
        self.spacing
            .get(scan_id)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown scan {scan_id:?}")))
    }
}

fn distance_mm(d: &Detection, a: &NoduleAnnotation, spacing: [f64; 3]) -> f64 {
    let dz = (d.z - a.z) * spacing[0];
    let dy = (d.y - a.y) * spacing[1];
    let dx = (d.x - a.x) * spacing[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Closed-ball hit: distance between centres in mm at most the radius.
pub fn hit_test(d: &Detection, a: &NoduleAnnotation, spacing: [f64; 3]) -> Result<bool> {
    if d.scan_id != a.scan_id {
        return Err(Error::Input(format!(
            "detection on {} compared with annotation on {}",
            d.scan_id, a.scan_id
        )));
    }
    Ok(distance_mm(d, a, spacing) <= a.diameter_mm / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    /// Credits the annotation with this index.
    Tp(usize),
    Fp,
    /// Hits only annotations already credited.
    Ignored,
}

/// Detections in a canonical order (probability descending, then scan and
/// position) with the outcome of crediting them one by one. Because the
/// order is by probability, every threshold's result is a prefix.
fn credit(
    dets: &[Detection],
    anns: &[NoduleAnnotation],
    scans: &ScanIndex,
) -> Result<Vec<(Detection, Outcome)>> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| {
        a.rank_cmp(b)
            .then_with(|| a.scan_id.cmp(&b.scan_id))
            .then(a.category.cmp(&b.category))
    });
    let mut by_scan: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, a) in anns.iter().enumerate() {
        scans.spacing(&a.scan_id)?;
        by_scan.entry(a.scan_id.as_str()).or_default().push(i);
    }
    let mut credited = vec![false; anns.len()];
    let mut out = Vec::with_capacity(sorted.len());
    for d in sorted {
        let spacing = scans.spacing(&d.scan_id)?;
        let mut best: Option<(f64, usize)> = None;
        let mut any_hit = false;
        for &i in by_scan
            .get(d.scan_id.as_str())
            .map(Vec::as_slice)
            .unwrap_or(&[])
        {
            let dist = distance_mm(&d, &anns[i], spacing);
            if dist > anns[i].diameter_mm / 2.0 {
                continue;
            }
            any_hit = true;
            if !credited[i] && best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, i));
            }
        }
        let outcome = match best {
            Some((_, i)) => {
                credited[i] = true;
                Outcome::Tp(i)
            }
            None if any_hit => Outcome::Ignored,
            None => Outcome::Fp,
        };
        out.push((d, outcome));
    }
    Ok(out)
}

/// One operating point per distinct probability, in descending threshold
/// order; a single `(0, 0)` point when there are no detections.
pub fn froc(
    dets: &[Detection],
    anns: &[NoduleAnnotation],
    scans: &ScanIndex,
) -> Result<Vec<FrocPoint>> {
    let credited = credit(dets, anns, scans)?;
    let n = scans.n_scans() as f64;
    let total = anns.len();
    let sens = |tp: usize| {
        if total == 0 {
            0.0
        } else {
            tp as f64 / total as f64
        }
    };
    if credited.is_empty() {
        return Ok(vec![FrocPoint {
            threshold: 1.0,
            fp_per_scan: 0.0,
            sensitivity: 0.0,
        }]);
    }
    let (mut tp, mut fp) = (0, 0);
    let mut points = Vec::new();
    for (i, (d, o)) in credited.iter().enumerate() {
        match o {
            Outcome::Tp(_) => tp += 1,
            Outcome::Fp => fp += 1,
            Outcome::Ignored => {}
        }
        let last_at_prob = credited
            .get(i + 1)
            .is_none_or(|(next, _)| next.prob != d.prob);
        if last_at_prob {
            points.push(FrocPoint {
                threshold: d.prob,
                fp_per_scan: fp as f64 / n,
                sensitivity: sens(tp),
            });
        }
    }
    Ok(points)
}

fn rate_key(r: f64) -> String {
    r.to_string()
}

/// Step-function sensitivity at each CPM rate and their mean.
pub fn cpm(curve: &[FrocPoint]) -> Result<(f64, BTreeMap<String, f64>)> {
    if curve.is_empty() {
        return Err(Error::Input("cpm needs a non-empty FROC curve".into()));
    }
    let mut at = BTreeMap::new();
    let mut sum = 0.0;
    for r in CPM_RATES {
        let s = curve
            .iter()
            .filter(|p| p.fp_per_scan <= r)
            .map(|p| p.sensitivity)
            .fold(0.0, f64::max);
        at.insert(rate_key(r), s);
        sum += s;
    }
    Ok((sum / CPM_RATES.len() as f64, at))
}

fn counts_at(
    dets: &[Detection],
    anns: &[NoduleAnnotation],
    scans: &ScanIndex,
    threshold: f64,
) -> Result<Vec<Outcome>> {
    let kept: Vec<Detection> = dets
        .iter()
        .filter(|d| d.prob >= threshold)
        .cloned()
        .collect();
    Ok(credit(&kept, anns, scans)?
        .into_iter()
        .map(|(_, o)| o)
        .collect())
}

/// FP count over TP count among detections at or above `threshold`:
/// infinite when there are FPs but no TPs, zero when there are neither.
pub fn fp_tp_ratio(
    dets: &[Detection],
    anns: &[NoduleAnnotation],
    scans: &ScanIndex,
    threshold: f64,
) -> Result<f64> {
    let outcomes = counts_at(dets, anns, scans, threshold)?;
    let tp = outcomes
        .iter()
        .filter(|o| matches!(o, Outcome::Tp(_)))
        .count();
    let fp = outcomes.iter().filter(|o| **o == Outcome::Fp).count();
    Ok(match (tp, fp) {
        (0, 0) => 0.0,
        (0, _) => f64::INFINITY,
        _ => fp as f64 / tp as f64,
    })
}

/// Reporting bucket: calcified, pleural, solid by size, mass, pggn, mggn.
pub fn category_bucket(a: &NoduleAnnotation) -> String {
    match a.category {
        c if c.is_calcified() => "calcified".into(),
        c if c.is_pleural() => "pleural".into(),
        Category::Pggn => "pggn".into(),
        Category::Mggn => "mggn".into(),
        _ => match a.size_bin() {
            SizeBin::Mass => "mass".into(),
            bin => format!("solid_{}", bin.label()),
        },
    }
}

/// Sensitivity per bucket at `threshold`; only buckets with annotations
/// appear.
pub fn per_category_report(
    dets: &[Detection],
    anns: &[NoduleAnnotation],
    scans: &ScanIndex,
    threshold: f64,
) -> Result<BTreeMap<String, f64>> {
    let outcomes = counts_at(dets, anns, scans, threshold)?;
    let mut hit = vec![false; anns.len()];
    for o in outcomes {
        if let Outcome::Tp(i) = o {
            hit[i] = true;
        }
    }
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (a, h) in anns.iter().zip(hit) {
        let e = tally.entry(category_bucket(a)).or_default();
        e.0 += h as usize;
        e.1 += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(k, (h, n))| (k, h as f64 / n as f64))
        .collect())
}

fn ser_ratio<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_ratio<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("bad ratio {t:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpmReport {
    pub cpm: f64,
    pub sensitivities_at: BTreeMap<String, f64>,
    #[serde(serialize_with = "ser_ratio", deserialize_with = "de_ratio")]
    pub fp_tp_ratio: f64,
    pub per_category: BTreeMap<String, f64>,
    pub n_scans: usize,
    pub n_nodules: usize,
}

impl CpmReport {
    /// Sensitivity at the largest CPM rate, i.e. at 8 FPs per scan.
    pub fn sensitivity_at_max_rate(&self) -> f64 {
        self.sensitivities_at[&rate_key(CPM_RATES[CPM_RATES.len() - 1])]
    }
}

/// The full protocol: FROC curve, CPM, and the thresholded summaries.
pub fn evaluate_detections(
    dets: &[Detection],
    anns: &[NoduleAnnotation],
    scans: &ScanIndex,
    report_threshold: f64,
) -> Result<(CpmReport, Vec<FrocPoint>)> {
    let curve = froc(dets, anns, scans)?;
    let (cpm, sensitivities_at) = cpm(&curve)?;
    let report = CpmReport {
        cpm,
        sensitivities_at,
        fp_tp_ratio: fp_tp_ratio(dets, anns, scans, report_threshold)?,
        per_category: per_category_report(dets, anns, scans, report_threshold)?,
        n_scans: scans.n_scans(),
        n_nodules: anns.len(),
    };
    Ok((report, curve))
}

/// Writes `froc.csv` and `report.json` into `dir`.
pub fn write_eval_outputs(dir: &Path, report: &CpmReport, curve: &[FrocPoint]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(
        &dir.join("froc.csv"),
        &["threshold", "fp_per_scan", "sensitivity"],
        curve,
    )?;
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
