//! Volume files (`<scan_id>.json` header + `<scan_id>.raw` little-endian
//! payload) and the annotation CSV.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::volume::{NoduleAnnotation, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
}

/// Writes `<dir>/<scan_id>.json` and `<dir>/<scan_id>.raw`; returns the header path.
pub fn save_volume(v: &Volume, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = VolumeHeader {
        shape: v.shape,
        spacing_mm: v.spacing_mm,
        dtype: "f32le".into(),
    };
    let json_path = dir.join(format!("{}.json", v.scan_id));
    let raw_path = dir.join(format!("{}.raw", v.scan_id));
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let mut bytes = Vec::with_capacity(v.voxels.len() * 4);
    for x in &v.voxels {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    Ok(json_path)
}

fn header_field<'a>(path: &Path, obj: &'a Value, field: &'static str) -> Result<&'a Value> {
    obj.get(field).ok_or_else(|| Error::Header {
        path: path.to_path_buf(),
        field,
        msg: "missing".into(),
    })
}

fn parse_header(path: &Path, text: &str) -> Result<VolumeHeader> {
    let bad = |field: &'static str, msg: &str| Error::Header {
        path: path.to_path_buf(),
        field,
        msg: msg.to_string(),
    };
    let obj: Value = serde_json::from_str(text).map_err(|e| Error::json(path, e))?;
    let shape_v = header_field(path, &obj, "shape")?
        .as_array()
        .filter(|a| a.len() == 3)
        .ok_or_else(|| bad("shape", "expected [D, H, W]"))?;
    let mut shape = [0usize; 3];
    for (s, v) in shape.iter_mut().zip(shape_v) {
        *s = v
            .as_u64()
            .filter(|&x| x > 0)
            .ok_or_else(|| bad("shape", "extents must be positive integers"))?
            as usize;
    }
    let spacing_v = header_field(path, &obj, "spacing_mm")?
        .as_array()
        .filter(|a| a.len() == 3)
        .ok_or_else(|| bad("spacing_mm", "expected [z, y, x]"))?;
    let mut spacing_mm = [0f64; 3];
    for (s, v) in spacing_mm.iter_mut().zip(spacing_v) {
        *s = v
            .as_f64()
            .filter(|&x| x > 0.0)
            .ok_or_else(|| bad("spacing_mm", "spacing must be positive numbers"))?;
    }
    let dtype = header_field(path, &obj, "dtype")?
        .as_str()
        .filter(|d| *d == "f32le" || *d == "f64le")
        .ok_or_else(|| bad("dtype", "expected \"f32le\" or \"f64le\""))?
        .to_string();
    Ok(VolumeHeader {
        shape,
        spacing_mm,
        dtype,
    })
}

/// Loads a volume from its header path, payload path, or shared stem.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let json_path = path.with_extension("json");
    let raw_path = path.with_extension("raw");
    let scan_id = json_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Input(format!("cannot derive scan id from {}", path.display())))?
        .to_string();
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header = parse_header(&json_path, &text)?;
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n: usize = header.shape.iter().product();
    let width = if header.dtype == "f32le" { 4 } else { 8 };
    if bytes.len() != n * width {
        return Err(Error::PayloadLength {
            path: raw_path,
            expected: n * width,
            found: bytes.len(),
        });
    }
    let voxels = if width == 4 {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    } else {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
            .collect()
    };
    Volume::new(scan_id, header.shape, header.spacing_mm, voxels)
}

const ANNOTATION_HEADER: [&str; 6] = ["scan_id", "x", "y", "z", "diameter_mm", "category"];

/// Writes `rows` under an explicit header, so an empty table still has one.
pub(crate) fn write_csv<S: Serialize>(path: &Path, header: &[&str], rows: &[S]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads rows after checking the header matches `header` exactly.
pub(crate) fn read_csv<D: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<D>> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let found = r.headers().map_err(csv_err)?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            msg: format!("header must be `{}`", header.join(",")),
        });
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn save_annotations(path: &Path, annotations: &[NoduleAnnotation]) -> Result<()> {
    write_csv(path, &ANNOTATION_HEADER, annotations)
}

pub fn load_annotations(path: &Path) -> Result<Vec<NoduleAnnotation>> {
    let anns: Vec<NoduleAnnotation> = read_csv(path, &ANNOTATION_HEADER)?;
    if let Some(a) = anns.iter().find(|a| !(a.diameter_mm > 0.0)) {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            msg: format!("non-positive diameter for a nodule in {}", a.scan_id),
        });
    }
    Ok(anns)
}

pub const ANNOTATIONS_FILE: &str = "annotations.csv";

/// Volumes of a directory (every `<scan_id>.raw` with its header) and the
/// annotations in its `annotations.csv`, both ordered by scan id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub volumes: Vec<Volume>,
    pub annotations: Vec<NoduleAnnotation>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut raws = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|x| x == "raw") {
                raws.push(path);
            }
        }
        raws.sort();
        let volumes = raws
            .iter()
            .map(|p| load_volume(p))
            .collect::<Result<Vec<_>>>()?;
        let mut annotations = load_annotations(&dir.join(ANNOTATIONS_FILE))?;
        for a in &annotations {
            if !volumes.iter().any(|v| v.scan_id == a.scan_id) {
                return Err(Error::Input(format!(
                    "annotation refers to missing scan {} in {}",
                    a.scan_id,
                    dir.display()
                )));
            }
        }
        annotations.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
        Ok(Self {
            volumes,
            annotations,
        })
    }

    pub fn scan_ids(&self) -> Vec<String> {
        self.volumes.iter().map(|v| v.scan_id.clone()).collect()
    }

    /// The scans named in `ids` (in dataset order) and their annotations.
    pub fn subset(&self, ids: &[String]) -> Self {
        let keep = |id: &String| ids.contains(id);
        Self {
            volumes: self
                .volumes
                .iter()
                .filter(|v| keep(&v.scan_id))
                .cloned()
                .collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| keep(&a.scan_id))
                .cloned()
                .collect(),
        }
    }

    pub fn annotations_of<'a>(
        &'a self,
        scan_id: &'a str,
    ) -> impl Iterator<Item = &'a NoduleAnnotation> + 'a {
        self.annotations
            .iter()
            .filter(move |a| a.scan_id == scan_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Category;

    fn sample() -> Volume {
        let voxels = (0..256).map(|i| i as f32 * 1.5 - 300.0).collect();
        Volume::new("scan_a", [4, 8, 8], [1.25, 0.7, 0.7], voxels).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = sample();
        v.voxels[3] = f32::from_bits(0x3f80_0001);
        let p = save_volume(&v, dir.path()).unwrap();
        assert_eq!(load_volume(&p).unwrap(), v);
        assert_eq!(load_volume(&dir.path().join("scan_a")).unwrap(), v);
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = save_volume(&sample(), dir.path()).unwrap();
        let raw = dir.path().join("scan_a.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
        match load_volume(&p) {
            Err(Error::PayloadLength {
                expected, found, ..
            }) => {
                assert_eq!(expected, 1024);
                assert_eq!(found, 1020);
            }
            other => panic!("expected length error, got {other:?}"),
        }
    }

    #[test]
    fn header_shape_counts_scalars() {
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("h.json");
        fs::write(
            &json,
            r#"{"shape":[4,8,8],"spacing_mm":[1.0,0.7,0.7],"dtype":"f32le"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("h.raw"), vec![0u8; 256 * 4]).unwrap();
        assert_eq!(load_volume(&json).unwrap().voxels.len(), 256);
        fs::write(dir.path().join("h.raw"), vec![0u8; 255 * 4]).unwrap();
        assert!(matches!(
            load_volume(&json),
            Err(Error::PayloadLength { .. })
        ));
    }

    #[test]
    fn malformed_header_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("h.json");
        fs::write(dir.path().join("h.raw"), vec![0u8; 16]).unwrap();
        for (text, field) in [
            (r#"{"spacing_mm":[1,1,1],"dtype":"f32le"}"#, "shape"),
            (
                r#"{"shape":[2,2],"spacing_mm":[1,1,1],"dtype":"f32le"}"#,
                "shape",
            ),
            (
                r#"{"shape":[1,2,2],"spacing_mm":[1,0,1],"dtype":"f32le"}"#,
                "spacing_mm",
            ),
            (
                r#"{"shape":[1,2,2],"spacing_mm":[1,1,1],"dtype":"i16"}"#,
                "dtype",
            ),
        ] {
            fs::write(&json, text).unwrap();
            match load_volume(&json) {
                Err(Error::Header { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected header error on {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn annotations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.csv");
        let anns = vec![
            NoduleAnnotation {
                scan_id: "a".into(),
                x: 1.5,
                y: 2.0,
                z: 3.25,
                diameter_mm: 4.1,
                category: Category::Pggn,
            },
            NoduleAnnotation {
                scan_id: "b".into(),
                x: 0.0,
                y: 9.0,
                z: 1.0,
                diameter_mm: 12.0,
                category: Category::CalcLarge,
            },
        ];
        save_annotations(&path, &anns).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("scan_id,x,y,z,diameter_mm,category\n"));
        assert_eq!(load_annotations(&path).unwrap(), anns);
    }

    #[test]
    fn unknown_category_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.csv");
        fs::write(
            &path,
            "scan_id,x,y,z,diameter_mm,category\na,1,2,3,4,blob\n",
        )
        .unwrap();
        assert!(load_annotations(&path).is_err());
    }
}
