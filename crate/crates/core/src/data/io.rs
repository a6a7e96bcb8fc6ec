//! On-disk volume bundles: a directory with `meta.json` and one raw
//! little-endian file per array, C order (z, y, x).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::volume::{PatientVolume, CHANNEL_ORDER};
use crate::error::{Error, Result};

const META: &str = "meta.json";
const OAR_FILES: [&str; 4] = ["oar_bld.u8", "oar_fhr.u8", "oar_fhl.u8", "oar_st.u8"];

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    prescription_gy: f64,
    channel_order: Vec<String>,
    dtypes: BTreeMap<String, String>,
    byte_order: String,
    sha256: BTreeMap<String, String>,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn f32_bytes(a: &Array3<f32>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_volume(vol: &PatientVolume, dir: &Path) -> Result<()> {
    vol.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (d, h, w) = vol.dims();
    let mut files: Vec<(&str, Vec<u8>, &str)> = vec![
        ("ct.f32", f32_bytes(&vol.ct), "f32"),
        ("dose.f32", f32_bytes(&vol.dose), "f32"),
        ("ptv.u8", vol.ptv.iter().copied().collect(), "u8"),
    ];
    for (name, m) in OAR_FILES.iter().zip(&vol.oars) {
        files.push((name, m.iter().copied().collect(), "u8"));
    }
    let mut meta = Meta {
        dims: [d, h, w],
        spacing_mm: vol.spacing_mm,
        prescription_gy: vol.prescription_gy,
        channel_order: CHANNEL_ORDER.iter().map(|s| s.to_string()).collect(),
        dtypes: BTreeMap::new(),
        byte_order: "little".into(),
        sha256: BTreeMap::new(),
    };
    for (name, bytes, dtype) in &files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        meta.dtypes.insert(name.to_string(), dtype.to_string());
        meta.sha256.insert(name.to_string(), digest(bytes));
    }
    let path = dir.join(META);
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

fn read_raw(dir: &Path, name: &str, meta: &Meta, elem: usize) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let [d, h, w] = meta.dims;
    if bytes.len() != d * h * w * elem {
        return Err(Error::ShapeMismatch {
            expected: vec![d, h, w],
            got: vec![bytes.len() / elem],
        });
    }
    let expected = meta.sha256.get(name).ok_or_else(|| Error::MissingField {
        field: format!("sha256.{name}"),
        path: dir.join(META),
    })?;
    if *expected != digest(&bytes) {
        return Err(Error::Checksum { path });
    }
    Ok(bytes)
}

fn require<'a>(obj: &'a serde_json::Value, field: &str, path: &Path) -> Result<&'a serde_json::Value> {
    obj.get(field).ok_or_else(|| Error::MissingField {
        field: field.to_string(),
        path: path.to_path_buf(),
    })
}

/// Reads a single bundle, or every bundle directly under `dir`, named by
/// directory and sorted by name.
pub fn read_bundles(dir: &Path) -> Result<Vec<(String, PatientVolume)>> {
    let name_of = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if dir.join(META).is_file() {
        return Ok(vec![(name_of(dir), read_volume(dir)?)]);
    }
    let mut dirs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::invalid(format!("no volume bundles under {}", dir.display())));
    }
    dirs.iter().map(|p| Ok((name_of(p), read_volume(p)?))).collect()
}

pub fn read_volume(dir: &Path) -> Result<PatientVolume> {
    let meta_path = dir.join(META);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    for field in ["dims", "spacing_mm", "prescription_gy", "channel_order", "dtypes", "byte_order", "sha256"] {
        require(&raw, field, &meta_path)?;
    }
    let meta: Meta = serde_json::from_value(raw)?;
    if meta.byte_order != "little" {
        return Err(Error::Incompatible(format!("unsupported byte order {:?}", meta.byte_order)));
    }
    if meta.channel_order != CHANNEL_ORDER {
        return Err(Error::Incompatible(format!("unexpected channel order {:?}", meta.channel_order)));
    }
    let [d, h, w] = meta.dims;
    let shape = (d, h, w);
    let f32_array = |name: &str| -> Result<Array3<f32>> {
        let bytes = read_raw(dir, name, &meta, 4)?;
        let v = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Array3::from_shape_vec(shape, v).expect("length checked"))
    };
    let mask = |name: &str| -> Result<Array3<u8>> {
        let bytes = read_raw(dir, name, &meta, 1)?;
        if bytes.iter().any(|&b| b > 1) {
            return Err(Error::invalid(format!("{name} holds values other than 0/1")));
        }
        Ok(Array3::from_shape_vec(shape, bytes).expect("length checked"))
    };
    let vol = PatientVolume {
        ct: f32_array("ct.f32")?,
        dose: f32_array("dose.f32")?,
        ptv: mask("ptv.u8")?,
        oars: [
            mask(OAR_FILES[0])?,
            mask(OAR_FILES[1])?,
            mask(OAR_FILES[2])?,
            mask(OAR_FILES[3])?,
        ],
        spacing_mm: meta.spacing_mm,
        prescription_gy: meta.prescription_gy,
    };
    vol.validate()?;
    Ok(vol)
}
