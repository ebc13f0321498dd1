//! On-disk dataset archive: `dataset.json` (manifest) plus `pixels.bin`
//! (little-endian `f64` pixels, samples concatenated in manifest order).

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{DataConfig, DataError, DatasetSplit, Geometry, ImageSample, Result};

pub const MANIFEST_FILE: &str = "dataset.json";
pub const PIXELS_FILE: &str = "pixels.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleRole {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub pid: usize,
    pub domain_id: usize,
    pub camera_id: usize,
    pub role: SampleRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub geometry: Geometry,
    pub source_domains: Vec<usize>,
    pub held_out_domain: usize,
    pub config: Option<DataConfig>,
    pub samples: Vec<SampleRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `split` into `dir` (created if missing). Byte-identical for equal splits.
pub fn save_dataset(split: &DatasetSplit, config: Option<&DataConfig>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let groups = [
        (SampleRole::Train, &split.train),
        (SampleRole::Query, &split.query),
        (SampleRole::Gallery, &split.gallery),
    ];
    let mut samples = Vec::new();
    let mut bytes = Vec::with_capacity(
        8 * split.geometry.pixels() * (split.train.len() + split.query.len() + split.gallery.len()),
    );
    for (role, list) in groups {
        for s in list.iter() {
            samples.push(SampleRecord {
                pid: s.pid,
                domain_id: s.domain_id,
                camera_id: s.camera_id,
                role,
            });
            for v in s.pixels.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        geometry: split.geometry,
        source_domains: split.source_domains.clone(),
        held_out_domain: split.held_out_domain,
        config: config.cloned(),
        samples,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(io_err(&mpath))?;
    let ppath = dir.join(PIXELS_FILE);
    let mut f = fs::File::create(&ppath).map_err(io_err(&ppath))?;
    f.write_all(&bytes).map_err(io_err(&ppath))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetSplit, DatasetManifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(io_err(&mpath))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&text).map_err(|e| DataError::Format(e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(DataError::Format(format!(
            "unsupported archive version {}",
            manifest.version
        )));
    }
    let ppath = dir.join(PIXELS_FILE);
    let bytes = fs::read(&ppath).map_err(io_err(&ppath))?;
    let g = manifest.geometry;
    let per = g.pixels();
    if bytes.len() != 8 * per * manifest.samples.len() {
        return Err(DataError::Format(format!(
            "pixel file holds {} bytes, manifest implies {}",
            bytes.len(),
            8 * per * manifest.samples.len()
        )));
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
        source_domains: manifest.source_domains.clone(),
        held_out_domain: manifest.held_out_domain,
        geometry: g,
    };
    for (n, rec) in manifest.samples.iter().enumerate() {
        let chunk = &bytes[8 * per * n..8 * per * (n + 1)];
        let values: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let pixels = Array3::from_shape_vec((g.height, g.width, g.channels), values)
            .map_err(|e| DataError::Format(e.to_string()))?;
        let sample = ImageSample {
            pixels,
            pid: rec.pid,
            domain_id: rec.domain_id,
            camera_id: rec.camera_id,
        };
        match rec.role {
            SampleRole::Train => split.train.push(sample),
            SampleRole::Query => split.query.push(sample),
            SampleRole::Gallery => split.gallery.push(sample),
        }
    }
    split.validate()?;
    Ok((split, manifest))
}
