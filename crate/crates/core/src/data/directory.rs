//! Ingestion of a flat directory of `<id>.png` images plus `metadata.csv`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{Dataset, Sample};
use crate::error::{Error, Result};

pub const METADATA_FILE: &str = "metadata.csv";

/// Samples that could not be paired and were skipped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Table rows without a matching image.
    pub missing_images: Vec<String>,
    /// Images without a matching table row.
    pub orphan_images: Vec<String>,
}

/// Loads `dir/metadata.csv` (header row, first column = sample id) and the
/// matching `dir/<id>.png` files. Images are resized to `size x size` with
/// bilinear filtering and scaled to `[0, 1]`. Samples are ordered by id.
pub fn load_directory(dir: &Path, target: &str, size: usize, channels: usize) -> Result<(Dataset, LoadReport)> {
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("image channels must be 1 or 3, got {channels}")));
    }
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                images.insert(stem.to_string(), path.clone());
            }
        }
    }
    let table = dir.join(METADATA_FILE);
    let (fields, rows) = if table.exists() {
        read_table(&table, target)?
    } else {
        (Vec::new(), BTreeMap::new())
    };

    let mut report = LoadReport::default();
    let paired: Vec<(&String, &(String, Vec<String>))> = rows
        .iter()
        .filter(|(id, _)| {
            let ok = images.contains_key(*id);
            if !ok {
                report.missing_images.push((*id).clone());
            }
            ok
        })
        .collect();
    report.orphan_images = images.keys().filter(|id| !rows.contains_key(*id)).cloned().collect();

    let class_names: Vec<String> = paired
        .iter()
        .map(|(_, (label, _))| label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut samples = Vec::with_capacity(paired.len());
    for (id, (label, meta)) in paired {
        let path = &images[id];
        samples.push(Sample {
            id: id.clone(),
            label: class_names.binary_search(label).expect("label collected above"),
            meta: meta.clone(),
            image: decode(path, size, channels)?,
        });
    }
    Ok((
        Dataset {
            image_shape: [channels, size, size],
            field_names: fields,
            class_names,
            samples,
        },
        report,
    ))
}

type Rows = BTreeMap<String, (String, Vec<String>)>;

fn read_table(path: &Path, target: &str) -> Result<(Vec<String>, Rows)> {
    let csv_err = |line: u64, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() {
        return Err(csv_err(1, "empty header".into()));
    }
    let target_col = header
        .iter()
        .position(|h| h == target)
        .filter(|&i| i > 0)
        .ok_or_else(|| csv_err(1, format!("no target column `{target}` after the id column")))?;
    let fields: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != 0 && i != target_col)
        .map(|(_, h)| h.clone())
        .collect();
    let mut rows = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(csv_err(line, "empty sample id".into()));
        }
        let label = record[target_col].to_string();
        let meta = record
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != 0 && i != target_col)
            .map(|(_, v)| v.to_string())
            .collect();
        if rows.insert(id.clone(), (label, meta)).is_some() {
            return Err(csv_err(line, format!("duplicate sample id `{id}`")));
        }
    }
    Ok((fields, rows))
}

fn decode(path: &Path, size: usize, channels: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let img = img.resize_exact(size as u32, size as u32, FilterType::Triangle);
    let hw = size * size;
    let out = if channels == 1 {
        img.to_luma8()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect()
    } else {
        let rgb = img.to_rgb8().into_raw();
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = rgb[p * 3 + c] as f32 / 255.0;
            }
        }
        out
    };
    Ok(out)
}
