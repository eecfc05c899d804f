//! Dataset persistence: flat binary images with a fixed 16-byte header and
//! a JSON manifest per dataset directory. Round-trips are bit-exact.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::CoreError;
use crate::simulate::{SamplePair, SampleSet};

/// File identity and layout version rolled into one.
const MAGIC: [u8; 8] = *b"UNRLIMG1";

/// Writes `img` as the 16-byte header (magic, rows, cols as little-endian
/// u32) followed by row-major little-endian f64 values.
pub fn write_image(path: &Path, img: &Array2<f64>) -> Result<(), CoreError> {
    let (rows, cols) = img.dim();
    let r32 = u32::try_from(rows).map_err(|_| CoreError::Malformed {
        what: "image shape",
        detail: format!("{rows} rows exceed the format's u32 limit"),
    })?;
    let c32 = u32::try_from(cols).map_err(|_| CoreError::Malformed {
        what: "image shape",
        detail: format!("{cols} cols exceed the format's u32 limit"),
    })?;
    let mut buf = Vec::with_capacity(16 + 8 * rows * cols);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&r32.to_le_bytes());
    buf.extend_from_slice(&c32.to_le_bytes());
    for row in img.rows() {
        for &v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads an image written by [`write_image`], rejecting foreign or
/// truncated files.
pub fn read_image(path: &Path) -> Result<Array2<f64>, CoreError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || bytes[..8] != MAGIC {
        return Err(CoreError::Malformed {
            what: "image file",
            detail: format!("{} lacks the expected header", path.display()),
        });
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + 8 * rows * cols;
    if bytes.len() != expected {
        return Err(CoreError::Malformed {
            what: "image file",
            detail: format!(
                "{} holds {} bytes, header promises {expected}",
                path.display(),
                bytes.len()
            ),
        });
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| CoreError::Malformed {
        what: "image file",
        detail: e.to_string(),
    })
}

/// One dataset entry in the manifest: file names relative to the dataset
/// directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairEntry {
    pub data: String,
    pub truth: String,
}

/// Dataset directory manifest: shapes, provenance, and the image files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub data_shape: (usize, usize),
    pub truth_shape: (usize, usize),
    pub pairs: Vec<PairEntry>,
    /// Generator configuration, kept verbatim for reproduction.
    pub config: serde_json::Value,
}

fn json_err(detail: serde_json::Error) -> CoreError {
    CoreError::Malformed {
        what: "dataset manifest",
        detail: detail.to_string(),
    }
}

/// Writes the sample set and its manifest into `dir` (created if absent).
pub fn save_dataset(
    dir: &Path,
    set: &SampleSet,
    config: serde_json::Value,
) -> Result<(), CoreError> {
    let first = set.pairs.first().ok_or(CoreError::EmptyDataset)?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(set.pairs.len());
    for (i, pair) in set.pairs.iter().enumerate() {
        if pair.data.dim() != first.data.dim() || pair.truth.dim() != first.truth.dim() {
            return Err(CoreError::ShapeMismatch(format!(
                "pair {i} breaks the dataset's common shapes"
            )));
        }
        let entry = PairEntry {
            data: format!("data_{i:04}.img"),
            truth: format!("truth_{i:04}.img"),
        };
        write_image(&dir.join(&entry.data), &pair.data)?;
        write_image(&dir.join(&entry.truth), &pair.truth)?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        seed: set.seed,
        data_shape: first.data.dim(),
        truth_shape: first.truth.dim(),
        pairs: entries,
        config,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(json_err)?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(SampleSet, DatasetManifest), CoreError> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(json_err)?;
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for entry in &manifest.pairs {
        let data = read_image(&dir.join(&entry.data))?;
        let truth = read_image(&dir.join(&entry.truth))?;
        if data.dim() != manifest.data_shape || truth.dim() != manifest.truth_shape {
            return Err(CoreError::ShapeMismatch(format!(
                "{} does not match the manifest shapes",
                entry.data
            )));
        }
        pairs.push(SamplePair { data, truth });
    }
    if pairs.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    Ok((
        SampleSet {
            pairs,
            seed: manifest.seed,
        },
        manifest,
    ))
}
