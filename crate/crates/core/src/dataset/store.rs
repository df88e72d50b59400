//! On-disk dataset cache.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! dataset.cfg      key=value: format, height, width, normal_digit, known_anomaly_digit
//! manifest.csv     id,digit,role,split,index
//! train_vae.f64    raw little-endian f64 pixels, one image after another
//! train_reg.f64
//! test.f64
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ImageSample, Role, SplitConfig, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "spader-dataset-1";
pub const MANIFEST: &str = "manifest.csv";
pub const META: &str = "dataset.cfg";
pub const SPLIT_NAMES: [&str; 3] = ["train_vae", "train_reg", "test"];

fn split_parts(splits: &Splits) -> [&[ImageSample]; 3] {
    [&splits.train_vae, &splits.train_reg, &splits.test]
}

/// Writes `splits` into `dir`, creating it if needed. Output bytes are a
/// pure function of the inputs.
pub fn write_dataset(dir: &Path, splits: &Splits, split: &SplitConfig) -> Result<()> {
    let first = splits
        .test
        .first()
        .or(splits.train_vae.first())
        .ok_or_else(|| Error::Dataset("refusing to write an empty dataset".into()))?;
    let shape = first.pixels.shape().to_vec();
    for part in split_parts(splits) {
        if let Some(bad) = part.iter().find(|s| s.pixels.shape() != shape.as_slice()) {
            return Err(Error::ShapeMismatch {
                op: "dataset image",
                left: bad.pixels.shape().to_vec(),
                right: shape,
            });
        }
    }

    let mut manifest = String::from("id,digit,role,split,index\n");
    let mut blobs = Vec::new();
    for (name, part) in SPLIT_NAMES.iter().zip(split_parts(splits)) {
        let mut blob = Vec::with_capacity(part.len() * shape.iter().product::<usize>() * 8);
        for (i, s) in part.iter().enumerate() {
            writeln!(manifest, "{},{},{},{},{}", s.id, s.digit, s.role, name, i).expect("string write");
            for v in s.pixels.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        blobs.push((format!("{name}.f64"), blob));
    }
    let meta = format!(
        "format={FORMAT}\nheight={}\nwidth={}\nnormal_digit={}\nknown_anomaly_digit={}\n",
        shape[1], shape[2], split.normal_digit, split.known_anomaly_digit
    );

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    };
    write(META, meta.as_bytes())?;
    for (name, blob) in &blobs {
        write(name, blob)?;
    }
    write(MANIFEST, manifest.as_bytes())
}

/// Parsed `dataset.cfg`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub height: usize,
    pub width: usize,
    pub split: SplitConfig,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Dataset(format!("corrupt dataset: {}", msg.into()))
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv: BTreeMap<&str, &str> = text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect();
    if kv.get("format") != Some(&FORMAT) {
        return Err(corrupt(format!("{META} has format {:?}, expected {FORMAT}", kv.get("format"))));
    }
    let num = |key: &str| -> Result<usize> {
        kv.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt(format!("{META} lacks a numeric `{key}`")))
    };
    Ok(DatasetMeta {
        height: num("height")?,
        width: num("width")?,
        split: SplitConfig {
            normal_digit: num("normal_digit")? as u8,
            known_anomaly_digit: num("known_anomaly_digit")? as u8,
        },
    })
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(DatasetMeta, Splits)> {
    let meta = read_meta(dir)?;
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("id,digit,role,split,index") {
        return Err(corrupt("manifest header"));
    }
    let pixels = meta.height * meta.width;
    let mut blobs = Vec::new();
    for name in SPLIT_NAMES {
        let p = dir.join(format!("{name}.f64"));
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if bytes.len() % (pixels * 8) != 0 {
            return Err(corrupt(format!("{name}.f64 is not a whole number of images")));
        }
        blobs.push(bytes);
    }
    let mut splits = Splits::default();
    for (lineno, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(corrupt(format!("manifest line {} has {} columns", lineno + 2, cols.len())));
        }
        let bad = |what: &str| corrupt(format!("manifest line {}: bad {what}", lineno + 2));
        let id: u64 = cols[0].parse().map_err(|_| bad("id"))?;
        let digit: u8 = cols[1].parse().map_err(|_| bad("digit"))?;
        let role: Role = cols[2].parse().map_err(|_| bad("role"))?;
        let which = SPLIT_NAMES.iter().position(|&n| n == cols[3]).ok_or_else(|| bad("split"))?;
        let index: usize = cols[4].parse().map_err(|_| bad("index"))?;
        let start = index * pixels * 8;
        let bytes = blobs[which]
            .get(start..start + pixels * 8)
            .ok_or_else(|| bad("index (past end of tensor file)"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let sample = ImageSample {
            id,
            digit,
            role,
            pixels: Tensor::new(vec![1, meta.height, meta.width], data)?,
        };
        let target = match which {
            0 => &mut splits.train_vae,
            1 => &mut splits.train_reg,
            _ => &mut splits.test,
        };
        if target.len() != index {
            return Err(bad("index order"));
        }
        target.push(sample);
    }
    Ok((meta, splits))
}
