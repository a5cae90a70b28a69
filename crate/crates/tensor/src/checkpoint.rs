//! Checkpoint layout: `<stem>.manifest` lists `name<TAB>dims` one tensor per
//! line; `<stem>.bin` holds a little-endian `u32` format version followed by
//! every tensor's `f32` data, little-endian, in manifest order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut manifest = stem.as_os_str().to_owned();
    manifest.push(".manifest");
    let mut blob = stem.as_os_str().to_owned();
    blob.push(".bin");
    (manifest.into(), blob.into())
}

pub fn save_checkpoint<'a, I>(stem: &Path, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let (manifest_path, blob_path) = paths(stem);
    let mut manifest = String::new();
    let mut blob = BufWriter::new(fs::File::create(&blob_path)?);
    blob.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(TensorError::Format(format!("invalid tensor name {name:?}")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(name);
        manifest.push('\t');
        manifest.push_str(&dims.join(" "));
        manifest.push('\n');
        for v in t.data() {
            blob.write_all(&v.to_le_bytes())?;
        }
    }
    blob.flush()?;
    fs::write(manifest_path, manifest)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<Vec<(String, Tensor)>> {
    let (manifest_path, blob_path) = paths(stem);
    let manifest = fs::read_to_string(manifest_path)?;
    let blob = fs::read(blob_path)?;
    if blob.len() < 4 {
        return Err(TensorError::Format("blob shorter than header".into()));
    }
    let version = u32::from_le_bytes(blob[..4].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Format(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut offset = 4;
    let mut out = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (name, dims) = line
            .split_once('\t')
            .ok_or_else(|| TensorError::Format(format!("manifest line {}: missing tab", lineno + 1)))?;
        let shape = dims
            .split_whitespace()
            .map(|d| {
                d.parse::<usize>().map_err(|_| {
                    TensorError::Format(format!("manifest line {}: bad dimension {d:?}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let end = offset + numel * 4;
        if end > blob.len() {
            return Err(TensorError::Format(format!("blob truncated at tensor {name}")));
        }
        let data = blob[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset = end;
        out.push((name.to_string(), Tensor::new(shape, data)?));
    }
    if offset != blob.len() {
        return Err(TensorError::Format(format!(
            "{} trailing bytes after last tensor",
            blob.len() - offset
        )));
    }
    Ok(out)
}
