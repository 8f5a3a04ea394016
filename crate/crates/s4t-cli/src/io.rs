//! Filesystem plumbing around the byte-level codecs: manifests with
//! path resolution, image and label loading, checkpoints, and the config
//! echo every command drops into its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use s4t_core::config::AdaptConfig;
use s4t_core::formats;
use s4t_core::model::SegNet;
use s4t_core::tensor::{LabelMap, Tensor};

use crate::UsageError;

/// One manifest line with its paths resolved against the manifest location.
#[derive(Debug, Clone)]
pub struct ResolvedEntry {
    pub image: PathBuf,
    pub label: Option<PathBuf>,
}

/// Missing manifests are usage errors: the run was misconfigured, nothing
/// has happened yet.
pub fn load_manifest(path: &Path) -> Result<Vec<ResolvedEntry>> {
    if !path.exists() {
        return Err(UsageError::new(format!("manifest not found: {}", path.display())).into());
    }
    let text =
        fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let entries = formats::parse_manifest(&text)
        .map_err(|e| UsageError::new(format!("manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(entries
        .into_iter()
        .map(|e| ResolvedEntry {
            image: base.join(&e.image),
            label: e.label.as_deref().map(|l| base.join(l)),
        })
        .collect())
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading image {}", path.display()))?;
    formats::decode_ppm(&bytes).with_context(|| format!("decoding image {}", path.display()))
}

pub fn load_label(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).with_context(|| format!("reading label {}", path.display()))?;
    let (map, _maxval) = formats::decode_pgm(&bytes)
        .with_context(|| format!("decoding label {}", path.display()))?;
    Ok(map)
}

pub fn load_images(entries: &[ResolvedEntry]) -> Result<Vec<Tensor>> {
    entries.iter().map(|e| load_image(&e.image)).collect()
}

/// Loads the label of every entry; entries without a label column are a
/// usage error (the caller needs ground truth).
pub fn load_labels(entries: &[ResolvedEntry]) -> Result<Vec<LabelMap>> {
    entries
        .iter()
        .map(|e| match &e.label {
            Some(p) => load_label(p),
            None => Err(UsageError::new(format!(
                "manifest entry {} has no label column, but this mode needs ground truth",
                e.image.display()
            ))
            .into()),
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, model: &SegNet) -> Result<()> {
    let bytes = formats::encode_checkpoint(&model.to_named_tensors());
    fs::write(path, bytes).with_context(|| format!("writing checkpoint {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<SegNet> {
    if !path.exists() {
        return Err(UsageError::new(format!("checkpoint not found: {}", path.display())).into());
    }
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let entries = formats::decode_checkpoint(&bytes)
        .with_context(|| format!("decoding checkpoint {}", path.display()))?;
    SegNet::from_named_tensors(&entries)
        .map_err(|e| anyhow::anyhow!("checkpoint {}: {e}", path.display()))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating directory {}", path.display()))
}

/// Every command echoes its effective configuration for reproducibility.
pub fn echo_config(out_dir: &Path, cfg: &AdaptConfig) -> Result<()> {
    ensure_dir(out_dir)?;
    let path = out_dir.join("config.txt");
    fs::write(&path, cfg.to_text())
        .with_context(|| format!("writing config echo {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
