//! Checkpoint archive: a UTF-8 manifest header (`name shape dtype offset
//! length` per line, blank-line terminated) followed by concatenated
//! little-endian f32 blobs, plus a `.meta.txt` sidecar.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Arr;
use ndarray::IxDyn;
use std::io::Read;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub stage: String,
    pub epoch: usize,
    pub config_hash: String,
    /// `(epoch, mean loss)` rows.
    pub loss_history: Vec<(usize, f64)>,
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| d.parse::<usize>().map_err(|_| Error::Checkpoint(format!("bad shape '{s}'"))))
        .collect()
}

/// Write every parameter whose name passes `filter`, sorted by name so the
/// byte stream is a pure function of the contents.
pub fn save_checkpoint(
    store: &ParamStore,
    filter: impl Fn(&str) -> bool,
    path: &Path,
    meta: &CheckpointMeta,
) -> Result<PathBuf> {
    let mut names: Vec<&str> = store.names().filter(|n| filter(n)).collect();
    names.sort_unstable();
    if names.is_empty() {
        return Err(Error::Checkpoint(format!("{}: nothing to save", path.display())));
    }
    let mut header = String::new();
    let mut blobs: Vec<u8> = Vec::new();
    for name in &names {
        let idx = store.lookup(name).unwrap();
        let value = store.value(idx);
        let offset = blobs.len();
        for v in value.iter() {
            blobs.extend_from_slice(&v.to_le_bytes());
        }
        header.push_str(&format!(
            "{name} {} f32 {offset} {}\n",
            shape_str(value.shape()),
            value.len() * 4
        ));
    }
    header.push('\n');
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&blobs);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_meta(&meta_path(path), meta)?;
    Ok(path.to_path_buf())
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    ckpt.with_file_name(format!("{stem}.meta.txt"))
}

fn write_meta(path: &Path, meta: &CheckpointMeta) -> Result<()> {
    let mut text = format!(
        "stage = {}\nepoch = {}\nconfig_hash = {}\nepoch,mean_loss\n",
        meta.stage, meta.epoch, meta.config_hash
    );
    for (e, l) in &meta.loss_history {
        text.push_str(&format!("{e},{l}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_meta(ckpt: &Path) -> Result<CheckpointMeta> {
    let path = meta_path(ckpt);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut stage = String::new();
    let mut epoch = 0usize;
    let mut config_hash = String::new();
    let mut loss_history = Vec::new();
    let mut in_csv = false;
    for line in text.lines() {
        if line.trim() == "epoch,mean_loss" {
            in_csv = true;
            continue;
        }
        if in_csv {
            if let Some((e, l)) = line.split_once(',') {
                loss_history.push((
                    e.trim().parse().map_err(|_| Error::Checkpoint(format!("{}: bad loss row '{line}'", path.display())))?,
                    l.trim().parse().map_err(|_| Error::Checkpoint(format!("{}: bad loss row '{line}'", path.display())))?,
                ));
            }
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "stage" => stage = v.trim().to_string(),
                "epoch" => epoch = v.trim().parse().map_err(|_| Error::Checkpoint(format!("{}: bad epoch", path.display())))?,
                "config_hash" => config_hash = v.trim().to_string(),
                _ => {}
            }
        }
    }
    Ok(CheckpointMeta { stage, epoch, config_hash, loss_history })
}

/// Parse and validate the archive: manifest consistency (offsets contiguous,
/// lengths matching shapes, dtype f32) and exact blob size.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Arr)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|_| Error::MissingArtifact(format!("checkpoint {}", path.display())))?;
    let err = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    // header ends at the first blank line
    let mut header_end = None;
    let mut pos = 0;
    while pos < bytes.len() {
        let line_end = bytes[pos..].iter().position(|&b| b == b'\n').map(|p| pos + p);
        let Some(line_end) = line_end else { break };
        if line_end == pos {
            header_end = Some(pos + 1);
            break;
        }
        pos = line_end + 1;
    }
    let header_end = header_end.ok_or_else(|| err("missing blank-line header terminator".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end - 1]).map_err(|_| err("header is not UTF-8".into()))?;
    let blobs = &bytes[header_end..];

    let mut entries = Vec::new();
    let mut expected_offset = 0usize;
    for line in header.lines() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(err(format!("malformed manifest line '{line}'")));
        }
        let (name, shape_s, dtype, offset_s, length_s) = (parts[0], parts[1], parts[2], parts[3], parts[4]);
        if dtype != "f32" {
            return Err(err(format!("{name}: unsupported dtype '{dtype}'")));
        }
        let shape = parse_shape(shape_s)?;
        let offset: usize = offset_s.parse().map_err(|_| err(format!("{name}: bad offset")))?;
        let length: usize = length_s.parse().map_err(|_| err(format!("{name}: bad length")))?;
        let count: usize = shape.iter().product();
        if count * 4 != length {
            return Err(err(format!("{name}: shape {shape_s} disagrees with length {length}")));
        }
        if offset != expected_offset {
            return Err(err(format!("{name}: offset {offset} is not contiguous (expected {expected_offset})")));
        }
        expected_offset = offset + length;
        if offset + length > blobs.len() {
            return Err(err(format!("{name}: blob truncated")));
        }
        let data: Vec<f32> = blobs[offset..offset + length]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name.to_string(), Arr::from_shape_vec(IxDyn(&shape), data).unwrap()));
    }
    if expected_offset != blobs.len() {
        return Err(err(format!("trailing bytes: blob section is {} bytes, manifest covers {expected_offset}", blobs.len())));
    }
    Ok(entries)
}

/// Load a checkpoint into an existing store. Every checkpoint entry must
/// exist in the store with a matching shape, and every store parameter whose
/// name starts with one of `required_prefixes` must be covered; the first
/// mismatch (by name order) is reported.
pub fn load_into(store: &mut ParamStore, path: &Path, required_prefixes: &[&str]) -> Result<()> {
    let entries = load_checkpoint(path)?;
    let mut loaded = std::collections::BTreeSet::new();
    let mut sorted = entries;
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, value) in sorted {
        let idx = store
            .lookup(&name)
            .ok_or_else(|| Error::Checkpoint(format!("{}: entry '{name}' does not exist in the target model", path.display())))?;
        if store.value(idx).shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: entry '{name}' has shape {:?}, model expects {:?}",
                path.display(),
                value.shape(),
                store.value(idx).shape()
            )));
        }
        store.set(idx, value);
        loaded.insert(name);
    }
    let mut missing: Vec<String> = store
        .names()
        .filter(|n| required_prefixes.iter().any(|p| n.starts_with(p)) && !loaded.contains(*n))
        .map(|s| s.to_string())
        .collect();
    missing.sort();
    if let Some(first) = missing.first() {
        return Err(Error::Checkpoint(format!(
            "{}: parameter '{first}' required by the model is absent ({} missing in total)",
            path.display(),
            missing.len()
        )));
    }
    Ok(())
}
