//! Frame ids and KITTI-style file layout.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

/// Zero-padded six-digit frame id.
pub fn frame_stem(id: u32) -> String {
    format!("{id:06}")
}

pub fn frame_path(dir: &Path, id: u32, ext: &str) -> PathBuf {
    dir.join(format!("{}.{ext}", frame_stem(id)))
}

/// Which frames to process: `all`, or a comma list of ids and `a-b` ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameSelection {
    All,
    Ids(Vec<u32>),
}

impl std::str::FromStr for FrameSelection {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(FrameSelection::All);
        }
        let mut ids = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let parse = |t: &str| t.trim().parse::<u32>().map_err(|_| anyhow!("bad frame id {t:?}"));
            match part.split_once('-') {
                Some((a, b)) => {
                    let (a, b) = (parse(a)?, parse(b)?);
                    if a > b {
                        bail!("empty frame range {part:?}");
                    }
                    ids.extend(a..=b);
                }
                None => ids.push(parse(part)?),
            }
        }
        if ids.is_empty() {
            bail!("no frames selected");
        }
        if let Some(&big) = ids.iter().find(|&&i| i > 999_999) {
            bail!("frame id {big} does not fit six digits");
        }
        ids.sort_unstable();
        ids.dedup();
        Ok(FrameSelection::Ids(ids))
    }
}

/// Ids of `dir/NNNNNN.ext` files, sorted.
pub fn discover(dir: &Path, ext: &str) -> Result<Vec<u32>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
            ids.push(stem.parse().expect("six digits"));
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Resolves a selection against the files present in `dir`.
pub fn resolve(selection: &FrameSelection, dir: &Path, ext: &str) -> Result<Vec<u32>> {
    match selection {
        FrameSelection::All => discover(dir, ext),
        FrameSelection::Ids(ids) => Ok(ids.clone()),
    }
}
