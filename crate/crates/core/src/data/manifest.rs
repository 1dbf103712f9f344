//! Dataset manifest: one `path<TAB>split<TAB>label<TAB>mask_path_or_dash` per line.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub split: String,
    pub label: u8,
    pub mask: Option<PathBuf>,
}

pub fn format_manifest(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let mask = r
            .mask
            .as_ref()
            .map(|m| m.display().to_string())
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.path.display(), r.split, r.label, mask));
    }
    out
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    std::fs::write(path, format_manifest(records))?;
    Ok(())
}

pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Malformed {
            path: origin.to_path_buf(),
            reason: format!("line {}: {reason}", n + 1),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(format!("expected 4 tab-separated fields, found {}", cols.len())));
        }
        let label = match cols[2] {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label must be 0 or 1, got {other:?}"))),
        };
        out.push(ManifestRecord {
            path: PathBuf::from(cols[0]),
            split: cols[1].to_string(),
            label,
            mask: (cols[3] != "-").then(|| PathBuf::from(cols[3])),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    parse_manifest(&std::fs::read_to_string(path)?, path)
}
