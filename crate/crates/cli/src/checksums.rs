use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use sha2::{Digest, Sha256};

pub const CHECKSUM_FILE: &str = "SHA256SUMS";

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Writes `SHA256SUMS` (`<hex>  <name>` per regular file, sorted by name)
/// for the files directly inside `dir`.
pub fn write_checksums(dir: &Path) -> Result<PathBuf> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n != CHECKSUM_FILE)
        .collect();
    names.sort();
    let mut text = String::new();
    for name in names {
        text.push_str(&format!("{}  {name}\n", sha256_file(&dir.join(&name))?));
    }
    let path = dir.join(CHECKSUM_FILE);
    fs::write(&path, text)?;
    Ok(path)
}
