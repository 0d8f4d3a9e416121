//! Sequence records, tensor files, preprocessing and synthetic rain movies.

mod channels;
mod preprocess;
mod synth;
pub mod tensor_file;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use channels::{select_modalities, ChannelSet, Modality, CHANNELS};
pub use preprocess::{
    center_crop_resize, cleansing_filter, crop_window, CLEANSING_THRESHOLD, TARGET_FRACTION,
};
pub use synth::{render, synth_generate, Blob, SynthConfig, SynthSequence};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INPUT_FRAMES: usize = 4;
pub const TARGET_FRAMES: usize = 32;
/// Minutes between consecutive frames.
pub const FRAME_MINUTES: i64 = 15;

/// One training example: `(C, 4, H, W)` inputs and a `(32, H, W)` binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub input: Tensor<f32>,
    pub target: Tensor<u8>,
    pub region: String,
    /// Minutes since the synthetic epoch; always a multiple of 15.
    pub timestamp: i64,
}

impl SequenceRecord {
    pub fn positives(&self) -> u64 {
        self.target.data().iter().map(|&v| v as u64).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let i = self.input.shape();
        let t = self.target.shape();
        if i.len() != 4 || i[1] != INPUT_FRAMES {
            return Err(Error::invalid(format!(
                "record input shape {i:?}, expected (C, 4, H, W)"
            )));
        }
        if t.len() != 3 || t[0] != TARGET_FRAMES || t[1..] != i[2..] {
            return Err(Error::invalid(format!(
                "record target shape {t:?} does not match input {i:?}"
            )));
        }
        if self.target.data().iter().any(|&v| v > 1) {
            return Err(Error::invalid("record target is not binary"));
        }
        Ok(())
    }
}

/// A record file is the input blob followed by the target blob.
pub fn write_record(rec: &SequenceRecord, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    tensor_file::encode(&rec.input, &mut buf)?;
    tensor_file::encode(&rec.target, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_record(path: &Path, region: &str, timestamp: i64) -> Result<SequenceRecord> {
    let bytes = fs::read(path)?;
    let (input, a) = tensor_file::decode::<f32>(&bytes)?;
    let (target, b) = tensor_file::decode::<u8>(&bytes[a..])?;
    if a + b != bytes.len() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    let rec = SequenceRecord {
        input,
        target,
        region: region.to_string(),
        timestamp,
    };
    rec.validate()?;
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub positives: u64,
    pub region: String,
    pub timestamp: i64,
}

pub const MANIFEST_HEADER: &str = "rainunet-manifest\t1";
pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                e.path, e.positives, e.region, e.timestamp
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Format(
                "missing or unsupported manifest header".into(),
            ));
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let bad = || Error::Format(format!("manifest line {}: `{line}`", n + 2));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            entries.push(ManifestEntry {
                path: f[0].to_string(),
                positives: f[1].parse().map_err(|_| bad())?,
                region: f[2].to_string(),
                timestamp: f[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(dir.join(MANIFEST_NAME))?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_NAME), self.to_text())?;
        Ok(())
    }

    /// Loads every record, checking positive counts against the manifest.
    pub fn load_records(&self, dir: &Path) -> Result<Vec<SequenceRecord>> {
        self.entries
            .iter()
            .map(|e| {
                let rec = read_record(&dir.join(&e.path), &e.region, e.timestamp)?;
                if rec.positives() != e.positives {
                    return Err(Error::Format(format!(
                        "{}: manifest lists {} positives, target holds {}",
                        e.path,
                        e.positives,
                        rec.positives()
                    )));
                }
                Ok(rec)
            })
            .collect()
    }
}

/// Writes records as `seq_00000.runt`, ... plus the manifest.
pub fn write_dataset(records: &[SequenceRecord], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    for (i, rec) in records.iter().enumerate() {
        let name = format!("seq_{i:05}.runt");
        write_record(rec, &dir.join(&name))?;
        manifest.entries.push(ManifestEntry {
            path: name,
            positives: rec.positives(),
            region: rec.region.clone(),
            timestamp: rec.timestamp,
        });
    }
    manifest.write(dir)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SequenceRecord>> {
    Manifest::read(dir)?.load_records(dir)
}
