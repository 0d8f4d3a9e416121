//! Helpers for driving the pipeline from tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rainunet_cli::checksums::CHECKSUM_FILE;
use rainunet_cli::RunConfig;

/// A model small enough to train in seconds.
pub const SMALL_MODEL: &[(&str, &str)] = &[
    ("stages", "2"),
    ("base_channels", "4"),
    ("groupnorm_groups", "2"),
];

/// Synthetic data on a 24-pixel grid with plenty of rain.
pub const SMALL_DATA: &[(&str, &str)] = &[
    ("sequences", "6"),
    ("size", "24"),
    ("target_zoom", "2"),
    ("radius", "3,5"),
    ("rain_threshold", "0.3"),
    ("cleansing_threshold", "10"),
];

pub fn config(pairs: &[(&str, &str)], paths: &[(&str, &Path)]) -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in pairs {
        c.set(k, v).unwrap();
    }
    for (k, p) in paths {
        c.set(k, p.to_str().unwrap()).unwrap();
    }
    c.finish().unwrap()
}

pub fn with(
    base: &[(&'static str, &'static str)],
    extra: &[(&'static str, &'static str)],
) -> Vec<(&'static str, &'static str)> {
    base.iter().chain(extra).copied().collect()
}

/// `name -> digest` from a directory's checksum file.
pub fn checksums(dir: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(dir.join(CHECKSUM_FILE))
        .unwrap()
        .lines()
        .map(|l| {
            let (h, n) = l.split_once("  ").unwrap();
            (n.to_string(), h.to_string())
        })
        .collect()
}

/// Parses `lead_time.csv` into `(lead, minutes, iou)` rows.
pub fn lead_rows(path: &Path) -> Vec<(usize, i64, f64)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("lead,minutes,iou,degenerate"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 4, "{l}");
            (
                f[0].parse().unwrap(),
                f[1].parse().unwrap(),
                f[2].parse().unwrap(),
            )
        })
        .collect()
}
