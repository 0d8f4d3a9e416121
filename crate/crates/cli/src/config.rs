//! Run configuration: defaults, then a `key = value` file, then flags.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rainunet::data::{ChannelSet, SynthConfig};
use rainunet::training::TrainConfig;
use rainunet::RainUNetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// 32-bit floats.
    #[default]
    Standard,
    /// 64-bit floats.
    Wide,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Precision::Standard),
            "wide" => Ok(Precision::Wide),
            _ => bail!("precision must be `standard` or `wide`, got `{s}`"),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Standard => "standard",
            Precision::Wide => "wide",
        })
    }
}

/// Model keys that follow from the data layout and cannot be set.
const DERIVED_MODEL_KEYS: [&str; 3] = ["in_channels", "in_frames", "out_frames"];

const MODEL_KEYS: [&str; 9] = [
    "stages",
    "base_channels",
    "sconv_kernel",
    "tsdconv_kernel",
    "tsdconv_dilation",
    "tconv_kernel",
    "groupnorm_groups",
    "head",
    "head_bias_init",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Drives data synthesis, model initialization and minibatch order.
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub crop_factor: usize,
    pub channels: ChannelSet,
    /// Probability at or above which a pixel counts as rain.
    pub threshold: f64,
    pub cleansing_threshold: u64,
    pub precision: Precision,
    /// `in_channels` always equals `channels.len()`.
    pub model: RainUNetConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub gradcheck_seeds: u64,
    /// Overrides every gradient-check tolerance when set.
    pub gradcheck_tol: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let channels = ChannelSet::default();
        RunConfig {
            seed: 0,
            data: None,
            out: None,
            checkpoint: None,
            crop_factor: 3,
            model: RainUNetConfig {
                in_channels: channels.len(),
                ..Default::default()
            },
            channels,
            threshold: rainunet::metrics::DEFAULT_THRESHOLD,
            cleansing_threshold: rainunet::data::CLEANSING_THRESHOLD,
            precision: Precision::Standard,
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            gradcheck_seeds: 10,
            gradcheck_tol: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("`{key}`: expected {what}, got `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => bail!("`{key}`: expected true or false, got `{value}`"),
    }
}

fn parse_pair<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<(T, T)> {
    let (lo, hi) = value
        .split_once(',')
        .ok_or_else(|| anyhow!("`{key}`: expected `low,high`, got `{value}`"))?;
    Ok((parse(key, lo.trim(), what)?, parse(key, hi.trim(), what)?))
}

impl RunConfig {
    /// Every key accepted by [`set`](Self::set).
    pub fn keys() -> Vec<&'static str> {
        let mut keys = vec![
            "seed",
            "data",
            "out",
            "checkpoint",
            "crop_factor",
            "channels",
            "threshold",
            "cleansing_threshold",
            "precision",
            "epochs",
            "batch_size",
            "lr",
            "weight_decay",
            "swa",
            "swa_start",
            "sequences",
            "size",
            "target_zoom",
            "blobs",
            "speed",
            "radius",
            "rain_threshold",
            "gradcheck_seeds",
            "gradcheck_tol",
        ];
        keys.extend(MODEL_KEYS);
        keys
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value, "an integer")?,
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "crop_factor" => {
                let n: usize = parse(key, value, "an integer")?;
                if !(1..=rainunet::data::TARGET_FRACTION).contains(&n) {
                    bail!("`crop_factor` must be in 1..=6, got {n}");
                }
                self.crop_factor = n;
            }
            "channels" => {
                self.channels = ChannelSet::parse(value)?;
                self.model.in_channels = self.channels.len();
            }
            "threshold" => {
                let t: f64 = parse(key, value, "a number")?;
                if !(0.0..=1.0).contains(&t) {
                    bail!("`threshold` must be in [0, 1], got {t}");
                }
                self.threshold = t;
            }
            "cleansing_threshold" => self.cleansing_threshold = parse(key, value, "an integer")?,
            "precision" => self.precision = Precision::parse(value)?,
            "epochs" => self.train.epochs = parse(key, value, "an integer")?,
            "batch_size" => self.train.batch_size = parse(key, value, "an integer")?,
            "lr" => self.train.lr = parse(key, value, "a number")?,
            "weight_decay" => self.train.weight_decay = parse(key, value, "a number")?,
            "swa" => self.train.swa_enabled = parse_bool(key, value)?,
            "swa_start" => self.train.swa_start_epoch = parse(key, value, "an integer")?,
            "sequences" => self.synth.sequences = parse(key, value, "an integer")?,
            "size" => self.synth.size = parse(key, value, "an integer")?,
            "target_zoom" => self.synth.target_zoom = parse(key, value, "an integer")?,
            "blobs" => self.synth.blobs = parse_pair(key, value, "an integer")?,
            "speed" => self.synth.speed = parse_pair(key, value, "a number")?,
            "radius" => self.synth.radius = parse_pair(key, value, "a number")?,
            "rain_threshold" => self.synth.rain_threshold = parse(key, value, "a number")?,
            "gradcheck_seeds" => self.gradcheck_seeds = parse(key, value, "an integer")?,
            "gradcheck_tol" => {
                self.gradcheck_tol = match value {
                    "none" => None,
                    v => Some(parse(key, v, "a number")?),
                }
            }
            k if DERIVED_MODEL_KEYS.contains(&k) => {
                bail!("`{k}` follows from the data layout and cannot be set")
            }
            k if MODEL_KEYS.contains(&k) => self.model.set(k, value)?,
            _ => bail!("unknown configuration key `{key}`"),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", n + 1))?;
            self.set(k.trim(), v.trim())
                .with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `KEY=VALUE` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for pair in pairs {
            let pair = pair.as_ref();
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| anyhow!("override `{pair}` is not KEY=VALUE"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Propagates the shared seed and checks every section.
    pub fn finish(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self.model.in_channels = self.channels.len();
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if let Some(t) = self.gradcheck_tol {
            if !(t >= 0.0) {
                bail!("`gradcheck_tol` must be non-negative");
            }
        }
        Ok(self)
    }

    /// The resolved settings as `key = value` lines, sorted by key. Paths are
    /// left out so that runs in different directories produce equal text.
    pub fn to_text(&self) -> String {
        let mut map = BTreeMap::new();
        let t = &self.train;
        let s = &self.synth;
        map.insert("seed", self.seed.to_string());
        map.insert("crop_factor", self.crop_factor.to_string());
        map.insert("channels", self.channels.to_string());
        map.insert("threshold", format!("{:?}", self.threshold));
        map.insert("cleansing_threshold", self.cleansing_threshold.to_string());
        map.insert("precision", self.precision.to_string());
        map.insert("epochs", t.epochs.to_string());
        map.insert("batch_size", t.batch_size.to_string());
        map.insert("lr", format!("{:?}", t.lr));
        map.insert("weight_decay", format!("{:?}", t.weight_decay));
        map.insert("swa", t.swa_enabled.to_string());
        map.insert("swa_start", t.swa_start_epoch.to_string());
        map.insert("sequences", s.sequences.to_string());
        map.insert("size", s.size.to_string());
        map.insert("target_zoom", s.target_zoom.to_string());
        map.insert("blobs", format!("{},{}", s.blobs.0, s.blobs.1));
        map.insert("speed", format!("{:?},{:?}", s.speed.0, s.speed.1));
        map.insert("radius", format!("{:?},{:?}", s.radius.0, s.radius.1));
        map.insert("rain_threshold", format!("{:?}", s.rain_threshold));
        map.insert("gradcheck_seeds", self.gradcheck_seeds.to_string());
        map.insert(
            "gradcheck_tol",
            self.gradcheck_tol
                .map_or("none".into(), |t| format!("{t:?}")),
        );
        for line in self.model.to_text().lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                if let Some(key) = MODEL_KEYS.iter().find(|m| **m == k) {
                    map.insert(key, v.to_string());
                }
            }
        }
        let mut out = String::new();
        for (k, v) in map {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn require_data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| anyhow!("missing --data"))
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| anyhow!("missing --out"))
    }

    pub fn require_checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| anyhow!("missing --checkpoint"))
    }
}
