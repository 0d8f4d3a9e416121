use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Ir,
    Vis,
    Wv,
}

/// The 11 bands of a raw record, in storage order.
pub const CHANNELS: [(&str, Modality); 11] = [
    ("IR_016", Modality::Ir),
    ("IR_039", Modality::Ir),
    ("IR_087", Modality::Ir),
    ("IR_097", Modality::Ir),
    ("IR_108", Modality::Ir),
    ("IR_120", Modality::Ir),
    ("IR_134", Modality::Ir),
    ("VIS_006", Modality::Vis),
    ("VIS_008", Modality::Vis),
    ("WV_062", Modality::Wv),
    ("WV_073", Modality::Wv),
];

/// Ordered subset of [`CHANNELS`], held as canonical indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSet {
    indices: Vec<usize>,
}

impl ChannelSet {
    pub fn all() -> Self {
        ChannelSet {
            indices: (0..CHANNELS.len()).collect(),
        }
    }

    /// Every channel of the given modalities, in canonical order.
    pub fn of_modalities(modalities: &[Modality]) -> Self {
        ChannelSet {
            indices: (0..CHANNELS.len())
                .filter(|&i| modalities.contains(&CHANNELS[i].1))
                .collect(),
        }
    }

    /// Explicit channel names, kept in the given order.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut indices = Vec::with_capacity(names.len());
        for n in names {
            let n = n.as_ref();
            let i = CHANNELS
                .iter()
                .position(|(c, _)| *c == n)
                .ok_or_else(|| Error::invalid(format!("unknown channel `{n}`")))?;
            if indices.contains(&i) {
                return Err(Error::invalid(format!("channel `{n}` listed twice")));
            }
            indices.push(i);
        }
        if indices.is_empty() {
            return Err(Error::invalid("channel set is empty"));
        }
        Ok(ChannelSet { indices })
    }

    /// A modality combination such as `ir+vis`, or comma-separated channel
    /// names as printed by `Display`.
    pub fn parse(spec: &str) -> Result<Self> {
        if spec.contains(',') || CHANNELS.iter().any(|(n, _)| *n == spec.trim()) {
            let names: Vec<&str> = spec.split(',').map(str::trim).collect();
            return Self::from_names(&names);
        }
        let mut mods = Vec::new();
        for part in spec.split('+') {
            let m = match part.trim().to_ascii_lowercase().as_str() {
                "ir" => Modality::Ir,
                "vis" => Modality::Vis,
                "wv" => Modality::Wv,
                other => return Err(Error::invalid(format!("unknown modality `{other}`"))),
            };
            if mods.contains(&m) {
                return Err(Error::invalid(format!("modality `{part}` listed twice")));
            }
            mods.push(m);
        }
        Ok(Self::of_modalities(&mods))
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.indices.iter().map(|&i| CHANNELS[i].0).collect()
    }
}

impl Default for ChannelSet {
    fn default() -> Self {
        Self::of_modalities(&[Modality::Ir, Modality::Vis])
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join(","))
    }
}

/// Copies the channels of `set` out of an 11-channel `(11, T, H, W)` input.
pub fn select_modalities<T: Element>(input: &Tensor<T>, set: &ChannelSet) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 4 || s[0] != CHANNELS.len() {
        return Err(Error::ShapeMismatch {
            op: "select_modalities",
            left: s.to_vec(),
            right: vec![CHANNELS.len(), 0, 0, 0],
        });
    }
    let plane = s[1] * s[2] * s[3];
    let mut data = Vec::with_capacity(set.len() * plane);
    for &c in set.indices() {
        data.extend_from_slice(&input.data()[c * plane..(c + 1) * plane]);
    }
    Tensor::from_vec(&[set.len(), s[1], s[2], s[3]], data)
}
