use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::layers::ConvSpec;

/// How the decoder's `(N, C, T, H, W)` features become `(N, out_frames, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadMode {
    /// 1x1x1 convolution to `out_frames` channels, mean over T, sigmoid.
    #[default]
    TimeMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RainUNetConfig {
    /// Number of encoder (and decoder) stages, K.
    pub stages: usize,
    /// Channel width of stage 1; stage k uses `base_channels * 2^(k-1)`.
    pub base_channels: usize,
    pub in_channels: usize,
    pub in_frames: usize,
    pub out_frames: usize,
    pub sconv_kernel: [usize; 3],
    pub tsdconv_kernel: [usize; 3],
    pub tsdconv_dilation: [usize; 3],
    pub tconv_kernel: [usize; 3],
    pub groupnorm_groups: usize,
    pub head: HeadMode,
    /// Initial value of every head bias, i.e. the initial logit. `logit(pi)`
    /// starts the model at a rain prior `pi`; 0 starts it at 0.5.
    pub head_bias_init: f64,
}

impl Default for RainUNetConfig {
    fn default() -> Self {
        RainUNetConfig {
            stages: 5,
            base_channels: 16,
            in_channels: 9,
            in_frames: 4,
            out_frames: 32,
            sconv_kernel: [1, 3, 3],
            tsdconv_kernel: [1, 7, 7],
            tsdconv_dilation: [1, 3, 3],
            tconv_kernel: [3, 1, 1],
            groupnorm_groups: 8,
            head: HeadMode::TimeMean,
            head_bias_init: 0.0,
        }
    }
}

impl RainUNetConfig {
    /// Small config for tests and desk-scale runs.
    pub fn micro(stages: usize, base_channels: usize) -> Self {
        RainUNetConfig {
            stages,
            base_channels,
            ..Default::default()
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Group count used for a normalization over `channels` channels.
    pub fn groups_for(&self, channels: usize) -> usize {
        if channels < self.groupnorm_groups {
            1
        } else {
            self.groupnorm_groups
        }
    }

    pub fn sconv_spec(&self) -> Result<ConvSpec> {
        ConvSpec::same(self.sconv_kernel, [1, 1, 1])
    }

    pub fn tsdconv_spec(&self) -> Result<ConvSpec> {
        ConvSpec::same(self.tsdconv_kernel, self.tsdconv_dilation)
    }

    pub fn tconv_spec(&self) -> Result<ConvSpec> {
        ConvSpec::same(self.tconv_kernel, [1, 1, 1])
    }

    /// Pool kernel per encoder stage: 2 on an axis while its extent is at
    /// least 2, otherwise 1. Spatial axes are assumed large enough to halve
    /// at every stage.
    pub fn pool_kernels(&self) -> Vec<[usize; 3]> {
        let mut t = self.in_frames;
        (0..self.stages)
            .map(|_| {
                let kt = if t >= 2 { 2 } else { 1 };
                t /= kt;
                [kt, 2, 2]
            })
            .collect()
    }

    /// Smallest admissible spatial extent: every stage must be able to halve it.
    pub fn min_spatial(&self) -> usize {
        1 << self.stages
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::invalid("stages must be at least 1"));
        }
        if self.stages > 12 {
            return Err(Error::invalid("stages must be at most 12"));
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(2) {
            return Err(Error::invalid(
                "base_channels must be a positive even number",
            ));
        }
        if self.in_channels == 0 || self.in_frames == 0 || self.out_frames == 0 {
            return Err(Error::invalid(
                "in_channels, in_frames and out_frames must be positive",
            ));
        }
        if !self.head_bias_init.is_finite() {
            return Err(Error::invalid("head_bias_init must be finite"));
        }
        if self.groupnorm_groups == 0 {
            return Err(Error::invalid("groupnorm_groups must be positive"));
        }
        for k in 0..self.stages {
            let c = self.stage_channels(k);
            if c >= self.groupnorm_groups && !c.is_multiple_of(self.groupnorm_groups) {
                return Err(Error::invalid(format!(
                    "stage {} width {c} is not divisible by {} groups",
                    k + 1,
                    self.groupnorm_groups
                )));
            }
        }
        self.sconv_spec()?;
        self.tsdconv_spec()?;
        self.tconv_spec()?;
        Ok(())
    }

    /// `key = value` lines, sorted by key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_map() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn to_map(&self) -> BTreeMap<&'static str, String> {
        let triple = |a: [usize; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        BTreeMap::from([
            ("stages", self.stages.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("in_frames", self.in_frames.to_string()),
            ("out_frames", self.out_frames.to_string()),
            ("sconv_kernel", triple(self.sconv_kernel)),
            ("tsdconv_kernel", triple(self.tsdconv_kernel)),
            ("tsdconv_dilation", triple(self.tsdconv_dilation)),
            ("tconv_kernel", triple(self.tconv_kernel)),
            ("groupnorm_groups", self.groupnorm_groups.to_string()),
            ("head", "time-mean".to_string()),
            ("head_bias_init", format!("{:?}", self.head_bias_init)),
        ])
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RainUNetConfig::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Format(format!("`{key}`: expected an integer, got `{v}`")))
        };
        let triple = |v: &str| -> Result<[usize; 3]> {
            let parts: Vec<_> = v.split(',').map(|p| num(p.trim())).collect::<Result<_>>()?;
            parts
                .try_into()
                .map_err(|_| Error::Format(format!("`{key}`: expected three integers")))
        };
        match key {
            "stages" => self.stages = num(value)?,
            "base_channels" => self.base_channels = num(value)?,
            "in_channels" => self.in_channels = num(value)?,
            "in_frames" => self.in_frames = num(value)?,
            "out_frames" => self.out_frames = num(value)?,
            "sconv_kernel" => self.sconv_kernel = triple(value)?,
            "tsdconv_kernel" => self.tsdconv_kernel = triple(value)?,
            "tsdconv_dilation" => self.tsdconv_dilation = triple(value)?,
            "tconv_kernel" => self.tconv_kernel = triple(value)?,
            "groupnorm_groups" => self.groupnorm_groups = num(value)?,
            "head_bias_init" => {
                self.head_bias_init = value.parse().map_err(|_| {
                    Error::Format(format!("`{key}`: expected a number, got `{value}`"))
                })?
            }
            "head" => {
                if value != "time-mean" {
                    return Err(Error::Format(format!("unknown head mode `{value}`")));
                }
                self.head = HeadMode::TimeMean;
            }
            _ => return Err(Error::Format(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temporal_pooling_stops_at_one_frame() {
        let kernels = RainUNetConfig::default().pool_kernels();
        let t: Vec<usize> = kernels.iter().map(|k| k[0]).collect();
        assert_eq!(t, vec![2, 2, 1, 1, 1]);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RainUNetConfig::micro(2, 4);
        cfg.head_bias_init = (0.1f64 / 0.9).ln();
        assert_eq!(RainUNetConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn validation() {
        assert!(RainUNetConfig::micro(0, 8).validate().is_err());
        assert!(RainUNetConfig::micro(2, 3).validate().is_err());
        assert!(RainUNetConfig::micro(2, 12).validate().is_err());
        assert!(RainUNetConfig::micro(2, 4).validate().is_ok());
        assert!(RainUNetConfig::default().validate().is_ok());
        assert!(RainUNetConfig::from_text("colour = blue").is_err());
    }

    #[test]
    fn groups_degrade_for_narrow_layers() {
        let cfg = RainUNetConfig::default();
        assert_eq!(cfg.groups_for(4), 1);
        assert_eq!(cfg.groups_for(16), 8);
    }
}
