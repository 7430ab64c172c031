use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrapherKind {
    Lsgc,
    Svga,
}

impl FromStr for GrapherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lsgc" => Ok(GrapherKind::Lsgc),
            "svga" => Ok(GrapherKind::Svga),
            other => Err(domain(format!("unknown grapher kind '{other}'"))),
        }
    }
}

impl fmt::Display for GrapherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GrapherKind::Lsgc => "lsgc",
            GrapherKind::Svga => "svga",
        })
    }
}

/// Which difference the max-relative fold takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelativeSign {
    /// `x - neighbor`.
    #[default]
    SelfMinusNeighbor,
    /// `neighbor - x`, the usual ViG max-relative convolution.
    NeighborMinusSelf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ti,
    S,
    B,
    Wide,
    Micro,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ti" => Ok(Variant::Ti),
            "s" => Ok(Variant::S),
            "b" => Ok(Variant::B),
            "wide" => Ok(Variant::Wide),
            "micro" => Ok(Variant::Micro),
            other => Err(domain(format!("unknown variant '{other}'"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ti => "ti",
            Variant::S => "s",
            Variant::B => "b",
            Variant::Wide => "wide",
            Variant::Micro => "micro",
        })
    }
}

/// Per-stage block counts: `mbconv` MBConv blocks followed by `grapher`
/// LSGC blocks (grapher + FFN).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageDepth {
    pub mbconv: usize,
    pub grapher: usize,
}

const fn depth(mbconv: usize, grapher: usize) -> StageDepth {
    StageDepth { mbconv, grapher }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stage_depths: [StageDepth; 4],
    pub stage_channels: [usize; 4],
    pub grapher_kind: GrapherKind,
    pub expansion_rate: usize,
    /// 1-based stage numbers that keep their grapher blocks.
    pub grapher_stages: BTreeSet<usize>,
    pub use_hrs: bool,
    pub mbconv_expansion: usize,
    pub ffn_ratio: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub input_resolution: usize,
    #[serde(default)]
    pub relative_sign: RelativeSign,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
}

fn default_momentum() -> f64 {
    0.1
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    fn base(variant: Variant, stage_depths: [StageDepth; 4], stage_channels: [usize; 4]) -> Self {
        Self {
            variant,
            stage_depths,
            stage_channels,
            grapher_kind: GrapherKind::Lsgc,
            expansion_rate: 2,
            grapher_stages: (1..=4).collect(),
            use_hrs: true,
            mbconv_expansion: 4,
            ffn_ratio: 4,
            head_hidden: 1024,
            num_classes: 1000,
            input_resolution: 224,
            relative_sign: RelativeSign::SelfMinusNeighbor,
            bn_momentum: default_momentum(),
            bn_eps: default_eps(),
        }
    }

    pub fn ti() -> Self {
        Self::base(
            Variant::Ti,
            [depth(3, 3), depth(3, 3), depth(9, 3), depth(3, 3)],
            [32, 64, 128, 224],
        )
    }

    pub fn s() -> Self {
        Self::base(
            Variant::S,
            [depth(5, 5), depth(5, 5), depth(15, 5), depth(5, 5)],
            [32, 64, 128, 256],
        )
    }

    pub fn b() -> Self {
        Self::base(
            Variant::B,
            [depth(5, 5), depth(5, 5), depth(15, 5), depth(5, 5)],
            [48, 96, 192, 384],
        )
    }

    pub fn wide() -> Self {
        Self::base(
            Variant::Wide,
            [depth(1, 1), depth(1, 1), depth(3, 1), depth(1, 1)],
            [48, 96, 192, 384],
        )
    }

    /// Desk-scale preset for the synthetic task.
    pub fn micro() -> Self {
        Self {
            head_hidden: 64,
            num_classes: 4,
            input_resolution: 32,
            ..Self::base(Variant::Micro, [depth(1, 1); 4], [8, 16, 24, 32])
        }
    }

    pub fn preset(variant: Variant) -> Self {
        match variant {
            Variant::Ti => Self::ti(),
            Variant::S => Self::s(),
            Variant::B => Self::b(),
            Variant::Wide => Self::wide(),
            Variant::Micro => Self::micro(),
        }
    }

    pub fn with_grapher_stages(mut self, stages: impl IntoIterator<Item = usize>) -> Self {
        self.grapher_stages = stages.into_iter().collect();
        self
    }

    pub fn with_grapher(mut self, kind: GrapherKind) -> Self {
        self.grapher_kind = kind;
        self
    }

    pub fn with_hrs(mut self, on: bool) -> Self {
        self.use_hrs = on;
        self
    }

    /// Grapher blocks actually built in stage `s` (0-based).
    pub fn graphers_in_stage(&self, s: usize) -> usize {
        if self.grapher_stages.contains(&(s + 1)) {
            self.stage_depths[s].grapher
        } else {
            0
        }
    }

    /// Side length of the stage-`s` feature map for a square input.
    pub fn stage_resolution(&self, s: usize) -> usize {
        self.input_resolution >> (2 + s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(32) {
            return Err(domain(format!(
                "input resolution {} is not divisible by 32",
                self.input_resolution
            )));
        }
        if let Some(s) = self.grapher_stages.iter().find(|&&s| !(1..=4).contains(&s)) {
            return Err(domain(format!("grapher stage {s} outside 1..=4")));
        }
        if self.stage_channels.contains(&0) || !self.stage_channels[0].is_multiple_of(2) {
            return Err(domain("stage channels must be positive and C1 even"));
        }
        if self.expansion_rate < 2 && self.grapher_kind == GrapherKind::Lsgc {
            return Err(domain("LSGC expansion rate must be >= 2"));
        }
        if self.expansion_rate == 0 || self.mbconv_expansion == 0 || self.ffn_ratio == 0 {
            return Err(domain("ratios must be positive"));
        }
        if self.num_classes == 0 || self.head_hidden == 0 {
            return Err(domain("head dimensions must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(s).map_err(|e| domain(format!("bad model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
