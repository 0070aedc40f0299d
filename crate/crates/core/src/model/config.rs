use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network family: the full two-stream model and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Zoom-in and zoom-out gradual streams fused before the head.
    #[serde(rename = "MGI")]
    Mgi,
    /// Scales concatenated as a three-channel input.
    #[serde(rename = "RI")]
    Ri,
    /// Per-scale first conv blocks summed, then a shared trunk.
    #[serde(rename = "LR")]
    Lr,
    /// Single gradual stream S1 -> S2 -> S3.
    #[serde(rename = "ZI")]
    Zi,
    /// Single gradual stream S3 -> S2 -> S1.
    #[serde(rename = "ZO")]
    Zo,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Mgi, Variant::Ri, Variant::Lr, Variant::Zi, Variant::Zo];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Mgi => "MGI",
            Variant::Ri => "RI",
            Variant::Lr => "LR",
            Variant::Zi => "ZI",
            Variant::Zo => "ZO",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s) || format!("MCNN-{}", v.as_str()).eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}` (MGI, RI, LR, ZI, ZO)")))
    }
}

/// How the two stream outputs are merged (two-stream variant only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Concat,
    Sum,
    Conv1x1,
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Concat => "concat",
            Fusion::Sum => "sum",
            Fusion::Conv1x1 => "conv1x1",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "concat" | "concatenation" => Ok(Fusion::Concat),
            "sum" | "add" => Ok(Fusion::Sum),
            "conv1x1" | "1x1" => Ok(Fusion::Conv1x1),
            _ => Err(Error::InvalidConfig(format!("unknown fusion `{s}` (concat, sum, conv1x1)"))),
        }
    }
}

/// Architecture descriptor. Every width is explicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Ignored unless `variant` is [`Variant::Mgi`].
    pub fusion: Fusion,
    /// Widths of the three gradual stages (F1, F12, F123); non-decreasing.
    pub stage_channels: Vec<usize>,
    /// Post-fusion conv widths at half resolution.
    pub head_channels: Vec<usize>,
    /// Hidden fully connected widths before the 2-way output.
    pub fc_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub num_classes: usize,
}

pub const DEFAULT_DROPOUT: f64 = 0.5;

/// Per-variant first FC width that brings each default network close to
/// the reference capacity (~9.47M parameters).
fn default_fc1(variant: Variant) -> usize {
    match variant {
        Variant::Mgi => 1211,
        Variant::Ri => 1273,
        Variant::Lr => 1266,
        Variant::Zi | Variant::Zo => 1273,
    }
}

/// Same calibration for the desk-scale network.
fn small_fc1(variant: Variant) -> usize {
    match variant {
        Variant::Mgi => 32,
        Variant::Lr => 42,
        Variant::Ri | Variant::Zi | Variant::Zo => 47,
    }
}

impl ModelConfig {
    /// Full-size default for a variant.
    pub fn default_for(variant: Variant) -> Self {
        ModelConfig {
            variant,
            fusion: Fusion::Sum,
            stage_channels: vec![32, 48, 64],
            head_channels: vec![128],
            fc_widths: vec![default_fc1(variant), 512],
            dropout_rate: DEFAULT_DROPOUT,
            num_classes: 2,
        }
    }

    /// Desk-scale network (about 12.8k parameters) for synthetic runs.
    pub fn small(variant: Variant) -> Self {
        ModelConfig {
            variant,
            fusion: Fusion::Sum,
            stage_channels: vec![4, 4, 4],
            head_channels: vec![4],
            fc_widths: vec![small_fc1(variant)],
            dropout_rate: DEFAULT_DROPOUT,
            num_classes: 2,
        }
    }

    pub fn with_fusion(mut self, fusion: Fusion) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "stage_channels needs one width per scale (3), got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidConfig(format!(
                "stage_channels must be non-decreasing, got {:?}",
                self.stage_channels
            )));
        }
        if self.head_channels.is_empty() {
            return Err(Error::InvalidConfig("head_channels must not be empty".into()));
        }
        let widths = self.stage_channels.iter().chain(&self.head_channels).chain(&self.fc_widths);
        if widths.clone().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("all widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.num_classes != 2 {
            return Err(Error::InvalidConfig(format!(
                "the classifier is binary, num_classes = {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}
