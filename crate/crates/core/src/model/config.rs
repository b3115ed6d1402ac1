use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the ablation table, as a switch on the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationFlag {
    NoVision,
    NoCaption,
    NoPrompt,
    MlpUnified,
    MlpAdaptive,
    MlpFusion,
}

impl AblationFlag {
    pub const ALL: [AblationFlag; 6] = [
        AblationFlag::NoVision,
        AblationFlag::NoCaption,
        AblationFlag::NoPrompt,
        AblationFlag::MlpUnified,
        AblationFlag::MlpAdaptive,
        AblationFlag::MlpFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationFlag::NoVision => "no-vision",
            AblationFlag::NoCaption => "no-caption",
            AblationFlag::NoPrompt => "no-prompt",
            AblationFlag::MlpUnified => "mlp-unified",
            AblationFlag::MlpAdaptive => "mlp-adaptive",
            AblationFlag::MlpFusion => "mlp-fusion",
        }
    }
}

impl fmt::Display for AblationFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('_', "-");
        if let Some(flag) = AblationFlag::ALL.into_iter().find(|f| f.name() == norm) {
            return Ok(flag);
        }
        match norm.as_str() {
            "no-object-tag" | "no-scene-tag" => Err(Error::Usage(format!(
                "{norm} is applied upstream: rebuild the prompt without that tag and \
                 re-encode e_p, then train on the new feature file"
            ))),
            _ => Err(Error::Usage(format!(
                "unknown ablation '{s}' (expected one of: {})",
                AblationFlag::ALL.map(|f| f.name()).join(", ")
            ))),
        }
    }
}

/// Set of active ablation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_vision: bool,
    pub no_caption: bool,
    pub no_prompt: bool,
    pub mlp_unified: bool,
    pub mlp_adaptive: bool,
    pub mlp_fusion: bool,
}

impl Ablation {
    pub fn from_flags(flags: impl IntoIterator<Item = AblationFlag>) -> Self {
        let mut a = Ablation::default();
        for f in flags {
            a.set(f, true);
        }
        a
    }

    pub fn set(&mut self, flag: AblationFlag, on: bool) {
        let slot = match flag {
            AblationFlag::NoVision => &mut self.no_vision,
            AblationFlag::NoCaption => &mut self.no_caption,
            AblationFlag::NoPrompt => &mut self.no_prompt,
            AblationFlag::MlpUnified => &mut self.mlp_unified,
            AblationFlag::MlpAdaptive => &mut self.mlp_adaptive,
            AblationFlag::MlpFusion => &mut self.mlp_fusion,
        };
        *slot = on;
    }

    pub fn contains(&self, flag: AblationFlag) -> bool {
        match flag {
            AblationFlag::NoVision => self.no_vision,
            AblationFlag::NoCaption => self.no_caption,
            AblationFlag::NoPrompt => self.no_prompt,
            AblationFlag::MlpUnified => self.mlp_unified,
            AblationFlag::MlpAdaptive => self.mlp_adaptive,
            AblationFlag::MlpFusion => self.mlp_fusion,
        }
    }

    pub fn flags(&self) -> Vec<AblationFlag> {
        AblationFlag::ALL
            .into_iter()
            .filter(|f| self.contains(*f))
            .collect()
    }
}

/// Dimensions, depths and ablation switches of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder output width.
    pub d_e: usize,
    /// Hidden width.
    pub d_h: usize,
    /// Per-head width of self-attention and of the metadata attention.
    pub d_k: usize,
    /// Per-head width of cross-modal attention.
    pub d_s: usize,
    /// Number of sentiment classes, also the expanded sequence length.
    pub classes: usize,
    /// Adaptive relevance learning depth.
    pub depth_n: usize,
    /// Cross-modal fusion depth.
    pub depth_m: usize,
    pub heads_self: usize,
    pub heads_cross: usize,
    /// Hidden width of transformer feed-forward blocks, as a multiple of `d_h`.
    pub ff_mult: usize,
    pub ln_eps: f64,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_e: 512,
            d_h: 128,
            d_k: 16,
            d_s: 64,
            classes: 8,
            depth_n: 4,
            depth_m: 6,
            heads_self: 8,
            heads_cross: 2,
            ff_mult: 4,
            ln_eps: 1e-5,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    /// Gradient-check configuration: d_h=8, d_k=d_s=4, L=3, N=M=2, 2/2 heads.
    pub fn tiny() -> Self {
        ModelConfig {
            d_e: 16,
            d_h: 8,
            d_k: 4,
            d_s: 4,
            classes: 3,
            depth_n: 2,
            depth_m: 2,
            heads_self: 2,
            heads_cross: 2,
            ..ModelConfig::default()
        }
    }

    /// Sets `d_h`, `d_k` and `d_s` and derives both head counts.
    pub fn with_dims(mut self, d_h: usize, d_k: usize, d_s: usize) -> Self {
        self.d_h = d_h;
        self.d_k = d_k;
        self.d_s = d_s;
        self.heads_self = d_h.checked_div(d_k).unwrap_or(0);
        self.heads_cross = d_h.checked_div(d_s).unwrap_or(0);
        self
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_e == 0 || self.d_h < 2 || self.d_k == 0 || self.d_s == 0 {
            return bad(format!(
                "dimensions must be positive with d_h >= 2 (d_e={}, d_h={}, d_k={}, d_s={})",
                self.d_e, self.d_h, self.d_k, self.d_s
            ));
        }
        if self.heads_self * self.d_k != self.d_h {
            return bad(format!(
                "heads_self * d_k = {} * {} must equal d_h = {}",
                self.heads_self, self.d_k, self.d_h
            ));
        }
        if self.heads_cross * self.d_s != self.d_h {
            return bad(format!(
                "heads_cross * d_s = {} * {} must equal d_h = {}",
                self.heads_cross, self.d_s, self.d_h
            ));
        }
        if self.depth_n < 1 || self.depth_m < 1 {
            return bad(format!(
                "depths must be >= 1 (N={}, M={})",
                self.depth_n, self.depth_m
            ));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.ff_mult == 0 {
            return bad("ff_mult must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        Ok(())
    }

    pub(crate) fn uses_caption(&self) -> bool {
        !self.ablation.no_caption
    }

    pub(crate) fn uses_prompt(&self) -> bool {
        !self.ablation.no_prompt
    }
}
