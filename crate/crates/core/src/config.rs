//! Architectural configuration shared by the live model and the cost model.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Which attention implementation every block uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionVariant {
    Baseline,
    /// Q/K/V width halved to C/2.
    Shallow,
    /// `n` pooled mediator tokens plus a depthwise convolution of V.
    Mediated { n: usize, dwc_kernel: usize },
    /// Softmax-free focused attention with `p`-th power features and
    /// `groups` query heads per key/value head.
    Focused {
        p: u32,
        groups: usize,
        #[serde(default)]
        rectify: bool,
    },
}

impl AttentionVariant {
    pub fn mediated(n: usize) -> Self {
        Self::Mediated { n, dwc_kernel: 3 }
    }

    pub fn focused(groups: usize) -> Self {
        Self::Focused { p: 3, groups, rectify: false }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Baseline => "base".into(),
            Self::Shallow => "shallow".into(),
            Self::Mediated { n, .. } => format!("med-{n}"),
            Self::Focused { groups, .. } => format!("fg-{groups}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub experts: usize,
    pub active: usize,
    /// MoE replaces the MLP in blocks `0, f, 2f, …`.
    pub frequency: usize,
    #[serde(default)]
    pub shared_experts: usize,
    #[serde(default = "default_balance_alpha")]
    pub balance_alpha: f64,
}

fn default_balance_alpha() -> f64 {
    0.01
}

impl MoeConfig {
    pub fn new(experts: usize, active: usize, frequency: usize) -> Self {
        Self { experts, active, frequency, shared_experts: 0, balance_alpha: default_balance_alpha() }
    }

    pub fn is_moe_block(&self, block: usize) -> bool {
        block % self.frequency == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.active == 0 || self.active > self.experts {
            return Err(config_err!("need 1 <= K <= E, got K={} E={}", self.active, self.experts));
        }
        if self.frequency == 0 {
            return Err(config_err!("MoE frequency must be >= 1"));
        }
        if !(self.balance_alpha >= 0.0) {
            return Err(config_err!("balance alpha must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    pub input_size: usize,
    pub in_channels: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub attention: AttentionVariant,
    #[serde(default)]
    pub moe: Option<MoeConfig>,
    pub cfg_dropout: f64,
    /// Width of the sinusoidal timestep features fed to the timestep MLP.
    pub freq_embed_dim: usize,
    /// Heads kept per layer after pruning; `None` when unpruned.
    #[serde(default)]
    pub keep_heads: Option<usize>,
}

impl ModelConfig {
    fn base(depth: usize, hidden: usize, heads: usize, patch: usize) -> Self {
        Self {
            depth,
            hidden,
            heads,
            patch,
            input_size: 32,
            in_channels: 4,
            mlp_ratio: 4,
            num_classes: 200,
            attention: AttentionVariant::Baseline,
            moe: None,
            cfg_dropout: 0.1,
            freq_embed_dim: 256,
            keep_heads: None,
        }
    }

    pub fn s2() -> Self {
        Self::base(12, 384, 6, 2)
    }

    pub fn s4() -> Self {
        Self::base(12, 384, 6, 4)
    }

    pub fn xs2() -> Self {
        Self::base(6, 256, 4, 2)
    }

    pub fn xs4() -> Self {
        Self::base(6, 256, 4, 4)
    }

    pub fn with_attention(mut self, attention: AttentionVariant) -> Self {
        self.attention = attention;
        self
    }

    pub fn with_moe(mut self, moe: MoeConfig) -> Self {
        self.moe = Some(moe);
        self
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    /// Resolve a preset name such as `S/2`, `XS/4-base`, `S/2-med-16`,
    /// `S/2-fg-3` or `MoE-S/2-8E2A`.
    pub fn from_name(name: &str) -> Result<Self> {
        let (moe_part, rest) = match name.strip_prefix("MoE-") {
            Some(rest) => (true, rest),
            None => (false, name),
        };
        let mut parts = rest.splitn(2, '-');
        let size = parts.next().unwrap_or_default();
        let suffix = parts.next();
        let cfg = match size {
            "S/2" => Self::s2(),
            "S/4" => Self::s4(),
            "XS/2" => Self::xs2(),
            "XS/4" => Self::xs4(),
            _ => return Err(config_err!("unknown model size in preset '{name}'")),
        };
        if moe_part {
            let spec = suffix.ok_or_else(|| config_err!("MoE preset '{name}' lacks an ExA suffix"))?;
            let (e, k) = spec
                .strip_suffix('A')
                .and_then(|s| s.split_once('E'))
                .and_then(|(e, k)| Some((e.parse::<usize>().ok()?, k.parse::<usize>().ok()?)))
                .ok_or_else(|| config_err!("cannot parse MoE spec '{spec}'"))?;
            // 4E1A alternates MoE and dense blocks; the 8-expert variants use MoE everywhere.
            let frequency = if (e, k) == (4, 1) { 2 } else { 1 };
            return Ok(cfg.with_moe(MoeConfig::new(e, k, frequency)));
        }
        let attention = match suffix {
            None | Some("base") => AttentionVariant::Baseline,
            Some("shallow") => AttentionVariant::Shallow,
            Some(s) if s.starts_with("med-") => AttentionVariant::mediated(
                s[4..].parse().map_err(|_| config_err!("bad mediator count in '{name}'"))?,
            ),
            Some(s) if s.starts_with("fg-") => AttentionVariant::focused(
                s[3..].parse().map_err(|_| config_err!("bad group factor in '{name}'"))?,
            ),
            Some(s) => return Err(config_err!("unknown variant '{s}' in '{name}'")),
        };
        Ok(cfg.with_attention(attention))
    }

    pub fn tokens(&self) -> usize {
        let g = self.grid();
        g * g
    }

    /// Tokens per side of the patch grid.
    pub fn grid(&self) -> usize {
        self.input_size / self.patch.max(1)
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch * self.patch
    }

    pub fn out_channels(&self) -> usize {
        2 * self.in_channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.hidden * self.mlp_ratio
    }

    /// Width of the per-head query/key/value space (C, or C/2 for shallow).
    pub fn attn_width(&self) -> usize {
        match self.attention {
            AttentionVariant::Shallow => self.hidden / 2,
            _ => self.hidden,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.attn_width() / self.heads
    }

    pub fn is_moe_block(&self, block: usize) -> bool {
        self.moe.as_ref().is_some_and(|m| m.is_moe_block(block))
    }

    pub fn moe_blocks(&self) -> usize {
        (0..self.depth).filter(|&b| self.is_moe_block(b)).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.heads == 0 || self.patch == 0 {
            return Err(config_err!("depth, hidden, heads and patch must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(config_err!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.input_size == 0 || self.input_size % self.patch != 0 {
            return Err(config_err!("input size {} not divisible by patch {}", self.input_size, self.patch));
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return Err(config_err!("in_channels, mlp_ratio and num_classes must be positive"));
        }
        if self.freq_embed_dim == 0 || self.freq_embed_dim % 2 != 0 {
            return Err(config_err!("timestep embedding width must be even, got {}", self.freq_embed_dim));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return Err(config_err!("cfg_dropout {} outside [0, 1]", self.cfg_dropout));
        }
        match &self.attention {
            AttentionVariant::Baseline => {}
            AttentionVariant::Shallow => {
                if self.hidden % 2 != 0 || (self.hidden / 2) % self.heads != 0 {
                    return Err(config_err!(
                        "shallow attention needs C/2 divisible by heads (C={}, h={})",
                        self.hidden,
                        self.heads
                    ));
                }
            }
            AttentionVariant::Mediated { n, dwc_kernel } => {
                if *n == 0 || *n > self.tokens() {
                    return Err(config_err!("mediator count {n} outside [1, {}]", self.tokens()));
                }
                if dwc_kernel % 2 == 0 {
                    return Err(config_err!("depthwise kernel must be odd, got {dwc_kernel}"));
                }
            }
            AttentionVariant::Focused { p, groups, .. } => {
                if *p == 0 {
                    return Err(config_err!("focusing power must be >= 1"));
                }
                if *groups == 0 || self.heads % groups != 0 {
                    return Err(config_err!("group factor {groups} does not divide {} heads", self.heads));
                }
            }
        }
        if let Some(moe) = &self.moe {
            moe.validate()?;
        }
        if let Some(k) = self.keep_heads {
            if k == 0 || k > self.heads {
                return Err(config_err!("keep_heads {k} outside [1, {}]", self.heads));
            }
        }
        Ok(())
    }
}

/// The twelve architecture rows of the comparison table, in table order.
pub fn preset_suite() -> Vec<(String, ModelConfig)> {
    [
        "S/2-base",
        "S/4-base",
        "XS/2-base",
        "XS/4-base",
        "S/2-shallow",
        "S/2-med-4",
        "S/2-med-16",
        "S/2-fg-6",
        "S/2-fg-3",
        "MoE-S/2-8E2A",
        "MoE-S/2-4E1A",
        "MoE-XS/2-8E2A",
    ]
    .iter()
    .map(|n| (n.to_string(), ModelConfig::from_name(n).expect("preset names parse")))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn presets_match_published_geometry() {
        let s2 = ModelConfig::s2();
        assert_eq!((s2.depth, s2.hidden, s2.heads, s2.patch), (12, 384, 6, 2));
        assert_eq!(s2.tokens(), 256);
        assert_eq!(ModelConfig::s4().patch, 4);
        let xs = ModelConfig::xs2();
        assert_eq!((xs.depth, xs.hidden, xs.heads, xs.patch), (6, 256, 4, 2));
        assert_eq!(ModelConfig::xs4().tokens(), 64);
    }

    #[test]
    fn names_parse() {
        let c = ModelConfig::from_name("MoE-S/2-4E1A").unwrap();
        assert_eq!(c.moe, Some(MoeConfig::new(4, 1, 2)));
        assert_eq!(c.moe_blocks(), 6);
        let c = ModelConfig::from_name("MoE-XS/2-8E2A").unwrap();
        assert_eq!(c.depth, 6);
        assert_eq!(c.moe.unwrap().frequency, 1);
        let c = ModelConfig::from_name("S/2-fg-3").unwrap();
        assert_eq!(c.attention, AttentionVariant::Focused { p: 3, groups: 3, rectify: false });
        assert!(ModelConfig::from_name("B/2").is_err());
        assert_eq!(preset_suite().len(), 12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::s2();
        c.heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig::s2().with_attention(AttentionVariant::focused(4));
        assert!(c.validate().is_err());
        let c = ModelConfig::s2().with_attention(AttentionVariant::mediated(257));
        assert!(c.validate().is_err());
        let c = ModelConfig::s2().with_moe(MoeConfig::new(2, 3, 1));
        assert!(c.validate().is_err());
        let mut c = ModelConfig::s2();
        c.freq_embed_dim = 255;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = ModelConfig::from_name("S/2-med-16").unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
