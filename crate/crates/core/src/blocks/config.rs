use std::fmt;
use std::str::FromStr;

use crate::attention::{CsaConfig, CseConfig, KeyScope};
use crate::error::{CstError, Result};

/// What the attention slot of each Transformer layer contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoCsa,
    NoCse,
    CsaCsa,
    CseCse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnKind {
    Csa,
    Cse,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoCsa,
        Variant::NoCse,
        Variant::CsaCsa,
        Variant::CseCse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCsa => "no_csa",
            Variant::NoCse => "no_cse",
            Variant::CsaCsa => "csa_csa",
            Variant::CseCse => "cse_cse",
        }
    }

    /// Kernels applied in sequence inside one layer.
    pub fn kernels(self) -> &'static [AttnKind] {
        use AttnKind::*;
        match self {
            Variant::Full => &[Csa, Cse],
            Variant::NoCsa => &[Cse],
            Variant::NoCse => &[Csa],
            Variant::CsaCsa => &[Csa, Csa],
            Variant::CseCse => &[Cse, Cse],
        }
    }
}

impl FromStr for Variant {
    type Err = CstError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| CstError::Config(format!("unknown variant '{}'", s)))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the parallel channel-attention branch sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaPlacement {
    /// One branch per stage, summed with the layer chain before the stage conv.
    Stage,
    /// One branch per layer, added alongside the attention residual.
    Layer,
    /// No channel attention.
    Off,
}

impl CaPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            CaPlacement::Stage => "stage",
            CaPlacement::Layer => "layer",
            CaPlacement::Off => "off",
        }
    }
}

impl FromStr for CaPlacement {
    type Err = CstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage" => Ok(CaPlacement::Stage),
            "layer" => Ok(CaPlacement::Layer),
            "off" => Ok(CaPlacement::Off),
            _ => Err(CstError::Config(format!("unknown ca placement '{}'", s))),
        }
    }
}

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CstConfig {
    pub bands: usize,
    pub channels: usize,
    pub stages: usize,
    pub layers_per_stage: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub ca_reduction: usize,
    pub scale: usize,
    pub variant: Variant,
    pub key_scope: KeyScope,
    pub ca_placement: CaPlacement,
    pub cse_reduce_spatial: usize,
    pub cse_reduce_channels: usize,
    pub seed: u64,
}

pub const LN_EPS: f64 = 1e-6;

impl CstConfig {
    /// Full-size configuration: C=180, 4 stages of 4 layers, 2x16 windows.
    pub fn full(bands: usize, scale: usize) -> Self {
        CstConfig {
            bands,
            channels: 180,
            stages: 4,
            layers_per_stage: 4,
            win_h: 2,
            win_w: 16,
            heads: 6,
            ffn_expansion: 2,
            ca_reduction: 16,
            scale,
            variant: Variant::Full,
            key_scope: KeyScope::Global,
            ca_placement: CaPlacement::Stage,
            cse_reduce_spatial: 2,
            cse_reduce_channels: 2,
            seed: 0,
        }
    }

    /// Small model for desk-scale runs and tests.
    pub fn tiny(bands: usize, channels: usize, scale: usize) -> Self {
        CstConfig {
            channels,
            stages: 1,
            layers_per_stage: 1,
            win_h: 2,
            win_w: 4,
            heads: 2,
            ca_reduction: 4,
            ..CstConfig::full(bands, scale)
        }
    }

    pub fn csa(&self, shifted: bool) -> CsaConfig {
        CsaConfig {
            channels: self.channels,
            win_h: self.win_h,
            win_w: self.win_w,
            heads: self.heads,
            shifted,
            key_scope: self.key_scope,
        }
    }

    pub fn cse(&self) -> CseConfig {
        CseConfig {
            channels: self.channels,
            heads: self.heads,
            reduce_spatial: self.cse_reduce_spatial,
            reduce_channels: self.cse_reduce_channels,
        }
    }

    /// Width of the channel-attention bottleneck.
    pub fn ca_width(&self) -> usize {
        (self.channels / self.ca_reduction).max(1)
    }

    pub fn upsample_steps(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bands", self.bands),
            ("channels", self.channels),
            ("stages", self.stages),
            ("layers_per_stage", self.layers_per_stage),
            ("ffn_expansion", self.ffn_expansion),
            ("ca_reduction", self.ca_reduction),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(CstError::Config(format!("{} must be positive", k)));
            }
        }
        if ![2, 4, 8].contains(&self.scale) {
            return Err(CstError::Config(format!("scale {} not one of 2, 4, 8", self.scale)));
        }
        let kinds = self.variant.kernels();
        if kinds.contains(&AttnKind::Csa) {
            self.csa(false).validate()?;
        }
        if kinds.contains(&AttnKind::Cse) {
            self.cse().validate()?;
        }
        Ok(())
    }

    /// `(key, value)` pairs in a fixed order; the inverse of [`CstConfig::set`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("bands", self.bands.to_string()),
            ("channels", self.channels.to_string()),
            ("stages", self.stages.to_string()),
            ("layers_per_stage", self.layers_per_stage.to_string()),
            ("win_h", self.win_h.to_string()),
            ("win_w", self.win_w.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_expansion", self.ffn_expansion.to_string()),
            ("ca_reduction", self.ca_reduction.to_string()),
            ("scale", self.scale.to_string()),
            ("variant", self.variant.to_string()),
            ("key_scope", self.key_scope.as_str().to_string()),
            ("ca_placement", self.ca_placement.as_str().to_string()),
            ("cse_reduce_spatial", self.cse_reduce_spatial.to_string()),
            ("cse_reduce_channels", self.cse_reduce_channels.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| CstError::Config(format!("bad value '{}' for {}", v, key)))
        }
        match key {
            "bands" => self.bands = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "stages" => self.stages = num(key, value)?,
            "layers_per_stage" => self.layers_per_stage = num(key, value)?,
            "win_h" => self.win_h = num(key, value)?,
            "win_w" => self.win_w = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "ffn_expansion" => self.ffn_expansion = num(key, value)?,
            "ca_reduction" => self.ca_reduction = num(key, value)?,
            "scale" => self.scale = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "key_scope" => self.key_scope = KeyScope::parse(value)?,
            "ca_placement" => self.ca_placement = value.parse()?,
            "cse_reduce_spatial" => self.cse_reduce_spatial = num(key, value)?,
            "cse_reduce_channels" => self.cse_reduce_channels = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(CstError::Config(format!("unknown model key '{}'", key))),
        }
        Ok(())
    }

    /// `key = value` lines, one per field.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{} = {}\n", k, v))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = CstConfig::full(1, 4);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CstError::Config(format!("expected key = value, got '{}'", line)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = CstConfig::tiny(8, 16, 2);
        c.variant = Variant::CseCse;
        c.key_scope = KeyScope::PerWindow;
        let back = CstConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = CstConfig::full(128, 3);
        assert!(c.validate().is_err());
        c.scale = 4;
        assert!(c.validate().is_ok());
        assert!(c.set("colour", "blue").is_err());
        assert!(c.set("variant", "mixed").is_err());
    }

    #[test]
    fn ca_width_floors() {
        assert_eq!(CstConfig::full(128, 4).ca_width(), 11);
        assert_eq!(CstConfig::tiny(4, 8, 2).ca_width(), 2);
    }
}
