use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvMap;

/// Which auxiliary visual loss a run trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossMode {
    None,
    Ssul,
    Segl,
    Spl,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::None, LossMode::Ssul, LossMode::Segl, LossMode::Spl];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::None => "none",
            LossMode::Ssul => "ssul",
            LossMode::Segl => "segl",
            LossMode::Spl => "spl",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(LossMode::None),
            "ssul" => Ok(LossMode::Ssul),
            "segl" => Ok(LossMode::Segl),
            "spl" => Ok(LossMode::Spl),
            other => Err(Error::Config(format!(
                "unknown loss mode {other:?} (expected none, ssul, segl or spl)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_lang_layers: usize,
    pub n_vis_layers: usize,
    pub n_cross_layers: usize,
    pub n_decoder_layers: usize,
    pub patch_size: usize,
    /// Side of the square patch grid; images are `grid_size · patch_size` pixels.
    pub grid_size: usize,
    pub vocab_size: usize,
    /// Segmentation classes including background.
    pub num_classes: usize,
    pub n_queries: usize,
    pub max_seq_len: usize,
    pub ffn_dim: usize,
    pub init_std: f64,
    pub loss_mode: LossMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_lang_layers: 2,
            n_vis_layers: 2,
            n_cross_layers: 2,
            n_decoder_layers: 1,
            patch_size: 8,
            grid_size: 12,
            vocab_size: 32,
            num_classes: crate::synth::NUM_CLASSES,
            n_queries: 36,
            max_seq_len: 20,
            ffn_dim: 256,
            init_std: 0.02,
            loss_mode: LossMode::None,
        }
    }
}

impl ModelConfig {
    pub fn image_size(&self) -> usize {
        self.grid_size * self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("patch_size", self.patch_size),
            ("grid_size", self.grid_size),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
            ("n_queries", self.n_queries),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 3 {
            return Err(Error::Config("max_seq_len must be at least 3".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        if self.vocab_size < crate::text::RESERVED.len() {
            return Err(Error::Config("vocab_size smaller than the reserved tokens".into()));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 15] = [
        "d_model",
        "n_heads",
        "n_lang_layers",
        "n_vis_layers",
        "n_cross_layers",
        "n_decoder_layers",
        "patch_size",
        "grid_size",
        "vocab_size",
        "num_classes",
        "n_queries",
        "max_seq_len",
        "ffn_dim",
        "init_std",
        "loss_mode",
    ];

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("d_model", self.d_model);
        m.set("n_heads", self.n_heads);
        m.set("n_lang_layers", self.n_lang_layers);
        m.set("n_vis_layers", self.n_vis_layers);
        m.set("n_cross_layers", self.n_cross_layers);
        m.set("n_decoder_layers", self.n_decoder_layers);
        m.set("patch_size", self.patch_size);
        m.set("grid_size", self.grid_size);
        m.set("vocab_size", self.vocab_size);
        m.set("num_classes", self.num_classes);
        m.set("n_queries", self.n_queries);
        m.set("max_seq_len", self.max_seq_len);
        m.set("ffn_dim", self.ffn_dim);
        // `{:?}` keeps the shortest representation that parses back exactly
        m.set("init_std", format!("{:?}", self.init_std));
        m.set("loss_mode", self.loss_mode);
        m
    }

    /// Missing keys fall back to `base`.
    pub fn from_kv(m: &KvMap, base: &ModelConfig) -> Result<Self> {
        let cfg = Self {
            d_model: m.parse_or("d_model", base.d_model)?,
            n_heads: m.parse_or("n_heads", base.n_heads)?,
            n_lang_layers: m.parse_or("n_lang_layers", base.n_lang_layers)?,
            n_vis_layers: m.parse_or("n_vis_layers", base.n_vis_layers)?,
            n_cross_layers: m.parse_or("n_cross_layers", base.n_cross_layers)?,
            n_decoder_layers: m.parse_or("n_decoder_layers", base.n_decoder_layers)?,
            patch_size: m.parse_or("patch_size", base.patch_size)?,
            grid_size: m.parse_or("grid_size", base.grid_size)?,
            vocab_size: m.parse_or("vocab_size", base.vocab_size)?,
            num_classes: m.parse_or("num_classes", base.num_classes)?,
            n_queries: m.parse_or("n_queries", base.n_queries)?,
            max_seq_len: m.parse_or("max_seq_len", base.max_seq_len)?,
            ffn_dim: m.parse_or("ffn_dim", base.ffn_dim)?,
            init_std: m.parse_or("init_std", base.init_std)?,
            loss_mode: m.parse_or("loss_mode", base.loss_mode)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig {
            init_std: 0.1 + 0.2,
            loss_mode: LossMode::Spl,
            ..Default::default()
        };
        let back = ModelConfig::from_kv(&KvMap::parse(&cfg.to_kv().to_text()).unwrap(), &ModelConfig::default()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn loss_mode_parsing() {
        for m in LossMode::ALL {
            assert_eq!(m.as_str().parse::<LossMode>().unwrap(), m);
        }
        assert!("joint".parse::<LossMode>().is_err());
    }
}
