use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::losses::{LossWeights, DEFAULT_EOS_COEF};
use crate::model::ModelConfig;
use crate::text::MLM_RATIO;
use crate::vision::PATCH_MASK_RATIO;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// `vocab_size` and `grid_size` are overwritten from the dataset.
    pub model: ModelConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub weights: LossWeights,
    pub eos_coef: f64,
    pub mlm_ratio: f64,
    pub patch_mask_ratio: f64,
    pub negative_rate: f64,
    pub augment_crop: bool,
    pub augment_flip: bool,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            max_steps: 4000,
            max_epochs: usize::MAX,
            seed,
            eval_every: 200,
            weights: LossWeights::default(),
            eos_coef: DEFAULT_EOS_COEF,
            mlm_ratio: MLM_RATIO,
            patch_mask_ratio: PATCH_MASK_RATIO,
            negative_rate: 0.5,
            augment_crop: true,
            augment_flip: true,
            data: None,
            out_dir: None,
        }
    }

    pub const KEYS: [&'static str; 20] = [
        "lr",
        "beta1",
        "beta2",
        "epsilon",
        "batch_size",
        "max_steps",
        "max_epochs",
        "seed",
        "eval_every",
        "weight_mlm",
        "weight_itm",
        "weight_visual",
        "eos_coef",
        "mlm_ratio",
        "patch_mask_ratio",
        "negative_rate",
        "augment_crop",
        "augment_flip",
        "data",
        "out_dir",
    ];

    pub fn is_key(key: &str) -> bool {
        Self::KEYS.contains(&key) || ModelConfig::KEYS.contains(&key)
    }

    /// Unknown keys are rejected; `seed` has no default.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        if let Some(bad) = m.keys().find(|k| !Self::is_key(k)) {
            return Err(Error::Config(format!("unknown key {bad:?}")));
        }
        let seed = m
            .get("seed")
            .ok_or_else(|| Error::Config("seed is required".into()))?
            .parse()
            .map_err(|_| Error::Config("seed must be an unsigned integer".into()))?;
        let d = Self::new(seed);
        let max_epochs = match m.get("max_epochs") {
            None | Some("none") => d.max_epochs,
            Some(_) => m.parse_or("max_epochs", 0usize)?,
        };
        let cfg = Self {
            model: ModelConfig::from_kv(m, &d.model)?,
            lr: m.parse_or("lr", d.lr)?,
            beta1: m.parse_or("beta1", d.beta1)?,
            beta2: m.parse_or("beta2", d.beta2)?,
            epsilon: m.parse_or("epsilon", d.epsilon)?,
            batch_size: m.parse_or("batch_size", d.batch_size)?,
            max_steps: m.parse_or("max_steps", d.max_steps)?,
            max_epochs,
            seed,
            eval_every: m.parse_or("eval_every", d.eval_every)?,
            weights: LossWeights {
                mlm: m.parse_or("weight_mlm", d.weights.mlm)?,
                itm: m.parse_or("weight_itm", d.weights.itm)?,
                visual: m.parse_or("weight_visual", d.weights.visual)?,
            },
            eos_coef: m.parse_or("eos_coef", d.eos_coef)?,
            mlm_ratio: m.parse_or("mlm_ratio", d.mlm_ratio)?,
            patch_mask_ratio: m.parse_or("patch_mask_ratio", d.patch_mask_ratio)?,
            negative_rate: m.parse_or("negative_rate", d.negative_rate)?,
            augment_crop: m.parse_or("augment_crop", d.augment_crop)?,
            augment_flip: m.parse_or("augment_flip", d.augment_flip)?,
            data: m.get("data").map(PathBuf::from),
            out_dir: m.get("out_dir").map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = self.model.to_kv();
        m.set("lr", format!("{:?}", self.lr));
        m.set("beta1", format!("{:?}", self.beta1));
        m.set("beta2", format!("{:?}", self.beta2));
        m.set("epsilon", format!("{:?}", self.epsilon));
        m.set("batch_size", self.batch_size);
        m.set("max_steps", self.max_steps);
        if self.max_epochs == usize::MAX {
            m.set("max_epochs", "none");
        } else {
            m.set("max_epochs", self.max_epochs);
        }
        m.set("seed", self.seed);
        m.set("eval_every", self.eval_every);
        m.set("weight_mlm", format!("{:?}", self.weights.mlm));
        m.set("weight_itm", format!("{:?}", self.weights.itm));
        m.set("weight_visual", format!("{:?}", self.weights.visual));
        m.set("eos_coef", format!("{:?}", self.eos_coef));
        m.set("mlm_ratio", format!("{:?}", self.mlm_ratio));
        m.set("patch_mask_ratio", format!("{:?}", self.patch_mask_ratio));
        m.set("negative_rate", format!("{:?}", self.negative_rate));
        m.set("augment_crop", self.augment_crop);
        m.set("augment_flip", self.augment_flip);
        if let Some(p) = &self.data {
            m.set("data", p.display());
        }
        if let Some(p) = &self.out_dir {
            m.set("out_dir", p.display());
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let positive = [
            ("lr", self.lr),
            ("epsilon", self.epsilon),
            ("eos_coef", self.eos_coef),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        for (name, v) in [
            ("mlm_ratio", self.mlm_ratio),
            ("patch_mask_ratio", self.patch_mask_ratio),
            ("negative_rate", self.negative_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        let m = KvMap::parse("lr = 0.001\n").unwrap();
        assert!(matches!(TrainConfig::from_kv(&m), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip_and_unknown_keys() {
        let mut cfg = TrainConfig::new(7);
        cfg.max_epochs = 3;
        cfg.lr = 1e-3;
        cfg.data = Some("d/manifest.tsv".into());
        let back = TrainConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        let m = KvMap::parse("seed = 1\nlearning_rate = 2\n").unwrap();
        assert!(TrainConfig::from_kv(&m).is_err());
    }

    #[test]
    fn rates_must_be_positive() {
        let mut m = TrainConfig::new(1).to_kv();
        m.set("lr", 0);
        assert!(TrainConfig::from_kv(&m).is_err());
    }
}
