use rand::Rng;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::{downsample_labels, PseudoLabelSet, SegLabelMap};
use crate::model::ModelConfig;
use crate::seed::{self, stream};
use crate::synth::{train_count, SampleRecord};
use crate::text::{apply_mlm_mask, TokenSequence, Vocabulary};
use crate::vision::{flip_if_safe, mask_patches, patchify, resize_crop, KeywordSet, PatchGrid};

/// Records split 90/10 by index, with the vocabulary built from the
/// training captions.
#[derive(Clone, Debug)]
pub struct Dataset {
    records: Vec<SampleRecord>,
    n_train: usize,
    vocab: Vocabulary,
    image_size: usize,
}

impl Dataset {
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        let n_train = train_count(records.len());
        if n_train == 0 || n_train == records.len() {
            return Err(Error::Input(format!(
                "{} records leave an empty training or validation split",
                records.len()
            )));
        }
        let image_size = records[0].image.height();
        if let Some(r) = records
            .iter()
            .find(|r| r.image.height() != image_size || r.image.width() != image_size)
        {
            return Err(Error::Input(format!(
                "record {} is {}x{}, expected {image_size}x{image_size}",
                r.id,
                r.image.height(),
                r.image.width()
            )));
        }
        let captions: Vec<&str> = records[..n_train].iter().map(|r| r.caption.as_str()).collect();
        let vocab = Vocabulary::build(&captions)?;
        Ok(Self {
            records,
            n_train,
            vocab,
            image_size,
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn train(&self) -> &[SampleRecord] {
        &self.records[..self.n_train]
    }

    pub fn val(&self) -> &[SampleRecord] {
        &self.records[self.n_train..]
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// `base` with the data-dependent sizes filled in.
    pub fn model_config(&self, base: &ModelConfig) -> Result<ModelConfig> {
        if self.image_size % base.patch_size != 0 {
            return Err(Error::Geometry {
                height: self.image_size,
                width: self.image_size,
                divisor: base.patch_size,
            });
        }
        let cfg = ModelConfig {
            vocab_size: self.vocab.len(),
            grid_size: self.image_size / base.patch_size,
            ..base.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One model input with its targets.
#[derive(Clone, Debug)]
pub struct Example {
    pub record: usize,
    pub grid: PatchGrid,
    /// Unmasked patches, when `grid` is masked.
    pub clean_grid: Option<PatchGrid>,
    pub seq: TokenSequence,
    pub is_match: bool,
    pub seg: Option<SegLabelMap>,
    pub labels: PseudoLabelSet,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Phase {
    /// Training sample `slot` of optimizer step `step`.
    Train { step: usize, slot: usize },
    /// Validation item `index`; identical at every evaluation.
    Val { index: usize },
}

impl Phase {
    fn rng(self, seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
        match self {
            Phase::Train { step, slot } => seed::rng(seed, &[stream, step as u64, slot as u64]),
            Phase::Val { index } => seed::rng(seed, &[stream::VALIDATION, stream, index as u64]),
        }
    }
}

/// Draw a distractor whose caption differs from the anchor's.
pub(crate) fn pick_negative<R: Rng + ?Sized>(pool: &[SampleRecord], anchor: usize, rng: &mut R) -> Result<usize> {
    let caption = &pool[anchor].caption;
    if pool.iter().all(|r| &r.caption == caption) {
        return Err(Error::Input("every caption is identical; cannot draw a mismatched pair".into()));
    }
    loop {
        let j = rng.gen_range(0..pool.len());
        if pool[j].caption != *caption {
            return Ok(j);
        }
    }
}

/// Pairing, augmentation and corruption for one sample. `pool` is the split
/// the sample and its distractor come from; validation samples are never
/// augmented.
pub(crate) fn make_example(
    cfg: &TrainConfig,
    model: &ModelConfig,
    vocab: &Vocabulary,
    pool: &[SampleRecord],
    index: usize,
    phase: Phase,
) -> Result<Example> {
    let seed = cfg.seed;
    let train = matches!(phase, Phase::Train { .. });
    let record = &pool[index];

    let mut rng = phase.rng(seed, stream::NEGATIVE);
    let is_match = rng.gen::<f64>() >= cfg.negative_rate;
    let caption = if is_match {
        &record.caption
    } else {
        &pool[pick_negative(pool, index, &mut rng)?].caption
    };

    let mut rng = phase.rng(seed, stream::AUGMENT);
    let mut image = record.image.clone();
    let mut seg = record.seg.clone();
    if train && cfg.augment_crop {
        let side = model.image_size();
        (image, seg) = resize_crop(&image, seg.as_ref(), side, side, &mut rng);
    }
    if train && cfg.augment_flip {
        let staged = SampleRecord {
            image,
            seg,
            ..record.clone()
        };
        let flipped = flip_if_safe(&staged, &KeywordSet::default(), &mut rng);
        (image, seg) = (flipped.image, flipped.seg);
    }
    let grid = patchify(&image, model.patch_size)?;

    let (grid, clean_grid) = if model.loss_mode == crate::model::LossMode::Ssul {
        let mut rng = phase.rng(seed, stream::PATCH_MASK);
        let masked = mask_patches(&grid, cfg.patch_mask_ratio, &mut rng)?;
        (masked, Some(grid))
    } else {
        (grid, None)
    };

    let seq = vocab.encode(caption, model.max_seq_len)?;
    let mut rng = phase.rng(seed, stream::MLM);
    let seq = apply_mlm_mask(&seq, cfg.mlm_ratio, &mut rng);

    let seg = match seg {
        Some(s) => Some(downsample_labels(&s, model.grid_size, model.grid_size)?),
        None => None,
    };
    let labels = PseudoLabelSet::padded(&record.pseudo_labels, model.n_queries, model.num_classes)?;
    Ok(Example {
        record: record.id,
        grid,
        clean_grid,
        seq,
        is_match,
        seg,
        labels,
    })
}
