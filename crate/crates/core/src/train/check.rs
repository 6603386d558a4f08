//! Finite-difference check of the whole model and its losses.

use rand::Rng;

use super::data::{make_example, Example, Phase};
use super::{forward_terms, Dataset, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, DEFAULT_EOS_COEF};
use crate::model::{LossMode, Model, ModelConfig, ParamId};
use crate::seed;
use crate::synth::{gen_record, SynthConfig};
use crate::tensor::relative_error;

#[derive(Clone, Debug)]
pub struct ModelCheckReport {
    pub mode: LossMode,
    pub max_rel_err: f64,
    /// Parameter name of the worst coordinate.
    pub worst: String,
    pub checked: usize,
    /// Coordinates whose perturbation changed the set-prediction matching.
    pub excluded: usize,
}

/// Width-8, one-layer-per-stack configuration on 12×12 images.
pub fn tiny_config(mode: LossMode) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_lang_layers: 1,
        n_vis_layers: 1,
        n_cross_layers: 1,
        n_decoder_layers: 1,
        patch_size: 4,
        grid_size: 3,
        n_queries: 4,
        max_seq_len: 12,
        ffn_dim: 16,
        init_std: 0.5,
        loss_mode: mode,
        ..Default::default()
    }
}

type BatchEval = (f64, Vec<Vec<usize>>, Vec<(ParamId, Vec<f64>)>);

/// Summed loss, set-prediction matchings and (when `trainable`) gradients.
fn batch_loss(model: &Model, batch: &[Example], weights: LossWeights, trainable: bool) -> Result<BatchEval> {
    let mut total = 0.0;
    let mut matchings = Vec::new();
    let mut grads: Vec<(ParamId, Vec<f64>)> = Vec::new();
    for ex in batch {
        let mut g = model.graph(trainable);
        let t = forward_terms(model, &mut g, ex, DEFAULT_EOS_COEF)?;
        let mut sum = g.scale(t.itm, weights.itm);
        if let Some(m) = t.mlm {
            let s = g.scale(m, weights.mlm);
            sum = g.add(sum, s)?;
        }
        if let Some(v) = t.visual {
            let s = g.scale(v, weights.visual);
            sum = g.add(sum, s)?;
        }
        if let Some(m) = t.matching {
            matchings.push(m);
        }
        total += g.value(sum).item();
        if trainable {
            g.backward(sum)?;
            for (id, gr) in g.param_grads() {
                match grads.iter_mut().find(|(i, _)| *i == id) {
                    Some((_, acc)) => acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b),
                    None => grads.push((id, gr.to_vec())),
                }
            }
        }
    }
    Ok((total, matchings, grads))
}

/// Central-difference check of the summed loss of a two-sample batch with
/// respect to one random coordinate of every parameter tensor plus `extra`
/// further random coordinates.
pub fn model_grad_check(mode: LossMode, seed: u64, extra: usize, h: f64) -> Result<ModelCheckReport> {
    let synth = SynthConfig {
        image_size: 12,
        seg_fraction: 1.0,
    };
    let records: Vec<_> = (0..10).map(|i| gen_record(seed, i, &synth).1).collect();
    let data = Dataset::new(records)?;
    let mut cfg = TrainConfig::new(seed);
    cfg.model = data.model_config(&tiny_config(mode))?;
    cfg.patch_mask_ratio = 0.5;
    cfg.mlm_ratio = 0.5;
    let mut model = Model::init(cfg.model.clone(), seed)?;
    // one matched and one mismatched pair
    let batch: Vec<Example> = (0..2)
        .map(|slot| {
            cfg.negative_rate = slot as f64;
            make_example(&cfg, &cfg.model, data.vocab(), data.train(), slot, Phase::Train { step: 0, slot })
        })
        .collect::<Result<_>>()?;
    let weights = LossWeights::default();
    let (_, base_match, grads) = batch_loss(&model, &batch, weights, true)?;

    let mut rng = seed::rng(seed, &[seed::stream::VALIDATION, 99]);
    let mut coords: Vec<(ParamId, usize)> = model
        .params()
        .iter()
        .map(|(id, p)| (id, rng.gen_range(0..p.value.len())))
        .collect();
    let sizes: Vec<(ParamId, usize)> = model.params().iter().map(|(id, p)| (id, p.value.len())).collect();
    let numel: usize = sizes.iter().map(|s| s.1).sum();
    for _ in 0..extra {
        let mut k = rng.gen_range(0..numel);
        for &(id, n) in &sizes {
            if k < n {
                coords.push((id, k));
                break;
            }
            k -= n;
        }
    }

    let mut report = ModelCheckReport {
        mode,
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        excluded: 0,
    };
    for (id, k) in coords {
        let analytic = grads.iter().find(|(i, _)| *i == id).map_or(0.0, |(_, g)| g[k]);
        let orig = model.params().get(id).value.data()[k];
        model.params_mut().value_mut(id).data_mut()[k] = orig + h;
        let (fp, mp, _) = batch_loss(&model, &batch, weights, false)?;
        model.params_mut().value_mut(id).data_mut()[k] = orig - h;
        let (fm, mm, _) = batch_loss(&model, &batch, weights, false)?;
        model.params_mut().value_mut(id).data_mut()[k] = orig;
        if mp != base_match || mm != base_match {
            report.excluded += 1;
            continue;
        }
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::Numeric("model objective".into()));
        }
        let err = relative_error(analytic, (fp - fm) / (2.0 * h));
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = format!("{}[{k}]", model.params().get(id).name);
        }
    }
    Ok(report)
}
