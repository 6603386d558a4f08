//! Training loop, optimizer, validation tracking and checkpoint selection.

mod adam;
mod check;
mod config;
mod data;
pub mod plot;
mod retrieval;
mod runlog;

pub use adam::{Adam, AdamConfig};
pub use check::{model_grad_check, tiny_config, ModelCheckReport};
pub use config::TrainConfig;
pub use data::{Dataset, Example};
pub use retrieval::{eval_retrieval, rank_of, recall_from_scores, score_matrix, RecallTable, MAX_RETRIEVAL_RECORDS};
pub use runlog::{LogRow, RunLog, Split, RUNLOG_HEADER};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::losses::{itm_loss, mlm_loss, segl_loss, spl_loss, ssul_loss, ITM_MATCH, ITM_MISMATCH};
use crate::model::{
    load_checkpoint, save_checkpoint, Checkpoint, Graph, LossMode, Model, TrainState, VisualOutput,
};
use crate::seed::{self, stream};
use crate::synth::load_all;
use crate::tensor::Var;
use data::{make_example, Phase};
use rand::seq::SliceRandom;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const RUNLOG_FILE: &str = "log.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Per-sample loss terms. A term is absent when the sample has nothing to
/// supervise it (no masked token, no annotation, no masked patch).
struct Terms {
    mlm: Option<Var>,
    itm: Var,
    visual: Option<Var>,
    itm_correct: bool,
    /// Slot assigned to each pseudo-label in set-prediction mode.
    matching: Option<Vec<usize>>,
}

/// Loss terms of one example. With a patch mask, the matching losses read the
/// clean image and only the colour loss sees the masked one.
fn forward_terms(model: &Model, g: &mut Graph, ex: &Example, eos_coef: f64) -> Result<Terms> {
    let clean = ex.clean_grid.as_ref().unwrap_or(&ex.grid);
    let out = model.forward(g, clean, &ex.seq)?;
    // every caption is corrupted so [MASK] says nothing about matching, but
    // only a matched caption is a target worth predicting
    let mlm = if has_mlm(ex) {
        Some(mlm_loss(g, out.mlm_logits, &ex.seq.mlm_labels)?)
    } else {
        None
    };
    let itm = itm_loss(g, out.itm_logits, ex.is_match)?;
    let logits = g.value(out.itm_logits).data();
    let itm_correct = (logits[ITM_MATCH] >= logits[ITM_MISMATCH]) == ex.is_match;
    let mut matching = None;
    let visual = match out.visual {
        VisualOutput::None => None,
        VisualOutput::Colors(_) if ex.grid.masked_count() > 0 => {
            let colors = model.predict_colors(g, &ex.grid)?;
            Some(ssul_loss(g, colors, &ex.grid)?)
        }
        VisualOutput::Colors(_) => None,
        VisualOutput::Segmentation(v) => match &ex.seg {
            Some(s) => Some(segl_loss(g, v, s)?),
            None => None,
        },
        VisualOutput::SetLogits(v) => {
            let spl = spl_loss(g, v, &ex.labels, eos_coef)?;
            matching = Some(spl.assignment.sigma);
            Some(spl.loss)
        }
    };
    Ok(Terms {
        mlm,
        itm,
        visual,
        itm_correct,
        matching,
    })
}

fn has_mlm(ex: &Example) -> bool {
    ex.is_match && ex.seq.masked_count() > 0
}

fn has_visual(ex: &Example, mode: LossMode) -> bool {
    match mode {
        LossMode::None => false,
        LossMode::Ssul => ex.grid.masked_count() > 0,
        LossMode::Segl => ex.seg.is_some(),
        LossMode::Spl => true,
    }
}

/// Running sums of per-sample terms; each term is averaged over the samples
/// that carry it.
#[derive(Clone, Copy, Debug, Default)]
struct Accum {
    mlm: (f64, usize),
    itm: (f64, usize),
    visual: (f64, usize),
    correct: usize,
}

impl Accum {
    fn add(&mut self, other: &Accum) {
        self.mlm.0 += other.mlm.0;
        self.mlm.1 += other.mlm.1;
        self.itm.0 += other.itm.0;
        self.itm.1 += other.itm.1;
        self.visual.0 += other.visual.0;
        self.visual.1 += other.visual.1;
        self.correct += other.correct;
    }

    fn mean(s: (f64, usize)) -> f64 {
        if s.1 == 0 {
            0.0
        } else {
            s.0 / s.1 as f64
        }
    }

    fn row(&self, step: usize, split: Split, cfg: &TrainConfig) -> LogRow {
        let (mlm, itm, visual) = (Self::mean(self.mlm), Self::mean(self.itm), Self::mean(self.visual));
        LogRow {
            step,
            split,
            mlm,
            itm,
            visual,
            total: cfg.weights.mlm * mlm + cfg.weights.itm * itm + cfg.weights.visual * visual,
            itm_acc: if self.itm.1 == 0 {
                0.0
            } else {
                self.correct as f64 / self.itm.1 as f64
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub steps: usize,
    pub best_step: Option<usize>,
}

pub struct Trainer<'d> {
    cfg: TrainConfig,
    data: &'d Dataset,
    model: Model,
    adam: Adam,
    log: RunLog,
    step: usize,
    best: Option<(usize, f64)>,
    best_model: Option<Model>,
    since_eval: Accum,
    order: Option<(usize, Vec<usize>)>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &TrainConfig, data: &'d Dataset) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.validate()?;
        cfg.model = data.model_config(&cfg.model)?;
        if cfg.model.loss_mode == LossMode::Segl && data.train().iter().all(|r| r.seg.is_none()) {
            return Err(Error::Config(
                "loss_mode segl needs at least one training record with a segmentation map".into(),
            ));
        }
        let model = Model::init(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(adam_config(&cfg), model.params());
        Ok(Self {
            cfg,
            data,
            model,
            adam,
            log: RunLog::new(),
            step: 0,
            best: None,
            best_model: None,
            since_eval: Accum::default(),
            order: None,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::save_last`]. Every
    /// setting except the stopping limits and paths must match.
    pub fn resume(cfg: &TrainConfig, data: &'d Dataset, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, data)?;
        let state = ckpt
            .state
            .as_ref()
            .ok_or_else(|| Error::Input("checkpoint has no training state".into()))?;
        let mut stored = KvMap::new();
        for key in state.meta.keys().filter_map(|k| k.strip_prefix("cfg.")) {
            stored.set(key, state.meta.get(&format!("cfg.{key}")).unwrap());
        }
        let mut now = t.cfg.to_kv();
        for volatile in ["max_steps", "max_epochs", "data", "out_dir"] {
            now.set(volatile, "");
            stored.set(volatile, "");
        }
        if now != stored {
            return Err(Error::Config("resume configuration differs from the checkpointed run".into()));
        }
        if ckpt.vocab != *data.vocab() {
            return Err(Error::Config("checkpoint vocabulary differs from the dataset".into()));
        }
        t.model = ckpt.model()?;
        t.step = state.meta.parse_or("step", 0usize)?;
        let adam_t = state.meta.parse_or("adam_t", 0u64)?;
        t.adam = Adam::import(adam_config(&t.cfg), adam_t, t.model.params(), &state.tensors)?;
        t.log = RunLog::from_csv(&state.log)?;
        t.best = t.log.best().map(|r| (r.step, r.total));
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Model from the evaluation with the lowest validation total, if it
    /// happened in this process.
    pub fn best_model(&self) -> Option<&Model> {
        self.best_model.as_ref()
    }

    pub fn planned_steps(&self) -> usize {
        let per_epoch = self.data.train().len();
        let by_epochs = self
            .cfg
            .max_epochs
            .saturating_mul(per_epoch)
            .div_ceil(self.cfg.batch_size);
        self.cfg.max_steps.min(by_epochs)
    }

    /// Training record at global sample position `k`: epochs are
    /// independent seeded permutations of the training split.
    fn record_at(&mut self, k: usize) -> usize {
        let n = self.data.train().len();
        let epoch = k / n;
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut seed::rng(self.cfg.seed, &[stream::EPOCH_ORDER, epoch as u64]));
            self.order = Some((epoch, perm));
        }
        self.order.as_ref().unwrap().1[k % n]
    }

    pub fn batch_examples(&mut self, step: usize) -> Result<Vec<Example>> {
        (0..self.cfg.batch_size)
            .map(|slot| {
                let idx = self.record_at(step * self.cfg.batch_size + slot);
                make_example(
                    &self.cfg,
                    &self.cfg.model,
                    self.data.vocab(),
                    self.data.train(),
                    idx,
                    Phase::Train { step, slot },
                )
            })
            .collect()
    }

    /// One optimizer step; returns the batch means.
    pub fn train_step(&mut self) -> Result<LogRow> {
        let step = self.step;
        let examples = self.batch_examples(step)?;
        let mode = self.cfg.model.loss_mode;
        let n_mlm = examples.iter().filter(|e| has_mlm(e)).count();
        let n_vis = examples.iter().filter(|e| has_visual(e, mode)).count();
        let b = examples.len();
        let w = self.cfg.weights;
        let mut grads: Vec<Vec<f64>> = self.model.params().iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        let mut acc = Accum::default();
        let abort = |what: String| Error::Aborted {
            step,
            reason: format!(
                "non-finite {what}; batch records {:?}",
                examples.iter().map(|e| e.record).collect::<Vec<_>>()
            ),
        };
        let numeric = |e: Error| match e {
            Error::Numeric(what) => abort(what),
            other => other,
        };
        for ex in &examples {
            let mut g = self.model.graph(true);
            let t = forward_terms(&self.model, &mut g, ex, self.cfg.eos_coef).map_err(numeric)?;
            let mut total = g.scale(t.itm, w.itm / b as f64);
            acc.itm.0 += g.value(t.itm).item();
            acc.itm.1 += 1;
            acc.correct += t.itm_correct as usize;
            if let Some(m) = t.mlm {
                let s = g.scale(m, w.mlm / n_mlm as f64);
                total = g.add(total, s)?;
                acc.mlm.0 += g.value(m).item();
                acc.mlm.1 += 1;
            }
            if let Some(v) = t.visual {
                let s = g.scale(v, w.visual / n_vis as f64);
                total = g.add(total, s)?;
                acc.visual.0 += g.value(v).item();
                acc.visual.1 += 1;
            }
            if !g.value(total).item().is_finite() {
                return Err(abort("loss".into()));
            }
            g.backward(total)?;
            for (id, gr) in g.param_grads() {
                grads[id.index()].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
            }
        }
        self.adam.step(self.model.params_mut(), &grads, step)?;
        self.step += 1;
        self.since_eval.add(&acc);
        Ok(acc.row(self.step, Split::Train, &self.cfg))
    }

    /// Validation losses with corruption fixed per validation item, so every
    /// evaluation sees identical inputs. In ssul mode the language losses are
    /// measured on the unmasked image and the colour loss on the masked one.
    pub fn evaluate(&self) -> Result<LogRow> {
        evaluate(&self.model, &self.cfg, self.data, self.step)
    }

    /// Train until the planned step count, evaluating every `eval_every`
    /// steps. Writes checkpoints and the log when `out_dir` is set.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let planned = self.planned_steps();
        if let Some(dir) = &self.cfg.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(CONFIG_FILE);
            std::fs::write(&path, self.cfg.to_kv().to_text()).map_err(|e| Error::io(&path, e))?;
        }
        while self.step < planned {
            self.train_step()?;
            if self.step % self.cfg.eval_every == 0 || self.step == planned {
                self.eval_and_record()?;
            }
        }
        Ok(TrainOutcome {
            log: self.log.clone(),
            steps: self.step,
            best_step: self.best.map(|b| b.0),
        })
    }

    fn eval_and_record(&mut self) -> Result<()> {
        let train_row = self.since_eval.row(self.step, Split::Train, &self.cfg);
        self.since_eval = Accum::default();
        let val_row = self.evaluate()?;
        self.log.push(train_row)?;
        self.log.push(val_row)?;
        let improved = self.best.map_or(true, |(_, b)| val_row.total < b);
        if improved {
            self.best = Some((self.step, val_row.total));
            self.best_model = Some(self.model.clone());
        }
        if let Some(dir) = self.cfg.out_dir.clone() {
            self.log.save(&dir.join(RUNLOG_FILE))?;
            self.save_last(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                let ckpt = Checkpoint::new(&self.model, self.data.vocab(), None);
                save_checkpoint(&dir.join(BEST_CHECKPOINT), &ckpt)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = KvMap::new();
        meta.set("step", self.step);
        meta.set("adam_t", self.adam.t);
        let cfg = self.cfg.to_kv();
        for key in cfg.keys() {
            meta.set(&format!("cfg.{key}"), cfg.get(key).unwrap());
        }
        let state = TrainState {
            meta,
            log: self.log.to_csv(),
            tensors: self.adam.export(self.model.params()),
        };
        Checkpoint::new(&self.model, self.data.vocab(), Some(state))
    }

    pub fn save_last(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint())
    }
}

fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        epsilon: cfg.epsilon,
    }
}

/// Validation row for `model` on the dataset's validation split.
pub fn evaluate(model: &Model, cfg: &TrainConfig, data: &Dataset, step: usize) -> Result<LogRow> {
    let mut acc = Accum::default();
    for index in 0..data.val().len() {
        let ex = make_example(cfg, model.config(), data.vocab(), data.val(), index, Phase::Val { index })?;
        let mut g = model.graph(false);
        let t = forward_terms(model, &mut g, &ex, cfg.eos_coef)?;
        acc.itm.0 += g.value(t.itm).item();
        acc.itm.1 += 1;
        acc.correct += t.itm_correct as usize;
        if let Some(m) = t.mlm {
            acc.mlm.0 += g.value(m).item();
            acc.mlm.1 += 1;
        }
        let visual = t.visual.map(|v| g.value(v).item());
        if let Some(v) = visual {
            acc.visual.0 += v;
            acc.visual.1 += 1;
        }
    }
    let row = acc.row(step, Split::Val, cfg);
    if !row.total.is_finite() {
        return Err(Error::Aborted {
            step,
            reason: "non-finite validation loss".into(),
        });
    }
    Ok(row)
}

/// Load the dataset named in the config and train, resuming from
/// `out_dir/last.ckpt` when `resume` is set.
pub fn train(cfg: &TrainConfig, resume: bool) -> Result<TrainOutcome> {
    let manifest = resolve_manifest(
        cfg.data
            .as_deref()
            .ok_or_else(|| Error::Config("data path is required".into()))?,
    );
    let out_dir = cfg
        .out_dir
        .as_ref()
        .ok_or_else(|| Error::Config("out_dir is required".into()))?;
    let data = Dataset::new(load_all(&manifest)?)?;
    let mut trainer = if resume {
        let ckpt = load_checkpoint(&out_dir.join(LAST_CHECKPOINT))?;
        Trainer::resume(cfg, &data, &ckpt)?
    } else {
        Trainer::new(cfg, &data)?
    };
    trainer.run()
}

/// Accept either a manifest file or the directory containing it.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(crate::synth::MANIFEST)
    } else {
        path.to_path_buf()
    }
}
