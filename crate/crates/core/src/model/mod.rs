//! Two-stream vision-language transformer: a language encoder and a visual
//! encoder over raw image patches, a stack of cross-modality layers, and the
//! task heads.

mod checkpoint;
mod config;
mod layers;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{LossMode, ModelConfig};
pub use layers::{Attention, CrossLayer, DecoderLayer, EncoderBlock, FeedForward, LayerNorm, Linear, StreamBlock};
pub use params::{Graph, Init, Param, ParamId, ParamStore};

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Tensor, Var};
use crate::text::TokenSequence;
use crate::vision::PatchGrid;
use layers::Builder;

/// Additive attention bias for hidden keys.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct SetDecoder {
    pub queries: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub ln_out: LayerNorm,
    pub classifier: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed: Linear,
    vis_pos: ParamId,
    tok_embed: ParamId,
    lang_pos: ParamId,
    lang_layers: Vec<EncoderBlock>,
    vis_layers: Vec<EncoderBlock>,
    decoder: Option<SetDecoder>,
    cross_layers: Vec<CrossLayer>,
    ln_lang: LayerNorm,
    ln_vis: Option<LayerNorm>,
    mlm: Linear,
    itm_hidden: Linear,
    itm_out: Linear,
    color: Option<Linear>,
    seg: Option<Linear>,
}

impl Layout {
    fn build<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let mut b = Builder {
            store,
            rng,
            std: cfg.init_std,
        };
        let (d, h, f) = (cfg.d_model, cfg.n_heads, cfg.ffn_dim);
        let patch_embed = Linear::new(&mut b, "vis.patch_embed", cfg.patch_dim(), d);
        let vis_pos = b.table("vis.pos".into(), sincos_2d(cfg.grid_size, d));
        let tok_embed = b.normal("lang.tok_embed".into(), &[cfg.vocab_size, d]);
        let lang_pos = b.normal("lang.pos".into(), &[cfg.max_seq_len, d]);
        let lang_layers = (0..cfg.n_lang_layers)
            .map(|i| EncoderBlock::new(&mut b, &format!("lang.layer{i}"), d, h, f))
            .collect();
        let vis_layers = (0..cfg.n_vis_layers)
            .map(|i| EncoderBlock::new(&mut b, &format!("vis.layer{i}"), d, h, f))
            .collect();
        let decoder = (cfg.loss_mode == LossMode::Spl).then(|| SetDecoder {
            queries: b.normal("set.queries".into(), &[cfg.n_queries, d]),
            layers: (0..cfg.n_decoder_layers)
                .map(|i| DecoderLayer::new(&mut b, &format!("set.layer{i}"), d, h, f))
                .collect(),
            ln_out: LayerNorm::new(&mut b, "set.ln_out", d),
            classifier: Linear::new(&mut b, "set.classifier", d, cfg.num_classes + 1),
        });
        // only the dense visual heads read the fused visual stream
        let read_vis = cfg.loss_mode == LossMode::Segl;
        let n = cfg.n_cross_layers;
        let cross_layers = (0..n)
            .map(|i| CrossLayer::new(&mut b, &format!("cross.layer{i}"), d, h, f, read_vis || i + 1 < n))
            .collect();
        Self {
            patch_embed,
            vis_pos,
            tok_embed,
            lang_pos,
            lang_layers,
            vis_layers,
            decoder,
            cross_layers,
            ln_lang: LayerNorm::new(&mut b, "cross.ln_lang", d),
            ln_vis: read_vis.then(|| LayerNorm::new(&mut b, "cross.ln_vis", d)),
            mlm: Linear::new(&mut b, "head.mlm", d, cfg.vocab_size),
            itm_hidden: Linear::new(&mut b, "head.itm_hidden", d, d),
            itm_out: Linear::new(&mut b, "head.itm_out", d, 2),
            color: (cfg.loss_mode == LossMode::Ssul).then(|| Linear::new(&mut b, "head.color", d, 3)),
            seg: (cfg.loss_mode == LossMode::Segl).then(|| Linear::new(&mut b, "head.seg", d, cfg.num_classes)),
        }
    }
}

/// Output of the visual side before fusion. In set-prediction mode the
/// stream is the decoder output rather than the patch features.
#[derive(Clone, Copy, Debug)]
pub struct VisualEncoding {
    pub stream: Var,
    pub set_logits: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct CrossModalState {
    pub lang: Var,
    /// Present when a dense visual head reads the fused visual stream.
    pub vis: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub enum VisualOutput {
    None,
    /// Predicted mean patch colour, `[patches, 3]`.
    Colors(Var),
    /// Per-patch class logits, `[patches, C]`.
    Segmentation(Var),
    /// Per-query logits over classes plus no-object, `[N, C + 1]`.
    SetLogits(Var),
}

#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub mlm_logits: Var,
    /// Match / mismatch logits, shape `[2]`.
    pub itm_logits: Var,
    pub visual: VisualOutput,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Fresh weights drawn from the seed's init stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed, &[seed::stream::INIT]);
        Self::init_with(config, &mut rng)
    }

    pub fn init_with<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, rng);
        Ok(Self { config, params, layout })
    }

    /// Rebuild from stored tensors; the names and shapes must match the
    /// layout implied by `config` exactly.
    pub fn from_params(config: ModelConfig, stored: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if stored.len() != model.params.len() {
            return Err(Error::Input(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                stored.len()
            )));
        }
        for (name, value) in stored {
            model.params.set(&name, value)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn graph(&self, trainable: bool) -> Graph<'_> {
        Graph::new(&self.params, trainable)
    }

    pub fn forward_visual(&self, g: &mut Graph, grid: &PatchGrid) -> Result<Var> {
        let shape = grid.patches.shape();
        if shape != [self.config.num_patches(), self.config.patch_dim()] {
            return Err(Error::shape(
                "visual encoder input",
                shape,
                &[self.config.num_patches(), self.config.patch_dim()],
            ));
        }
        let x = g.constant(grid.patches.clone());
        let x = self.layout.patch_embed.forward(g, x)?;
        let pos = g.param(self.layout.vis_pos);
        let mut x = g.add(x, pos)?;
        for block in &self.layout.vis_layers {
            x = block.forward(g, x, None)?;
        }
        Ok(x)
    }

    pub fn forward_language(&self, g: &mut Graph, seq: &TokenSequence) -> Result<Var> {
        let l = seq.len();
        if l == 0 || l > self.config.max_seq_len {
            return Err(Error::shape("language encoder input", &[l], &[self.config.max_seq_len]));
        }
        let table = g.param(self.layout.tok_embed);
        let x = g.embedding(table, &seq.ids)?;
        let pos = g.param(self.layout.lang_pos);
        let pos = g.slice(pos, 0, 0, l)?;
        let mut x = g.add(x, pos)?;
        let bias = key_bias(g, l, seq.attention_len);
        for block in &self.layout.lang_layers {
            x = block.forward(g, x, bias)?;
        }
        Ok(x)
    }

    /// Runs the set decoder on visual features of any length.
    /// Returns the decoded query features and their class logits.
    pub fn set_decoder(&self, g: &mut Graph, vis: Var) -> Result<(Var, Var)> {
        let dec = self
            .layout
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Contract("set decoder requires loss_mode spl".into()))?;
        let mut x = g.param(dec.queries);
        for layer in &dec.layers {
            x = layer.forward(g, x, vis)?;
        }
        let h = dec.ln_out.forward(g, x)?;
        let logits = dec.classifier.forward(g, h)?;
        Ok((x, logits))
    }

    pub fn encode_image(&self, g: &mut Graph, grid: &PatchGrid) -> Result<VisualEncoding> {
        let vis = self.forward_visual(g, grid)?;
        if self.layout.decoder.is_some() {
            let (stream, logits) = self.set_decoder(g, vis)?;
            Ok(VisualEncoding {
                stream,
                set_logits: Some(logits),
            })
        } else {
            Ok(VisualEncoding {
                stream: vis,
                set_logits: None,
            })
        }
    }

    /// Cross-modality layers followed by the final norms. `attention_len`
    /// hides trailing pad positions of the language stream.
    pub fn fuse(&self, g: &mut Graph, lang: Var, attention_len: usize, vis: Var) -> Result<CrossModalState> {
        let (dl, dv) = (g.shape(lang).to_vec(), g.shape(vis).to_vec());
        if dl.len() != 2 || dv.len() != 2 || dl[1] != dv[1] {
            return Err(Error::shape("cross-modality layer", &dl, &dv));
        }
        let bias = key_bias(g, dl[0], attention_len);
        let (mut lang, mut vis) = (lang, vis);
        for layer in &self.layout.cross_layers {
            (lang, vis) = layer.forward(g, lang, vis, bias)?;
        }
        Ok(CrossModalState {
            lang: self.layout.ln_lang.forward(g, lang)?,
            vis: match &self.layout.ln_vis {
                Some(ln) => Some(ln.forward(g, vis)?),
                None => None,
            },
        })
    }

    pub fn mlm_head(&self, g: &mut Graph, lang: Var) -> Result<Var> {
        self.layout.mlm.forward(g, lang)
    }

    /// Match / mismatch logits from the `[CLS]` row.
    pub fn itm_head(&self, g: &mut Graph, lang: Var) -> Result<Var> {
        let cls = g.slice(lang, 0, 0, 1)?;
        let h = self.layout.itm_hidden.forward(g, cls)?;
        let h = g.gelu(h);
        let out = self.layout.itm_out.forward(g, h)?;
        g.reshape(out, &[2])
    }

    pub fn color_head(&self, g: &mut Graph, vis: Var) -> Result<Var> {
        let head = self
            .layout
            .color
            .as_ref()
            .ok_or_else(|| Error::Contract("colour head requires loss_mode ssul".into()))?;
        head.forward(g, vis)
    }

    /// Colour predictions for every patch of `grid` from the visual encoder.
    pub fn predict_colors(&self, g: &mut Graph, grid: &PatchGrid) -> Result<Var> {
        let vis = self.forward_visual(g, grid)?;
        self.color_head(g, vis)
    }

    pub fn seg_head(&self, g: &mut Graph, vis: Var) -> Result<Var> {
        let head = self
            .layout
            .seg
            .as_ref()
            .ok_or_else(|| Error::Contract("segmentation head requires loss_mode segl".into()))?;
        head.forward(g, vis)
    }

    pub fn forward(&self, g: &mut Graph, grid: &PatchGrid, seq: &TokenSequence) -> Result<Outputs> {
        let image = self.encode_image(g, grid)?;
        let lang = self.forward_language(g, seq)?;
        let state = self.fuse(g, lang, seq.attention_len, image.stream)?;
        let visual = match self.config.loss_mode {
            LossMode::None => VisualOutput::None,
            LossMode::Ssul => VisualOutput::Colors(self.color_head(g, image.stream)?),
            LossMode::Segl => VisualOutput::Segmentation(self.seg_head(g, fused_vis(&state)?)?),
            LossMode::Spl => VisualOutput::SetLogits(image.set_logits.expect("decoder present in spl mode")),
        };
        Ok(Outputs {
            mlm_logits: self.mlm_head(g, state.lang)?,
            itm_logits: self.itm_head(g, state.lang)?,
            visual,
        })
    }
}

/// Row-major 2D sine-cosine table: half the channels encode the row, half
/// the column, so neighbouring patches start with similar embeddings.
pub fn sincos_2d(grid: usize, d: usize) -> Tensor {
    let half = d / 2;
    let freqs = half / 2;
    let mut data = vec![0.0; grid * grid * d];
    for r in 0..grid {
        for c in 0..grid {
            let row = &mut data[(r * grid + c) * d..][..d];
            for (axis, p) in [(0, r), (1, c)] {
                for k in 0..freqs {
                    let omega = 1.0 / 10_000f64.powf(k as f64 / freqs.max(1) as f64);
                    let a = p as f64 * omega;
                    row[axis * half + k] = a.sin();
                    row[axis * half + freqs + k] = a.cos();
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, d], data).expect("table shape")
}

fn fused_vis(state: &CrossModalState) -> Result<Var> {
    state
        .vis
        .ok_or_else(|| Error::Contract("fused visual stream is not kept in this loss mode".into()))
}

fn key_bias(g: &mut Graph, len: usize, attention_len: usize) -> Option<Var> {
    (attention_len < len).then(|| {
        let data = (0..len).map(|i| if i < attention_len { 0.0 } else { MASKED_SCORE }).collect();
        g.constant(Tensor::new(vec![len], data).expect("non-empty key mask"))
    })
}
