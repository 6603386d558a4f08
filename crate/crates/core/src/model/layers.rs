//! Transformer building blocks. Every block is a set of parameter ids; the
//! values live in a [`ParamStore`] and are bound onto a [`Graph`] on use.

use rand::Rng;

use super::params::{Graph, Init, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Tensor, Var};

/// Registers parameters under a dotted name prefix.
pub(crate) struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub std: f64,
}

impl<R: Rng> Builder<'_, R> {
    pub fn normal(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, shape, Init::Normal(self.std), self.rng)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, shape, Init::Zeros, self.rng)
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, shape, Init::Ones, self.rng)
    }

    pub fn table(&mut self, name: String, value: Tensor) -> ParamId {
        let id = self.store.add(name, value.shape(), Init::Zeros, self.rng);
        *self.store.value_mut(id) = value;
        id
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub(crate) fn new<R: Rng>(bld: &mut Builder<R>, name: &str, din: usize, dout: usize) -> Self {
        Self {
            w: bld.normal(format!("{name}.w"), &[din, dout]),
            b: Some(bld.zeros(format!("{name}.b"), &[dout])),
        }
    }

    pub(crate) fn unbiased<R: Rng>(bld: &mut Builder<R>, name: &str, din: usize, dout: usize) -> Self {
        Self {
            w: bld.normal(format!("{name}.w"), &[din, dout]),
            b: None,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn new<R: Rng>(bld: &mut Builder<R>, name: &str, d: usize) -> Self {
        Self {
            gain: bld.ones(format!("{name}.g"), &[d]),
            bias: bld.zeros(format!("{name}.b"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layernorm(x, gain, bias)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub(crate) fn new<R: Rng>(bld: &mut Builder<R>, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(bld, &format!("{name}.q"), d, d),
            // a key bias shifts every score of a query equally, so softmax ignores it
            k: Linear::unbiased(bld, &format!("{name}.k"), d, d),
            v: Linear::new(bld, &format!("{name}.v"), d, d),
            o: Linear::new(bld, &format!("{name}.o"), d, d),
            heads,
        }
    }

    /// `key_bias` is a row vector over key positions added to every score
    /// row; large negative entries hide those keys.
    pub fn forward(&self, g: &mut Graph, query: Var, context: Var, key_bias: Option<Var>) -> Result<Var> {
        let d = g.shape(query)[1];
        let dh = d / self.heads;
        let q = self.q.forward(g, query)?;
        let q = g.scale(q, 1.0 / (dh as f64).sqrt());
        let k = self.k.forward(g, context)?;
        let kt = g.transpose(k)?;
        let v = self.v.forward(g, context)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, kt, v)
            } else {
                (g.slice(q, 1, h * dh, dh)?, g.slice(kt, 0, h * dh, dh)?, g.slice(v, 1, h * dh, dh)?)
            };
            let mut s = g.matmul(qh, kh)?;
            if let Some(bias) = key_bias {
                s = g.add(s, bias)?;
            }
            let p = g.softmax(s)?;
            outs.push(g.matmul(p, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.o.forward(g, joined)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub(crate) fn new<R: Rng>(bld: &mut Builder<R>, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(bld, &format!("{name}.up"), d, hidden),
            down: Linear::new(bld, &format!("{name}.down"), hidden, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub(crate) fn new<R: Rng>(bld: &mut Builder<R>, name: &str, d: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln_attn: LayerNorm::new(bld, &format!("{name}.ln_attn"), d),
            attn: Attention::new(bld, &format!("{name}.attn"), d, heads),
            ln_ffn: LayerNorm::new(bld, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(bld, &format!("{name}.ffn"), d, hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, key_bias: Option<Var>) -> Result<Var> {
        let h = self.ln_attn.forward(g, x)?;
        let a = self.attn.forward(g, h, h, key_bias)?;
        let x = g.add(x, a)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

/// One stream's half of a cross-modality layer: cross-attention to the other
/// stream, then self-attention, then feed-forward.
#[derive(Clone, Debug)]
pub struct StreamBlock {
    pub ln_cross: LayerNorm,
    pub ln_context: LayerNorm,
    pub cross: Attention,
    pub self_block: EncoderBlock,
}

impl StreamBlock {
    pub(crate) fn new<R: Rng>(bld: &mut Builder<R>, name: &str, d: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln_cross: LayerNorm::new(bld, &format!("{name}.ln_cross"), d),
            ln_context: LayerNorm::new(bld, &format!("{name}.ln_context"), d),
            cross: Attention::new(bld, &format!("{name}.cross"), d, heads),
            self_block: EncoderBlock::new(bld, name, d, heads, hidden),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        context: Var,
        self_bias: Option<Var>,
        context_bias: Option<Var>,
    ) -> Result<Var> {
        let q = self.ln_cross.forward(g, x)?;
        let c = self.ln_context.forward(g, context)?;
        let a = self.cross.forward(g, q, c, context_bias)?;
        let x = g.add(x, a)?;
        self.self_block.forward(g, x, self_bias)
    }
}

#[derive(Clone, Debug)]
pub struct CrossLayer {
    pub lang: StreamBlock,
    /// Absent on a final layer whose visual output nothing reads.
    pub vis: Option<StreamBlock>,
}

impl CrossLayer {
    pub(crate) fn new<R: Rng>(
        bld: &mut Builder<R>,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        update_vis: bool,
    ) -> Self {
        Self {
            lang: StreamBlock::new(bld, &format!("{name}.lang"), d, heads, hidden),
            vis: update_vis.then(|| StreamBlock::new(bld, &format!("{name}.vis"), d, heads, hidden)),
        }
    }

    /// Both streams read the other's input to this layer.
    pub fn forward(&self, g: &mut Graph, lang: Var, vis: Var, lang_bias: Option<Var>) -> Result<(Var, Var)> {
        let new_lang = self.lang.forward(g, lang, vis, lang_bias, None)?;
        let new_vis = match &self.vis {
            Some(block) => block.forward(g, vis, lang, None, lang_bias)?,
            None => vis,
        };
        Ok((new_lang, new_vis))
    }
}

/// Set-prediction decoder layer: query self-attention, cross-attention to
/// the visual memory, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub ln_memory: LayerNorm,
    pub cross: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub(crate) fn new<R: Rng>(bld: &mut Builder<R>, name: &str, d: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln_self: LayerNorm::new(bld, &format!("{name}.ln_self"), d),
            self_attn: Attention::new(bld, &format!("{name}.self"), d, heads),
            ln_cross: LayerNorm::new(bld, &format!("{name}.ln_cross"), d),
            ln_memory: LayerNorm::new(bld, &format!("{name}.ln_memory"), d),
            cross: Attention::new(bld, &format!("{name}.cross"), d, heads),
            ln_ffn: LayerNorm::new(bld, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(bld, &format!("{name}.ffn"), d, hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var) -> Result<Var> {
        let h = self.ln_self.forward(g, x)?;
        let a = self.self_attn.forward(g, h, h, None)?;
        let x = g.add(x, a)?;
        let h = self.ln_cross.forward(g, x)?;
        let m = self.ln_memory.forward(g, memory)?;
        let a = self.cross.forward(g, h, m, None)?;
        let x = g.add(x, a)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}
