//! Self-attention video encoder.

use rand::Rng;

use crate::attention::{multi_head, MultiHeadParams};
use crate::autograd::nn::{dropout, dropout_shared_rows, linear, positional_table};
use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::params::{Binding, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Position-wise feed-forward block `M2 relu(M1 x + b1) + b2`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        FeedForwardParams {
            w1: store.add_weight(format!("{prefix}.w1"), &[d, d_ff], d, d_ff, rng),
            b1: store.add_filled(format!("{prefix}.b1"), &[d_ff], 0.0),
            w2: store.add_weight(format!("{prefix}.w2"), &[d_ff, d], d_ff, d, rng),
            b2: store.add_filled(format!("{prefix}.b2"), &[d], 0.0),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = linear(x, b.get(self.w1), Some(b.get(self.b1)))?.relu();
        linear(h, b.get(self.w2), Some(b.get(self.b2)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add_filled(format!("{prefix}.gain"), &[d], 1.0),
            bias: store.add_filled(format!("{prefix}.bias"), &[d], 0.0),
        }
    }

    /// `LayerNorm(a + b)`: residual connection followed by normalization.
    pub fn residual<'t>(&self, b: &Binding<'t, '_>, a: Var<'t>, skip: Var<'t>) -> Result<Var<'t>> {
        a.add(skip)?
            .layer_norm(b.get(self.gain), b.get(self.bias), LAYER_NORM_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerParams {
    pub attn: MultiHeadParams,
    pub ff: FeedForwardParams,
    pub norm_attn: LayerNormParams,
    pub norm_ff: LayerNormParams,
}

impl EncoderLayerParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_ff: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(EncoderLayerParams {
            attn: MultiHeadParams::new(store, &format!("{prefix}.attn"), d, heads, rng)?,
            ff: FeedForwardParams::new(store, &format!("{prefix}.ff"), d, d_ff, rng),
            norm_attn: LayerNormParams::new(store, &format!("{prefix}.norm_attn"), d),
            norm_ff: LayerNormParams::new(store, &format!("{prefix}.norm_ff"), d),
        })
    }

    /// One encoder layer: self-attention with residual normalization, then
    /// the feed-forward block with residual normalization.
    pub fn forward<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>, fwd: &mut Forward) -> Result<Var<'t>> {
        let p = fwd.dropout;
        let train = fwd.train;
        let attn_drop = (train && p > 0.0).then_some((p, &mut fwd.rng as &mut dyn rand::RngCore));
        let a = multi_head(x, x, x, &self.attn.bind(b), None, attn_drop)?;
        let a = dropout(a, p, train, &mut fwd.rng)?;
        let g = self.norm_attn.residual(b, a, x)?;
        let f = self.ff.forward(b, g)?;
        let f = dropout(f, p, train, &mut fwd.rng)?;
        self.norm_ff.residual(b, f, g)
    }
}

/// Input embedding plus a stack of encoder layers.
#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub layers: Vec<EncoderLayerParams>,
    pub window: usize,
    pub d_model: usize,
    pub positional: Option<Tensor>,
}

impl VideoEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        window: usize,
        d_in: usize,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        layers: usize,
        positional: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::config("encoder needs at least one layer"));
        }
        let embed_w = store.add_weight("encoder.embed.w", &[d_in, d_model], d_in, d_model, rng);
        let embed_b = store.add_filled("encoder.embed.b", &[d_model], 0.0);
        let layers = (0..layers)
            .map(|l| EncoderLayerParams::new(store, &format!("encoder.layer{l}"), d_model, d_ff, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let positional = if positional {
            Some(positional_table(window, d_model)?)
        } else {
            None
        };
        Ok(VideoEncoder {
            embed_w,
            embed_b,
            layers,
            window,
            d_model,
            positional,
        })
    }

    /// Linear projection of frames to model width, with time-shared input
    /// dropout in train mode and the optional sinusoidal position table.
    pub fn embed_input<'t>(
        &self,
        b: &Binding<'t, '_>,
        frames: &Tensor,
        fwd: &mut Forward,
    ) -> Result<Var<'t>> {
        let x = b.tape().constant(frames.clone());
        let e = linear(x, b.get(self.embed_w), Some(b.get(self.embed_b)))?;
        let e = dropout_shared_rows(e, fwd.input_dropout, fwd.train, &mut fwd.rng)?;
        match &self.positional {
            Some(table) => {
                let rows = e.shape()[0];
                if rows > table.rows() {
                    return Err(Error::shape("positional encoding", &e.shape(), table.shape()));
                }
                let pe = Tensor::new(
                    vec![rows, self.d_model],
                    table.data()[..rows * self.d_model].to_vec(),
                )?;
                e.add(b.tape().constant(pe))
            }
            None => Ok(e),
        }
    }

    /// Runs every layer and returns `F^1 .. F^L`.
    pub fn encode<'t>(&self, b: &Binding<'t, '_>, input: Var<'t>, fwd: &mut Forward) -> Result<Vec<Var<'t>>> {
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = input;
        for layer in &self.layers {
            h = layer.forward(b, h, fwd)?;
            outputs.push(h);
        }
        Ok(outputs)
    }

    /// Re-runs the encoder with a temporal mask applied to the input embedding
    /// and to every layer output. Returns `[F^0, F^1, .., F^L]` of the masked
    /// pass, so no representation carries information from outside the mask.
    pub fn encode_masked<'t>(
        &self,
        b: &Binding<'t, '_>,
        input: Var<'t>,
        mask: Var<'t>,
        fwd: &mut Forward,
    ) -> Result<Vec<Var<'t>>> {
        let rows = input.shape()[0];
        if mask.shape() != [rows] {
            return Err(Error::shape("temporal mask", &mask.shape(), &[rows]));
        }
        let mut h = input.mul_col(mask)?;
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(h);
        for layer in &self.layers {
            h = layer.forward(b, h, fwd)?.mul_col(mask)?;
            outputs.push(h);
        }
        Ok(outputs)
    }
}
