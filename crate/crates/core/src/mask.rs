//! Proposal masks over the temporal axis.
//!
//! The continuous mask is `sigmoid(g([rho(S_p), rho(E_p), rho(S_a), rho(E_a), Bin(S_a, E_a)]))`
//! with `g` a two-layer perceptron, so it is differentiable in the predicted
//! boundaries. The gated mask mixes it with the hard mask of the predicted
//! boundaries using the proposal score as the gate:
//! `P_e * Bin(S_p, E_p) + (1 - P_e) * f_M`.

use rand::Rng;

use crate::autograd::nn::{cat, sinusoid_values};
use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::proposal::Anchor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskProvenance {
    Binary,
    Continuous,
    Gated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskVector {
    pub values: Vec<f64>,
    pub provenance: MaskProvenance,
}

impl MaskVector {
    pub fn from_var(v: Var<'_>, provenance: MaskProvenance) -> Self {
        MaskVector {
            values: v.value().into_data(),
            provenance,
        }
    }

    pub fn is_valid(&self) -> bool {
        let in_range = self.values.iter().all(|v| (0.0..=1.0).contains(v));
        match self.provenance {
            MaskProvenance::Binary => in_range && self.values.iter().all(|v| *v == 0.0 || *v == 1.0),
            _ => in_range,
        }
    }
}

/// Sinusoidal encoding of a real position into `d` channels.
pub fn pos_encode(pos: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config(format!(
            "positional encoding width must be even, got {d}"
        )));
    }
    Ok(sinusoid_values(pos, d))
}

/// Entry `i` is 1 iff `start <= i <= end` for frame positions `0..len`.
pub fn bin_mask(start: f64, end: f64, len: usize) -> MaskVector {
    MaskVector {
        values: (0..len)
            .map(|i| {
                let i = i as f64;
                if start <= i && i <= end {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
        provenance: MaskProvenance::Binary,
    }
}

/// Parameters of `g`: `[4d + T] -> d (relu) -> T`.
#[derive(Clone, Copy, Debug)]
pub struct MaskNetwork {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_model: usize,
    pub window: usize,
}

impl MaskNetwork {
    pub fn new(store: &mut ParamStore, d_model: usize, window: usize, rng: &mut impl Rng) -> Result<Self> {
        if !d_model.is_multiple_of(2) {
            return Err(Error::config("mask network needs an even model width"));
        }
        let input = 4 * d_model + window;
        Ok(MaskNetwork {
            w1: store.add_weight("mask.w1", &[input, d_model], input, d_model, rng),
            b1: store.add_filled("mask.b1", &[d_model], 0.0),
            w2: store.add_weight("mask.w2", &[d_model, window], d_model, window, rng),
            b2: store.add_filled("mask.b2", &[window], 0.0),
            d_model,
            window,
        })
    }

    /// Pre-sigmoid output of `g` for predicted boundaries `(start, end)` and
    /// the generating anchor, shape `[T]`.
    pub fn logits<'t>(
        &self,
        b: &Binding<'t, '_>,
        start: Var<'t>,
        end: Var<'t>,
        anchor: &Anchor,
    ) -> Result<Var<'t>> {
        let tape = b.tape();
        let d = self.d_model;
        let anchor_part: Vec<f64> = pos_encode(anchor.start(), d)?
            .into_iter()
            .chain(pos_encode(anchor.end(), d)?)
            .chain(bin_mask(anchor.start(), anchor.end(), self.window).values)
            .collect();
        let input = cat(&[
            start.sinusoid(d)?,
            end.sinusoid(d)?,
            tape.constant(Tensor::vector(anchor_part)),
        ])?
        .reshape(&[1, 4 * d + self.window])?;
        let h = input
            .matmul(b.get(self.w1))?
            .reshape(&[d])?
            .add(b.get(self.b1))?
            .relu();
        h.reshape(&[1, d])?
            .matmul(b.get(self.w2))?
            .reshape(&[self.window])?
            .add(b.get(self.b2))
    }

    /// Continuous mask `f_M`, entries in (0, 1).
    pub fn continuous<'t>(
        &self,
        b: &Binding<'t, '_>,
        start: Var<'t>,
        end: Var<'t>,
        anchor: &Anchor,
    ) -> Result<Var<'t>> {
        Ok(self.logits(b, start, end, anchor)?.sigmoid())
    }
}

/// `score * Bin(start, end) + (1 - score) * continuous`, entrywise.
pub fn gated_mask<'t>(score: Var<'t>, start: f64, end: f64, continuous: Var<'t>) -> Result<Var<'t>> {
    let len = continuous.shape()[0];
    let hard = continuous
        .tape()
        .constant(Tensor::vector(bin_mask(start, end, len).values));
    let open = score.neg().add_const(1.0);
    hard.scale_by(score)?.add(continuous.scale_by(open)?)
}
