//! Scaled dot-product and multi-head attention.
//!
//! Sequences are stored one vector per row: queries `[n x d]`, keys and
//! values `[T x d]`. Each output row is the attention result for the
//! corresponding query row.

use rand::Rng;

use crate::autograd::nn::dropout;
use crate::autograd::{concat, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};

/// Logit assigned to disallowed positions; keeps gradients finite while
/// driving their softmax weight below 1e-30.
pub const MASKED_LOGIT: f64 = -1e9;

/// Which keys each query may attend to.
#[derive(Clone, Debug, PartialEq)]
pub struct AttendMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttendMask {
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let queries = rows.len();
        let keys = rows.first().map_or(0, Vec::len);
        if queries == 0 || keys == 0 || rows.iter().any(|r| r.len() != keys) {
            return Err(Error::contract(
                "attend mask rows must be non-empty and equal length",
            ));
        }
        if let Some(q) = rows.iter().position(|r| !r.iter().any(|a| *a)) {
            return Err(Error::contract(format!("query {q} has every position masked")));
        }
        Ok(AttendMask {
            queries,
            keys,
            allowed: rows.concat(),
        })
    }

    /// Lower-triangular mask for self-attention over `len` positions.
    pub fn causal(len: usize) -> Result<Self> {
        let rows = (1..=len)
            .map(|t| causal_mask(t, len))
            .collect::<Result<Vec<_>>>()?;
        AttendMask::from_rows(&rows)
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.keys + key]
    }

    fn logit_bias(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASKED_LOGIT })
            .collect();
        Tensor::new(vec![self.queries, self.keys], data).expect("mask dims")
    }
}

/// Positions visible from 1-based position `t` of a length-`len` sequence.
pub fn causal_mask(t: usize, len: usize) -> Result<Vec<bool>> {
    if t == 0 || t > len {
        return Err(Error::contract(format!("causal position {t} outside 1..={len}")));
    }
    Ok((1..=len).map(|i| i <= t).collect())
}

/// Softmax attention weights `[n x T]` of queries over keys, scaled by
/// `1/sqrt(d_k)`.
pub fn attention_weights<'t>(q: Var<'t>, k: Var<'t>, mask: Option<&AttendMask>) -> Result<Var<'t>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let scale = 1.0 / (qs[1] as f64).sqrt();
    let mut logits = q.matmul_t(k)?.scale(scale);
    if let Some(m) = mask {
        if m.queries != qs[0] || m.keys != ks[0] {
            return Err(Error::shape(
                "attention mask",
                &[m.queries, m.keys],
                &[qs[0], ks[0]],
            ));
        }
        logits = logits.add(q.tape().constant(m.logit_bias()))?;
    }
    logits.softmax()
}

/// `softmax(Q K^T / sqrt(d_k)) V`.
pub fn scaled_dot_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    mask: Option<&AttendMask>,
) -> Result<Var<'t>> {
    if k.shape()[0] != v.shape()[0] {
        return Err(Error::shape("attention key/value count", &k.shape(), &v.shape()));
    }
    attention_weights(q, k, mask)?.matmul(v)
}

/// Parameter handles of one multi-head attention block. Each projection is
/// stored as a `[d x d]` matrix whose column block `j` is the transposed
/// per-head projection of head `j`.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadParams {
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MultiHeadParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        let mut w = |name: &str| store.add_weight(format!("{prefix}.{name}"), &[d, d], d, d, rng);
        Ok(MultiHeadParams {
            heads,
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
        })
    }

    pub fn bind<'t>(&self, b: &Binding<'t, '_>) -> HeadWeights<'t> {
        HeadWeights {
            heads: self.heads,
            wq: b.get(self.wq),
            wk: b.get(self.wk),
            wv: b.get(self.wv),
            wo: b.get(self.wo),
        }
    }
}

/// Multi-head projections bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadWeights<'t> {
    pub heads: usize,
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub wo: Var<'t>,
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "model width {d} is not divisible by head count {heads}"
        )));
    }
    Ok(())
}

/// Multi-head attention: per-head scaled dot-product attention on projected
/// inputs, heads concatenated and mixed by the output projection. Attention
/// weights pass through dropout with rate `attn_dropout` in train mode.
pub fn multi_head<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    w: &HeadWeights<'t>,
    mask: Option<&AttendMask>,
    attn_dropout: Option<(f64, &mut dyn rand::RngCore)>,
) -> Result<Var<'t>> {
    let d = *q.shape().last().unwrap_or(&0);
    check_heads(d, w.heads)?;
    let dh = d / w.heads;
    let qp = q.matmul(w.wq)?;
    let kp = k.matmul(w.wk)?;
    let vp = v.matmul(w.wv)?;
    let mut drop = attn_dropout;
    let mut heads = Vec::with_capacity(w.heads);
    for j in 0..w.heads {
        let qj = qp.slice_cols(j * dh, dh)?;
        let kj = kp.slice_cols(j * dh, dh)?;
        let vj = vp.slice_cols(j * dh, dh)?;
        let mut weights = attention_weights(qj, kj, mask)?;
        if let Some((p, rng)) = drop.as_mut() {
            weights = dropout(weights, *p, true, rng)?;
        }
        heads.push(weights.matmul(vj)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        concat(&heads, 1)?
    };
    joined.matmul(w.wo)
}
