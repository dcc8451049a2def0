//! Anchor-based event proposal head.
//!
//! Every kernel size `k` contributes one anchor per output position of a
//! temporal convolution with kernel `k`, stride `ceil(k / s)` and padding
//! `floor(k / 2)`. Output position `j` covers frames
//! `[j * stride - pad, j * stride - pad + k)`, which defines the anchor's
//! center and length.

use rand::Rng;

use crate::autograd::nn::{batch_norm1d, linear};
use crate::autograd::{concat, Var};
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::params::{Binding, BnStatsIds, BnUpdate, ParamId, ParamStore};

pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub center: f64,
    pub length: f64,
    pub kernel: usize,
}

impl Anchor {
    pub fn start(&self) -> f64 {
        self.center - self.length / 2.0
    }

    pub fn end(&self) -> f64 {
        self.center + self.length / 2.0
    }
}

/// Raw head output for one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalOutput {
    pub score: f64,
    pub theta_c: f64,
    pub theta_l: f64,
    pub anchor: Anchor,
}

/// A scored segment in frame units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventProposal {
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub anchor: Anchor,
}

/// Convolution stride and padding used for kernel size `k`.
pub fn conv_geometry(kernel: usize, stride_factor: usize) -> (usize, usize) {
    (kernel.div_ceil(stride_factor), kernel / 2)
}

/// All anchors for a window of `window` frames, ordered by kernel then center.
pub fn build_anchor_grid(window: usize, kernels: &[usize], stride_factor: usize) -> Result<Vec<Anchor>> {
    if kernels.is_empty() {
        return Err(Error::config("anchor grid needs at least one kernel size"));
    }
    if stride_factor == 0 {
        return Err(Error::config("stride factor must be at least 1"));
    }
    let mut anchors = Vec::new();
    for &k in kernels {
        if k == 0 {
            return Err(Error::config("kernel sizes must be positive"));
        }
        let (stride, pad) = conv_geometry(k, stride_factor);
        let padded = window + 2 * pad;
        if k > padded {
            return Err(Error::config(format!(
                "kernel {k} exceeds padded window {padded}"
            )));
        }
        let positions = (padded - k) / stride + 1;
        for j in 0..positions {
            let start = (j * stride) as f64 - pad as f64;
            anchors.push(Anchor {
                center: start + k as f64 / 2.0,
                length: k as f64,
                kernel: k,
            });
        }
    }
    Ok(anchors)
}

/// Proposal boundaries from anchor offsets: `c = c_a + theta_c * l_a`,
/// `l = l_a * exp(theta_l)`, `[c - l/2, c + l/2]` clamped to `[0, window]`.
pub fn anchor_to_boundaries(p: &ProposalOutput, window: usize) -> EventProposal {
    let (start, end) = raw_boundaries(&p.anchor, p.theta_c, p.theta_l);
    let w = window as f64;
    EventProposal {
        start: start.clamp(0.0, w),
        end: end.clamp(0.0, w),
        score: p.score,
        anchor: p.anchor,
    }
}

/// Unclamped boundaries; `start < end` always holds.
pub fn raw_boundaries(anchor: &Anchor, theta_c: f64, theta_l: f64) -> (f64, f64) {
    let c = anchor.center + theta_c * anchor.length;
    let l = anchor.length * theta_l.exp();
    (c - l / 2.0, c + l / 2.0)
}

/// Offsets that map `anchor` exactly onto the segment `[start, end]`.
pub fn boundaries_to_offsets(anchor: &Anchor, start: f64, end: f64) -> (f64, f64) {
    let c = (start + end) / 2.0;
    let l = end - start;
    ((c - anchor.center) / anchor.length, (l / anchor.length).ln())
}

/// Differentiable form of [`anchor_to_boundaries`] over scalar variables.
pub fn boundary_vars<'t>(
    theta_c: Var<'t>,
    theta_l: Var<'t>,
    anchor: &Anchor,
    window: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let center = theta_c.scale(anchor.length).add_const(anchor.center);
    let half = theta_l.exp().scale(anchor.length / 2.0);
    let w = window as f64;
    Ok((center.sub(half)?.clamp(0.0, w), center.add(half)?.clamp(0.0, w)))
}

#[derive(Clone, Copy, Debug)]
struct BnParams {
    gain: ParamId,
    bias: ParamId,
    stats: BnStatsIds,
}

impl BnParams {
    fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        BnParams {
            gain: store.add_filled(format!("{prefix}.gain"), &[channels], 1.0),
            bias: store.add_filled(format!("{prefix}.bias"), &[channels], 0.0),
            stats: store.add_running_stats(prefix, channels),
        }
    }

    fn forward<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>, fwd: &mut Forward) -> Result<Var<'t>> {
        let running = b.store().running_stats(self.stats);
        let (y, batch) = batch_norm1d(
            x,
            b.get(self.gain),
            b.get(self.bias),
            &running,
            fwd.train && !fwd.frozen_bn,
            BATCH_NORM_EPS,
        )?;
        if let Some((mean, var)) = batch {
            fwd.bn_updates.push(BnUpdate {
                ids: self.stats,
                mean,
                var,
            });
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
struct KernelStack {
    kernel: usize,
    stride: usize,
    padding: usize,
    conv: ParamId,
    bn: BnParams,
}

/// Per-anchor score logits `[N]` and offsets `[N x 2]` (center, log-length).
pub struct ProposalScores<'t> {
    pub logits: Var<'t>,
    pub offsets: Var<'t>,
}

/// Three temporal convolution layers with batch normalization: a
/// kernel-specific first layer, then a shared hidden layer and shared
/// score/offset output layers (both with kernel size one).
#[derive(Clone, Debug)]
pub struct ProposalHead {
    pub window: usize,
    pub anchors: Vec<Anchor>,
    stacks: Vec<KernelStack>,
    hidden_w: ParamId,
    hidden_bn: BnParams,
    pub score_w: ParamId,
    pub score_b: ParamId,
    pub offset_w: ParamId,
    pub offset_b: ParamId,
}

impl ProposalHead {
    pub fn new(
        store: &mut ParamStore,
        window: usize,
        d_model: usize,
        kernels: &[usize],
        stride_factor: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let anchors = build_anchor_grid(window, kernels, stride_factor)?;
        let hidden = (d_model / 2).max(1);
        let stacks = kernels
            .iter()
            .map(|&k| {
                let (stride, padding) = conv_geometry(k, stride_factor);
                let prefix = format!("proposal.k{k}");
                KernelStack {
                    kernel: k,
                    stride,
                    padding,
                    conv: store.add_weight(
                        format!("{prefix}.conv"),
                        &[k, d_model, hidden],
                        k * d_model,
                        hidden,
                        rng,
                    ),
                    bn: BnParams::new(store, &format!("{prefix}.bn"), hidden),
                }
            })
            .collect();
        Ok(ProposalHead {
            window,
            anchors,
            stacks,
            hidden_w: store.add_weight("proposal.hidden.w", &[hidden, hidden], hidden, hidden, rng),
            hidden_bn: BnParams::new(store, "proposal.hidden.bn", hidden),
            score_w: store.add_weight("proposal.score.w", &[hidden, 1], hidden, 1, rng),
            score_b: store.add_filled("proposal.score.b", &[1], 0.0),
            offset_w: store.add_weight("proposal.offset.w", &[hidden, 2], hidden, 2, rng),
            offset_b: store.add_filled("proposal.offset.b", &[2], 0.0),
        })
    }

    pub fn kernels(&self) -> Vec<usize> {
        self.stacks.iter().map(|s| s.kernel).collect()
    }

    /// Scores every anchor of the grid from the last encoder layer `[T x d]`.
    pub fn forward<'t>(
        &self,
        b: &Binding<'t, '_>,
        features: Var<'t>,
        fwd: &mut Forward,
    ) -> Result<ProposalScores<'t>> {
        let mut per_kernel = Vec::with_capacity(self.stacks.len());
        for s in &self.stacks {
            let h = features.conv1d(b.get(s.conv), s.stride, s.padding)?;
            per_kernel.push(s.bn.forward(b, h, fwd)?.relu());
        }
        let h = concat(&per_kernel, 0)?;
        if h.shape()[0] != self.anchors.len() {
            return Err(Error::shape("proposal grid", &h.shape(), &[self.anchors.len()]));
        }
        let h = self
            .hidden_bn
            .forward(b, h.matmul(b.get(self.hidden_w))?, fwd)?
            .relu();
        let n = self.anchors.len();
        let logits = linear(h, b.get(self.score_w), Some(b.get(self.score_b)))?.reshape(&[n])?;
        let offsets = linear(h, b.get(self.offset_w), Some(b.get(self.offset_b)))?;
        Ok(ProposalScores { logits, offsets })
    }

    /// Plain-value outputs for every anchor.
    pub fn outputs(&self, scores: &ProposalScores<'_>) -> Vec<ProposalOutput> {
        let logits = scores.logits.value();
        let offsets = scores.offsets.value();
        self.anchors
            .iter()
            .enumerate()
            .map(|(i, a)| ProposalOutput {
                score: 1.0 / (1.0 + (-logits.data()[i]).exp()),
                theta_c: offsets.at(i, 0),
                theta_l: offsets.at(i, 1),
                anchor: *a,
            })
            .collect()
    }
}
