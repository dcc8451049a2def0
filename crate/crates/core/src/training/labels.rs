//! Anchor labels and per-segment minibatch sampling.

use log::warn;
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::metrics::{tiou, Segment};
use crate::proposal::{boundaries_to_offsets, Anchor};

pub const POSITIVE_TIOU: f64 = 0.7;
pub const NEGATIVE_TIOU: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnchorLabel {
    /// Matched ground-truth segment and the offsets that reach it exactly.
    Positive {
        gt: usize,
        theta_c: f64,
        theta_l: f64,
    },
    Negative,
    Ignore,
}

pub fn anchor_segment(a: &Anchor) -> Segment {
    Segment::new(a.start(), a.end())
}

/// Positive above `POSITIVE_TIOU` against some segment (matched to the best
/// one), negative below `NEGATIVE_TIOU` against all, ignored otherwise.
pub fn label_anchors(anchors: &[Anchor], gt: &[Segment]) -> Vec<AnchorLabel> {
    anchors
        .iter()
        .map(|a| {
            let seg = anchor_segment(a);
            let mut best: Option<(usize, f64)> = None;
            for (g, s) in gt.iter().enumerate() {
                let o = tiou(seg, *s);
                if best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, o)) if o > POSITIVE_TIOU => {
                    let (theta_c, theta_l) = boundaries_to_offsets(a, gt[g].start, gt[g].end);
                    AnchorLabel::Positive {
                        gt: g,
                        theta_c,
                        theta_l,
                    }
                }
                Some((_, o)) if o >= NEGATIVE_TIOU => AnchorLabel::Ignore,
                _ => AnchorLabel::Negative,
            }
        })
        .collect()
}

/// Anchor indices split into positive pools per segment and a shared negative pool.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorPools {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<usize>,
}

impl AnchorPools {
    pub fn new(labels: &[AnchorLabel], segments: usize) -> Self {
        let mut positives = vec![Vec::new(); segments];
        let mut negatives = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            match l {
                AnchorLabel::Positive { gt, .. } => positives[*gt].push(i),
                AnchorLabel::Negative => negatives.push(i),
                AnchorLabel::Ignore => {}
            }
        }
        AnchorPools { positives, negatives }
    }
}

/// `u` anchors for one segment, half positive where the pools allow, the
/// rest from the other pool. Returns `(positives, negatives)`, or `None`
/// with a warning when the positive pool is empty.
pub fn sample_minibatch(
    positives: &[usize],
    negatives: &[usize],
    u: usize,
    rng: &mut impl Rng,
) -> Option<(Vec<usize>, Vec<usize>)> {
    if positives.is_empty() {
        warn!("segment has no positive anchors; skipped");
        return None;
    }
    let n_pos = positives.len().min(u - negatives.len().min(u / 2));
    let n_neg = negatives.len().min(u - n_pos);
    let pos = positives.choose_multiple(rng, n_pos).copied().collect();
    let neg = negatives.choose_multiple(rng, n_neg).copied().collect();
    Some((pos, neg))
}
