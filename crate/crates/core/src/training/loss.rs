//! Four-part training loss over sampled anchors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{concat, Tensor, Var};
use crate::data::VideoFeatures;
use crate::decoder::{argmax_word, teacher_forced_loss_inputs};
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::mask::bin_mask;
use crate::metrics::Segment;
use crate::model::Model;
use crate::params::Binding;
use crate::vocab::{TokenSequence, Vocabulary};

use super::labels::{label_anchors, sample_minibatch, AnchorLabel, AnchorPools};
use super::{MaskMode, TrainConfig, TrainMode};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub regression: f64,
    pub mask: f64,
    pub event: f64,
    pub caption: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            regression: 10.0,
            mask: 1.0,
            event: 1.0,
            caption: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("regression", self.regression),
            ("mask", self.mask),
            ("event", self.event),
            ("caption", self.caption),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::config(format!("loss weight {name} must be nonnegative")));
            }
        }
        Ok(())
    }

    pub fn combine(&self, c: &LossComponents) -> f64 {
        self.regression * c.regression + self.mask * c.mask + self.event * c.event + self.caption * c.caption
    }
}

/// Unweighted loss terms; absent terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub regression: f64,
    pub mask: f64,
    pub event: f64,
    pub caption: f64,
}

/// A video with its anchors labeled once for training.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub frames: Tensor,
    pub segments: Vec<Segment>,
    pub captions: Vec<TokenSequence>,
    pub labels: Vec<AnchorLabel>,
    pub pools: AnchorPools,
}

impl PreparedVideo {
    pub fn new(model: &Model, vocab: &Vocabulary, video: &VideoFeatures) -> Result<Self> {
        model.check_frames(&video.frames)?;
        let segments = video.segments();
        let labels = label_anchors(&model.proposal.anchors, &segments);
        let pools = AnchorPools::new(&labels, segments.len());
        let captions = video
            .annotations
            .iter()
            .map(|a| vocab.encode(&a.words, model.config.max_caption_words))
            .collect();
        Ok(PreparedVideo {
            frames: video.frames.clone(),
            segments,
            captions,
            labels,
            pools,
        })
    }
}

/// Anchors drawn for one segment of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSample {
    pub segment: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

pub fn plan_video(video: &PreparedVideo, u: usize, rng: &mut impl Rng) -> Vec<SegmentSample> {
    (0..video.segments.len())
        .filter_map(|g| {
            sample_minibatch(&video.pools.positives[g], &video.pools.negatives, u, rng).map(
                |(positives, negatives)| SegmentSample {
                    segment: g,
                    positives,
                    negatives,
                },
            )
        })
        .collect()
}

/// Loss terms on the tape. Each term is a mean over its own items.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub regression: Option<Var<'t>>,
    pub mask: Option<Var<'t>>,
    pub event: Option<Var<'t>>,
    pub caption: Option<Var<'t>>,
}

impl LossTerms<'_> {
    pub fn components(&self) -> LossComponents {
        let v = |t: Option<Var<'_>>| t.map_or(0.0, |v| v.item());
        LossComponents {
            regression: v(self.regression),
            mask: v(self.mask),
            event: v(self.event),
            caption: v(self.caption),
        }
    }
}

#[derive(Default)]
struct Parts<'t> {
    event_logits: Vec<Var<'t>>,
    event_targets: Vec<f64>,
    offsets: Vec<Var<'t>>,
    offset_targets: Vec<f64>,
    mask_logits: Vec<Var<'t>>,
    mask_targets: Vec<f64>,
    word_logits: Vec<Var<'t>>,
    word_targets: Vec<usize>,
}

/// Builds the training loss for `videos` with the given anchor samples.
/// `sampling` carries the scheduled-sampling ratio and its generator when
/// model predictions replace teacher inputs.
pub fn batch_loss<'t>(
    model: &Model,
    b: &Binding<'t, '_>,
    videos: &[(&PreparedVideo, Vec<SegmentSample>)],
    cfg: &TrainConfig,
    fwd: &mut Forward,
    mut sampling: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<LossTerms<'t>> {
    let mut parts = Parts::default();
    for (video, samples) in videos {
        let enc = model.encode(b, &video.frames, fwd)?;
        if cfg.mode == TrainMode::CaptionOnly {
            for g in 0..video.segments.len() {
                let seg = video.segments[g];
                let hard = b.tape().constant(Tensor::vector(
                    bin_mask(seg.start, seg.end, model.config.window).values,
                ));
                let (prefix, targets) = teacher_forced_loss_inputs(&video.captions[g]);
                let prefix = match sampling.as_mut() {
                    Some((ratio, rng)) => {
                        let first = model.caption_logits(b, &enc, hard, &prefix, fwd)?;
                        mix_predictions(&prefix, first, *ratio, rng)
                    }
                    None => prefix,
                };
                parts
                    .word_logits
                    .push(model.caption_logits(b, &enc, hard, &prefix, fwd)?);
                parts.word_targets.extend(targets);
            }
            continue;
        }

        let scores = model.score_anchors(b, &enc, fwd)?;
        for s in samples {
            let sampled = s
                .positives
                .iter()
                .map(|&i| (i, 1.0))
                .chain(s.negatives.iter().map(|&i| (i, 0.0)));
            for (i, target) in sampled {
                parts.event_logits.push(scores.logits.select(&[i])?);
                parts.event_targets.push(target);
            }
            for &i in &s.positives {
                let AnchorLabel::Positive { theta_c, theta_l, .. } = video.labels[i] else {
                    return Err(Error::contract(format!(
                        "anchor {i} sampled as positive is not labeled positive"
                    )));
                };
                parts.offsets.push(scores.offsets.select(&[2 * i, 2 * i + 1])?);
                parts.offset_targets.extend([theta_c, theta_l]);
            }
            if cfg.mode == TrainMode::ProposalOnly {
                continue;
            }
            let discrete = cfg.mask_mode == MaskMode::Discrete;
            for &i in s.positives.iter().take(cfg.captioned_positives) {
                let pm = model.proposal_mask(b, &scores, i, discrete, cfg.detach_mask_boundaries)?;
                if let Some(logits) = pm.mask_logits {
                    parts.mask_logits.push(logits);
                    parts
                        .mask_targets
                        .extend(bin_mask(pm.start, pm.end, model.config.window).values);
                }
                let (prefix, targets) = teacher_forced_loss_inputs(&video.captions[s.segment]);
                parts
                    .word_logits
                    .push(model.caption_logits(b, &enc, pm.mask, &prefix, fwd)?);
                parts.word_targets.extend(targets);
            }
        }
    }
    assemble(b, parts, &cfg.weights)
}

/// Replaces each non-initial input token with the model's previous
/// prediction with probability `ratio`.
fn mix_predictions(prefix: &[usize], logits: Var<'_>, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let preds: Vec<usize> = logits.with_value(|v| (0..v.rows()).map(|r| argmax_word(v.row(r))).collect());
    let mut out = prefix.to_vec();
    for t in 1..out.len() {
        if rng.random::<f64>() < ratio {
            out[t] = preds[t - 1];
        }
    }
    out
}

fn assemble<'t>(b: &Binding<'t, '_>, p: Parts<'t>, w: &LossWeights) -> Result<LossTerms<'t>> {
    let tape = b.tape();
    let event = if p.event_logits.is_empty() {
        None
    } else {
        Some(concat(&p.event_logits, 0)?.bce_with_logits(&p.event_targets)?)
    };
    let regression = if p.offsets.is_empty() {
        None
    } else {
        let n = p.offsets.len() as f64;
        Some(
            concat(&p.offsets, 0)?
                .smooth_l1(&p.offset_targets)?
                .scale(1.0 / n),
        )
    };
    let mask = if p.mask_logits.is_empty() {
        None
    } else {
        Some(concat(&p.mask_logits, 0)?.bce_with_logits(&p.mask_targets)?)
    };
    let caption = if p.word_logits.is_empty() {
        None
    } else {
        Some(concat(&p.word_logits, 0)?.softmax_cross_entropy(&p.word_targets)?)
    };
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (term, weight) in [
        (regression, w.regression),
        (mask, w.mask),
        (event, w.event),
        (caption, w.caption),
    ] {
        if let Some(t) = term {
            total = total.add(t.scale(weight))?;
        }
    }
    Ok(LossTerms {
        total,
        regression,
        mask,
        event,
        caption,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum_example() {
        let c = LossComponents {
            regression: 0.1,
            mask: 0.2,
            event: 0.3,
            caption: 4.0,
        };
        assert!((LossWeights::default().combine(&c) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            mask: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
