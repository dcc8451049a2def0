//! Proposal selection and dense captioning of a video window.

use log::warn;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{tiou, Segment};
use crate::model::Model;
use crate::proposal::EventProposal;
use crate::vocab::TokenSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub overlap_cap: f64,
    pub min_proposals: usize,
    pub max_proposals: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_threshold: 0.7,
            overlap_cap: 0.9,
            min_proposals: 5,
            max_proposals: 50,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_proposals > self.max_proposals {
            return Err(Error::config(format!(
                "min_proposals {} exceeds max_proposals {}",
                self.min_proposals, self.max_proposals
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap_cap) {
            return Err(Error::config("overlap_cap must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub fn segment_of(p: &EventProposal) -> Segment {
    Segment::new(p.start, p.end)
}

/// Threshold by score, backfill to `min_n` by score, drop proposals that
/// overlap a kept higher-scoring one by at least `overlap_cap`, keep at most
/// `max_n`. Output is sorted by descending score.
pub fn select_proposals(
    all: &[EventProposal],
    threshold: f64,
    overlap_cap: f64,
    min_n: usize,
    max_n: usize,
) -> Vec<EventProposal> {
    if all.is_empty() {
        warn!("no proposals to select from");
        return Vec::new();
    }
    let mut ranked: Vec<EventProposal> = all.to_vec();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let passing = ranked.iter().take_while(|p| p.score >= threshold).count();
    ranked.truncate(passing.max(min_n));

    let mut kept: Vec<EventProposal> = Vec::new();
    for p in ranked {
        if kept.len() == max_n {
            break;
        }
        if kept
            .iter()
            .all(|k| tiou(segment_of(k), segment_of(&p)) < overlap_cap)
        {
            kept.push(p);
        }
    }
    kept
}

/// Selected proposals of one video with their generated captions.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseCaptionResult {
    pub events: Vec<(EventProposal, TokenSequence)>,
}

pub fn select_for_video(model: &Model, frames: &Tensor, cfg: &InferenceConfig) -> Result<Vec<EventProposal>> {
    let all = model.propose(frames)?;
    Ok(select_proposals(
        &all,
        cfg.score_threshold,
        cfg.overlap_cap,
        cfg.min_proposals,
        cfg.max_proposals,
    ))
}

/// Proposes, selects and captions every selected event.
pub fn dense_caption(model: &Model, frames: &Tensor, cfg: &InferenceConfig) -> Result<DenseCaptionResult> {
    let events = select_for_video(model, frames, cfg)?
        .into_iter()
        .map(|p| Ok((p, model.caption_proposal(frames, &p)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DenseCaptionResult { events })
}

/// Captions the given segments directly, skipping proposal selection.
pub fn caption_segments(model: &Model, frames: &Tensor, segments: &[Segment]) -> Result<Vec<TokenSequence>> {
    segments
        .iter()
        .map(|s| model.caption_segment(frames, s.start, s.end))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposal::Anchor;

    const A: Anchor = Anchor {
        center: 0.0,
        length: 1.0,
        kernel: 1,
    };

    fn p(start: f64, end: f64, score: f64) -> EventProposal {
        EventProposal {
            start,
            end,
            score,
            anchor: A,
        }
    }

    #[test]
    fn identical_proposals_suppressed() {
        let out = select_proposals(&[p(0.0, 10.0, 0.8), p(0.0, 10.0, 0.9)], 0.7, 0.9, 0, 10);
        assert_eq!(out, vec![p(0.0, 10.0, 0.9)]);
    }

    #[test]
    fn backfill_below_threshold() {
        let all = [p(0.0, 1.0, 0.1), p(2.0, 3.0, 0.3), p(4.0, 5.0, 0.2)];
        let out = select_proposals(&all, 0.7, 0.9, 2, 10);
        assert_eq!(out, vec![p(2.0, 3.0, 0.3), p(4.0, 5.0, 0.2)]);
    }

    #[test]
    fn moderate_overlap_is_kept() {
        let all = [p(0.0, 10.0, 0.95), p(1.0, 11.0, 0.9), p(20.0, 30.0, 0.8)];
        assert_eq!(select_proposals(&all, 0.7, 0.9, 0, 10).len(), 3);
        assert_eq!(select_proposals(&all, 0.7, 0.9, 0, 2).len(), 2);
        assert!(select_proposals(&[], 0.7, 0.9, 5, 10).is_empty());
    }
}
