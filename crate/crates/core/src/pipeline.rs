//! End-to-end runs shared by the command line and the tests: dataset
//! generation, training and evaluation reports.

use std::fmt::{self, Write as _};

use rand::Rng;

use crate::autograd::gradcheck::GradCheckReport;
use crate::autograd::{Tape, Tensor};
use crate::data::config::Config;
use crate::data::synthetic::caption_for;
use crate::data::{Annotation, VideoFeatures};
use crate::decoder::{argmax_word, teacher_forced_loss_inputs};
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::inference::{dense_caption, segment_of, select_proposals};
use crate::metrics::{
    average_recall, bleu_n, dense_caption_score, recall, recall_curve, tiou, CaptionedSegment, Segment,
    DENSE_TIOU_THRESHOLDS,
};
use crate::model::{Model, ModelConfig};
use crate::params::Binding;
use crate::proposal::{build_anchor_grid, Anchor};
use crate::training::gradcheck::spot_check;
use crate::training::labels::anchor_segment;
use crate::training::loss::plan_video;
use crate::training::trainer::step_rng;
use crate::training::{StepLog, Trainer};
use crate::vocab::Vocabulary;

/// Thresholds `0.5, 0.55, .., 0.95` for average recall.
pub fn ar_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub const REPORT_THRESHOLDS: [f64; 5] = [0.3, 0.5, 0.7, 0.8, 0.9];
pub const CURVE_THRESHOLD: f64 = 0.8;

pub fn vocabulary_for(videos: &[VideoFeatures]) -> Vocabulary {
    let caps: Vec<&[String]> = videos
        .iter()
        .flat_map(|v| v.annotations.iter().map(|a| a.words.as_slice()))
        .collect();
    Vocabulary::from_captions(caps)
}

/// Fresh trainer for `videos`; model parameters are drawn from the training seed.
pub fn new_trainer(config: &Config, videos: &[VideoFeatures]) -> Result<Trainer> {
    config.validate()?;
    let vocab = vocabulary_for(videos);
    let model = Model::new(config.model.clone(), vocab.len(), config.train.seed)?;
    Trainer::new(model, vocab, config.train.clone(), videos)
}

/// Trains until `trainer.step == until`, passing each step's log to `on_step`.
pub fn train_until(trainer: &mut Trainer, until: u64, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
    while trainer.step < until {
        let log = trainer.train_step()?;
        on_step(&log);
    }
    Ok(())
}

/// Two-video batch with random frames whose annotated segments coincide
/// with anchors of the model grid, so every segment has positive anchors.
pub fn gradcheck_videos(config: &ModelConfig, seed: u64) -> Result<Vec<VideoFeatures>> {
    let w = config.window as f64;
    let inside: Vec<Anchor> = build_anchor_grid(config.window, &config.kernels, config.stride_factor)?
        .into_iter()
        .filter(|a| a.start() >= 0.0 && a.end() <= w)
        .collect();
    if inside.is_empty() {
        return Err(Error::config("no anchor lies inside the window"));
    }
    let mut rng = step_rng(seed, 0, 1);
    (0..2)
        .map(|v| {
            let data = (0..config.window * config.d_in)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let frames = Tensor::new(vec![config.window, config.d_in], data)?;
            let annotations = (0..2)
                .map(|k| {
                    let a = inside[rng.random_range(0..inside.len())];
                    Annotation {
                        start: a.start(),
                        end: a.end(),
                        words: caption_for(v + k),
                    }
                })
                .collect();
            VideoFeatures::new(frames, annotations)
        })
        .collect()
}

/// Finite-difference check of the full training loss of a freshly
/// initialized model on one batch of [`gradcheck_videos`], at `samples`
/// parameter entries.
pub fn model_gradcheck(config: &Config, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let videos = gradcheck_videos(&config.model, seed)?;
    let mut trainer = new_trainer(config, &videos)?;
    let mut rng = step_rng(seed, 0, 0);
    let prepared = trainer.videos().to_vec();
    let items: Vec<_> = prepared
        .iter()
        .map(|v| (v, plan_video(v, config.train.anchors_per_segment, &mut rng)))
        .collect();
    let report = spot_check(&mut trainer.model, &items, &config.train, samples, seed)?;
    if report.checked == 0 {
        return Err(Error::Validation(
            "the loss has no parameter gradients to check".into(),
        ));
    }
    Ok(report)
}

/// Ranked proposals after overlap suppression, no score threshold.
pub fn ranked_proposals(model: &Model, frames: &Tensor, overlap_cap: f64, n: usize) -> Result<Vec<Segment>> {
    let all = model.propose(frames)?;
    Ok(select_proposals(&all, f64::NEG_INFINITY, overlap_cap, 0, n)
        .iter()
        .map(segment_of)
        .collect())
}

/// Fraction of next-word predictions that match the ground truth when the
/// decoder is fed the true prefix. Each segment is seen through the gated
/// mask of the anchor that overlaps it best.
pub fn teacher_forced_accuracy(model: &Model, vocab: &Vocabulary, videos: &[VideoFeatures]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for v in videos {
        let tape = Tape::new();
        let b = Binding::new(&tape, &model.store);
        let mut fwd = Forward::eval();
        let enc = model.encode(&b, &v.frames, &mut fwd)?;
        let scores = model.score_anchors(&b, &enc, &mut fwd)?;
        for a in &v.annotations {
            let best = model
                .proposal
                .anchors
                .iter()
                .enumerate()
                .map(|(i, anchor)| (i, tiou(anchor_segment(anchor), a.segment())))
                .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
                .0;
            let pm = model.proposal_mask(&b, &scores, best, false, false)?;
            let seq = vocab.encode(&a.words, model.config.max_caption_words);
            let (prefix, targets) = teacher_forced_loss_inputs(&seq);
            let logits = model
                .caption_logits(&b, &enc, pm.mask, &prefix, &mut fwd)?
                .value();
            for (t, want) in targets.iter().enumerate() {
                hits += usize::from(argmax_word(logits.row(t)) == *want);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Validation("no captions to score".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub videos: usize,
    pub segments: usize,
    pub n_proposals: usize,
    pub recall_at: Vec<(f64, f64)>,
    pub average_recall: f64,
    pub curve: Vec<(usize, f64)>,
    /// `(threshold, bleu3, bleu4)` per dense-captioning threshold.
    pub dense: Vec<(f64, f64, f64)>,
    pub dense_bleu3: f64,
    pub dense_bleu4: f64,
    pub captioned_events: usize,
}

/// Localization and dense captioning metrics of `model` on `videos`.
pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    config: &Config,
    videos: &[VideoFeatures],
    n: usize,
) -> Result<EvalReport> {
    let gt: Vec<Vec<Segment>> = videos.iter().map(VideoFeatures::segments).collect();
    let curve_len = n.max(config.inference.max_proposals);
    let ranked = videos
        .iter()
        .map(|v| ranked_proposals(model, &v.frames, config.inference.overlap_cap, curve_len))
        .collect::<Result<Vec<_>>>()?;
    let recall_at = REPORT_THRESHOLDS
        .iter()
        .map(|&th| {
            let per_video: f64 = (0..videos.len())
                .filter(|&i| !gt[i].is_empty())
                .map(|i| recall(&ranked[i], &gt[i], n, th))
                .sum();
            let count = gt.iter().filter(|g| !g.is_empty()).count().max(1);
            (th, per_video / count as f64)
        })
        .collect();
    let ar = average_recall(&ranked, &gt, n, &ar_thresholds());
    let curve = recall_curve(&ranked, &gt, curve_len, CURVE_THRESHOLD);

    let mut results = Vec::with_capacity(videos.len());
    for v in videos {
        let r = dense_caption(model, &v.frames, &config.inference)?;
        results.push(
            r.events
                .iter()
                .map(|(p, seq)| CaptionedSegment {
                    segment: segment_of(p),
                    words: vocab.decode(seq),
                })
                .collect::<Vec<_>>(),
        );
    }
    let refs: Vec<Vec<CaptionedSegment>> = videos
        .iter()
        .map(|v| {
            v.annotations
                .iter()
                .map(|a| CaptionedSegment {
                    segment: a.segment(),
                    words: a.words.clone(),
                })
                .collect()
        })
        .collect();
    let dense: Vec<(f64, f64, f64)> = DENSE_TIOU_THRESHOLDS
        .iter()
        .map(|&th| {
            (
                th,
                dense_caption_score(&results, &refs, &[th], |c, r| bleu_n(c, r, 3)),
                dense_caption_score(&results, &refs, &[th], |c, r| bleu_n(c, r, 4)),
            )
        })
        .collect();
    Ok(EvalReport {
        videos: videos.len(),
        segments: gt.iter().map(Vec::len).sum(),
        n_proposals: n,
        recall_at,
        average_recall: ar,
        curve,
        dense_bleu3: dense_caption_score(&results, &refs, &DENSE_TIOU_THRESHOLDS, |c, r| bleu_n(c, r, 3)),
        dense_bleu4: dense_caption_score(&results, &refs, &DENSE_TIOU_THRESHOLDS, |c, r| bleu_n(c, r, 4)),
        dense,
        captioned_events: results.iter().map(Vec::len).sum(),
    })
}

impl EvalReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("n_proposals,recall\n");
        for (n, r) in &self.curve {
            let _ = writeln!(out, "{n},{r:.6}");
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "videos = {}", self.videos)?;
        writeln!(f, "segments = {}", self.segments)?;
        writeln!(f, "proposals = {}", self.n_proposals)?;
        for (th, r) in &self.recall_at {
            writeln!(f, "recall@{}[tiou={th:.2}] = {r:.6}", self.n_proposals)?;
        }
        writeln!(
            f,
            "average_recall@{}[tiou=0.50:0.95] = {:.6}",
            self.n_proposals, self.average_recall
        )?;
        writeln!(f, "captioned_events = {}", self.captioned_events)?;
        for (th, b3, b4) in &self.dense {
            writeln!(f, "dense_bleu3[tiou={th:.2}] = {b3:.6}")?;
            writeln!(f, "dense_bleu4[tiou={th:.2}] = {b4:.6}")?;
        }
        writeln!(f, "dense_bleu3 = {:.6}", self.dense_bleu3)?;
        writeln!(f, "dense_bleu4 = {:.6}", self.dense_bleu4)
    }
}
