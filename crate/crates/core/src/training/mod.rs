//! Anchor sampling, the training objective, optimizers and the training loop.

pub mod gradcheck;
pub mod labels;
pub mod loss;
pub mod optim;
pub mod trainer;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use labels::{label_anchors, sample_minibatch, AnchorLabel, AnchorPools};
pub use loss::{batch_loss, LossComponents, LossTerms, LossWeights, PreparedVideo, SegmentSample};
pub use optim::{scheduled_sampling_ratio, Optimizer, OptimizerKind, Plateau};
pub use trainer::{StepLog, Trainer};

/// Which parts of the network are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    EndToEnd,
    ProposalOnly,
    CaptionOnly,
}

/// How captioning sees a proposal: through the differentiable gated mask or
/// through a constant binary mask of the predicted boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Gated,
    Discrete,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"),
                        other
                    ))),
                }
            }
        }
    };
}

keyword_enum!(TrainMode { EndToEnd => "end_to_end", ProposalOnly => "proposal_only", CaptionOnly => "caption_only" });
keyword_enum!(MaskMode { Gated => "gated", Discrete => "discrete" });
keyword_enum!(OptimizerKind { Sgd => "sgd", Adam => "adam" });

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub mask_mode: MaskMode,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub plateau_factor: f64,
    pub plateau_patience: u32,
    pub plateau_threshold: f64,
    /// Steps between plateau checks of the running training loss.
    pub eval_every: u64,
    pub anchors_per_segment: usize,
    /// Positives per segment that also get a caption loss.
    pub captioned_positives: usize,
    pub detach_mask_boundaries: bool,
    pub weights: LossWeights,
    pub dropout: f64,
    pub input_dropout: f64,
    pub bn_momentum: f64,
    /// From this step on, normalization layers train against their running statistics.
    pub freeze_bn_after: Option<u64>,
    pub batch_videos: usize,
    pub steps: u64,
    pub scheduled_sampling: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::EndToEnd,
            mask_mode: MaskMode::Gated,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.01,
            momentum: 0.95,
            clip_norm: 1.0,
            plateau_factor: 0.5,
            plateau_patience: 3,
            plateau_threshold: 1e-3,
            eval_every: 50,
            anchors_per_segment: 10,
            captioned_positives: 2,
            detach_mask_boundaries: false,
            weights: LossWeights::default(),
            dropout: 0.2,
            input_dropout: 0.1,
            bn_momentum: 0.9,
            freeze_bn_after: None,
            batch_videos: 1,
            steps: 2000,
            scheduled_sampling: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.anchors_per_segment == 0 {
            return Err(Error::config("anchors_per_segment must be at least 1"));
        }
        if self.batch_videos == 0 || self.eval_every == 0 {
            return Err(Error::config("batch_videos and eval_every must be at least 1"));
        }
        for (name, p) in [("dropout", self.dropout), ("input_dropout", self.input_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum values must lie in [0, 1)"));
        }
        self.weights.validate()
    }

    pub fn bn_frozen_at(&self, step: u64) -> bool {
        self.freeze_bn_after.is_some_and(|s| step >= s)
    }

    /// Scheduled sampling only applies when training the captioner alone.
    pub fn uses_scheduled_sampling(&self) -> bool {
        self.scheduled_sampling && self.mode == TrainMode::CaptionOnly
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keywords_round_trip() {
        for m in [
            TrainMode::EndToEnd,
            TrainMode::ProposalOnly,
            TrainMode::CaptionOnly,
        ] {
            assert_eq!(m.to_string().parse::<TrainMode>().unwrap(), m);
        }
        assert_eq!("discrete".parse::<MaskMode>().unwrap(), MaskMode::Discrete);
        assert!("Gated".parse::<MaskMode>().is_err());
    }

    #[test]
    fn defaults_validate() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
