//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional, unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(format!("invalid value {raw:?} for {key}")))
}

fn list(key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',').map(|s| value(key, s.trim())).collect()
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.inference.validate()
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let i = &mut self.inference;
        match key {
            "window" => m.window = value(key, raw)?,
            "d_in" => m.d_in = value(key, raw)?,
            "d_model" => m.d_model = value(key, raw)?,
            "d_ff" => m.d_ff = value(key, raw)?,
            "heads" => m.heads = value(key, raw)?,
            "encoder_layers" => m.encoder_layers = value(key, raw)?,
            "decoder_layers" => m.decoder_layers = value(key, raw)?,
            "kernels" => m.kernels = list(key, raw)?,
            "stride_factor" => m.stride_factor = value(key, raw)?,
            "positional_encoding" => m.positional_encoding = value(key, raw)?,
            "max_caption_words" => m.max_caption_words = value(key, raw)?,

            "mode" => t.mode = raw.parse()?,
            "mask_mode" => t.mask_mode = raw.parse()?,
            "optimizer" => t.optimizer = raw.parse()?,
            "learning_rate" => t.learning_rate = value(key, raw)?,
            "momentum" => t.momentum = value(key, raw)?,
            "clip_norm" => t.clip_norm = value(key, raw)?,
            "plateau_factor" => t.plateau_factor = value(key, raw)?,
            "plateau_patience" => t.plateau_patience = value(key, raw)?,
            "plateau_threshold" => t.plateau_threshold = value(key, raw)?,
            "eval_every" => t.eval_every = value(key, raw)?,
            "anchors_per_segment" => t.anchors_per_segment = value(key, raw)?,
            "captioned_positives" => t.captioned_positives = value(key, raw)?,
            "detach_mask_boundaries" => t.detach_mask_boundaries = value(key, raw)?,
            "lambda_regression" => t.weights.regression = value(key, raw)?,
            "lambda_mask" => t.weights.mask = value(key, raw)?,
            "lambda_event" => t.weights.event = value(key, raw)?,
            "lambda_caption" => t.weights.caption = value(key, raw)?,
            "dropout" => t.dropout = value(key, raw)?,
            "input_dropout" => t.input_dropout = value(key, raw)?,
            "bn_momentum" => t.bn_momentum = value(key, raw)?,
            "freeze_bn_after" => {
                t.freeze_bn_after = match raw {
                    "off" => None,
                    n => Some(value(key, n)?),
                }
            }
            "batch_videos" => t.batch_videos = value(key, raw)?,
            "steps" => t.steps = value(key, raw)?,
            "scheduled_sampling" => t.scheduled_sampling = value(key, raw)?,
            "seed" => t.seed = value(key, raw)?,

            "score_threshold" => i.score_threshold = value(key, raw)?,
            "overlap_cap" => i.overlap_cap = value(key, raw)?,
            "min_proposals" => i.min_proposals = value(key, raw)?,
            "max_proposals" => i.max_proposals = value(key, raw)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {}: repeated key {key:?}", n + 1)));
            }
            cfg.set(key, raw.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let i = &self.inference;
        let kernels: Vec<String> = m.kernels.iter().map(usize::to_string).collect();
        let entries: Vec<(&str, String)> = vec![
            ("window", m.window.to_string()),
            ("d_in", m.d_in.to_string()),
            ("d_model", m.d_model.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("heads", m.heads.to_string()),
            ("encoder_layers", m.encoder_layers.to_string()),
            ("decoder_layers", m.decoder_layers.to_string()),
            ("kernels", kernels.join(",")),
            ("stride_factor", m.stride_factor.to_string()),
            ("positional_encoding", m.positional_encoding.to_string()),
            ("max_caption_words", m.max_caption_words.to_string()),
            ("mode", t.mode.to_string()),
            ("mask_mode", t.mask_mode.to_string()),
            ("optimizer", t.optimizer.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("momentum", t.momentum.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("plateau_factor", t.plateau_factor.to_string()),
            ("plateau_patience", t.plateau_patience.to_string()),
            ("plateau_threshold", t.plateau_threshold.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("anchors_per_segment", t.anchors_per_segment.to_string()),
            ("captioned_positives", t.captioned_positives.to_string()),
            ("detach_mask_boundaries", t.detach_mask_boundaries.to_string()),
            ("lambda_regression", t.weights.regression.to_string()),
            ("lambda_mask", t.weights.mask.to_string()),
            ("lambda_event", t.weights.event.to_string()),
            ("lambda_caption", t.weights.caption.to_string()),
            ("dropout", t.dropout.to_string()),
            ("input_dropout", t.input_dropout.to_string()),
            ("bn_momentum", t.bn_momentum.to_string()),
            (
                "freeze_bn_after",
                t.freeze_bn_after
                    .map_or_else(|| "off".to_string(), |s| s.to_string()),
            ),
            ("batch_videos", t.batch_videos.to_string()),
            ("steps", t.steps.to_string()),
            ("scheduled_sampling", t.scheduled_sampling.to_string()),
            ("seed", t.seed.to_string()),
            ("score_threshold", i.score_threshold.to_string()),
            ("overlap_cap", i.overlap_cap.to_string()),
            ("min_proposals", i.min_proposals.to_string()),
            ("max_proposals", i.max_proposals.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{MaskMode, TrainMode};

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::default();
        cfg.train.mask_mode = MaskMode::Discrete;
        cfg.train.mode = TrainMode::ProposalOnly;
        cfg.train.learning_rate = 0.0123;
        cfg.model.kernels = vec![3, 9];
        cfg.train.freeze_bn_after = Some(17);
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = Config::parse("# comment\n\nd_model = 32\nheads=2\n").unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.heads, 2);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn unknown_repeated_and_invalid_keys_fail() {
        let e = Config::parse("d_modle = 32").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("d_modle"));
        assert!(Config::parse("seed = 1\nseed = 2").is_err());
        assert!(Config::parse("heads = four").is_err());
        assert!(Config::parse("heads = 3").is_err());
        assert!(Config::parse("just words").is_err());
    }
}
