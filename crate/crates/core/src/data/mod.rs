//! Datasets, feature files, configuration and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod features;
pub mod synthetic;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::metrics::Segment;

/// One annotated event: a segment in frame units and its caption words.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub start: f64,
    pub end: f64,
    pub words: Vec<String>,
}

impl Annotation {
    pub fn segment(&self) -> Segment {
        Segment::new(self.start, self.end)
    }
}

/// Frame features `[T x d_in]` of one video window with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub frames: Tensor,
    pub annotations: Vec<Annotation>,
}

impl VideoFeatures {
    pub fn new(frames: Tensor, annotations: Vec<Annotation>) -> Result<Self> {
        let v = VideoFeatures { frames, annotations };
        v.validate()?;
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.shape().len() != 2 {
            return Err(Error::Validation(format!(
                "frames must be a matrix, got shape {:?}",
                self.frames.shape()
            )));
        }
        if !self.frames.is_finite() {
            return Err(Error::Validation("frames contain non-finite values".into()));
        }
        let t = self.len() as f64;
        for (i, a) in self.annotations.iter().enumerate() {
            if !(a.start.is_finite() && a.end.is_finite() && 0.0 <= a.start && a.start < a.end && a.end <= t)
            {
                return Err(Error::Validation(format!(
                    "annotation {i} segment [{}, {}] is outside [0, {t}] or empty",
                    a.start, a.end
                )));
            }
        }
        Ok(())
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.annotations.iter().map(Annotation::segment).collect()
    }
}
