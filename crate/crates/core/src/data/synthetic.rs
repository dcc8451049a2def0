//! Synthetic videos: fixed feature motifs pasted into noise, captioned by a
//! one-line grammar.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Annotation, VideoFeatures};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

const PATTERN_WORDS: [&str; 12] = [
    "whisk", "pour", "chop", "stir", "fry", "bake", "peel", "slice", "boil", "grate", "knead", "roast",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub videos: usize,
    pub window: usize,
    pub d_in: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub min_event_len: usize,
    pub max_event_len: usize,
    pub patterns: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            videos: 10,
            window: 64,
            d_in: 16,
            min_events: 1,
            max_events: 3,
            min_event_len: 8,
            max_event_len: 24,
            patterns: 4,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patterns == 0 || self.window == 0 || self.d_in == 0 {
            return Err(Error::config("patterns, window and d_in must be positive"));
        }
        if self.min_events > self.max_events
            || self.min_event_len > self.max_event_len
            || self.min_event_len == 0
        {
            return Err(Error::config("event count and length ranges must be nonempty"));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::config("noise must be nonnegative"));
        }
        if self.min_events * self.min_event_len > self.window {
            return Err(Error::Generation(format!(
                "{} events of at least {} frames do not fit in {} frames",
                self.min_events, self.min_event_len, self.window
            )));
        }
        Ok(())
    }
}

/// Caption word for pattern `p`.
pub fn pattern_word(p: usize) -> String {
    PATTERN_WORDS
        .get(p)
        .map_or_else(|| format!("pattern{p}"), |w| w.to_string())
}

/// Caption template for pattern `p`.
pub fn caption_for(p: usize) -> Vec<String> {
    vec!["make".into(), pattern_word(p), "now".into()]
}

/// The motif of every pattern, one row per pattern, rounded to `f32`.
pub fn pattern_library(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..spec.patterns)
        .map(|_| {
            (0..spec.d_in)
                .map(|_| normal.sample(&mut rng) as f32 as f64)
                .collect()
        })
        .collect()
}

/// Events of one video as `(start, length, pattern)`, sorted by start.
fn place_events(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize)> {
    let count = rng.random_range(spec.min_events..=spec.max_events);
    let mut lengths: Vec<usize> = (0..count)
        .map(|_| rng.random_range(spec.min_event_len..=spec.max_event_len))
        .collect();
    // Shrink the longest event until everything fits; validation guarantees
    // this terminates at the minimum lengths.
    while lengths.iter().sum::<usize>() > spec.window {
        let i = (0..lengths.len())
            .max_by_key(|&i| (lengths[i], usize::MAX - i))
            .unwrap_or(0);
        if lengths[i] == spec.min_event_len {
            lengths.pop();
        } else {
            lengths[i] -= 1;
        }
    }
    let slack = spec.window - lengths.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..lengths.len()).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut events = Vec::with_capacity(lengths.len());
    let mut pos = 0;
    let mut prev_cut = 0;
    for (i, len) in lengths.iter().enumerate() {
        pos += cuts[i] - prev_cut;
        prev_cut = cuts[i];
        events.push((pos, *len, rng.random_range(0..spec.patterns)));
        pos += len;
    }
    events
}

/// Generates the dataset described by `spec`; identical specs give identical data.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Vec<VideoFeatures>> {
    spec.validate()?;
    let patterns = pattern_library(spec);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    let mut videos = Vec::with_capacity(spec.videos);
    let mut order: Vec<usize> = (0..spec.patterns).collect();
    for v in 0..spec.videos {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(2 + v as u64);
        let mut events = place_events(spec, &mut rng);
        // Cycle through a shuffled pattern order so every pattern appears.
        if v % spec.patterns == 0 {
            order.shuffle(&mut rng);
        }
        if let Some(first) = events.first_mut() {
            first.2 = order[v % spec.patterns];
        }
        let mut data = vec![0.0; spec.window * spec.d_in];
        for t in 0..spec.window {
            let motif = events
                .iter()
                .find(|(s, l, _)| *s <= t && t < s + l)
                .map(|(_, _, p)| &patterns[*p]);
            for j in 0..spec.d_in {
                let base = motif.map_or(0.0, |m| m[j]);
                let n = if spec.noise > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data[t * spec.d_in + j] = (base + n) as f32 as f64;
            }
        }
        let annotations = events
            .iter()
            .map(|&(s, l, p)| Annotation {
                start: s as f64,
                end: (s + l) as f64,
                words: caption_for(p),
            })
            .collect();
        videos.push(VideoFeatures::new(
            Tensor::new(vec![spec.window, spec.d_in], data)?,
            annotations,
        )?);
    }
    Ok(videos)
}
