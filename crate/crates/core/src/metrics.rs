//! Localization and captioning metrics.

use std::collections::BTreeMap;

/// Smoothing numerator for n-gram orders with no matches.
pub const BLEU_EPSILON: f64 = 1e-9;

pub const DENSE_TIOU_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

/// Half-open temporal segment in frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Self {
        Segment { start, end }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// Temporal intersection over union; 0 for disjoint or zero-length segments.
pub fn tiou(a: Segment, b: Segment) -> f64 {
    if a.length() <= 0.0 || b.length() <= 0.0 {
        return 0.0;
    }
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    inter / union
}

/// Fraction of `gt` hit at `threshold` by the first `n` proposals.
pub fn recall(proposals: &[Segment], gt: &[Segment], n: usize, threshold: f64) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let top = &proposals[..n.min(proposals.len())];
    let hit = gt
        .iter()
        .filter(|g| top.iter().any(|p| tiou(*p, **g) >= threshold))
        .count();
    hit as f64 / gt.len() as f64
}

/// Recall per video, averaged over videos that have ground truth and over
/// thresholds. Proposal lists must be sorted by descending score.
pub fn average_recall(proposals: &[Vec<Segment>], gt: &[Vec<Segment>], n: usize, thresholds: &[f64]) -> f64 {
    let videos: Vec<usize> = (0..gt.len()).filter(|&v| !gt[v].is_empty()).collect();
    if videos.is_empty() || thresholds.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &th in thresholds {
        for &v in &videos {
            let props = proposals.get(v).map(Vec::as_slice).unwrap_or(&[]);
            total += recall(props, &gt[v], n, th);
        }
    }
    total / (videos.len() * thresholds.len()) as f64
}

/// `(n, average recall at threshold)` for `n = 1..=max_n`.
pub fn recall_curve(
    proposals: &[Vec<Segment>],
    gt: &[Vec<Segment>],
    max_n: usize,
    threshold: f64,
) -> Vec<(usize, f64)> {
    (1..=max_n)
        .map(|n| (n, average_recall(proposals, gt, n, &[threshold])))
        .collect()
}

fn ngram_counts(words: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU with orders `1..=n`: geometric mean of clipped n-gram precisions
/// times the brevity penalty against the closest reference length.
/// Orders above one with no matches use precision `BLEU_EPSILON / max(total, 1)`.
pub fn bleu_n(candidate: &[String], references: &[Vec<String>], n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() || n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let cand = ngram_counts(candidate, order);
        let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, order) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let total: usize = cand.values().sum();
        let matched: usize = cand
            .iter()
            .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        if matched == 0 {
            if order == 1 {
                return 0.0;
            }
            log_sum += (BLEU_EPSILON / total.max(1) as f64).ln();
        } else {
            log_sum += (matched as f64 / total as f64).ln();
        }
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * (log_sum / n as f64).exp()
}

/// A segment with its caption words.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedSegment {
    pub segment: Segment,
    pub words: Vec<String>,
}

/// Dense captioning score: each proposal is scored with `metric` against the
/// caption of its highest-overlap ground truth segment when that overlap
/// reaches the threshold and 0 otherwise. Scores are averaged over all
/// proposals of all videos, then over thresholds.
pub fn dense_caption_score(
    results: &[Vec<CaptionedSegment>],
    gt: &[Vec<CaptionedSegment>],
    thresholds: &[f64],
    metric: impl Fn(&[String], &[Vec<String>]) -> f64,
) -> f64 {
    let count: usize = results.iter().map(Vec::len).sum();
    if count == 0 || thresholds.is_empty() {
        return 0.0;
    }
    let mut per_threshold = 0.0;
    for &th in thresholds {
        let mut sum = 0.0;
        for (v, props) in results.iter().enumerate() {
            let refs = gt.get(v).map(Vec::as_slice).unwrap_or(&[]);
            for p in props {
                let best = refs.iter().map(|g| (tiou(p.segment, g.segment), g)).fold(
                    None::<(f64, &CaptionedSegment)>,
                    |acc, (o, g)| match acc {
                        Some((bo, _)) if bo >= o => acc,
                        _ => Some((o, g)),
                    },
                );
                if let Some((o, g)) = best {
                    if o >= th {
                        sum += metric(&p.words, std::slice::from_ref(&g.words));
                    }
                }
            }
        }
        per_threshold += sum / count as f64;
    }
    per_threshold / thresholds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn tiou_examples() {
        assert!((tiou(Segment::new(0.0, 10.0), Segment::new(5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(tiou(Segment::new(2.0, 4.0), Segment::new(2.0, 4.0)), 1.0);
        assert_eq!(tiou(Segment::new(0.0, 1.0), Segment::new(3.0, 4.0)), 0.0);
        assert_eq!(tiou(Segment::new(3.0, 3.0), Segment::new(3.0, 3.0)), 0.0);
    }

    #[test]
    fn recall_bounds() {
        let gt = vec![vec![Segment::new(0.0, 5.0), Segment::new(10.0, 20.0)]];
        assert_eq!(average_recall(&gt, &gt, 10, &[0.5, 0.9]), 1.0);
        assert_eq!(average_recall(&[vec![]], &gt, 10, &[0.5]), 0.0);
    }

    #[test]
    fn bleu_examples() {
        assert!((bleu_n(&w("make whisk now"), &[w("make whisk now")], 3) - 1.0).abs() < 1e-12);
        assert_eq!(bleu_n(&w("x y"), &[w("a b")], 2), 0.0);
        assert_eq!(bleu_n(&[], &[w("a b")], 2), 0.0);
    }

    #[test]
    fn dense_score_is_zero_without_overlap() {
        let gt = vec![vec![CaptionedSegment {
            segment: Segment::new(0.0, 5.0),
            words: w("a b"),
        }]];
        let res = vec![vec![CaptionedSegment {
            segment: Segment::new(10.0, 15.0),
            words: w("a b"),
        }]];
        let s = dense_caption_score(&res, &gt, &DENSE_TIOU_THRESHOLDS, |c, r| bleu_n(c, r, 2));
        assert_eq!(s, 0.0);
    }
}
