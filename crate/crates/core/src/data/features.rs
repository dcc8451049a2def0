//! Binary feature files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MEVC"  u32 version  u32 T  u32 d_in
//! T * d_in f32 frame values, row-major
//! u32 annotation byte count, then UTF-8 lines "start end<TAB>word word .."
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{Annotation, VideoFeatures};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MEVC";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "mevc";

/// Serializes a video. Frame values are stored as `f32`.
pub fn encode_features(video: &VideoFeatures) -> Vec<u8> {
    let (t, d) = (video.frames.rows(), video.frames.cols());
    let mut out = Vec::with_capacity(16 + 4 * t * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in video.frames.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let text: String = video
        .annotations
        .iter()
        .map(|a| format!("{} {}\t{}\n", a.start, a.end, a.words.join(" ")))
        .collect();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<VideoFeatures> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::parse(0, "bad magic, not a feature file"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let t = r.u32("frame count")? as usize;
    let d = r.u32("feature width")? as usize;
    if t == 0 || d == 0 {
        return Err(Error::parse(8, format!("empty frame matrix {t}x{d}")));
    }
    let raw = r.take(
        t.checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::parse(8, "frame matrix size overflows"))?,
        "frame values",
    )?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let len = r.u32("annotation length")? as usize;
    let text_at = r.pos;
    let text = std::str::from_utf8(r.take(len, "annotations")?)
        .map_err(|e| Error::parse(text_at + e.valid_up_to(), "annotations are not UTF-8"))?;
    if r.pos != bytes.len() {
        return Err(Error::parse(r.pos, "trailing bytes after annotations"));
    }
    let mut annotations = Vec::new();
    let mut offset = text_at;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches('\n');
        if !body.trim().is_empty() {
            annotations.push(parse_annotation(body, offset)?);
        }
        offset += line.len();
    }
    VideoFeatures::new(Tensor::new(vec![t, d], data)?, annotations)
}

fn parse_annotation(line: &str, offset: usize) -> Result<Annotation> {
    let (span, caption) = line
        .split_once('\t')
        .ok_or_else(|| Error::parse(offset, "annotation line lacks a tab"))?;
    let mut nums = span.split_whitespace().map(|s| {
        s.parse::<f64>()
            .map_err(|_| Error::parse(offset, format!("bad segment boundary {s:?}")))
    });
    let (Some(start), Some(end), None) = (nums.next(), nums.next(), nums.next()) else {
        return Err(Error::parse(offset, "segment needs exactly two boundaries"));
    };
    Ok(Annotation {
        start: start?,
        end: end?,
        words: caption.split_whitespace().map(String::from).collect(),
    })
}

pub fn write_features(path: &Path, video: &VideoFeatures) -> Result<()> {
    fs::write(path, encode_features(video))?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<VideoFeatures> {
    decode_features(&fs::read(path)?)
}

/// Writes `video_000.mevc`, `video_001.mevc`, .. into `dir`.
pub fn write_dataset(dir: &Path, videos: &[VideoFeatures]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    videos
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let path = dir.join(format!("video_{i:03}.{EXTENSION}"));
            write_features(&path, v)?;
            Ok(path)
        })
        .collect()
}

/// Loads every feature file of `dir` in file-name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<VideoFeatures>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == EXTENSION));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Validation(format!(
            "no .{EXTENSION} files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_features(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VideoFeatures {
        let data: Vec<f64> = (0..12).map(|i| (i as f32 * 0.37 - 1.1) as f64).collect();
        VideoFeatures::new(
            Tensor::new(vec![4, 3], data).unwrap(),
            vec![
                Annotation {
                    start: 0.0,
                    end: 2.0,
                    words: vec!["make".into(), "pour".into(), "now".into()],
                },
                Annotation {
                    start: 2.5,
                    end: 4.0,
                    words: vec![],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let v = sample();
        let bytes = encode_features(&v);
        assert_eq!(decode_features(&bytes).unwrap(), v);
        assert_eq!(encode_features(&decode_features(&bytes).unwrap()), bytes);
    }

    #[test]
    fn every_truncation_is_a_parse_error() {
        let bytes = encode_features(&sample());
        for n in 0..bytes.len() {
            match decode_features(&bytes[..n]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= n),
                other => panic!("prefix of {n} bytes gave {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_features(&sample());
        bytes[0] = b'X';
        assert!(matches!(
            decode_features(&bytes),
            Err(Error::Parse { offset: 0, .. })
        ));
        let mut bytes = encode_features(&sample());
        bytes[4] = 9;
        assert!(matches!(
            decode_features(&bytes),
            Err(Error::Parse { offset: 4, .. })
        ));
    }

    #[test]
    fn segment_past_end_is_validation_error() {
        let mut v = sample();
        v.annotations[0].end = 5.0;
        assert!(matches!(
            decode_features(&encode_features(&v)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vids = vec![sample(), sample()];
        write_dataset(dir.path(), &vids).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), vids);
    }
}
