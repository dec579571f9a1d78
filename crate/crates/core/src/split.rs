//! Scene-cut detection and keyframe selection over frame-feature streams.
//!
//! Frames are never decoded here. An external extractor produces a feature
//! file (one fixed-width vector per frame, components in `[0, 1]`) and this
//! module works purely on those vectors.

use std::fs;
use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{FrameRange, Interval};

pub const DEFAULT_THRESHOLD: f64 = 0.3;
pub const DEFAULT_MIN_SCENE_LEN: usize = 15;
pub const DEFAULT_KEYFRAMES: usize = 4;
const KMEANS_MAX_ITERS: usize = 20;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("feature file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("extractor failed: {0}")]
    Extractor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatureStream {
    pub video_id: String,
    pub fps: f64,
    pub features: Vec<Vec<f64>>,
}

impl FrameFeatureStream {
    pub fn new(
        video_id: impl Into<String>,
        fps: f64,
        features: Vec<Vec<f64>>,
    ) -> Result<Self, SplitError> {
        let stream = Self {
            video_id: video_id.into(),
            fps,
            features,
        };
        stream.check()?;
        Ok(stream)
    }

    fn check(&self) -> Result<(), SplitError> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(SplitError::Input(format!(
                "fps must be positive, got {}",
                self.fps
            )));
        }
        let Some(first) = self.features.first() else {
            return Err(SplitError::Input("empty feature stream".into()));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(SplitError::Input("feature width must be at least 1".into()));
        }
        for (i, f) in self.features.iter().enumerate() {
            if f.len() != dim {
                return Err(SplitError::Input(format!(
                    "frame {i} has width {}, expected {dim}",
                    f.len()
                )));
            }
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(SplitError::Input(format!(
                    "frame {i} has a component outside [0,1]"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn timestamp(&self, frame: usize) -> f64 {
        frame as f64 / self.fps
    }

    /// Parse the feature-file format: a `video_id,fps,dim,count` header line
    /// followed by `count` lines of `dim` comma-separated decimals.
    pub fn parse(text: &str) -> Result<Self, SplitError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(SplitError::Format {
            line: 1,
            message: "missing header".into(),
        })?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        let bad_header = |message: &str| SplitError::Format {
            line: 1,
            message: message.to_string(),
        };
        if fields.len() != 4 {
            return Err(bad_header("header must be video_id,fps,dim,count"));
        }
        let fps: f64 = fields[1]
            .parse()
            .map_err(|_| bad_header("fps is not a number"))?;
        let dim: usize = fields[2]
            .parse()
            .map_err(|_| bad_header("dim is not an integer"))?;
        let count: usize = fields[3]
            .parse()
            .map_err(|_| bad_header("count is not an integer"))?;
        let mut features = Vec::with_capacity(count);
        for (idx, line) in lines {
            let row: Result<Vec<f64>, _> =
                line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| SplitError::Format {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if row.len() != dim {
                return Err(SplitError::Format {
                    line: idx + 1,
                    message: format!("expected {dim} values, found {}", row.len()),
                });
            }
            features.push(row);
        }
        if features.len() != count {
            return Err(SplitError::Format {
                line: 1,
                message: format!(
                    "header announces {count} frames, file has {}",
                    features.len()
                ),
            });
        }
        Self::new(fields[0], fps, features)
    }

    pub fn read(path: &Path) -> Result<Self, SplitError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{},{},{},{}\n",
            self.video_id,
            self.fps,
            self.dim(),
            self.len()
        );
        for f in &self.features {
            let row: Vec<String> = f.iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutList {
    pub cut_indices: Vec<usize>,
    pub total_frames: usize,
}

impl CutList {
    /// `[0, c1), [c1, c2), ..., [ck, total)`.
    pub fn clip_ranges(&self) -> Vec<FrameRange> {
        let mut bounds = Vec::with_capacity(self.cut_indices.len() + 2);
        bounds.push(0);
        bounds.extend(&self.cut_indices);
        bounds.push(self.total_frames);
        bounds
            .windows(2)
            .map(|w| FrameRange {
                start: w[0],
                end: w[1],
            })
            .collect()
    }
}

/// Sum in ascending order, so reordering the terms cannot change the result.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Mean absolute difference between two equal-width vectors.
pub fn normalized_l1(a: &[f64], b: &[f64]) -> f64 {
    ordered_sum(a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect()) / a.len() as f64
}

/// Declare a cut at frame `i` when the content difference to frame `i - 1`
/// exceeds `threshold` and the previous cut (or the stream start) lies at
/// least `min_scene_len` frames back.
pub fn detect_cuts(
    stream: &FrameFeatureStream,
    threshold: f64,
    min_scene_len: usize,
) -> Result<CutList, SplitError> {
    stream.check()?;
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(SplitError::Input(format!(
            "threshold must be in (0,1], got {threshold}"
        )));
    }
    if min_scene_len < 1 {
        return Err(SplitError::Input("min_scene_len must be at least 1".into()));
    }
    let mut cuts = Vec::new();
    let mut last = 0usize;
    for i in 1..stream.len() {
        let d = normalized_l1(&stream.features[i - 1], &stream.features[i]);
        if d > threshold && i - last >= min_scene_len {
            cuts.push(i);
            last = i;
        }
    }
    Ok(CutList {
        cut_indices: cuts,
        total_frames: stream.len(),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    ordered_sum(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect())
}

/// Seeded k-means over one clip's frames. `offset` is the absolute index of
/// the clip's first frame; returned indices are absolute, ascending and
/// distinct, with `min(k, len)` entries.
pub fn select_keyframes(features: &[Vec<f64>], offset: usize, k: usize, seed: u64) -> Vec<usize> {
    let n = features.len();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut seeds = vec![rng.random_range(0..n)];
    while seeds.len() < k {
        let d2: Vec<f64> = (0..n)
            .map(|i| {
                seeds
                    .iter()
                    .map(|&c| sq_dist(&features[i], &features[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, d) in d2.iter().enumerate() {
                if *d <= 0.0 {
                    continue;
                }
                acc += d;
                chosen = Some(i);
                if acc > r {
                    break;
                }
            }
            chosen.expect("positive total implies a positive entry")
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !seeds.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        seeds.push(pick);
    }
    let mut centers: Vec<Vec<f64>> = seeds.iter().map(|&i| features[i].clone()).collect();

    let nearest = |point: &[f64], centers: &[Vec<f64>]| -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let d = sq_dist(point, center);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        best
    };

    let mut assignment: Vec<usize> = features.iter().map(|f| nearest(f, &centers)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let dim = features[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (f, &c) in features.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(f) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = features.iter().map(|f| nearest(f, &centers)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }

    let mut selected: Vec<usize> = Vec::with_capacity(k);
    for (c, center) in centers.iter().enumerate() {
        let members: Vec<usize> = (0..n)
            .filter(|&i| assignment[i] == c && !selected.contains(&i))
            .collect();
        let pool = if members.is_empty() {
            (0..n).filter(|i| !selected.contains(i)).collect()
        } else {
            members
        };
        let mut best: Option<(usize, f64)> = None;
        for i in pool {
            let d = sq_dist(&features[i], center);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            selected.push(i);
        }
    }
    let mut out: Vec<usize> = selected.into_iter().map(|i| i + offset).collect();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    pub threshold: f64,
    pub min_scene_len: usize,
    pub keyframes_per_clip: usize,
    pub seed: u64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            min_scene_len: DEFAULT_MIN_SCENE_LEN,
            keyframes_per_clip: DEFAULT_KEYFRAMES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub keyframe_id: String,
    pub frame_index: usize,
    pub timestamp: f64,
}

/// One clip of a split video together with its keyframes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub clip_id: String,
    pub frame_range: FrameRange,
    pub span: Interval,
    pub keyframes: Vec<Keyframe>,
}

pub fn clip_id(index: usize) -> String {
    format!("clip-{index:03}")
}

pub fn keyframe_id(clip_id: &str, frame: usize) -> String {
    format!("{clip_id}/f{frame:06}")
}

/// Cut the stream into clips and pick keyframes for each.
pub fn split_video(
    stream: &FrameFeatureStream,
    params: &SplitParams,
) -> Result<Vec<ClipPlan>, SplitError> {
    let cuts = detect_cuts(stream, params.threshold, params.min_scene_len)?;
    if params.keyframes_per_clip < 1 {
        return Err(SplitError::Input(
            "keyframes_per_clip must be at least 1".into(),
        ));
    }
    let plans = cuts
        .clip_ranges()
        .into_iter()
        .enumerate()
        .map(|(i, range)| {
            let id = clip_id(i);
            let clip_seed = params.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let keyframes = select_keyframes(
                &stream.features[range.start..range.end],
                range.start,
                params.keyframes_per_clip,
                clip_seed,
            )
            .into_iter()
            .map(|frame| Keyframe {
                keyframe_id: keyframe_id(&id, frame),
                frame_index: frame,
                timestamp: stream.timestamp(frame),
            })
            .collect();
            ClipPlan {
                clip_id: id,
                frame_range: range,
                span: Interval::new(stream.timestamp(range.start), stream.timestamp(range.end)),
                keyframes,
            }
        })
        .collect();
    Ok(plans)
}

/// Invoke `<cmd> <video_path> <out_feature_file>` and read the result.
pub fn run_extractor(
    command: &str,
    video: &Path,
    out: &Path,
) -> Result<FrameFeatureStream, SplitError> {
    let mut parts = command.split_whitespace();
    let program = parts
        .next()
        .ok_or_else(|| SplitError::Extractor("empty extractor command".into()))?;
    let status = Command::new(program)
        .args(parts)
        .arg(video)
        .arg(out)
        .status()
        .map_err(|e| SplitError::Extractor(format!("{program}: {e}")))?;
    if !status.success() {
        return Err(SplitError::Extractor(format!(
            "{program} exited with {status}"
        )));
    }
    FrameFeatureStream::read(out)
}
