use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Annotation, Task, VideoSample};
use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::geometry::TemporalSegment;

/// Recipe for a corpus of videos with planted, query-specific feature motifs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_videos: usize,
    /// Inclusive range of video durations in seconds.
    pub duration_range: [f64; 2],
    pub vocab: Vec<String>,
    pub motifs_per_query: usize,
    /// Standard deviation of the Gaussian noise added to every frame.
    pub noise: f64,
    pub feature_dim: usize,
    pub fps: f64,
    /// Inclusive range of planted segments per video.
    pub segments_per_video: [usize; 2],
    /// Inclusive range of planted segment lengths in frames.
    pub segment_frames: [usize; 2],
    pub task: Task,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_videos: 32,
            duration_range: [48.0, 96.0],
            vocab: [
                "long jump",
                "pole vault",
                "high jump",
                "shot put",
                "javelin throw",
                "hammer throw",
                "discus throw",
                "triple jump",
                "hurdles",
                "sprint",
            ]
            .map(String::from)
            .to_vec(),
            motifs_per_query: 1,
            noise: 0.5,
            feature_dim: 32,
            fps: 1.0,
            segments_per_video: [1, 4],
            segment_frames: [4, 24],
            task: Task::Tad,
        }
    }
}

/// Motif vectors behind a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Motifs {
    /// `1 x feature_dim` background motif.
    pub null: Matrix,
    /// Per vocabulary entry, `motifs_per_query x feature_dim`.
    pub queries: Vec<Matrix>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

/// Standard-normal draw rounded to single precision so feature files round-trip exactly.
fn normal32<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample::<f64, _>(StandardNormal) as f32 as f64
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("synthetic spec: {m}")));
        if self.vocab.is_empty() {
            return bad("vocab is empty".into());
        }
        let mut seen = HashSet::new();
        for q in &self.vocab {
            if q.trim().is_empty() || q.contains('.') || !seen.insert(q.trim()) {
                return bad(format!("vocab entry {q:?} is empty, contains '.', or repeats"));
            }
        }
        let [dmin, dmax] = self.duration_range;
        if !(dmin.is_finite() && dmax.is_finite() && dmin > 0.0 && dmin <= dmax) {
            return bad(format!("duration range [{dmin}, {dmax}] is degenerate"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) || !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("fps must be positive and noise nonnegative".into());
        }
        if self.feature_dim == 0 || self.motifs_per_query == 0 {
            return bad("feature_dim and motifs_per_query must be positive".into());
        }
        let [smin, smax] = self.segments_per_video;
        let [lmin, lmax] = self.segment_frames;
        if smin == 0 || smin > smax || lmin == 0 || lmin > lmax {
            return bad("segment count and length ranges must be positive and ordered".into());
        }
        if ((dmin * self.fps).round() as usize) < lmin {
            return bad(format!("the shortest video cannot hold a {lmin}-frame segment"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SynthSpec::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The motif table used by [`synth_dataset`] for this spec and seed.
    pub fn motifs(&self, seed: u64) -> Motifs {
        let mut rng = sub_rng(seed, u64::MAX);
        let d = self.feature_dim;
        Motifs {
            null: Matrix::from_shape_simple_fn((1, d), || normal32(&mut rng)),
            queries: (0..self.vocab.len())
                .map(|_| Matrix::from_shape_simple_fn((self.motifs_per_query, d), || normal32(&mut rng)))
                .collect(),
        }
    }
}

fn plant_segments<R: Rng + ?Sized>(spec: &SynthSpec, frames: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let wanted = rng.random_range(spec.segments_per_video[0]..=spec.segments_per_video[1]);
    let max_len = spec.segment_frames[1].min(frames);
    let mut placed: Vec<(usize, usize)> = Vec::new();
    for _ in 0..wanted * 50 {
        if placed.len() == wanted {
            break;
        }
        let len = rng.random_range(spec.segment_frames[0]..=max_len);
        let start = rng.random_range(0..=frames - len);
        let end = start + len;
        // keep at least one background frame between segments
        if placed.iter().all(|&(s, e)| end < s || start > e) {
            placed.push((start, end));
        }
    }
    placed.sort_unstable();
    placed
}

/// Generates `spec.num_videos` videos, each with one to four non-overlapping
/// planted segments. Frames inside a segment are a motif of its query plus
/// noise; all other frames are the null motif plus noise. Video `i` draws from
/// its own stream derived from `(seed, i)`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<VideoSample>> {
    spec.validate()?;
    let motifs = spec.motifs(seed);
    let d = spec.feature_dim;
    (0..spec.num_videos)
        .map(|i| {
            let mut rng = sub_rng(seed, i as u64);
            let seconds = rng.random_range(spec.duration_range[0]..=spec.duration_range[1]);
            let frames = ((seconds * spec.fps).round() as usize).max(spec.segment_frames[0]);
            let duration = frames as f64 / spec.fps;

            let mut features = Matrix::zeros((frames, d));
            for mut row in features.rows_mut() {
                row.assign(&motifs.null.row(0));
            }
            let mut annotations = Vec::new();
            for (start, end) in plant_segments(spec, frames, &mut rng) {
                let q = rng.random_range(0..spec.vocab.len());
                let m = rng.random_range(0..spec.motifs_per_query);
                for f in start..end {
                    features.row_mut(f).assign(&motifs.queries[q].row(m));
                }
                annotations.push(Annotation {
                    segment: TemporalSegment::within(start as f64 / spec.fps, end as f64 / spec.fps, duration)?,
                    query: spec.vocab[q].trim().to_owned(),
                    task: spec.task,
                });
            }
            if spec.noise > 0.0 {
                features.mapv_inplace(|x| (x + spec.noise * rng.sample::<f64, _>(StandardNormal)) as f32 as f64);
            }
            Ok(VideoSample {
                video_id: format!("synth_{i:05}"),
                duration,
                features: Some(features),
                features_path: None,
                annotations,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(noise: f64) -> SynthSpec {
        SynthSpec {
            num_videos: 8,
            duration_range: [20.0, 40.0],
            noise,
            feature_dim: 8,
            motifs_per_query: 2,
            ..SynthSpec::default()
        }
    }

    /// Label of every frame from the annotations: `None` for background.
    fn frame_labels(s: &VideoSample, spec: &SynthSpec) -> Vec<Option<usize>> {
        let frames = s.features.as_ref().unwrap().nrows();
        let mut labels = vec![None; frames];
        for a in &s.annotations {
            let q = spec.vocab.iter().position(|v| *v == a.query).unwrap();
            let lo = (a.segment.start() * spec.fps).round() as usize;
            let hi = (a.segment.end() * spec.fps).round() as usize;
            labels[lo..hi].iter_mut().for_each(|l| *l = Some(q));
        }
        labels
    }

    #[test]
    fn noise_free_frames_equal_motifs_and_nearest_motif_is_perfect() {
        let spec = small_spec(0.0);
        let motifs = spec.motifs(3);
        let data = synth_dataset(&spec, 3).unwrap();
        let mut candidates: Vec<(Option<usize>, Vec<f64>)> = vec![(None, motifs.null.row(0).to_vec())];
        for (q, m) in motifs.queries.iter().enumerate() {
            candidates.extend(m.rows().into_iter().map(|r| (Some(q), r.to_vec())));
        }
        for s in &data {
            let labels = frame_labels(s, &spec);
            for (f, row) in s.features.as_ref().unwrap().rows().into_iter().enumerate() {
                let dist = |c: &[f64]| row.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = candidates
                    .iter()
                    .min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1)))
                    .unwrap();
                assert_eq!(dist(&best.1), 0.0);
                assert_eq!(best.0, labels[f], "{} frame {f}", s.video_id);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = small_spec(0.3);
        let a = synth_dataset(&spec, 11).unwrap();
        let b = synth_dataset(&spec, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(&spec, 12).unwrap());
        let enc = |d: &[VideoSample]| d.iter().map(|s| s.to_json().to_string()).collect::<Vec<_>>();
        assert_eq!(enc(&a), enc(&b));
    }

    #[test]
    fn closure_contract() {
        let spec = SynthSpec::default();
        let data = synth_dataset(&spec, 0).unwrap();
        assert_eq!(data.len(), 32);
        for s in &data {
            s.validate().unwrap();
            assert!((1..=4).contains(&s.annotations.len()));
            for a in &s.annotations {
                assert!(spec.vocab.contains(&a.query));
            }
            for w in s.annotations.windows(2) {
                assert!(w[0].segment.end() < w[1].segment.start());
            }
            assert_eq!(s.features.as_ref().unwrap().nrows() as f64, s.duration * spec.fps);
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        let zero = SynthSpec {
            duration_range: [0.0, 0.0],
            ..SynthSpec::default()
        };
        assert!(synth_dataset(&zero, 0).is_err());
        let empty = SynthSpec {
            vocab: vec![],
            ..SynthSpec::default()
        };
        assert!(synth_dataset(&empty, 0).is_err());
    }

    #[test]
    fn spec_files_fill_defaults_and_reject_unknown_keys() {
        let spec = SynthSpec::from_toml("num_videos = 3\nnoise = 0.0\n").unwrap();
        assert_eq!(spec.num_videos, 3);
        assert_eq!(spec.vocab, SynthSpec::default().vocab);
        assert!(SynthSpec::from_toml("num_video = 3").is_err());
        assert!(SynthSpec::from_toml("fps = 0.0").is_err());
    }
}
