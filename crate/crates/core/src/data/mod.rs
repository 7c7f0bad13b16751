//! Annotation schema, JSONL and feature-file IO, moment-retrieval corpus
//! filtering and the synthetic planted-segment generator.

mod mr;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub use mr::{
    filter_mr_corpus, load_mr_corpus, save_mr_corpus, DropReason, FilterOutcome, MRCorpusRecord,
};
pub use synth::{synth_dataset, SynthSpec};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::geometry::TemporalSegment;
use crate::model::VideoInput;
use crate::prompt::LabeledQuery;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Tad,
    Mr,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Tad => "tad",
            Task::Mr => "mr",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub segment: TemporalSegment,
    pub query: String,
    pub task: Task,
}

/// One untrimmed video with its per-frame features and annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    pub duration: f64,
    /// Features held in memory, `frames x input_dim`.
    pub features: Option<Matrix>,
    /// Feature file, relative paths resolve against the annotation file's directory.
    pub features_path: Option<PathBuf>,
    pub annotations: Vec<Annotation>,
}

impl VideoSample {
    pub fn validate(&self) -> Result<()> {
        if self.video_id.is_empty() {
            return Err(Error::InvalidInput("empty video_id".into()));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::InvalidInput(format!(
                "video {}: duration must be positive, got {}",
                self.video_id, self.duration
            )));
        }
        for (i, a) in self.annotations.iter().enumerate() {
            if a.segment.end() > self.duration {
                return Err(Error::InvalidInput(format!(
                    "video {}: annotation {i} ends at {} past the duration {}",
                    self.video_id,
                    a.segment.end(),
                    self.duration
                )));
            }
            if a.query.trim().is_empty() {
                return Err(Error::InvalidInput(format!("video {}: annotation {i} has an empty query", self.video_id)));
            }
        }
        Ok(())
    }

    /// Annotations grouped by query, in order of first appearance.
    pub fn labeled_queries(&self) -> Vec<LabeledQuery> {
        let mut out: Vec<LabeledQuery> = Vec::new();
        for a in &self.annotations {
            let query = a.query.trim();
            match out.iter_mut().find(|l| l.query == query) {
                Some(l) => l.segments.push(a.segment),
                None => out.push(LabeledQuery {
                    query: query.to_owned(),
                    segments: vec![a.segment],
                }),
            }
        }
        out
    }

    /// The sample's features, from memory or from its feature file.
    pub fn load_features(&self, base_dir: &Path) -> Result<Matrix> {
        if let Some(f) = &self.features {
            return Ok(f.clone());
        }
        let Some(rel) = &self.features_path else {
            return Err(Error::InvalidInput(format!("video {} has no features", self.video_id)));
        };
        read_features(&base_dir.join(rel))
    }

    pub fn video_input(&self, base_dir: &Path) -> Result<VideoInput> {
        VideoInput::new(self.load_features(base_dir)?, self.duration)
    }

    fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("schema_version".into(), SCHEMA_VERSION.into());
        obj.insert("video_id".into(), self.video_id.clone().into());
        obj.insert("duration".into(), self.duration.into());
        let anns = self
            .annotations
            .iter()
            .map(|a| {
                serde_json::json!({
                    "start": a.segment.start(),
                    "end": a.segment.end(),
                    "query": a.query,
                    "task": a.task.as_str(),
                })
            })
            .collect();
        obj.insert("annotations".into(), Value::Array(anns));
        if let Some(p) = &self.features_path {
            obj.insert("features_path".into(), p.to_string_lossy().into_owned().into());
        }
        if let Some(f) = &self.features {
            let rows = f.rows().into_iter().map(|r| r.iter().copied().collect::<Vec<f64>>().into()).collect();
            obj.insert("features".into(), Value::Array(rows));
        }
        Value::Object(obj)
    }
}

/// Samples together with the directory their feature paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<VideoSample>,
    pub base_dir: PathBuf,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Dataset {
            samples: load_annotations(path)?,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    /// A dataset whose samples carry their features in memory.
    pub fn in_memory(samples: Vec<VideoSample>) -> Self {
        Dataset {
            samples,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct annotation queries in order of first appearance, optionally
    /// restricted to one task.
    pub fn queries(&self, task: Option<Task>) -> Vec<String> {
        let mut seen = HashSet::new();
        self.samples
            .iter()
            .flat_map(|s| &s.annotations)
            .filter(|a| task.is_none_or(|t| a.task == t))
            .map(|a| a.query.trim().to_owned())
            .filter(|q| seen.insert(q.clone()))
            .collect()
    }

    pub fn has_task(&self, task: Task) -> bool {
        self.samples.iter().flat_map(|s| &s.annotations).any(|a| a.task == task)
    }
}

/// Field-aware validation of one JSONL record.
struct RecordParser<'a> {
    path: &'a Path,
    line: usize,
}

impl RecordParser<'_> {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Record {
            path: self.path.to_path_buf(),
            line: self.line,
            field: field.to_owned(),
            message: message.into(),
        }
    }

    fn number(&self, v: Option<&Value>, field: &str) -> Result<f64> {
        let v = v.ok_or_else(|| self.err(field, "missing"))?;
        v.as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| self.err(field, format!("expected a finite number, got {v}")))
    }

    fn string(&self, v: Option<&Value>, field: &str) -> Result<String> {
        let v = v.ok_or_else(|| self.err(field, "missing"))?;
        v.as_str()
            .map(str::to_owned)
            .ok_or_else(|| self.err(field, format!("expected a string, got {v}")))
    }

    fn check_keys(&self, obj: &Map<String, Value>, allowed: &[&str], prefix: &str) -> Result<()> {
        match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(self.err(&format!("{prefix}{k}"), "unknown field")),
            None => Ok(()),
        }
    }

    fn sample(&self, text: &str) -> Result<VideoSample> {
        let value: Value = serde_json::from_str(text).map_err(|e| self.err("<record>", e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| self.err("<record>", "expected a JSON object"))?;
        self.check_keys(
            obj,
            &["schema_version", "video_id", "duration", "annotations", "features_path", "features"],
            "",
        )?;

        let version = obj.get("schema_version").ok_or_else(|| self.err("schema_version", "missing"))?;
        if version.as_u64() != Some(SCHEMA_VERSION) {
            return Err(self.err("schema_version", format!("unsupported version {version}")));
        }
        let video_id = self.string(obj.get("video_id"), "video_id")?;
        if video_id.is_empty() {
            return Err(self.err("video_id", "empty"));
        }
        let duration = self.number(obj.get("duration"), "duration")?;
        if duration <= 0.0 {
            return Err(self.err("duration", format!("must be positive, got {duration}")));
        }

        let anns = obj
            .get("annotations")
            .ok_or_else(|| self.err("annotations", "missing"))?
            .as_array()
            .ok_or_else(|| self.err("annotations", "expected an array"))?;
        let mut annotations = Vec::with_capacity(anns.len());
        for (i, a) in anns.iter().enumerate() {
            let f = |name: &str| format!("annotations[{i}].{name}");
            let a = a.as_object().ok_or_else(|| self.err(&format!("annotations[{i}]"), "expected an object"))?;
            self.check_keys(a, &["start", "end", "query", "task"], &format!("annotations[{i}]."))?;
            let start = self.number(a.get("start"), &f("start"))?;
            let end = self.number(a.get("end"), &f("end"))?;
            let segment =
                TemporalSegment::within(start, end, duration).map_err(|e| self.err(&f("end"), e.to_string()))?;
            let query = self.string(a.get("query"), &f("query"))?;
            if query.trim().is_empty() {
                return Err(self.err(&f("query"), "empty"));
            }
            let task = match self.string(a.get("task"), &f("task"))?.as_str() {
                "tad" => Task::Tad,
                "mr" => Task::Mr,
                other => return Err(self.err(&f("task"), format!("unknown task tag {other:?}"))),
            };
            annotations.push(Annotation { segment, query, task });
        }

        let features_path = match obj.get("features_path") {
            None | Some(Value::Null) => None,
            v => Some(PathBuf::from(self.string(v, "features_path")?)),
        };
        let features = match obj.get("features") {
            None | Some(Value::Null) => None,
            Some(v) => Some(self.matrix(v)?),
        };
        Ok(VideoSample {
            video_id,
            duration,
            features,
            features_path,
            annotations,
        })
    }

    fn matrix(&self, v: &Value) -> Result<Matrix> {
        let rows = v.as_array().ok_or_else(|| self.err("features", "expected an array of rows"))?;
        let width = rows.first().and_then(Value::as_array).map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for (r, row) in rows.iter().enumerate() {
            let row = row
                .as_array()
                .filter(|row| row.len() == width)
                .ok_or_else(|| self.err(&format!("features[{r}]"), format!("expected {width} numbers")))?;
            for x in row {
                data.push(self.number(Some(x), &format!("features[{r}]"))?);
            }
        }
        Matrix::from_shape_vec((rows.len(), width), data).map_err(|e| self.err("features", e.to_string()))
    }
}

/// Reads an annotation JSONL file. Blank lines are skipped; video ids must be unique.
pub fn load_annotations(path: &Path) -> Result<Vec<VideoSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parser = RecordParser { path, line: i + 1 };
        let sample = parser.sample(&line)?;
        if !ids.insert(sample.video_id.clone()) {
            return Err(parser.err("video_id", format!("duplicate video id {:?}", sample.video_id)));
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn save_annotations(samples: &[VideoSample], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        s.validate()?;
        serde_json::to_writer(&mut out, &s.to_json())?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a feature file: `frames` and `dim` as little-endian `u32`, then
/// `frames * dim` little-endian `f32` values in row-major order.
pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::InvalidInput(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header".into()));
    }
    let frames = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + frames * dim * 4;
    if bytes.len() != expected {
        return Err(bad(format!(
            "header declares {frames}x{dim} but the file holds {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Matrix::from_shape_vec((frames, dim), data).expect("length checked above"))
}

/// Writes features as `f32`; values are rounded to single precision.
pub fn write_features(path: &Path, features: &Matrix) -> Result<()> {
    let (frames, dim) = features.dim();
    let mut out = Vec::with_capacity(8 + frames * dim * 4);
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for x in features.iter() {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Writes each sample's in-memory features to `<dir>/features/<video_id>.bin`,
/// pointing `features_path` at it, and saves the annotations to
/// `<dir>/annotations.jsonl`. Returns the annotation path.
pub fn save_dataset(samples: &[VideoSample], dir: &Path) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut stored = Vec::with_capacity(samples.len());
    for s in samples {
        let mut s = s.clone();
        if let Some(f) = s.features.take() {
            let rel = PathBuf::from("features").join(format!("{}.bin", s.video_id));
            write_features(&dir.join(&rel), &f)?;
            s.features_path = Some(rel);
        }
        stored.push(s);
    }
    let path = dir.join("annotations.jsonl");
    save_annotations(&stored, &path)?;
    Ok(path)
}
