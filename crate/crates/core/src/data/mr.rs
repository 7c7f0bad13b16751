use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TemporalSegment;

/// A captioned moment with a precomputed video-caption similarity score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord", into = "RawRecord")]
pub struct MRCorpusRecord {
    pub video_id: String,
    pub segment: TemporalSegment,
    pub caption: String,
    similarity: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    video_id: String,
    start: f64,
    end: f64,
    caption: String,
    similarity: f64,
}

impl TryFrom<RawRecord> for MRCorpusRecord {
    type Error = Error;

    fn try_from(r: RawRecord) -> Result<Self> {
        MRCorpusRecord::new(r.video_id, TemporalSegment::new(r.start, r.end)?, r.caption, r.similarity)
    }
}

impl From<MRCorpusRecord> for RawRecord {
    fn from(r: MRCorpusRecord) -> Self {
        RawRecord {
            video_id: r.video_id,
            start: r.segment.start(),
            end: r.segment.end(),
            caption: r.caption,
            similarity: r.similarity,
        }
    }
}

impl MRCorpusRecord {
    pub fn new(video_id: impl Into<String>, segment: TemporalSegment, caption: impl Into<String>, similarity: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&similarity) {
            return Err(Error::InvalidInput(format!("similarity {similarity} outside [0, 1]")));
        }
        Ok(MRCorpusRecord {
            video_id: video_id.into(),
            segment,
            caption: caption.into(),
            similarity,
        })
    }

    pub fn similarity(&self) -> f64 {
        self.similarity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    LowSimilarity,
    NoKeyword,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<MRCorpusRecord>,
    /// A record failing both checks is counted under [`DropReason::LowSimilarity`].
    pub dropped: BTreeMap<DropReason, usize>,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Keeps records whose similarity is at least `sim_threshold` and whose
/// caption contains one of `keywords` as a whole-word, case-insensitive match.
/// Multi-word keywords must appear as a contiguous word sequence.
pub fn filter_mr_corpus<S: AsRef<str>>(records: &[MRCorpusRecord], sim_threshold: f64, keywords: &[S]) -> FilterOutcome {
    let keywords: Vec<Vec<String>> = keywords.iter().map(|k| words(k.as_ref())).filter(|k| !k.is_empty()).collect();
    let singles: HashSet<&str> = keywords.iter().filter(|k| k.len() == 1).map(|k| k[0].as_str()).collect();
    let phrases: Vec<&Vec<String>> = keywords.iter().filter(|k| k.len() > 1).collect();

    let mut kept = Vec::new();
    let mut dropped = BTreeMap::from([(DropReason::LowSimilarity, 0), (DropReason::NoKeyword, 0)]);
    for r in records {
        let reason = if r.similarity < sim_threshold {
            Some(DropReason::LowSimilarity)
        } else {
            let cw = words(&r.caption);
            let hit = cw.iter().any(|w| singles.contains(w.as_str()))
                || phrases.iter().any(|p| cw.windows(p.len()).any(|win| win == p.as_slice()));
            (!hit).then_some(DropReason::NoKeyword)
        };
        match reason {
            Some(reason) => *dropped.entry(reason).or_default() += 1,
            None => kept.push(r.clone()),
        }
    }
    FilterOutcome { kept, dropped }
}

pub fn load_mr_corpus(path: &Path) -> Result<Vec<MRCorpusRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            field: "<record>".into(),
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn save_mr_corpus(records: &[MRCorpusRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
