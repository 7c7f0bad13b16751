//! Structured prompts: `"query_1. query_2. ... . query_n."` with per-query
//! token spans, training-time negative sampling, and evaluation chunking.

mod tokenizer;

use std::collections::HashSet;
use std::ops::Range;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::TemporalSegment;

pub use tokenizer::{HashTokenizer, Tokenized, Tokenizer, PAD_ID, SEP_ID};

/// Token budget of the text encoder.
pub const MAX_TEXT_TOKENS: usize = 512;
/// Queries per prompt during training.
pub const TRAIN_QUERY_CAP: usize = 35;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuredPrompt {
    queries: Vec<String>,
    text: String,
    token_ids: Vec<u32>,
    #[serde(skip)]
    query_spans: Vec<Range<usize>>,
    #[serde(skip)]
    positions: Vec<usize>,
}

impl StructuredPrompt {
    pub fn queries(&self) -> &[String] {
        &self.queries
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    /// Token range of each query, separators excluded.
    pub fn query_spans(&self) -> &[Range<usize>] {
        &self.query_spans
    }

    /// Position of every token within its own query. The separator closing a
    /// query takes the position after the query's last token.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.token_ids.len()
    }

    /// Splits the rendered text back into queries.
    pub fn parse_text(text: &str) -> Vec<String> {
        text.split('.')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .collect()
    }
}

fn validate_query(query: &str) -> Result<&str> {
    let q = query.trim();
    if q.is_empty() {
        return Err(Error::InvalidInput("empty query".into()));
    }
    if q.contains('.') {
        return Err(Error::InvalidInput(format!(
            "query {q:?} contains the '.' separator"
        )));
    }
    Ok(q)
}

pub fn build_prompt<S: AsRef<str>>(queries: &[S], tokenizer: &dyn Tokenizer) -> Result<StructuredPrompt> {
    build_prompt_with_budget(queries, tokenizer, MAX_TEXT_TOKENS)
}

pub fn build_prompt_with_budget<S: AsRef<str>>(
    queries: &[S],
    tokenizer: &dyn Tokenizer,
    max_tokens: usize,
) -> Result<StructuredPrompt> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("prompt needs at least one query".into()));
    }
    let mut cleaned = Vec::with_capacity(queries.len());
    let mut seen = HashSet::new();
    for q in queries {
        let q = validate_query(q.as_ref())?;
        if !seen.insert(q) {
            return Err(Error::InvalidInput(format!("duplicate query {q:?}")));
        }
        cleaned.push(q.to_owned());
    }

    let mut text = String::new();
    let mut char_ranges = Vec::with_capacity(cleaned.len());
    for (i, q) in cleaned.iter().enumerate() {
        if i > 0 {
            text.push(' ');
        }
        let start = text.len();
        text.push_str(q);
        char_ranges.push(start..text.len());
        text.push('.');
    }

    let tokens = tokenizer.tokenize(&text);
    let sep = tokenizer.separator_id();
    let mut query_spans = Vec::with_capacity(cleaned.len());
    let mut positions = vec![0; tokens.len()];
    let mut cursor = 0;
    for (qi, range) in char_ranges.iter().enumerate() {
        let begin = cursor;
        while cursor < tokens.len() && tokens.offsets[cursor].0 < range.end {
            positions[cursor] = cursor - begin;
            cursor += 1;
        }
        let span = begin..cursor;
        if span.is_empty() || tokens.ids[span.clone()].contains(&sep) {
            return Err(Error::InvalidInput(format!(
                "query {:?} produced no usable tokens",
                cleaned[qi]
            )));
        }
        // closing separator
        if cursor >= tokens.len() || tokens.ids[cursor] != sep {
            return Err(Error::InvalidInput(format!(
                "tokenizer did not emit a separator after query {:?}",
                cleaned[qi]
            )));
        }
        positions[cursor] = cursor - begin;
        cursor += 1;
        if cursor > max_tokens {
            return Err(Error::TokenBudget {
                budget: max_tokens,
                tokens: cursor,
                index: qi,
                query: cleaned[qi].clone(),
            });
        }
        query_spans.push(span);
    }

    Ok(StructuredPrompt {
        queries: cleaned,
        text,
        token_ids: tokens.ids,
        query_spans,
        positions,
    })
}

/// Training-time association of each prompt query with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryLabel {
    Positive(Vec<TemporalSegment>),
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptLabelMap {
    pub labels: Vec<QueryLabel>,
}

impl PromptLabelMap {
    /// Every ground-truth segment paired with the index of the query it labels.
    pub fn ground_truths(&self) -> Vec<(TemporalSegment, usize)> {
        self.labels
            .iter()
            .enumerate()
            .flat_map(|(qi, label)| match label {
                QueryLabel::Positive(segs) => segs.iter().map(|&s| (s, qi)).collect(),
                QueryLabel::Negative => Vec::new(),
            })
            .collect()
    }

    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, QueryLabel::Positive(_)))
            .count()
    }
}

/// A positive query and the segments it describes in one video.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledQuery {
    pub query: String,
    pub segments: Vec<TemporalSegment>,
}

/// Keeps every positive, tops the prompt up to `cap` with negatives drawn
/// uniformly without replacement, then shuffles.
pub fn sample_training_prompt<R: Rng + ?Sized>(
    positives: &[LabeledQuery],
    negative_pool: &[String],
    cap: usize,
    tokenizer: &dyn Tokenizer,
    rng: &mut R,
) -> Result<(StructuredPrompt, PromptLabelMap)> {
    if positives.len() > cap {
        return Err(Error::InvalidInput(format!(
            "{} positive queries exceed the prompt cap of {cap}",
            positives.len()
        )));
    }
    let wanted = (cap - positives.len()).min(negative_pool.len());
    let drawn = index::sample(rng, negative_pool.len(), wanted);

    let mut entries: Vec<(&str, QueryLabel)> = positives
        .iter()
        .map(|p| (p.query.trim(), QueryLabel::Positive(p.segments.clone())))
        .collect();
    entries.extend(drawn.iter().map(|i| (negative_pool[i].trim(), QueryLabel::Negative)));

    let mut seen = HashSet::new();
    for (q, _) in &entries {
        if !seen.insert(*q) {
            return Err(Error::InvalidInput(format!(
                "query {q:?} appears more than once after merging positives and negatives"
            )));
        }
    }

    entries.shuffle(rng);
    let queries: Vec<&str> = entries.iter().map(|(q, _)| *q).collect();
    let prompt = build_prompt(&queries, tokenizer)?;
    let labels = PromptLabelMap {
        labels: entries.into_iter().map(|(_, l)| l).collect(),
    };
    Ok((prompt, labels))
}

/// Greedy in-order packing of categories into prompts that respect both the
/// query and token budgets.
pub fn chunk_eval_prompts<S: AsRef<str>>(
    categories: &[S],
    tokenizer: &dyn Tokenizer,
    max_queries: usize,
    max_tokens: usize,
) -> Result<Vec<StructuredPrompt>> {
    if categories.is_empty() {
        return Err(Error::InvalidInput("no categories to evaluate".into()));
    }
    if max_queries == 0 {
        return Err(Error::InvalidInput("max_queries must be positive".into()));
    }

    let mut chunks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut current_tokens = 0;
    for (i, cat) in categories.iter().enumerate() {
        let cat = validate_query(cat.as_ref())?;
        // query tokens plus its separator
        let cost = tokenizer.tokenize(&format!("{cat}.")).len();
        if cost > max_tokens {
            return Err(Error::TokenBudget {
                budget: max_tokens,
                tokens: cost,
                index: i,
                query: cat.to_owned(),
            });
        }
        if !current.is_empty() && (current.len() == max_queries || current_tokens + cost > max_tokens) {
            chunks.push(build_prompt_with_budget(&current, tokenizer, max_tokens)?);
            current.clear();
            current_tokens = 0;
        }
        current.push(cat);
        current_tokens += cost;
    }
    chunks.push(build_prompt_with_budget(&current, tokenizer, max_tokens)?);
    Ok(chunks)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tok() -> HashTokenizer {
        HashTokenizer::default()
    }

    #[test]
    fn renders_period_separated_text() {
        let p = build_prompt(&["long jump", "high jump"], &tok()).unwrap();
        assert_eq!(p.text(), "long jump. high jump.");
        assert_eq!(p.query_spans(), &[0..2, 3..5]);
        assert_eq!(p.positions(), &[0, 1, 2, 0, 1, 2]);
        assert_eq!(StructuredPrompt::parse_text(p.text()), p.queries());
    }

    #[test]
    fn single_query_span() {
        let p = build_prompt(&["x"], &tok()).unwrap();
        assert_eq!(p.num_queries(), 1);
        assert_eq!(p.query_spans(), &[0..1]);
        assert_eq!(p.num_tokens(), 2);
    }

    #[test]
    fn rejects_bad_queries() {
        assert!(build_prompt(&["ok", "  "], &tok()).is_err());
        assert!(build_prompt(&["a.b"], &tok()).is_err());
        assert!(build_prompt(&["same", "same"], &tok()).is_err());
        assert!(build_prompt::<&str>(&[], &tok()).is_err());
    }

    #[test]
    fn budget_error_names_first_offender() {
        let queries: Vec<String> = (0..100)
            .map(|i| format!("query number {i} with quite a few extra words"))
            .collect();
        match build_prompt(&queries, &tok()) {
            Err(Error::TokenBudget { index, query, .. }) => {
                // each query is 9 tokens + separator
                assert_eq!(index, 51);
                assert_eq!(query, queries[51]);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    fn positives(names: &[&str]) -> Vec<LabeledQuery> {
        names
            .iter()
            .map(|n| LabeledQuery {
                query: n.to_string(),
                segments: vec![TemporalSegment::new(1.0, 2.0).unwrap()],
            })
            .collect()
    }

    #[test]
    fn training_prompt_fills_to_cap() {
        let pool: Vec<String> = (0..100).map(|i| format!("negative {i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (prompt, labels) =
            sample_training_prompt(&positives(&["a", "b"]), &pool, 35, &tok(), &mut rng).unwrap();
        assert_eq!(prompt.num_queries(), 35);
        assert_eq!(labels.num_positive(), 2);
        assert_eq!(labels.ground_truths().len(), 2);
        let mut again = ChaCha8Rng::seed_from_u64(7);
        let (p2, l2) =
            sample_training_prompt(&positives(&["a", "b"]), &pool, 35, &tok(), &mut again).unwrap();
        assert_eq!(prompt, p2);
        assert_eq!(labels, l2);
    }

    #[test]
    fn training_prompt_saturated_cap_still_shuffles() {
        let names: Vec<String> = (0..35).map(|i| format!("pos {i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let pool = vec!["unused".to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (prompt, labels) =
            sample_training_prompt(&positives(&refs), &pool, 35, &tok(), &mut rng).unwrap();
        assert_eq!(labels.num_positive(), 35);
        assert_ne!(prompt.queries(), names.as_slice());
    }

    #[test]
    fn training_prompt_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = vec!["a".to_string()];
        assert!(sample_training_prompt(&positives(&["a"]), &pool, 35, &tok(), &mut rng).is_err());
        assert!(sample_training_prompt(&positives(&["a", "b"]), &[], 1, &tok(), &mut rng).is_err());
    }

    #[test]
    fn chunking_activitynet_sized_list() {
        let cats: Vec<String> = (0..200).map(|i| format!("category {i}")).collect();
        let chunks = chunk_eval_prompts(&cats, &tok(), 35, 512).unwrap();
        let sizes: Vec<usize> = chunks.iter().map(|c| c.num_queries()).collect();
        assert_eq!(sizes, vec![35, 35, 35, 35, 35, 25]);
        let flat: Vec<String> = chunks.iter().flat_map(|c| c.queries().to_vec()).collect();
        assert_eq!(flat, cats);
    }

    #[test]
    fn chunking_respects_token_budget() {
        let cats: Vec<String> = (0..10).map(|i| format!("w{i} w w w")).collect();
        // 5 tokens per category with separator
        let chunks = chunk_eval_prompts(&cats, &tok(), 35, 12).unwrap();
        assert!(chunks.iter().all(|c| c.num_tokens() <= 12 && c.num_queries() == 2));
        assert!(chunk_eval_prompts(&["a b c d e f"], &tok(), 35, 4).is_err());
        assert_eq!(chunk_eval_prompts(&["one"], &tok(), 35, 512).unwrap().len(), 1);
    }
}
