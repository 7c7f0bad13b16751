use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use owmd::data::{filter_mr_corpus, load_mr_corpus, read_features, save_dataset, save_mr_corpus, synth_dataset, Dataset, SynthSpec};
use owmd::harness::{self, artifact_paths, DetectionRecord, RunConfig, TrainOptions};
use owmd::model::{load_checkpoint, VideoInput};
use owmd::prompt::{chunk_eval_prompts, HashTokenizer, MAX_TEXT_TOKENS};

#[derive(Parser)]
#[command(name = "owmd", version, about = "Open-world moment detection with structured text prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the log and checkpoints into the output directory.
    Train {
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Annotation JSONL file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Annotation JSONL scored after every `--validate-every` epochs.
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        validate_every: usize,
    },
    /// Score a checkpoint on a dataset and write the report and detections.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Newline-delimited category list; defaults to the dataset's TAD queries.
        #[arg(long)]
        categories: Option<PathBuf>,
        /// JSON report path.
        #[arg(long)]
        report: PathBuf,
        /// Detection JSONL path; defaults to `<report>.detections.jsonl`.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// TOML run configuration whose evaluation settings override the
        /// checkpoint's; its model section must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Detect free-form queries in one feature file and print detection JSONL.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary feature file: frame count and width as u32 LE, then f32 LE values.
        #[arg(long)]
        features: PathBuf,
        #[arg(long = "query", required = true)]
        queries: Vec<String>,
        /// Frame rate used to derive the duration.
        #[arg(long, default_value_t = 1.0, conflicts_with = "duration")]
        fps: f64,
        /// Video duration in seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Pack a newline-delimited category file into evaluation prompts.
    BuildPrompts {
        #[arg(long)]
        categories: PathBuf,
        #[arg(long, default_value_t = 35)]
        chunk_size: usize,
        #[arg(long, default_value_t = MAX_TEXT_TOKENS)]
        max_tokens: usize,
        /// Output JSONL path; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Keep moment-retrieval records that pass the similarity and keyword checks.
    FilterMrData {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        sim_threshold: f64,
        /// Newline-delimited keywords.
        #[arg(long)]
        keywords_file: PathBuf,
    },
    /// Generate a synthetic dataset with planted segments.
    SynthData {
        /// TOML generator spec; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

fn run_train(config: Option<&Path>, data: &Path, out: &Path, validation: Option<&Path>, validate_every: usize) -> Result<()> {
    let config = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let dataset = Dataset::load(data)?;
    let validation = validation.map(Dataset::load).transpose()?;
    let outcome = harness::train(
        &config,
        &dataset,
        &TrainOptions {
            out_dir: Some(out),
            validation: validation.as_ref(),
            validate_every,
        },
    )?;
    let (log, final_ckpt, best_ckpt) = artifact_paths(out);
    let last = outcome.epoch_losses().last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} steps, final epoch loss {last:.6}, best epoch {}",
        outcome.steps, outcome.best_epoch
    );
    println!("log: {}", log.display());
    println!("checkpoints: {}, {}", final_ckpt.display(), best_ckpt.display());
    Ok(())
}

fn run_evaluate(
    checkpoint: &Path,
    data: &Path,
    categories: Option<&Path>,
    report_path: &Path,
    detections_path: Option<&Path>,
    config: Option<&Path>,
) -> Result<()> {
    let override_config = config.map(RunConfig::load).transpose()?;
    let (model, run_config) = load_checkpoint(checkpoint, override_config.as_ref().map(|c| &c.model))
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let config = match (override_config, &run_config) {
        (Some(c), _) => c,
        (None, Some(v)) => serde_json::from_value(v.clone()).context("checkpoint holds an unreadable run configuration")?,
        (None, None) => RunConfig {
            model: model.config().clone(),
            ..RunConfig::default()
        },
    };
    let dataset = Dataset::load(data)?;
    let categories = categories.map(read_lines).transpose()?;
    let mut output = harness::evaluate(&model, &dataset, categories.as_deref(), &config.eval)?;
    output.report.run_config = Some(config.to_json());

    let detections_path = detections_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| report_path.with_extension("detections.jsonl"));
    harness::write_report(report_path, &output.report)?;
    harness::write_detections(&detections_path, &output.detections)?;

    let report = &output.report;
    println!("{} videos, {} categories", report.num_videos, report.num_categories);
    if let Some(tad) = &report.tad {
        println!("{:>9}  {:>8}", "tIoU", "mAP");
        for t in &tad.per_threshold {
            println!("{:>9.2}  {:>8.4}", t.threshold, t.value);
        }
        println!("{:>9}  {:>8.4}", "average", tad.average);
    }
    if let Some(recall) = &report.mr_recall_at_1 {
        println!("{:>9}  {:>8}", "tIoU", "R@1");
        for t in recall {
            println!("{:>9.2}  {:>8.4}", t.threshold, t.value);
        }
    }
    println!("report: {}", report_path.display());
    println!("detections: {}", detections_path.display());
    Ok(())
}

fn run_detect(checkpoint: &Path, features: &Path, queries: &[String], fps: f64, duration: Option<f64>) -> Result<()> {
    let (model, run_config) = load_checkpoint(checkpoint, None)?;
    let eval = match run_config {
        Some(v) => serde_json::from_value::<RunConfig>(v).context("checkpoint holds an unreadable run configuration")?.eval,
        None => RunConfig::default().eval,
    };
    let matrix = read_features(features)?;
    if !(fps.is_finite() && fps > 0.0) {
        bail!("--fps must be positive, got {fps}");
    }
    let duration = duration.unwrap_or(matrix.nrows() as f64 / fps);
    let input = VideoInput::new(matrix, duration)?;
    let detections = harness::detect(&model, &input, queries, &eval)?;
    let video_id = features.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for d in &detections {
        let record = DetectionRecord {
            video_id: video_id.clone(),
            query_index: d.query_index,
            query: queries[d.query_index].trim().to_owned(),
            start: d.segment.start(),
            end: d.segment.end(),
            score: d.score,
        };
        serde_json::to_writer(&mut out, &record)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn run_build_prompts(categories: &Path, chunk_size: usize, max_tokens: usize, output: Option<&Path>) -> Result<()> {
    let queries = read_lines(categories)?;
    let tokenizer = HashTokenizer::default();
    let chunks = chunk_eval_prompts(&queries, &tokenizer, chunk_size, max_tokens)?;
    let mut text = Vec::new();
    for (chunk_index, p) in chunks.iter().enumerate() {
        let line = serde_json::json!({
            "chunk_index": chunk_index,
            "queries": p.queries(),
            "text": p.text(),
        });
        serde_json::to_writer(&mut text, &line)?;
        text.push(b'\n');
    }
    match output {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => io::stdout().write_all(&text)?,
    }
    Ok(())
}

fn run_filter(input: &Path, output: &Path, sim_threshold: f64, keywords_file: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&sim_threshold) {
        bail!("--sim-threshold must lie in [0, 1], got {sim_threshold}");
    }
    let keywords = read_lines(keywords_file)?;
    if keywords.is_empty() {
        bail!("{} holds no keywords", keywords_file.display());
    }
    let records = load_mr_corpus(input)?;
    let outcome = filter_mr_corpus(&records, sim_threshold, &keywords);
    save_mr_corpus(&outcome.kept, output)?;
    println!("read {}, kept {}", records.len(), outcome.kept.len());
    for (reason, count) in &outcome.dropped {
        let name = serde_json::to_value(reason)?;
        println!("dropped {}: {count}", name.as_str().unwrap_or_default());
    }
    Ok(())
}

fn run_synth(spec: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::default(),
    };
    let samples = synth_dataset(&spec, seed)?;
    let index = save_dataset(&samples, out)?;
    println!("{} videos written to {}", samples.len(), index.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            data,
            out,
            validation,
            validate_every,
        } => run_train(config.as_deref(), &data, &out, validation.as_deref(), validate_every),
        Command::Evaluate {
            checkpoint,
            data,
            categories,
            report,
            detections,
            config,
        } => run_evaluate(
            &checkpoint,
            &data,
            categories.as_deref(),
            &report,
            detections.as_deref(),
            config.as_deref(),
        ),
        Command::Detect {
            checkpoint,
            features,
            queries,
            fps,
            duration,
        } => run_detect(&checkpoint, &features, &queries, fps, duration),
        Command::BuildPrompts {
            categories,
            chunk_size,
            max_tokens,
            output,
        } => run_build_prompts(&categories, chunk_size, max_tokens, output.as_deref()),
        Command::FilterMrData {
            input,
            output,
            sim_threshold,
            keywords_file,
        } => run_filter(&input, &output, sim_threshold, &keywords_file),
        Command::SynthData { spec, seed, out } => run_synth(spec.as_deref(), seed, &out),
    }
}
