use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use spkret::codebook::{
    sample_frames, train_kmeans, Codebook, KMeansParams, DEFAULT_K, DEFAULT_MAX_ITERS,
    DEFAULT_PER_SEGMENT, DEFAULT_TOL,
};
use spkret::error::Error;
use spkret::eval::{evaluate, render_csv, render_table, EvalConfig};
use spkret::features::{
    extract_features, read_features, write_features, FeatureConfig, FrameMatrix, MfccExtractor,
    DEFAULT_DROP_DB,
};
use spkret::pipeline::{
    build_index, read_labels, retrieve, write_labels, ExternalQuery, Query, RetrievalIndex,
    RetrieveConfig,
};
use spkret::stats::{SoMetric, DEFAULT_LAMBDA, DEFAULT_RIDGE};
use spkret::synth::{generate, SynthSpec};
use spkret::vsm::{VsmMetric, DEFAULT_K1};
use spkret::wav::load_wav;

const FEATURE_EXT: &str = "ftr";

#[derive(Parser, Debug)]
#[command(name = "spkret", version, about = "Query-by-example speaker retrieval")]
struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute gated MFCC+delta features from 16 kHz mono WAV files.
    Extract(ExtractArgs),
    /// Train the k-means codebook on frames sampled from every segment.
    TrainCodebook(TrainArgs),
    /// Build the retrieval index from feature files and a codebook.
    BuildIndex(IndexArgs),
    /// Retrieve the closest segments for one query.
    Query(QueryArgs),
    /// Use every indexed segment as a query and report n-best accuracy.
    Evaluate(EvalArgs),
    /// Write a labeled synthetic corpus of feature files.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// WAV files or directories containing them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    /// Drop frames this many dB below the loudest frame.
    #[arg(long, default_value_t = DEFAULT_DROP_DB, value_parser = positive_f64)]
    drop_db: f64,
    /// Continue past files too short to frame.
    #[arg(long)]
    allow_skip: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of feature files.
    #[arg(long)]
    features: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K, value_parser = at_least_usize::<2>)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_PER_SEGMENT, value_parser = at_least_usize::<1>)]
    per_segment: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS, value_parser = at_least_usize::<1>)]
    max_iters: usize,
    #[arg(long, default_value_t = DEFAULT_TOL, value_parser = non_negative_f64)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    /// TSV of `segment_id<TAB>speaker_id`; needed later for evaluation.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    /// Continue past segments with fewer than two frames.
    #[arg(long)]
    allow_skip: bool,
}

#[derive(Args, Debug)]
struct MetricArgs {
    #[arg(long, default_value_t = DEFAULT_K1, value_parser = at_least_usize::<1>)]
    k1: usize,
    /// cosine, l2, bhat, intersect, a comma list, or all.
    #[arg(long, default_value = "intersect")]
    metric1: String,
    /// bic, ds, ahs, t2, a comma list, or all.
    #[arg(long, default_value = "bic")]
    metric2: String,
    /// Use the literal, degenerate sphericity expression wherever ahs is requested.
    #[arg(long)]
    ahs_literal: bool,
    #[arg(long, default_value_t = DEFAULT_LAMBDA, value_parser = positive_f64)]
    lambda: f64,
    /// Relative diagonal loading applied before every inversion.
    #[arg(long, default_value_t = DEFAULT_RIDGE, value_parser = non_negative_f64)]
    ridge: f64,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    /// Id of an indexed segment to use as the query.
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    id: Option<String>,
    /// Feature file of an outside query; needs --codebook.
    #[arg(long, requires = "codebook")]
    features: Option<PathBuf>,
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long, default_value_t = 5, value_parser = at_least_usize::<1>)]
    n: usize,
    #[command(flatten)]
    metrics: MetricArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    index: PathBuf,
    /// Cut-offs for n-best accuracy.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5", value_parser = at_least_usize::<1>)]
    n: Vec<usize>,
    #[command(flatten)]
    metrics: MetricArgs,
    /// Also time the unpruned second-order search.
    #[arg(long)]
    baseline: bool,
    /// Write comma-separated rows here as well.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 20, value_parser = at_least_usize::<1>)]
    speakers: usize,
    #[arg(long, default_value_t = 10, value_parser = at_least_usize::<1>)]
    segments: usize,
    #[arg(long, default_value_t = 150, value_parser = at_least_usize::<1>)]
    min_frames: usize,
    #[arg(long, default_value_t = 400, value_parser = at_least_usize::<1>)]
    max_frames: usize,
    #[arg(long, default_value_t = 26, value_parser = at_least_usize::<1>)]
    dim: usize,
    #[arg(long, default_value_t = 4.0, value_parser = positive_f64)]
    mean_spread: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    cov_scale: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a non-negative number, got {s:?}")),
    }
}

fn at_least_usize<const MIN: usize>(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= MIN => Ok(v),
        _ => Err(format!("expected an integer >= {MIN}, got {s:?}")),
    }
}

fn config_line(key: &str, value: impl Display) {
    println!("# {key}: {value}");
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

impl MetricArgs {
    fn metrics1(&self) -> Result<Vec<VsmMetric>> {
        if self.metric1 == "all" {
            return Ok(VsmMetric::ALL.to_vec());
        }
        self.metric1
            .split(',')
            .map(|s| s.trim().parse::<VsmMetric>().map_err(Into::into))
            .collect()
    }

    fn metrics2(&self) -> Result<Vec<SoMetric>> {
        let names: Vec<&str> = if self.metric2 == "all" {
            vec!["t2", "ds", "ahs", "bic"]
        } else {
            self.metric2.split(',').map(str::trim).collect()
        };
        names
            .into_iter()
            .map(|s| {
                Ok(match s.parse::<SoMetric>()? {
                    SoMetric::DeltaBic { .. } => SoMetric::bic(self.lambda)?,
                    SoMetric::Ahs if self.ahs_literal => SoMetric::AhsLiteral,
                    m => m,
                })
            })
            .collect()
    }

    fn print(&self, m1: &[VsmMetric], m2: &[SoMetric]) {
        config_line("k1", self.k1);
        config_line("metric1", join(m1, |m| m.name().to_string()));
        config_line("metric2", join(m2, |m| m.name().to_string()));
        config_line("lambda", self.lambda);
        config_line("ridge", self.ridge);
    }
}

/// Feature files in a directory, sorted by file name.
fn feature_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("cannot list {}", dir.display()))?;
    files.retain(|p| p.extension().is_some_and(|e| e == FEATURE_EXT));
    files.sort();
    if files.is_empty() {
        bail!("no .{FEATURE_EXT} files in {}", dir.display());
    }
    Ok(files)
}

fn load_segments(dir: &Path) -> Result<Vec<FrameMatrix>> {
    feature_files(dir)?
        .par_iter()
        .map(|p| read_features(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn wav_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("cannot list {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!("no WAV inputs found");
    }
    Ok(out)
}

fn segment_name(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .with_context(|| format!("cannot derive a segment id from {}", path.display()))
}

fn report_skips(skipped: &[(String, String)], allow: bool) -> Result<()> {
    if skipped.is_empty() {
        return Ok(());
    }
    if !allow {
        let (id, reason) = &skipped[0];
        bail!(
            "segment {id}: {reason} ({} segment(s) unusable; pass --allow-skip to continue without them)",
            skipped.len()
        );
    }
    for (id, reason) in skipped {
        eprintln!("warning: skipped {id}: {reason}");
    }
    eprintln!("warning: {} segment(s) skipped", skipped.len());
    Ok(())
}

fn run_extract(a: &ExtractArgs) -> Result<()> {
    config_line("command", "extract");
    config_line("drop_db", a.drop_db);
    config_line("output", a.output.display());
    let files = wav_inputs(&a.inputs)?;
    let ids = files.iter().map(|f| segment_name(f)).collect::<Result<Vec<_>>>()?;
    let mut seen = std::collections::HashSet::new();
    for id in &ids {
        if !seen.insert(id) {
            bail!("two input files map to segment id {id}");
        }
    }
    std::fs::create_dir_all(&a.output)
        .with_context(|| format!("cannot create {}", a.output.display()))?;
    let ex = MfccExtractor::new();
    let cfg = FeatureConfig { drop_db: a.drop_db };
    let results: Vec<Result<Option<(String, String)>>> = files
        .par_iter()
        .zip(&ids)
        .map(|(path, id)| {
            let buf = load_wav(path).with_context(|| format!("loading {}", path.display()))?;
            match extract_features(&ex, id, &buf, &cfg) {
                Ok(m) => {
                    let out = a.output.join(format!("{id}.{FEATURE_EXT}"));
                    write_features(&out, &m).with_context(|| format!("writing {}", out.display()))?;
                    Ok(None)
                }
                Err(e @ Error::TooShort { .. }) => Ok(Some((id.clone(), e.to_string()))),
                Err(e) => Err(anyhow::Error::new(e).context(format!("segment {id}"))),
            }
        })
        .collect();
    let mut skipped = Vec::new();
    for r in results {
        if let Some(s) = r? {
            skipped.push(s);
        }
    }
    println!("extracted {} of {} file(s)", files.len() - skipped.len(), files.len());
    report_skips(&skipped, a.allow_skip)
}

fn run_train(a: &TrainArgs) -> Result<()> {
    config_line("command", "train-codebook");
    config_line("k", a.k);
    config_line("per_segment", a.per_segment);
    config_line("max_iters", a.max_iters);
    config_line("tol", a.tol);
    config_line("seed", a.seed);
    let segments = load_segments(&a.features)?;
    let frames = sample_frames(&segments, a.per_segment, a.seed)?;
    println!("training on {} frames from {} segments", frames.len(), segments.len());
    let cb = train_kmeans(
        &frames,
        &KMeansParams {
            k: a.k,
            max_iters: a.max_iters,
            tol: a.tol,
            seed: a.seed,
        },
    )?;
    if let Some(meta) = &cb.train_meta {
        println!(
            "iterations: {}  converged: {}  inertia: {:.6e}",
            meta.iterations, meta.converged, meta.inertia
        );
    }
    cb.write(&a.output)
        .with_context(|| format!("writing {}", a.output.display()))?;
    Ok(())
}

fn run_index(a: &IndexArgs) -> Result<()> {
    config_line("command", "build-index");
    config_line("codebook", a.codebook.display());
    config_line(
        "labels",
        a.labels.as_ref().map_or("none".into(), |p| p.display().to_string()),
    );
    let cb = Codebook::read(&a.codebook)?;
    config_line("k", cb.k());
    config_line("codebook_seed", cb.train_seed);
    let labels = a.labels.as_ref().map(read_labels).transpose()?;
    let segments = load_segments(&a.features)?;
    let index = build_index(&segments, &cb, labels.as_ref())?;
    let skipped: Vec<_> = index
        .skipped
        .iter()
        .map(|s| (s.segment_id.clone(), s.reason.clone()))
        .collect();
    report_skips(&skipped, a.allow_skip)?;
    if let Some(path) = &a.labels {
        let unlabeled = index.records().iter().filter(|r| r.speaker.is_none()).count();
        if unlabeled > 0 {
            eprintln!("warning: {unlabeled} indexed segment(s) have no entry in {}", path.display());
        }
    }
    index
        .write(&a.output)
        .with_context(|| format!("writing {}", a.output.display()))?;
    println!("indexed {} segment(s), {:.1} s of frames", index.len(), index.total_duration());
    Ok(())
}

fn single<T: Copy>(items: Vec<T>, what: &str) -> Result<T> {
    match items.as_slice() {
        [one] => Ok(*one),
        _ => bail!("query takes exactly one {what}"),
    }
}

fn run_query(a: &QueryArgs) -> Result<()> {
    config_line("command", "query");
    let m1 = single(a.metrics.metrics1()?, "--metric1")?;
    let m2 = single(a.metrics.metrics2()?, "--metric2")?;
    a.metrics.print(&[m1], &[m2]);
    config_line("n", a.n);
    let index = RetrievalIndex::read(&a.index)?;
    let cfg = RetrieveConfig {
        k1: a.metrics.k1,
        metric1: m1,
        metric2: m2,
        n: a.n,
        ridge: a.metrics.ridge,
    };
    let external;
    let query = match (&a.id, &a.features) {
        (Some(id), _) => {
            config_line("query", id);
            Query::Id(id)
        }
        (None, Some(path)) => {
            config_line("query", path.display());
            let cb = Codebook::read(a.codebook.as_ref().expect("clap enforces --codebook"))?;
            let frames = read_features(path)?;
            external = ExternalQuery::from_frames(&frames, &cb)?;
            Query::External(&external)
        }
        (None, None) => unreachable!("clap enforces --id or --features"),
    };
    let r = retrieve(query, &index, &cfg)?;
    println!("{:>4}  {:<24} {:>16}  speaker", "rank", "segment", m2.name());
    for (i, c) in r.ranked.iter().enumerate() {
        let speaker = index
            .get(&c.segment_id)
            .and_then(|rec| rec.speaker.as_deref())
            .unwrap_or("-");
        let score = if c.flagged {
            "n/a".to_string()
        } else {
            format!("{:.6}", c.score)
        };
        println!("{:>4}  {:<24} {:>16}  {speaker}", i + 1, c.segment_id, score);
    }
    Ok(())
}

fn run_evaluate(a: &EvalArgs) -> Result<()> {
    config_line("command", "evaluate");
    let metrics1 = a.metrics.metrics1()?;
    let metrics2 = a.metrics.metrics2()?;
    a.metrics.print(&metrics1, &metrics2);
    config_line("n", join(&a.n, |n| n.to_string()));
    config_line("baseline", a.baseline);
    let index = RetrievalIndex::read(&a.index)?;
    let cfg = EvalConfig {
        k1: a.metrics.k1,
        metrics1,
        metrics2,
        ns: a.n.clone(),
        ridge: a.metrics.ridge,
        baseline: a.baseline,
    };
    let report = evaluate(&index, &cfg)?;
    print!("{}", render_table(&report));
    if let Some(path) = &a.csv {
        std::fs::write(path, render_csv(&report))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    config_line("command", "synth");
    let spec = SynthSpec {
        num_speakers: a.speakers,
        segments_per_speaker: a.segments,
        frames: (a.min_frames, a.max_frames),
        dim: a.dim,
        mean_spread: a.mean_spread,
        cov_scale: a.cov_scale,
        seed: a.seed,
    };
    config_line("spec", format!("{spec:?}"));
    let corpus = generate(&spec)?;
    std::fs::create_dir_all(&a.output)
        .with_context(|| format!("cannot create {}", a.output.display()))?;
    corpus.segments.par_iter().try_for_each(|seg| {
        let path = a.output.join(format!("{}.{FEATURE_EXT}", seg.segment_id));
        write_features(&path, seg).with_context(|| format!("writing {}", path.display()))
    })?;
    write_labels(a.output.join("labels.tsv"), &corpus.labels)?;
    println!(
        "wrote {} segments from {} speakers (min separation {:.2} std)",
        corpus.segments.len(),
        corpus.speakers.len(),
        corpus.min_separation()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .context("cannot size the thread pool")?;
    }
    config_line("threads", rayon::current_num_threads());
    match &cli.command {
        Command::Extract(a) => run_extract(a),
        Command::TrainCodebook(a) => run_train(a),
        Command::BuildIndex(a) => run_index(a),
        Command::Query(a) => run_query(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Synth(a) => run_synth(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
