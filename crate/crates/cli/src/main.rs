//! Command-line front end: data generation, training, evaluation,
//! prediction, and ablation sweeps.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 1 anything else. All commands are deterministic for a fixed
//! (config, seed); reports contain no timestamps so reruns are
//! byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use geotweet::corpus::{
    self, load_corpus, save_corpus_jsonl, synthetic_regions, Corpus, CorpusFormat, Splits,
    SyntheticSpec,
};
use geotweet::embed::{load_embeddings, EmbeddingTable};
use geotweet::geo::{export_geojson, export_regions, RegionKind};
use geotweet::models::{self, Metrics, ModelConfig, Task, TrainedModel, Variant};
use geotweet::Error;

#[derive(Parser)]
#[command(name = "geotweet", about = "Tweet geolocation pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its region polygons.
    GenData(GenDataArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Predict locations for unlabeled tweets.
    Predict(PredictArgs),
    /// Sweep one augmentation parameter and record validation metrics.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// TOML file with the synthetic corpus spec.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with [data] and [model] sections.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the model seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Jsonl)]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL input; coordinates and labels may be absent.
    #[arg(long)]
    input: PathBuf,
    /// Output predictions JSONL path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    study: Study,
    /// Comma-separated parameter values (ignored for
    /// cluster-embedding, which always compares with/without).
    #[arg(long, default_value = "")]
    grid: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    Csv,
}

impl From<FormatArg> for CorpusFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Jsonl => CorpusFormat::Jsonl,
            FormatArg::Csv => CorpusFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    UserDictFrac,
    TimeWindow,
    NumClusters,
    ClusterEmbedding,
}

// -- config files ----------------------------------------------------------

#[derive(Debug, Deserialize)]
struct TrainFile {
    data: DataSection,
    model: ModelConfig,
}

#[derive(Debug, Deserialize)]
struct DataSection {
    corpus: String,
    #[serde(default)]
    format: Option<String>,
    #[serde(default = "default_ratios")]
    ratios: [f64; 3],
    /// Stratify the split by the task's label field.
    #[serde(default)]
    stratify: bool,
    /// Sample-factor oversampling of the training split.
    #[serde(default)]
    oversample: Option<f64>,
    /// Balance the validation split to equal class counts.
    #[serde(default)]
    stratified_validation: bool,
    #[serde(default)]
    embeddings: Option<String>,
}

fn default_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn corpus_format(path: &str, declared: &Option<String>) -> Result<CorpusFormat, Error> {
    match declared.as_deref() {
        Some("jsonl") => Ok(CorpusFormat::Jsonl),
        Some("csv") => Ok(CorpusFormat::Csv),
        Some(other) => Err(Error::config(format!("unknown corpus format {other:?}"))),
        None if path.ends_with(".csv") => Ok(CorpusFormat::Csv),
        None => Ok(CorpusFormat::Jsonl),
    }
}

// -- reports ---------------------------------------------------------------

#[derive(Debug, Serialize)]
struct ClassStats {
    precision: f64,
    recall: f64,
    support: usize,
}

#[derive(Debug, Serialize)]
struct Report {
    command: String,
    config: ModelConfig,
    metrics: BTreeMap<String, Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_class: Option<BTreeMap<String, ClassStats>>,
}

fn per_class_stats(model: &TrainedModel, corpus: &Corpus) -> Result<BTreeMap<String, ClassStats>, Error> {
    let field = match model.config.task.label_field() {
        Some(f) => f,
        None => return Ok(BTreeMap::new()),
    };
    let preds = model.predict(corpus.records())?;
    let mut tp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut pred_count: BTreeMap<&str, usize> = BTreeMap::new();
    let mut truth_count: BTreeMap<&str, usize> = BTreeMap::new();
    for (rec, p) in corpus.records().iter().zip(&preds.entries) {
        let truth = field.get(rec).unwrap_or("");
        let guess = p.pred_label.as_deref().unwrap_or("");
        *truth_count.entry(truth).or_insert(0) += 1;
        *pred_count.entry(guess).or_insert(0) += 1;
        if truth == guess {
            *tp.entry(truth).or_insert(0) += 1;
        }
    }
    let mut out = BTreeMap::new();
    for label in &model.labels {
        let t = *tp.get(label.as_str()).unwrap_or(&0) as f64;
        let p = *pred_count.get(label.as_str()).unwrap_or(&0) as f64;
        let support = *truth_count.get(label.as_str()).unwrap_or(&0);
        out.insert(
            label.clone(),
            ClassStats {
                precision: if p > 0.0 { t / p } else { 0.0 },
                recall: if support > 0 { t / support as f64 } else { 0.0 },
                support,
            },
        );
    }
    Ok(out)
}

fn metric_cell(m: &Metrics) -> (String, String) {
    match m.accuracy {
        Some(acc) => (format!("{acc:.4}"), format!("{:.4}", m.mean_loss)),
        None => (
            format!(
                "acc@30 {:.4} acc@161 {:.4}",
                m.acc_at_30.unwrap_or(0.0),
                m.acc_at_161.unwrap_or(0.0)
            ),
            format!("{:.4}", m.mean_loss),
        ),
    }
}

fn human_table(report: &Report) -> String {
    let cfg = &report.config;
    let key_params = match cfg.variant {
        Variant::Mh | Variant::MhU | Variant::MhC => format!(
            "encoders: {}, emb-dim: {}, heads: {}, div-fac: {}, dropout: {}, num-clus: {}, samples: {}",
            cfg.encoders,
            cfg.emb_dim,
            cfg.heads,
            cfg.div_factor,
            cfg.dropout,
            cfg.augment.num_clusters,
            cfg.augment.nc_samples
        ),
        _ => format!(
            "kernels: {:?}, channels: {}, fc: {}, emb-dim: {}",
            cfg.kernels, cfg.channels, cfg.fc_layers, cfg.emb_dim
        ),
    };
    let target = match cfg.task {
        Task::Coords => "Long-Lat",
        Task::Zipcode => "Zipcode",
        Task::Neighborhood => "Neighborhood",
    };
    let mut s = String::new();
    s.push_str("Model        | Split  | Acc.                                  | Loss     | Key-Params | Target\n");
    s.push_str("-------------+--------+---------------------------------------+----------+------------+-------\n");
    for (split, m) in &report.metrics {
        let (acc, loss) = metric_cell(m);
        s.push_str(&format!(
            "{:<12} | {:<6} | {:<37} | {:<8} | {} | {}\n",
            format!("{:?}", cfg.variant),
            split,
            acc,
            loss,
            key_params,
            target
        ));
    }
    s
}

fn write_report(report: &Report, out: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::invalid(format!("report serialization: {e}")))?;
    std::fs::write(out.join("report.json"), json)?;
    std::fs::write(out.join("report.txt"), human_table(report))?;
    Ok(())
}

// -- commands --------------------------------------------------------------

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), Error> {
    let mut spec: SyntheticSpec = read_toml(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let corpus = corpus::generate_synthetic(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    save_corpus_jsonl(&corpus, &args.out.join("corpus.jsonl"))?;
    let regions = synthetic_regions(&spec, RegionKind::Zipcode);
    export_regions(&regions, &args.out.join("regions.geojson"))?;

    // home-region fraction: share of posts in the author's modal region
    let mut per_user: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for r in corpus.records() {
        if let Some(zip) = r.zipcode.as_deref() {
            *per_user
                .entry(&r.username)
                .or_default()
                .entry(zip)
                .or_insert(0) += 1;
        }
    }
    let (mut home, mut total) = (0usize, 0usize);
    for counts in per_user.values() {
        let modal = counts.values().max().copied().unwrap_or(0);
        home += modal;
        total += counts.values().sum::<usize>();
    }
    println!(
        "generated {} tweets, {} regions, {} users; home-region fraction {:.3}",
        corpus.len(),
        spec.num_regions(),
        per_user.len(),
        home as f64 / total.max(1) as f64
    );
    Ok(())
}

struct PreparedData {
    splits: Splits,
    embeddings: Option<EmbeddingTable>,
}

fn prepare_data(file: &TrainFile, cfg: &ModelConfig) -> Result<PreparedData, Error> {
    let format = corpus_format(&file.data.corpus, &file.data.format)?;
    let loaded = load_corpus(Path::new(&file.data.corpus), format)?;
    if loaded.dropped_empty > 0 {
        eprintln!("warning: {} empty-text rows dropped", loaded.dropped_empty);
    }
    let [tr, va, te] = file.data.ratios;
    let stratify = if file.data.stratify {
        cfg.task.label_field()
    } else {
        None
    };
    let mut splits = corpus::split(&loaded.corpus, (tr, va, te), cfg.seed, stratify)?;
    if let Some(s) = file.data.oversample {
        let field = cfg
            .task
            .label_field()
            .ok_or_else(|| Error::config("data.oversample requires a classification task"))?;
        splits.train = corpus::oversample(&splits.train, field, s, cfg.seed)?;
    }
    if file.data.stratified_validation {
        let field = cfg.task.label_field().ok_or_else(|| {
            Error::config("data.stratified_validation requires a classification task")
        })?;
        splits.valid = corpus::stratified_validation(&splits.valid, field, cfg.seed)?;
    }
    let embeddings = match &file.data.embeddings {
        Some(path) => {
            let vocab = models::vocab_for(cfg, &splits.train);
            let table = load_embeddings(Path::new(path), &vocab)?;
            eprintln!("embedding coverage {:.3}", table.coverage());
            Some(table)
        }
        None => None,
    };
    Ok(PreparedData { splits, embeddings })
}

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let mut file: TrainFile = read_toml(&args.config)?;
    if let Some(seed) = args.seed {
        file.model.seed = seed;
    }
    file.model.validate()?;
    if file.model.variant == Variant::MhC && file.data.embeddings.is_none() {
        return Err(Error::config(
            "variant mh_c requires data.embeddings (path to an embedding file)",
        ));
    }
    let data = prepare_data(&file, &file.model)?;
    let model = models::train(&file.model, &data.splits, data.embeddings.as_ref())?;

    std::fs::create_dir_all(&args.out)?;
    model.save(&args.out.join("checkpoint.json"))?;
    let mut history = String::new();
    for rec in &model.history {
        history.push_str(&serde_json::to_string(rec).map_err(|e| Error::invalid(e.to_string()))?);
        history.push('\n');
    }
    std::fs::write(args.out.join("history.jsonl"), history)?;

    let mut metrics = BTreeMap::new();
    metrics.insert("train".to_string(), model.evaluate(&data.splits.train)?);
    if !data.splits.valid.is_empty() {
        metrics.insert("valid".to_string(), model.evaluate(&data.splits.valid)?);
    }
    if !data.splits.test.is_empty() {
        metrics.insert("test".to_string(), model.evaluate(&data.splits.test)?);
    }
    let per_class = if model.config.task == Task::Coords || data.splits.valid.is_empty() {
        None
    } else {
        Some(per_class_stats(&model, &data.splits.valid)?)
    };
    let report = Report {
        command: "train".into(),
        config: model.config.clone(),
        metrics,
        per_class,
    };
    write_report(&report, &args.out)?;
    print!("{}", human_table(&report));
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let model = TrainedModel::load(&args.checkpoint)?;
    let loaded = load_corpus(&args.corpus, args.format.into())?;
    let metrics = model.evaluate(&loaded.corpus)?;
    if metrics.unknown_labels > 0 {
        eprintln!(
            "warning: {} records carry labels unseen at training; scored incorrect",
            metrics.unknown_labels
        );
    }
    std::fs::create_dir_all(&args.out)?;
    if model.config.task == Task::Coords {
        let preds = model.predict(loaded.corpus.records())?;
        export_geojson(&preds, &args.out.join("predictions.geojson"))?;
    }
    let per_class = if model.config.task == Task::Coords {
        None
    } else {
        Some(per_class_stats(&model, &loaded.corpus)?)
    };
    let mut map = BTreeMap::new();
    map.insert("eval".to_string(), metrics);
    let report = Report {
        command: "eval".into(),
        config: model.config.clone(),
        metrics: map,
        per_class,
    };
    write_report(&report, &args.out)?;
    print!("{}", human_table(&report));
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<(), Error> {
    let model = TrainedModel::load(&args.checkpoint)?;
    let loaded = load_corpus(&args.input, CorpusFormat::Jsonl)?;
    let preds = model.predict(loaded.corpus.records())?;
    let mut out = String::new();
    for p in &preds.entries {
        out.push_str(&serde_json::to_string(p).map_err(|e| Error::invalid(e.to_string()))?);
        out.push('\n');
    }
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&args.out, out)?;
    println!("{} predictions written", preds.entries.len());
    Ok(())
}

fn parse_grid(raw: &str) -> Result<Vec<f64>, Error> {
    let vals: Result<Vec<f64>, _> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse::<f64>)
        .collect();
    vals.map_err(|e| Error::config(format!("grid: {e}")))
}

fn cmd_ablate(args: &AblateArgs) -> Result<(), Error> {
    let file: TrainFile = read_toml(&args.config)?;
    file.model.validate()?;
    let grid = match args.study {
        Study::ClusterEmbedding => vec![0.0, 1.0],
        _ => {
            let g = parse_grid(&args.grid)?;
            if g.is_empty() {
                return Err(Error::config("ablate requires a non-empty --grid"));
            }
            g
        }
    };
    let data = prepare_data(&file, &file.model)?;

    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    for &value in &grid {
        let mut cfg = file.model.clone();
        match args.study {
            Study::UserDictFrac => {
                cfg.variant = Variant::MhU;
                cfg.augment.sample_frac = value;
            }
            Study::TimeWindow => {
                cfg.variant = Variant::MhU;
                cfg.augment.time_window_hours = value;
            }
            Study::NumClusters => {
                cfg.variant = Variant::MhC;
                cfg.augment.num_clusters = value as usize;
            }
            Study::ClusterEmbedding => {
                cfg.variant = if value > 0.0 { Variant::MhC } else { Variant::Mh };
            }
        }
        cfg.validate()?;
        let model = models::train(&cfg, &data.splits, data.embeddings.as_ref())?;
        let metrics = model.evaluate(&data.splits.valid)?;
        rows.push((value, metrics.accuracy.unwrap_or(0.0), metrics.mean_loss));
    }
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    std::fs::create_dir_all(&args.out)?;
    let mut csv = String::from("value,accuracy,loss\n");
    for (v, acc, loss) in &rows {
        csv.push_str(&format!("{v},{acc},{loss}\n"));
    }
    std::fs::write(args.out.join("ablate.csv"), csv)?;
    let best = rows
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    println!(
        "best value {} with validation accuracy {:.4} (loss {:.4})",
        best.0, best.1, best.2
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 2,
                Error::Numerical(_) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
