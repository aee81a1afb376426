use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use topn_rank::bench::{benchmark_scaling, doubling_ratios, to_tsv, ScalingRow};
use topn_rank::dataset::{
    filter_sparse_users, load_ratings_with_layout, split_half, to_implicit, to_implicit_with_maps, write_ratings,
    Delimiter, IdMap, ImplicitConversion, InteractionDataset, Layout, RatingFormat,
};
use topn_rank::eval::{evaluate_model, run_ablation, split_seed, Protocol, DEFAULT_LR_GRID};
use topn_rank::synth::{movielens_like, CorpusSpec};
use topn_rank::{train, Algorithm, Checkpoint, Error};

mod config;
mod manifest;

use config::{
    resolve_cutoffs, resolve_min_count, resolve_repeats, resolve_seed, resolve_threshold, resolve_train_config,
    ConfigFileArg, CutoffArgs, DataArgs, FileConfig, ModelArgs, RepeatArgs,
};
use manifest::{json_with_reference, split_seeds, tsv_reference, RunManifest};

const ID_MAP_FILE: &str = "id_map.json";
const MODEL_FILE: &str = "model.bin";

#[derive(Parser)]
#[command(name = "topn-rank", version, about = "Top-N list-wise ranking experiments on rating data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter sparse users, convert to implicit feedback and write random half splits.
    Prepare(PrepareArgs),
    /// Train a model on a rating file and write a checkpoint plus training log.
    Train(TrainArgs),
    /// Compute NDCG of a checkpoint on a held-out rating file.
    Evaluate(EvaluateArgs),
    /// Run the truncation x smoothing comparison over repeated splits.
    Ablation(AblationArgs),
    /// Measure per-iteration cost of both trainers as the list length grows.
    Benchmark(BenchmarkArgs),
    /// Write a synthetic rating file with the shape of MovieLens 100K.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Rating file: user, item, rating[, timestamp]; comma or tab separated.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    repeats: RepeatArgs,
    #[command(flatten)]
    file: ConfigFileArg,
}

#[derive(Args)]
struct TrainArgs {
    /// Training rating file. An `id_map.json` beside it or one level up fixes the index space.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for the checkpoint, log and manifest.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    file: ConfigFileArg,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Held-out rating file.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for metrics and manifest.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cutoffs: CutoffArgs,
    #[command(flatten)]
    file: ConfigFileArg,
}

#[derive(Args)]
struct AblationArgs {
    /// Full rating file; filtering and splitting happen internally.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    repeats: RepeatArgs,
    #[command(flatten)]
    cutoffs: CutoffArgs,
    /// Learning rates tried per variant and split, chosen on a validation split of the training half.
    #[arg(long, value_delimiter = ',', conflicts_with = "fixed_lr")]
    lr_grid: Option<Vec<f64>>,
    /// Use the configured learning rate for every variant instead of selecting one.
    #[arg(long)]
    fixed_lr: bool,
    #[command(flatten)]
    file: ConfigFileArg,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Comma-separated per-user list lengths.
    #[arg(long, value_delimiter = ',', default_value = "100,200,400,800")]
    m_tilde: Vec<usize>,
    /// Users per pass.
    #[arg(long, default_value_t = 100)]
    users: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional output directory for the table and manifest.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Rating file to write (comma separated with header).
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Index space shared by the splits of one prepared dataset.
#[derive(Debug, Serialize, Deserialize)]
struct IdMapFile {
    users: Vec<String>,
    items: Vec<String>,
    item_digest: String,
}

impl IdMapFile {
    fn of(dataset: &InteractionDataset) -> Self {
        IdMapFile {
            users: dataset.user_ids().ids().to_vec(),
            items: dataset.item_ids().ids().to_vec(),
            item_digest: dataset.item_ids().digest(),
        }
    }

    fn maps(self) -> Result<(IdMap, IdMap), Error> {
        let users = IdMap::from_ids(self.users)?;
        let items = IdMap::from_ids(self.items)?;
        if items.digest() != self.item_digest {
            return Err(Error::ItemSpaceMismatch(format!("{ID_MAP_FILE} digest does not match its item list")));
        }
        Ok((users, items))
    }
}

/// A failure with the process exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_PARSE: u8 = 4;
const EXIT_DIVERGED: u8 = 5;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => EXIT_IO,
            Error::MalformedRow { .. }
            | Error::RatingOutOfRange { .. }
            | Error::DuplicatePair { .. }
            | Error::BadCheckpoint(_) => EXIT_PARSE,
            Error::InvalidConfig(_) => EXIT_USAGE,
            Error::Diverged { .. } => EXIT_DIVERGED,
            _ => EXIT_OTHER,
        };
        let message = match &e {
            Error::Diverged { iteration: 0, .. } => format!("{e}; no iteration completed"),
            Error::Diverged { iteration, .. } => format!("{e}; last good iteration {}", iteration - 1),
            _ => e.to_string(),
        };
        Failure { code, message }
    }
}

/// Adds the file name to errors that only carry a line number.
fn in_file(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        if f.code == EXIT_PARSE {
            f.message = format!("{}: {}", path.display(), f.message);
        }
        f
    }
}

fn io_failure(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |source| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(io_failure(path))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(io_failure(path))
}

fn load_file_config(arg: &ConfigFileArg) -> Result<FileConfig, Failure> {
    Ok(FileConfig::load(arg.config.as_deref())?)
}

/// Looks for `id_map.json` beside `path` or in its parent directory.
fn find_id_map(path: &Path) -> Option<PathBuf> {
    let dir = path.parent()?;
    [Some(dir), dir.parent()]
        .into_iter()
        .flatten()
        .map(|d| d.join(ID_MAP_FILE))
        .find(|p| p.is_file())
}

fn read_id_map(path: &Path) -> Result<(IdMap, IdMap), Failure> {
    let text = std::fs::read_to_string(path).map_err(io_failure(path))?;
    let file: IdMapFile = serde_json::from_str(&text).map_err(|e| Failure {
        code: EXIT_PARSE,
        message: format!("{}: {e}", path.display()),
    })?;
    Ok(file.maps()?)
}

fn split_file_name(layout: Layout, stem: &str) -> String {
    match layout.delimiter {
        Delimiter::Tab => format!("{stem}.tsv"),
        _ => format!("{stem}.csv"),
    }
}

fn cmd_prepare(args: PrepareArgs) -> Result<(), Failure> {
    let file = load_file_config(&args.file)?;
    let min_count = resolve_min_count(&args.data, &file);
    let threshold = resolve_threshold(&args.data, &file);
    let seed = resolve_seed(args.seed, &file);
    let repeats = resolve_repeats(&args.repeats, &file)?;

    let started = Instant::now();
    let (ratings, layout) =
        load_ratings_with_layout(&args.input, &RatingFormat::default()).map_err(in_file(&args.input))?;
    let filtered = filter_sparse_users(&ratings, min_count);
    let dataset = to_implicit(&filtered, threshold)?;
    if dataset.n_users() == 0 {
        return Err(Error::Empty(format!("no user has at least {min_count} ratings")).into());
    }
    create_dir(&args.output)?;

    let mut manifest = RunManifest::new("prepare");
    manifest.input(&args.input)?;
    manifest.setting("min_count", min_count);
    manifest.setting("threshold", threshold);
    manifest.setting("seed", seed);
    manifest.setting("repeats", repeats);
    manifest.setting("users", dataset.n_users());
    manifest.setting("items", dataset.n_items());
    manifest.setting("interactions", dataset.n_interactions());
    manifest.setting("dropped_users", ratings.len() - filtered.len());
    manifest.seeds = split_seeds(seed, repeats);

    let id_map = args.output.join(ID_MAP_FILE);
    let id_json = serde_json::to_string_pretty(&IdMapFile::of(&dataset)).expect("id map serializes");
    write_file(&id_map, &(id_json + "\n"))?;
    manifest.outputs.push(ID_MAP_FILE.into());

    for r in 0..repeats {
        let pair = split_half(&dataset, split_seed(seed, r))?;
        let dir_name = format!("split_{r}");
        let dir = args.output.join(&dir_name);
        create_dir(&dir)?;
        for (stem, part) in [("train", &pair.train), ("test", &pair.test)] {
            let name = split_file_name(layout, stem);
            write_ratings(dir.join(&name), &part.to_raw_ratings(), layout)?;
            manifest.outputs.push(Path::new(&dir_name).join(name));
        }
    }
    manifest.timings.insert("total".into(), started.elapsed().as_secs_f64());
    manifest.write(&args.output)?;
    println!(
        "prepared {} users, {} items, {} interactions into {} split(s) under {}",
        dataset.n_users(),
        dataset.n_items(),
        dataset.n_interactions(),
        repeats,
        args.output.display()
    );
    Ok(())
}

/// Loads a rating file into the index space of a prepared dataset when one is
/// found next to it, otherwise into a fresh one.
fn load_dataset(path: &Path, threshold: f64, manifest: &mut RunManifest) -> Result<InteractionDataset, Failure> {
    let (ratings, _) = load_ratings_with_layout(path, &RatingFormat::default()).map_err(in_file(path))?;
    manifest.input(path)?;
    match find_id_map(path) {
        Some(map_path) => {
            let (users, items) = read_id_map(&map_path)?;
            manifest.input(&map_path)?;
            Ok(to_implicit_with_maps(&ratings, users, items, ImplicitConversion { threshold })?)
        }
        None => Ok(to_implicit(&ratings, threshold)?),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let file = load_file_config(&args.file)?;
    let config = resolve_train_config(&args.model, &file)?;
    let threshold = resolve_threshold(&args.data, &file);

    let mut manifest = RunManifest::new("train");
    let load_started = Instant::now();
    let dataset = load_dataset(&args.input, threshold, &mut manifest)?;
    manifest.timings.insert("load".into(), load_started.elapsed().as_secs_f64());
    manifest.config = Some(config);
    manifest.setting("threshold", threshold);

    let started = Instant::now();
    let (model, log) = train(&dataset, &config)?;
    manifest.timings.insert("train".into(), started.elapsed().as_secs_f64());

    create_dir(&args.output)?;
    let checkpoint = Checkpoint {
        model,
        config,
        users: dataset.user_ids().clone(),
        items: dataset.item_ids().clone(),
    };
    checkpoint.save(args.output.join(MODEL_FILE))?;
    let log_path = args.output.join("training_log.tsv");
    let mut text = tsv_reference().into_bytes();
    log.write_tsv(&mut text).expect("writing to memory");
    write_file(&log_path, &String::from_utf8(text).expect("utf-8 log"))?;
    manifest.outputs = vec![MODEL_FILE.into(), "training_log.tsv".into()];
    manifest.setting("iterations", log.records.len());
    manifest.setting("stop_reason", log.stop_reason.to_string());
    manifest.write(&args.output)?;
    println!(
        "trained {} ({} iterations, stopped: {}) -> {}",
        config.algorithm,
        log.records.len(),
        log.stop_reason,
        args.output.join(MODEL_FILE).display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let file = load_file_config(&args.file)?;
    let threshold = resolve_threshold(&args.data, &file);
    let cutoffs = resolve_cutoffs(&args.cutoffs, &file)?;

    let checkpoint = Checkpoint::load(&args.model).map_err(in_file(&args.model))?;
    let mut manifest = RunManifest::new("evaluate");
    manifest.input(&args.model)?;
    if let Some(map_path) = find_id_map(&args.input) {
        let (_, items) = read_id_map(&map_path)?;
        if items.digest() != checkpoint.items.digest() {
            return Err(Error::ItemSpaceMismatch(format!(
                "{} and the checkpoint index different item sets",
                map_path.display()
            ))
            .into());
        }
        manifest.input(&map_path)?;
    }
    let (ratings, _) = load_ratings_with_layout(&args.input, &RatingFormat::default()).map_err(in_file(&args.input))?;
    manifest.input(&args.input)?;
    if ratings.is_empty() {
        return Err(Error::Empty(format!("{} has no ratings", args.input.display())).into());
    }
    let test = to_implicit_with_maps(
        &ratings,
        checkpoint.users.clone(),
        checkpoint.items.clone(),
        ImplicitConversion { threshold },
    )?;
    let started = Instant::now();
    let report = evaluate_model(&checkpoint.model, &test, &cutoffs)?;
    manifest.timings.insert("evaluate".into(), started.elapsed().as_secs_f64());

    create_dir(&args.output)?;
    write_file(&args.output.join("metrics.tsv"), &(tsv_reference() + &report.to_tsv()))?;
    write_file(&args.output.join("metrics.json"), &json_with_reference("metrics", &report))?;
    manifest.config = Some(checkpoint.config);
    manifest.setting("threshold", threshold);
    manifest.setting("cutoffs", &cutoffs);
    manifest.outputs = vec!["metrics.tsv".into(), "metrics.json".into()];
    manifest.write(&args.output)?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn cmd_ablation(args: AblationArgs) -> Result<(), Failure> {
    let file = load_file_config(&args.file)?;
    let config = resolve_train_config(&args.model, &file)?;
    let min_count = resolve_min_count(&args.data, &file);
    let threshold = resolve_threshold(&args.data, &file);
    let repeats = resolve_repeats(&args.repeats, &file)?;
    let cutoffs = resolve_cutoffs(&args.cutoffs, &file)?;
    let protocol = Protocol {
        repeats,
        cutoffs: cutoffs.clone(),
        lr_grid: match (&args.lr_grid, args.fixed_lr) {
            (_, true) => Vec::new(),
            (Some(grid), false) => grid.clone(),
            (None, false) => DEFAULT_LR_GRID.to_vec(),
        },
    };

    let mut manifest = RunManifest::new("ablation");
    let (ratings, _) = load_ratings_with_layout(&args.input, &RatingFormat::default()).map_err(in_file(&args.input))?;
    manifest.input(&args.input)?;
    let dataset = to_implicit(&filter_sparse_users(&ratings, min_count), threshold)?;

    let started = Instant::now();
    let report = run_ablation(&dataset, &config, &protocol)?;
    manifest.timings.insert("ablation".into(), started.elapsed().as_secs_f64());

    create_dir(&args.output)?;
    write_file(&args.output.join("ablation.tsv"), &(tsv_reference() + &report.to_tsv()))?;
    write_file(&args.output.join("ablation.json"), &json_with_reference("ablation", &report))?;
    manifest.config = Some(config);
    manifest.setting("min_count", min_count);
    manifest.setting("threshold", threshold);
    manifest.setting("protocol", &protocol);
    manifest.seeds = split_seeds(config.seed, repeats);
    manifest.outputs = vec!["ablation.tsv".into(), "ablation.json".into()];
    manifest.write(&args.output)?;
    print!("{}", report.to_tsv());
    Ok(())
}

#[derive(Serialize)]
struct BenchmarkSummary<'a> {
    rows: &'a [ScalingRow],
    work_ratios: Ratios,
    seconds_ratios: Ratios,
}

#[derive(Serialize)]
struct Ratios {
    generic: Vec<f64>,
    fast_relu: Vec<f64>,
}

impl Ratios {
    fn of(rows: &[ScalingRow], metric: impl Fn(&ScalingRow) -> f64 + Copy) -> Self {
        Ratios {
            generic: doubling_ratios(rows, Algorithm::Generic, metric),
            fast_relu: doubling_ratios(rows, Algorithm::FastRelu, metric),
        }
    }
}

fn format_ratios(label: &str, r: &Ratios) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    format!("# {label} ratios per step: generic [{}] fast-relu [{}]\n", join(&r.generic), join(&r.fast_relu))
}

fn cmd_benchmark(args: BenchmarkArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let rows = benchmark_scaling(&args.m_tilde, args.users, args.k, args.trials, args.seed)?;
    let summary = BenchmarkSummary {
        rows: &rows,
        work_ratios: Ratios::of(&rows, |r| r.counts.work() as f64),
        seconds_ratios: Ratios::of(&rows, |r| r.min_seconds),
    };
    let table = to_tsv(&rows)
        + &format_ratios("operation count", &summary.work_ratios)
        + &format_ratios("min wall-clock", &summary.seconds_ratios);
    print!("{table}");
    if let Some(dir) = &args.output {
        create_dir(dir)?;
        write_file(&dir.join("benchmark.tsv"), &(tsv_reference() + &table))?;
        write_file(&dir.join("benchmark.json"), &json_with_reference("benchmark", &summary))?;
        let mut manifest = RunManifest::new("benchmark");
        manifest.setting("m_tilde", &args.m_tilde);
        manifest.setting("users", args.users);
        manifest.setting("k", args.k);
        manifest.setting("trials", args.trials);
        manifest.setting("seed", args.seed);
        manifest.outputs = vec!["benchmark.tsv".into(), "benchmark.json".into()];
        manifest.timings.insert("total".into(), started.elapsed().as_secs_f64());
        manifest.write(dir)?;
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Failure> {
    let ratings = movielens_like(&CorpusSpec::movielens_100k(args.seed));
    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_ratings(&args.output, &ratings, Layout::default())?;
    println!("wrote {} ratings to {}", ratings.len(), args.output.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablation(a) => cmd_ablation(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
