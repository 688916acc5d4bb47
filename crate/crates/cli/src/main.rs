use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use shapeparse::approximator::Checkpoint;
use shapeparse::eval::{evaluate, render, report_csv, report_table};
use shapeparse::grammar::ParseTree;
use shapeparse::oracle::IgmOracle;
use shapeparse::raster::{Label, LabelGrid};
use shapeparse::synthdata::{self, GenConfig};
use shapeparse::training::{log_csv, oracle_score, train_and_score, Algorithm, TrainConfig};

/// Hierarchical shape parsing: data generation, oracle parsing, training,
/// evaluation and rendering.
#[derive(Debug, Parser)]
#[command(name = "shapeparse", version)]
struct Cli {
    /// Worker threads for per-item rollouts and evaluation; 1 runs serially.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of rectilinear objects.
    Generate(GenerateArgs),
    /// Parse every item with the information-gain oracle.
    Oracle(OracleArgs),
    /// Train parsers with k-fold cross validation.
    Train(TrainArgs),
    /// Evaluate a checkpoint greedily on a dataset.
    Eval(EvalArgs),
    /// Render a parse tree over an intensity image.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Number of items.
    #[arg(long, default_value_t = 60)]
    n: usize,
    /// Grid side in pixels.
    #[arg(long, default_value_t = 64)]
    side: usize,
    /// Maximum nesting of cuts in guillotine mode.
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Build labelings from recursive full-width/height cuts instead of overlapping rectangles.
    #[arg(long)]
    guillotine: bool,
    /// Fewest painted rectangles per item.
    #[arg(long, default_value_t = 1)]
    rects_min: usize,
    /// Most painted rectangles per item.
    #[arg(long, default_value_t = 4)]
    rects_max: usize,
    /// Half-width of the uniform intensity noise.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Maximum parse depth.
    #[arg(long, default_value_t = 5)]
    depth: usize,
    /// Directory for `<id>.json` parse trees.
    #[arg(long)]
    out_trees: Option<PathBuf>,
    /// Directory for `<id>.png` overlays.
    #[arg(long)]
    out_render: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Learner name, a comma-separated list, or `all`.
    #[arg(long, default_value = "drag")]
    algorithm: String,
    /// `key = value` training configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of cross-validation folds.
    #[arg(long, default_value_t = 3)]
    folds: usize,
    /// Overrides the configured number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Seeds the fold split and every learner.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoints, logs and reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Maximum parse depth.
    #[arg(long, default_value_t = 5)]
    depth: usize,
    /// CSV file of per-item accuracies; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Parse tree JSON.
    #[arg(long)]
    tree: PathBuf,
    /// Grayscale intensity image.
    #[arg(long)]
    image: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> anyhow::Error {
    anyhow::Error::new(e).context(format!("{}", path.display()))
}

fn generate(args: &GenerateArgs) -> anyhow::Result<()> {
    let config = GenConfig {
        items: args.n,
        side: args.side,
        rect_min: args.rects_min,
        rect_max: args.rects_max,
        guillotine: args.guillotine,
        cut_depth: args.depth,
        noise: args.noise,
        seed: args.seed,
        ..GenConfig::default()
    };
    let dataset = synthdata::generate(&config)?;
    synthdata::save(&dataset, &args.out)?;
    let single = dataset.items.iter().filter(|i| i.single_class()).count();
    println!(
        "generated {} items in {}",
        dataset.len(),
        args.out.display()
    );
    if single > 0 {
        println!("{single} items carry a single label");
    }
    Ok(())
}

fn oracle(args: &OracleArgs, parallel: bool) -> anyhow::Result<()> {
    let dataset = synthdata::load(&args.data)?;
    for dir in [&args.out_trees, &args.out_render].into_iter().flatten() {
        create_dir(dir)?;
    }
    let oracle = IgmOracle::new();
    let run = |item: &synthdata::Item| -> anyhow::Result<f64> {
        let tree = oracle.oracle_parse(&item.grid, args.depth);
        if let Some(dir) = &args.out_trees {
            write_file(&dir.join(format!("{}.json", item.id)), tree.to_json()?)?;
        }
        if let Some(dir) = &args.out_render {
            render(&tree, &item.grid, &dir.join(format!("{}.png", item.id)))?;
        }
        Ok(shapeparse::eval::tree_accuracy(&tree, &item.grid)?)
    };
    let accs: Vec<f64> = if parallel {
        dataset
            .items
            .par_iter()
            .map(run)
            .collect::<anyhow::Result<_>>()?
    } else {
        dataset
            .items
            .iter()
            .map(run)
            .collect::<anyhow::Result<_>>()?
    };
    let mut out = String::from("id,accuracy\n");
    for (item, acc) in dataset.items.iter().zip(&accs) {
        let _ = writeln!(out, "{},{acc:.6}", item.id);
    }
    let mean = evaluate(
        &shapeparse::env::OraclePolicy(&oracle),
        &dataset.grids(),
        args.depth,
        parallel,
    )?
    .mean;
    let _ = writeln!(out, "mean,{mean:.6}");
    print!("{out}");
    Ok(())
}

fn parse_algorithms(spec: &str) -> anyhow::Result<Vec<Algorithm>> {
    if spec.eq_ignore_ascii_case("all") {
        return Ok(Algorithm::ALL.to_vec());
    }
    spec.split(',')
        .map(|s| s.trim().parse::<Algorithm>().map_err(anyhow::Error::from))
        .collect()
}

fn train(args: &TrainArgs, parallel: bool) -> anyhow::Result<()> {
    let algorithms = parse_algorithms(&args.algorithm)?;
    let mut base = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    base.seed = args.seed;
    base.parallel = parallel;
    if let Some(e) = args.epochs {
        base.iterations = e;
    }
    let dataset = synthdata::load(&args.data)?;
    let folds = synthdata::kfold(dataset.len(), args.folds, args.seed)?;
    create_dir(&args.out)?;
    write_file(
        &args.out.join("folds.json"),
        serde_json::to_string_pretty(&folds)? + "\n",
    )?;
    let mut rows = Vec::new();
    for (k, fold) in folds.iter().enumerate() {
        let (train_set, test_set) = (dataset.select(&fold.train), dataset.select(&fold.test));
        rows.push(oracle_score(&train_set, &test_set, base.max_depth, k)?);
        for &alg in &algorithms {
            let config = TrainConfig {
                algorithm: alg,
                ..base.clone()
            };
            log::info!("training {alg} on fold {k}");
            let (outcome, score) = train_and_score(&train_set, &test_set, &config, k)?;
            let stem = format!("{}-fold{k}", alg.tag());
            outcome
                .checkpoint(&config)
                .save(&args.out.join(format!("{stem}.ckpt")))?;
            write_file(
                &args.out.join(format!("{stem}.log.csv")),
                log_csv(&outcome.log),
            )?;
            println!(
                "{} fold {k}: train {:.4} test {:.4}",
                score.algorithm, score.train_acc, score.test_acc
            );
            rows.push(score);
        }
    }
    write_file(&args.out.join("report.csv"), report_csv(&rows))?;
    let table = report_table(&rows);
    write_file(&args.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn eval(args: &EvalArgs, parallel: bool) -> anyhow::Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let dataset = synthdata::load(&args.data)?;
    let res = evaluate(&checkpoint.policy, &dataset.grids(), args.depth, parallel)?;
    let mut out = String::from("id,accuracy\n");
    for (item, acc) in dataset.items.iter().zip(&res.per_item) {
        let _ = writeln!(out, "{},{acc:.6}", item.id);
    }
    let _ = writeln!(out, "mean,{:.6}", res.mean);
    match &args.report {
        Some(path) => {
            write_file(path, &out)?;
            println!(
                "{} mean accuracy {:.6}",
                checkpoint.header.algorithm, res.mean
            );
        }
        None => print!("{out}"),
    }
    Ok(())
}

fn render_cmd(args: &RenderArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.tree).map_err(|e| io_error(&args.tree, e))?;
    let tree = ParseTree::from_json(&text).with_context(|| format!("{}", args.tree.display()))?;
    let img = image::open(&args.image)
        .with_context(|| format!("{}", args.image.display()))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let intensity = img.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect();
    let grid = LabelGrid::new(w, h, vec![Label::NoPaint; w * h], vec![intensity])?;
    let root = tree.node(tree.root()).region;
    if (root.w, root.h) != (w, h) {
        bail!(
            "tree covers {}x{} but {} is {w}x{h}",
            root.w,
            root.h,
            args.image.display()
        );
    }
    let stats = render(&tree, &grid, &args.out)?;
    println!(
        "rendered {} leaves to {}",
        stats.boundaries,
        args.out.display()
    );
    Ok(())
}

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<shapeparse::Error>() {
            if e.is_numeric() {
                return EXIT_NUMERIC;
            }
            if e.is_io() {
                return EXIT_IO;
            }
            return EXIT_USAGE;
        }
        if cause.is::<std::io::Error>()
            || cause.is::<image::ImageError>()
            || cause.is::<serde_json::Error>()
        {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let parallel = cli.jobs > 1;
    if parallel {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Oracle(a) => oracle(a, parallel),
        Command::Train(a) => train(a, parallel),
        Command::Eval(a) => eval(a, parallel),
        Command::Render(a) => render_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
