use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vista::aggregation::Strategy;
use vista::checkpoint;
use vista::data::{generate_corpus, load_corpus, write_corpus, CorpusSpec};
use vista::retrieval::{embed_captions, embed_gallery, write_embeddings, EvalMode};
use vista::run::{ablate_run, eval_run, train_run, RunConfig};

/// Vision and scene-text aggregation: corpus generation, training, and
/// cross-modal retrieval evaluation.
#[derive(Debug, Parser)]
#[command(name = "vista", version)]
struct Cli {
    /// Output root; overrides `out_dir` in config files.
    #[arg(long, global = true, env = "VISTA_OUT_DIR")]
    out_dir: Option<PathBuf>,

    /// Log progress at info level (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Dump gallery or caption embeddings.
    Embed(EmbedArgs),
    /// Train and evaluate several fusion strategies on one corpus.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Built-in spec: mixed, discrimination, or overfit.
    #[arg(long, conflicts_with = "spec")]
    preset: Option<String>,
    /// TOML corpus spec file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output corpus file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    ocr_probability: Option<f64>,
    #[arg(long)]
    relevance: Option<f64>,
}

/// Flags shared by train and ablate that override config values.
#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Continue from a final checkpoint of an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "scene_text_aware")]
    mode: EvalMode,
    #[arg(long, default_value = "fusion_token")]
    strategy: Strategy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EmbedWhat {
    Gallery,
    Captions,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "gallery")]
    what: EmbedWhat,
    #[arg(long, default_value = "scene_text_aware")]
    mode: EvalMode,
    #[arg(long, default_value = "fusion_token")]
    strategy: Strategy,
    /// Output file; ids go to `<out>.ids`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated subset of fusion_token, late_fusion, vision_only.
    #[arg(long, value_delimiter = ',', default_value = "fusion_token,late_fusion,vision_only")]
    strategies: Vec<Strategy>,
}

/// Exit codes: 0 success, 1 usage, 2 validation, 3 runtime failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    use vista::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Validation { .. } | E::Parse { .. } | E::Format(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(args) => gen(args),
        Command::Train(args) => train(args, cli.out_dir),
        Command::Eval(args) => eval(args, cli.out_dir),
        Command::Embed(args) => embed(args),
        Command::Ablate(args) => ablate(args, cli.out_dir),
    }
}

fn gen(args: GenArgs) -> anyhow::Result<()> {
    let mut spec = match (&args.preset, &args.spec) {
        (Some(name), None) => CorpusSpec::preset(name).ok_or_else(|| {
            vista::Error::Config(format!(
                "unknown preset `{name}`; valid: {}",
                CorpusSpec::PRESETS.join(", ")
            ))
        })?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).map_err(|e| vista::Error::Config(format!("{}: {e}", path.display())))?
        }
        _ => bail!(vista::Error::Config("give exactly one of --preset or --spec".into())),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.n_items {
        spec.n_items = n;
    }
    if let Some(p) = args.ocr_probability {
        spec.ocr_probability = p;
    }
    if let Some(r) = args.relevance {
        spec.relevance = r;
    }
    // generate before touching the output path so a bad spec writes nothing
    let corpus = generate_corpus(&spec)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_corpus(&args.out, &corpus).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} items to {}", corpus.len(), args.out.display());
    Ok(())
}

fn apply(cfg: &mut RunConfig, o: &Overrides, out_dir: Option<PathBuf>) {
    if let Some(c) = &o.corpus {
        cfg.corpus = c.clone();
    }
    if let Some(s) = o.steps {
        cfg.steps = s;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(b) = o.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = o.lr {
        cfg.optimizer.lr = lr;
    }
    if let Some(a) = o.alpha {
        cfg.loss.alpha = a;
    }
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
}

/// Relative corpus paths in a config file are taken relative to the file.
fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if cfg.corpus.is_relative() {
        if let Some(dir) = path.parent() {
            cfg.corpus = dir.join(&cfg.corpus);
        }
    }
    Ok(cfg)
}

fn train(args: TrainArgs, out_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply(&mut cfg, &args.overrides, out_dir);
    if let Some(s) = args.strategy {
        cfg.strategy = s;
    }
    let summary = train_run(&cfg, &cfg.out_dir, args.resume.as_deref())?;
    println!(
        "trained {} steps; final loss {}; artifacts in {}",
        summary.steps,
        summary.final_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
        cfg.out_dir.display()
    );
    Ok(())
}

fn eval(args: EvalArgs, out_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let out = out_dir.unwrap_or_else(|| PathBuf::from("runs"));
    let report = eval_run(&args.checkpoint, &args.corpus, args.mode, args.strategy, &out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn embed(args: EmbedArgs) -> anyhow::Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let set = match args.what {
        EmbedWhat::Gallery => embed_gallery(&ck.model, &corpus, args.mode, args.strategy)?,
        EmbedWhat::Captions => embed_captions(&ck.model, &corpus)?.0,
    };
    write_embeddings(&args.out, &set)?;
    println!("wrote {} x {} embeddings to {}", set.len(), set.dim(), args.out.display());
    Ok(())
}

fn ablate(args: AblateArgs, out_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply(&mut cfg, &args.overrides, out_dir);
    let report = ablate_run(&cfg, &args.strategies, &cfg.out_dir)?;
    print!("{}", report.to_table());
    Ok(())
}
