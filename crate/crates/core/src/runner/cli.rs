//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::{
    embeddings, evaluate, load_checkpoint, run, run_selftest, save_checkpoint, Result, RunError, Task, TrainConfig,
};
use crate::graphdata::{materialize, write_dataset, ClassificationSpec, DatasetSource, DatasetSpec, TreeSpec};
use crate::model::Architecture;
use crate::optimizer::EuclideanRule;

#[derive(Parser, Debug)]
#[command(
    name = "hhgcn",
    version,
    about = "Hyperbolic graph convolutional networks on the Lorentz model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (graph files plus manifest.json).
    Generate(GenerateArgs),
    /// Train from a JSON config; writes result.json and a checkpoint.
    Train(TrainArgs),
    /// Recompute test metrics for a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write final-layer node states as TSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Graph index for multi-graph datasets.
        #[arg(long, default_value_t = 0)]
        graph: usize,
    },
    /// Run the built-in invariant suites.
    Selftest,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Kind {
    Tree,
    Classification,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "dataset")]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    depth: usize,
    #[arg(long, default_value_t = 3)]
    branching: usize,
    /// Extra edges as a fraction of the tree's edges.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 30)]
    min_nodes: usize,
    #[arg(long, default_value_t = 60)]
    max_nodes: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory for result.json and the checkpoint.
    #[arg(long, default_value = "hhgcn-run")]
    out: PathBuf,
    /// Stream per-epoch metrics as JSON lines on stdout.
    #[arg(long)]
    verbose: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_riemannian: Option<f64>,
    #[arg(long)]
    lr_euclidean: Option<f64>,
    #[arg(long, value_parser = parse_rule)]
    euclidean_rule: Option<EuclideanRule>,
    #[arg(long)]
    centroids: Option<usize>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    lambda_lp: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_parser = parse_arch)]
    architecture: Option<Architecture>,
}

fn parse_rule(s: &str) -> std::result::Result<EuclideanRule, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown rule `{s}`"))
}

fn parse_arch(s: &str) -> std::result::Result<Architecture, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown architecture `{s}`"))
}

impl TrainArgs {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$target = v; })*
            };
        }
        set!(seed => seed, dim => dim, layers => layers, epochs => epochs,
             lr_riemannian => lr_riemannian, lr_euclidean => lr_euclidean,
             euclidean_rule => euclidean_rule, centroids => num_centroids, r => r, t => t,
             lambda_lp => lambda_lp, patience => patience, architecture => architecture);
    }
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on runtime failure, 2 on bad usage.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| RunError::Json {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| RunError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Generate(a) => {
            let source = match a.kind {
                Kind::Tree => DatasetSource::Tree(TreeSpec::new(a.depth, a.branching, a.noise)),
                Kind::Classification => {
                    DatasetSource::Classification(ClassificationSpec::new(a.count, a.min_nodes, a.max_nodes))
                }
            };
            let spec = DatasetSpec {
                source: source.clone(),
                seed: a.seed,
                split: [0.85, 0.05, 0.10],
            };
            let data = materialize(&spec)?;
            let manifest = write_dataset(&a.out, &source, a.seed, &data)?;
            eprintln!("wrote {} graph(s) to {}", manifest.graphs.len(), a.out.display());
            Ok(0)
        }
        Command::Train(a) => {
            let mut cfg = read_config(&a.config)?;
            a.apply(&mut cfg);
            let verbose = a.verbose;
            let trained = run(&cfg, &mut |rec| {
                if verbose {
                    println!("{}", serde_json::to_string(rec).expect("record serializes"));
                }
            })?;
            write(&a.out.join("result.json"), &trained.result.to_json())?;
            save_checkpoint(&a.out.join("checkpoint"), &trained.model, Some(&cfg))?;
            eprintln!(
                "{} {:.4} (best epoch {}, {:.1}s) -> {}",
                trained.result.metric,
                trained.result.test_metric,
                trained.result.best_epoch,
                trained.result.wall_time_secs,
                a.out.display()
            );
            Ok(0)
        }
        Command::Eval { checkpoint } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = ck
                .train
                .ok_or_else(|| RunError::Config("checkpoint carries no training config".into()))?;
            let metrics = evaluate(&ck.model, &cfg)?;
            println!("{}", serde_json::to_string(&metrics).expect("metrics serialize"));
            Ok(0)
        }
        Command::ExportEmbeddings { checkpoint, out, graph } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = ck
                .train
                .ok_or_else(|| RunError::Config("checkpoint carries no training config".into()))?;
            if cfg.task != Task::Gc && graph != 0 {
                return Err(RunError::Config("--graph applies to multi-graph datasets only".into()));
            }
            let states = embeddings(&ck.model, &cfg, graph)?;
            let mut text = String::new();
            for (i, row) in states.rows().into_iter().enumerate() {
                write!(text, "{i}").unwrap();
                for v in row {
                    write!(text, "\t{v}").unwrap();
                }
                text.push('\n');
            }
            write(&out, &text)?;
            Ok(0)
        }
        Command::Selftest => {
            let outcomes = run_selftest();
            let mut failed = 0;
            for o in &outcomes {
                match &o.result {
                    Ok(()) => println!("{:<10} ok", o.name),
                    Err(msg) => {
                        failed += 1;
                        println!("{:<10} FAILED: {msg}", o.name);
                    }
                }
            }
            println!("{} of {} suites passed", outcomes.len() - failed, outcomes.len());
            Ok(if failed == 0 { 0 } else { 1 })
        }
    }
}
