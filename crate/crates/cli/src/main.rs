use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use dedn_core::clustering::{kmeans_partition, load_manual_partition, save_partition, KmeansConfig};
use dedn_core::data::{gen_synthetic, load_bundle, save_bundle, DatasetBundle, SynthConfig};
use dedn_core::eval::{evaluate_report, export_attention_maps, EvalOptions};
use dedn_core::gradcheck::run_gradcheck;
use dedn_core::trainer::{load_checkpoint, save_checkpoint, train_with, write_log, TrainConfig};
use dedn_core::{ClusterPartition, DednModel, Error, Mode};

/// Dual-expert zero-shot classification toolkit.
#[derive(Parser, Debug)]
#[command(name = "dedn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenSynth(GenSynthArgs),
    /// Partition the attributes into clusters.
    Cluster(ClusterArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (T, U, S, H).
    Eval(EvalArgs),
    /// Check every training gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write both experts' region-attention maps for one sample as CSV.
    ExportAttention(ExportArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    n_per_class: usize,
    #[arg(long, default_value_t = 10)]
    k_seen: usize,
    #[arg(long, default_value_t = 5)]
    k_unseen: usize,
    #[arg(long, default_value_t = 8)]
    c: usize,
    #[arg(long, default_value_t = 3)]
    h: usize,
    #[arg(long, default_value_t = 3)]
    w: usize,
    #[arg(long, default_value_t = 12)]
    d: usize,
    #[arg(long, default_value_t = 6)]
    g: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("method").required(true).args(["k", "manual"]))]
struct ClusterArgs {
    #[arg(long)]
    data: PathBuf,
    /// Number of K-Means clusters.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0, conflicts_with = "manual")]
    seed: u64,
    /// JSON file listing the attribute indices of every cluster.
    #[arg(long)]
    manual: Option<PathBuf>,
    /// Scale attribute vectors to unit length before clustering.
    #[arg(long, conflicts_with = "manual")]
    unit_norm: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON training config; absent fields take built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attribute clusters; defaults to clusters.json inside the data directory.
    #[arg(long)]
    clusters: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSONL loss log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    smoothing_alpha: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    lambda_rc: Option<f64>,
    #[arg(long)]
    lambda_e: Option<f64>,
    /// Scale every sample's features to unit norm.
    #[arg(long)]
    unit_norm_features: bool,
    /// Print nothing per epoch.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "gzsl")]
    mode: Mode,
    /// Defaults to the value stored in the checkpoint.
    #[arg(long)]
    lambda_e: Option<f64>,
    /// Defaults to the value stored in the checkpoint.
    #[arg(long)]
    lambda_rc: Option<f64>,
    /// Lower seen and raise unseen class scores by this margin before ranking.
    #[arg(long, default_value_t = 0.0)]
    calibration_epsilon: f64,
    /// Report path; the report goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per cluster count.
    #[arg(long, default_value_t = 3)]
    instances: usize,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    sample: usize,
    #[arg(long)]
    lambda_rc: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = subcommand_name(&cli.command);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) if e.is_config() => {
            eprintln!("error: {e}");
            let mut cmd = Cli::command();
            cmd.build();
            if let Some(sub) = cmd.find_subcommand_mut(name) {
                eprintln!("{}", sub.render_usage());
            }
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::GenSynth(_) => "gen-synth",
        Command::Cluster(_) => "cluster",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Gradcheck(_) => "gradcheck",
        Command::ExportAttention(_) => "export-attention",
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Cluster(a) => cluster(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ExportAttention(a) => export(a),
    }
}

fn gen_synth(a: GenSynthArgs) -> CliResult {
    let cfg = SynthConfig {
        n_per_class: a.n_per_class,
        k_seen: a.k_seen,
        k_unseen: a.k_unseen,
        c: a.c,
        h: a.h,
        w: a.w,
        d: a.d,
        g: a.g,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
    };
    let bundle = gen_synthetic(&cfg)?;
    save_bundle(&bundle, &a.out)?;
    println!(
        "wrote {} samples ({} seen / {} unseen classes) to {}",
        bundle.n(),
        a.k_seen,
        a.k_unseen,
        a.out.display()
    );
    Ok(())
}

fn cluster(a: ClusterArgs) -> CliResult {
    let bundle = load_bundle(&a.data)?;
    let partition = match (a.k, &a.manual) {
        (Some(k), None) => kmeans_partition(
            &bundle.attr_vectors,
            &KmeansConfig {
                unit_norm: a.unit_norm,
                ..KmeansConfig::new(k, a.seed)
            },
        )?,
        (None, Some(path)) => load_manual_partition(path, bundle.d())?,
        _ => unreachable!("clap enforces exactly one method"),
    };
    save_partition(&partition, &a.out)?;
    println!("cluster sizes {:?} written to {}", partition.sizes(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Error> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident).+ <- $flag:expr) => {
            if let Some(v) = $flag {
                cfg.$($field).+ = v;
            }
        };
    }
    set!(lr <- a.lr);
    set!(batch_size <- a.batch_size);
    set!(momentum <- a.momentum);
    set!(smoothing_alpha <- a.smoothing_alpha);
    set!(weight_decay <- a.weight_decay);
    set!(epochs <- a.epochs);
    set!(seed <- a.seed);
    set!(weights.beta <- a.beta);
    set!(weights.gamma <- a.gamma);
    set!(weights.epsilon <- a.epsilon);
    set!(lambda_rc <- a.lambda_rc);
    set!(lambda_e <- a.lambda_e);
    if a.unit_norm_features {
        cfg.unit_norm_features = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_partition(bundle: &DatasetBundle, explicit: Option<&Path>) -> Result<ClusterPartition, Error> {
    match explicit {
        Some(path) => load_manual_partition(path, bundle.d()),
        None => bundle
            .partition
            .clone()
            .ok_or_else(|| Error::Config("no --clusters given and the data directory has no clusters.json".into())),
    }
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let cfg = train_config(&a)?;
    let bundle = load_bundle(&a.data)?;
    let partition = resolve_partition(&bundle, a.clusters.as_deref())?;
    let quiet = a.quiet;
    let outcome = train_with(&bundle, &partition, &cfg, |e| {
        if !quiet {
            println!(
                "epoch {:>4}  total {:.5}  mal_ec {:.5}  mal_ef {:.5}  align {:.5}  distill {:.5}",
                e.epoch, e.mean_total, e.mean_mal_ec, e.mean_mal_ef, e.mean_align, e.mean_distill
            );
        }
    })?;
    save_checkpoint(&outcome.model, &cfg, &a.out)?;
    if let Some(log) = &a.log {
        write_log(&outcome.log, log)?;
    }
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn load_for_eval(data: &Path, model: &Path) -> Result<(DatasetBundle, DednModel, TrainConfig), Error> {
    let mut bundle = load_bundle(data)?;
    let (model, cfg) = load_checkpoint(model)?;
    if cfg.unit_norm_features {
        bundle.unit_normalize_features();
    }
    Ok((bundle, model, cfg))
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let (bundle, model, cfg) = load_for_eval(&a.data, &a.model)?;
    let opts = EvalOptions {
        lambda_e: a.lambda_e.unwrap_or(cfg.lambda_e),
        lambda_rc: a.lambda_rc.unwrap_or(cfg.lambda_rc),
        calibration_epsilon: a.calibration_epsilon,
    };
    let report = evaluate_report(&model, &bundle, &opts, a.mode)?;
    let json = report.to_json();
    match &a.out {
        Some(path) => {
            fs::write(path, &json).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            println!(
                "T {:.2}  U {:.2}  S {:.2}  H {:.2}  (report written to {})",
                report.t,
                report.u,
                report.s,
                report.h,
                path.display()
            );
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    if a.instances == 0 {
        return Err(Error::Config("--instances must be at least 1".into()).into());
    }
    let report = run_gradcheck(a.seed, a.instances)?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check exceeded tolerance {:e}",
            report.tolerance
        )))
    }
}

fn export(a: ExportArgs) -> CliResult {
    let (bundle, model, cfg) = load_for_eval(&a.data, &a.model)?;
    let lambda_rc = a.lambda_rc.unwrap_or(cfg.lambda_rc);
    export_attention_maps(&model, &bundle, a.sample, lambda_rc, &a.out)?;
    println!("attention maps for sample {} written to {}", a.sample, a.out.display());
    Ok(())
}
