//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::config::{DataConfig, RunConfig};
use crate::harness::export::{self, kernel_distribution};
use crate::harness::idx;
use crate::harness::selfcheck::run_selfcheck;
use crate::search::{self, LogRecord, RunLog, Searcher};
use crate::supernet::{derive_architecture, SuperNet};

#[derive(Debug, Parser)]
#[command(name = "metakernel", version, about = "Kernel-level differentiable architecture search")]
pub struct Cli {
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunArgs {
    /// TOML configuration; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config and the environment).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sets every seed of the run.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search kernel sizes; writes checkpoint, architecture, log and distribution.
    Search {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a derived architecture from scratch and report test accuracy.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        arch: PathBuf,
    },
    /// Test accuracy of a trained model or a search checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Derive the architecture of a checkpoint as JSON.
    ExportArch {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-layer kernel-size counts of an architecture as CSV.
    KernelDist {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the invariant suite.
    Selfcheck,
    /// Write the configured synthetic dataset as IDX files; pixel `v` is
    /// stored as the byte nearest `255 · clamp(0.5 + v / 6, 0, 1)`.
    GenData {
        #[command(flatten)]
        run: RunArgs,
    },
}

/// Failure with its exit code: 2 for usage and configuration problems, 1 otherwise.
struct Failure {
    code: i32,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Config(_) => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

fn load_config(run: &RunArgs) -> std::result::Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = match &run.config {
        None => RunConfig::default(),
        Some(p) if !p.is_file() => {
            return Err(Failure {
                code: 2,
                error: Error::Config(format!("config file {} not found", p.display())),
            })
        }
        Some(p) => RunConfig::load(p).map_err(|e| Failure { code: 2, error: e })?,
    };
    if let Some(seed) = run.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = run.out.clone().unwrap_or_else(|| cfg.resolved_output_dir());
    Ok((cfg, out))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => write_text(p, text),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn search(run: &RunArgs, resume: Option<&Path>) -> std::result::Result<(), Failure> {
    let (cfg, out) = load_config(run)?;
    create_dir(&out)?;
    let (train, _) = cfg.data.load()?;
    let mut searcher = match resume {
        Some(p) => Searcher::load(p)?,
        None => Searcher::new(SuperNet::new(cfg.net.clone(), cfg.seed)?, cfg.search.clone())?,
    };
    let mut log = RunLog::default();
    let arch = searcher.run(&train, &mut log)?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    searcher.save(&out.join("checkpoint.json"))?;
    log.write(&out.join("log.jsonl"))?;
    export::write_arch(&arch, &out.join("arch.json"))?;
    write_text(&out.join("kernel_dist.csv"), &kernel_distribution(&arch).to_csv()?)?;
    println!(
        "search done: {} steps, derived FLOPs {:.0} (target {:.0}, band [{:.0}, {:.0}]), mean area of kept kernels {:.2}",
        searcher.step,
        arch.flops,
        searcher.budget.target,
        searcher.budget.lower(),
        searcher.budget.upper(),
        arch.mean_active_area()
    );
    println!("outputs in {}", out.display());
    Ok(())
}

fn train(run: &RunArgs, arch_path: &Path) -> std::result::Result<(), Failure> {
    let (cfg, out) = load_config(run)?;
    create_dir(&out)?;
    let arch = export::read_arch(arch_path)?;
    if arch.candidates != cfg.net.candidate_set()? {
        return Err(Error::Config("architecture candidates differ from the configured network".into()).into());
    }
    let (train, test) = cfg.data.load()?;
    let mut net = SuperNet::fixed(cfg.net.clone(), &arch.choices, cfg.seed)?;
    let steps = search::train_fixed(&mut net, &train, &cfg.train)?;
    let acc = search::evaluate(&net, &test)?;
    export::write_model(&net, &out.join("model.json"))?;
    let log = RunLog {
        records: steps.into_iter().map(LogRecord::Step).collect(),
    };
    log.write(&out.join("train_log.jsonl"))?;
    println!("test accuracy {acc:.4} at {:.0} FLOPs", arch.flops);
    Ok(())
}

fn eval(run: &RunArgs, model: &Path) -> std::result::Result<(), Failure> {
    let (cfg, _) = load_config(run)?;
    let net = match export::read_model(model) {
        Ok(net) => net,
        Err(_) => Searcher::load(model)?.net,
    };
    let (_, test) = cfg.data.load()?;
    let acc = search::evaluate(&net, &test)?;
    let arch = derive_architecture(&net)?;
    println!("test accuracy {acc:.4}, derived FLOPs {:.0}", arch.flops);
    Ok(())
}

fn export_arch(checkpoint: &Path, output: Option<&Path>) -> std::result::Result<(), Failure> {
    let searcher = Searcher::load(checkpoint)?;
    let arch = derive_architecture(&searcher.net)?;
    let json = serde_json::to_string_pretty(&export::ArchExport::from_arch(&arch)).map_err(Error::from)?;
    emit(output, &(json + "\n"))?;
    Ok(())
}

fn kernel_dist(arch: &Path, output: Option<&Path>) -> std::result::Result<(), Failure> {
    let arch = export::read_arch(arch)?;
    emit(output, &kernel_distribution(&arch).to_csv()?)?;
    Ok(())
}

fn selfcheck() -> std::result::Result<(), Failure> {
    let results = run_selfcheck();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure {
            code: 1,
            error: Error::invalid(format!("{failed} invariant check(s) failed")),
        });
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

/// Maps the zero-mean synthetic pixels (unit variance) into the byte range.
pub fn to_unit_range(v: f64) -> f64 {
    0.5 + v / 6.0
}

fn gen_data(run: &RunArgs) -> std::result::Result<(), Failure> {
    let (cfg, out) = load_config(run)?;
    if !matches!(cfg.data, DataConfig::Synthetic(_)) {
        return Err(Error::Config("gen-data needs a synthetic data source".into()).into());
    }
    create_dir(&out)?;
    let (mut train, mut test) = cfg.data.load()?;
    for d in [&mut train, &mut test] {
        d.images = d.images.map(to_unit_range);
    }
    idx::write_idx(&train, &out.join("train-images.idx"), &out.join("train-labels.idx"))?;
    idx::write_idx(&test, &out.join("test-images.idx"), &out.join("test-labels.idx"))?;
    println!("wrote {} train and {} test samples to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn print_config(command: Option<&Command>) -> std::result::Result<(), Failure> {
    let run = match command {
        Some(Command::Search { run, .. } | Command::Train { run, .. } | Command::Eval { run, .. })
        | Some(Command::GenData { run }) => run.clone(),
        _ => RunArgs::default(),
    };
    let (cfg, _) = load_config(&run)?;
    print!("{}", cfg.to_toml()?);
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.verbose);
    let result = if cli.print_config {
        print_config(cli.command.as_ref())
    } else {
        match &cli.command {
            None => {
                eprintln!("no command given; see `metakernel --help`");
                return 2;
            }
            Some(Command::Search { run, resume }) => search(run, resume.as_deref()),
            Some(Command::Train { run, arch }) => train(run, arch),
            Some(Command::Eval { run, model }) => eval(run, model),
            Some(Command::ExportArch { checkpoint, output }) => export_arch(checkpoint, output.as_deref()),
            Some(Command::KernelDist { arch, output }) => kernel_dist(arch, output.as_deref()),
            Some(Command::Selfcheck) => selfcheck(),
            Some(Command::GenData { run }) => gen_data(run),
        }
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.error);
            if f.code == 2 {
                eprintln!("usage: metakernel [--print-config] <command> [--config FILE] ...; see --help");
            }
            f.code
        }
    }
}
