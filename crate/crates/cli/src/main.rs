use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use graphfuzz_core::campaign::{diversity_report, load_model, load_tensor, replay, run_campaign, BackendSpec, CampaignConfig, CampaignError};
use graphfuzz_core::difftest::{wire, Verdict};
use graphfuzz_core::optimizer::Fault;

#[derive(Parser)]
#[command(name = "graphfuzz", version, about = "Differential fuzzer for tensor graph optimizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a fuzzing campaign.
    Fuzz(FuzzArgs),
    /// Re-run the differential test on a stored model and tensor.
    Replay(ReplayArgs),
    /// Mean pairwise edit distance of a directory of models.
    Diversity { dir: PathBuf },
    /// Answer backend requests on stdin with the built-in optimizer.
    Serve(ServeArgs),
}

#[derive(Args)]
struct FuzzArgs {
    /// JSON campaign config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "duration")]
    rounds: Option<u64>,
    /// Time budget in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Injected optimizer fault; repeatable.
    #[arg(long = "fault", value_parser = parse_fault)]
    faults: Vec<Fault>,
    #[arg(long)]
    disable_tensor_mutation: bool,
    #[arg(long)]
    disable_model_mutation: bool,
    /// `builtin` or `extern:<command>`.
    #[arg(long)]
    backend: Option<BackendSpec>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    model: PathBuf,
    tensor: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long = "fault", value_parser = parse_fault)]
    faults: Vec<Fault>,
    #[arg(long)]
    backend: Option<BackendSpec>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "fault", value_parser = parse_fault)]
    faults: Vec<Fault>,
}

fn parse_fault(s: &str) -> Result<Fault, String> {
    Fault::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = Fault::ALL.iter().map(|f| f.name()).collect();
        format!("unknown fault {s:?}; expected one of {}", names.join(", "))
    })
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<(), CampaignError> {
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn read_config(path: Option<&Path>) -> Result<CampaignConfig, CampaignError> {
    match path {
        None => Ok(CampaignConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CampaignError::Config(format!("{}: {e}", p.display())))?;
            CampaignConfig::from_json(&text)
        }
    }
}

fn fuzz(args: FuzzArgs) -> Result<(), CampaignError> {
    let mut cfg = read_config(args.config.as_deref())?;
    if let Some(n) = args.rounds {
        cfg.rounds = Some(n);
        cfg.duration_secs = None;
    }
    if let Some(d) = args.duration {
        cfg.duration_secs = Some(d);
        cfg.rounds = None;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epsilon {
        cfg.diff.epsilon = e;
    }
    cfg.optimizer.faults.extend(args.faults);
    cfg.ablations.disable_tensor_mutation |= args.disable_tensor_mutation;
    cfg.ablations.disable_model_mutation |= args.disable_model_mutation;
    if let Some(b) = args.backend {
        cfg.backend = b;
    }
    cfg.out_dir = Some(args.out.clone());
    let outcome = run_campaign(&cfg)?;
    let r = &outcome.report;
    eprintln!(
        "{} rounds in {:.1}s ({:.1} rounds/s): {} unique bugs (crash {}, nan {}, inconsistency {}); report at {}",
        r.rounds,
        outcome.elapsed.as_secs_f64(),
        outcome.rounds_per_sec(),
        r.total_unique(),
        r.unique_bugs.get("crash").unwrap_or(&0),
        r.unique_bugs.get("nan").unwrap_or(&0),
        r.unique_bugs.get("inconsistency").unwrap_or(&0),
        args.out.join("report.json").display()
    );
    Ok(())
}

fn run_replay(args: ReplayArgs) -> Result<(), CampaignError> {
    let mut cfg = read_config(args.config.as_deref())?;
    if let Some(e) = args.epsilon {
        cfg.diff.epsilon = e;
    }
    cfg.optimizer.faults.extend(args.faults);
    if let Some(b) = args.backend {
        cfg.backend = b;
    }
    let model = load_model(&args.model)?;
    let x = load_tensor(&args.tensor)?;
    let result = replay(&model, &x, &cfg)?;
    match result.verdict {
        Verdict::Clean => emit("no bug"),
        Verdict::Discarded => emit("discarded: trusted backends disagree"),
        Verdict::Bug(report) => emit(&serde_json::to_string_pretty(&report).expect("report serializes")),
    }
}

fn diversity(dir: &Path) -> Result<(), CampaignError> {
    let report = diversity_report(dir)?;
    emit(&serde_json::to_string_pretty(&report).expect("report serializes"))
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut cfg = read_config(args.config.as_deref())?;
    cfg.optimizer.faults.extend(args.faults);
    cfg.optimizer.check().map_err(CampaignError::Config)?;
    let stdin = io::stdin();
    wire::serve(stdin.lock(), BufWriter::new(io::stdout().lock()), &cfg.optimizer).context("serving requests")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<()> = match cli.command {
        Command::Fuzz(a) => fuzz(a).map_err(Into::into),
        Command::Replay(a) => run_replay(a).map_err(Into::into),
        Command::Diversity { dir } => diversity(&dir).map_err(Into::into),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<CampaignError>() {
                Some(CampaignError::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
