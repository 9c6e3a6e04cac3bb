//! Command-line surface. Exit codes: 0 success, 1 usage or configuration
//! error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufReader};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::pipeline::{self, Artifacts};
use crate::harness::report::{emit_reports, read_metrics, summary_table, METRICS_CSV};
use crate::defenses::{DefenseConfig, DefenseKind};
use crate::service::{serve_stream, serve_tcp, write_audit_csv, Service};

#[derive(Parser, Debug)]
#[command(name = "besa", version, about = "Encoder stealing with perturbation detection and recovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every seed stream; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the target world splits and public worlds as csv.
    GenData,
    /// Pretrain the shadow encoder bank and its held-out part.
    TrainBank,
    /// Train meta-classifiers and recovery generators for each strategy set.
    TrainBesa,
    /// Serve the target encoder over stdin/stdout, or TCP with --listen.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Run the single cell described by the `[cell]` table.
    Attack,
    /// Run the full grid and write metrics, records and a summary.
    Matrix,
    /// Held-out detection accuracy and target/random probe accuracy.
    Eval,
    /// Rebuild records and summary from an existing metrics.csv.
    Report,
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    let out = cli.common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out));
    let art = Artifacts::new(out);
    match cli.command {
        Command::GenData => {
            let world = pipeline::build_world(&cfg)?;
            art.write_config(&cfg)?;
            art.write_world(&world)?;
            println!("wrote {} public worlds and 4 target splits to {}", world.public.len(), art.data_dir().display());
        }
        Command::TrainBank => {
            let world = pipeline::build_world(&cfg)?;
            art.write_config(&cfg)?;
            let (bank, held) = art.banks_or_train(&cfg, &world)?;
            println!("shadow bank: {} training, {} held-out encoders", bank.len(), held.len());
        }
        Command::TrainBesa => {
            let (bank, _) = art
                .banks()?
                .ok_or_else(|| Error::Config(format!("no shadow bank under {}; run `besa train-bank` first", art.dir.display())))?;
            let sets = pipeline::strategy_sets(&cfg)?;
            for m in art.besa_or_train(&cfg, &bank, &sets)? {
                let accs: Vec<String> = m
                    .detector
                    .classifiers
                    .iter()
                    .map(|c| format!("{} {:.3}", c.defense, c.held_out_accuracy))
                    .collect();
                println!("[{}]", accs.join(", "));
            }
        }
        Command::Serve { listen } => {
            let world = pipeline::build_world(&cfg)?;
            let target = art.target_or_train(&cfg, &world)?;
            let defense = match cfg.service.defense.as_str() {
                "none" => None,
                name => Some(DefenseConfig::fixed(
                    DefenseKind::preset(name, cfg.d_f()).map_err(|e| Error::Config(e.to_string()))?,
                )),
            };
            let service = Service::new(target, defense, cfg.service.budget, cfg.seed)?;
            match listen {
                Some(addr) => {
                    let server = serve_tcp(service, addr.as_str())?;
                    eprintln!("listening on {}", server.local_addr());
                    server.join();
                }
                None => {
                    let stdin = io::stdin();
                    serve_stream(&service, BufReader::new(stdin.lock()), io::stdout().lock())?;
                    fs::create_dir_all(&art.dir)?;
                    service.write_audit_csv(&art.dir.join("audit.csv"))?;
                }
            }
        }
        Command::Attack => {
            let (report, audit) = pipeline::run_single(&cfg, &art)?;
            let dir = art.dir.join("attack");
            pipeline::write_results(std::slice::from_ref(&report), &dir)?;
            write_audit_csv(&audit, &dir.join("audit.csv"))?;
            fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "{}: probe accuracy {}, {} queries",
                report.cell,
                report.probe_accuracy.map_or("-".into(), |a| format!("{:.4}", a)),
                report.queries_used
            );
        }
        Command::Matrix => {
            let reports = pipeline::run_experiment(&cfg, &art)?;
            let failed = reports.iter().filter(|r| r.error.is_some()).count();
            print!("{}", fs::read_to_string(art.dir.join("summary.md"))?);
            if failed > 0 {
                return Err(Error::Protocol(format!("{failed} of {} cells failed", reports.len())));
            }
        }
        Command::Eval => {
            let dir = art.dir.join("eval");
            fs::create_dir_all(&dir)?;
            let rows = pipeline::evaluate_detection(&cfg, &art)?;
            let mut w = csv::Writer::from_path(dir.join("detection.csv")).map_err(|e| Error::Io(e.into()))?;
            for r in &rows {
                w.serialize(r).map_err(|e| Error::Io(e.into()))?;
                println!(
                    "{:<28} verdict {:.4}  confidence {:.4}",
                    r.defense, r.verdict_accuracy, r.median_confidence
                );
            }
            w.flush()?;
            let (target, random) = pipeline::evaluate_probes(&cfg, &art)?;
            fs::write(dir.join("probe.csv"), format!("encoder,probe_accuracy\ntarget,{target}\nrandom_init,{random}\n"))?;
            println!("probe accuracy: target {target:.4}, random init {random:.4}");
        }
        Command::Report => {
            let path = art.dir.join(METRICS_CSV);
            if !path.exists() {
                return Err(Error::Config(format!("{} not found; run `besa matrix` first", path.display())));
            }
            let rows = read_metrics(&path)?;
            emit_reports(&rows, &art.dir)?;
            print!("{}", summary_table(&rows));
        }
    }
    Ok(())
}
