use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dmas::harness::{
    self, emit_report, run_scenario, sweep_csv, sweep_pa_counts, verify_audit, AuditReport,
    Mode, Scenario,
};
use dmas::ledger::LedgerDump;

const EXIT_CONFIG: u8 = 1;
const EXIT_INVARIANT: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "dmas", version, about = "Virtual-time simulator for trust-aware agent interactions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write metrics, audit and summary files.
    Run {
        scenario: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a scenario at several PA counts and report the on-chain share.
    Sweep {
        /// Base scenario; the built-in paper setup when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        pa_counts: Vec<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for sweep.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check a cycle audit against a ledger dump.
    Verify {
        #[arg(long)]
        audit: PathBuf,
        #[arg(long)]
        ledger: PathBuf,
    },
    /// Print the built-in paper scenario as TOML.
    Scenario,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Dmas,
    Cmas,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Dmas => Mode::Dmas,
            ModeArg::Cmas => Mode::Cmas,
        }
    }
}

fn load(path: Option<&Path>, mode: Option<ModeArg>, seed: Option<u64>) -> Result<Scenario, ExitCode> {
    let mut scenario = match path {
        Some(p) => Scenario::from_file(p).map_err(|e| {
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG)
        })?,
        None => Scenario::default(),
    };
    if let Some(m) = mode {
        scenario.mode = m.into();
    }
    if let Some(s) = seed {
        scenario.seed = s;
    }
    Ok(scenario)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ExitCode> {
    let text = fs::read_to_string(path).map_err(|e| {
        eprintln!("cannot read {}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })?;
    serde_json::from_str(&text).map_err(|e| {
        eprintln!("cannot parse {}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })
}

fn run(cli: Cli) -> Result<(), ExitCode> {
    match cli.command {
        Command::Run {
            scenario,
            mode,
            seed,
            out,
        } => {
            let s = load(Some(&scenario), mode, seed)?;
            let output = run_scenario(&s).map_err(|e| {
                eprintln!("config error: {e}");
                ExitCode::from(EXIT_CONFIG)
            })?;
            emit_report(&output, &out).map_err(|e| {
                eprintln!("cannot write report to {}: {e}", out.display());
                ExitCode::from(EXIT_CONFIG)
            })?;
            print!("{}", harness::summary_text(&output));
            let mut violations: Vec<String> = output
                .metrics
                .requests
                .iter()
                .filter(|r| r.total_ms != r.on_chain_ms + r.off_chain_ms)
                .map(|r| format!("{} request {}: total != on-chain + off-chain", r.pa, r.request))
                .collect();
            if let Some(dump) = &output.ledger {
                violations.extend(verify_audit(&output.audit, dump));
            }
            if !violations.is_empty() {
                for v in &violations {
                    eprintln!("invariant violation: {v}");
                }
                return Err(ExitCode::from(EXIT_INVARIANT));
            }
            println!("wrote report to {}", out.display());
        }
        Command::Sweep {
            scenario,
            pa_counts,
            mode,
            seed,
            out,
        } => {
            let s = load(scenario.as_deref(), mode, seed)?;
            let rows = sweep_pa_counts(&s, &pa_counts).map_err(|e| {
                eprintln!("config error: {e}");
                ExitCode::from(EXIT_CONFIG)
            })?;
            let csv = sweep_csv(&rows);
            print!("{}", String::from_utf8_lossy(&csv));
            if let Some(dir) = out {
                fs::create_dir_all(&dir)
                    .and_then(|_| fs::write(dir.join("sweep.csv"), &csv))
                    .map_err(|e| {
                        eprintln!("cannot write sweep.csv to {}: {e}", dir.display());
                        ExitCode::from(EXIT_CONFIG)
                    })?;
            }
            let mut sorted = rows.clone();
            sorted.sort_by_key(|r| r.pa_count);
            if s.mode == Mode::Dmas {
                for w in sorted.windows(2) {
                    if w[1].on_chain_share > w[0].on_chain_share {
                        eprintln!(
                            "invariant violation: on-chain share rose from {:.4} at {} PAs to {:.4} at {} PAs",
                            w[0].on_chain_share, w[0].pa_count, w[1].on_chain_share, w[1].pa_count
                        );
                        return Err(ExitCode::from(EXIT_INVARIANT));
                    }
                }
            }
        }
        Command::Verify { audit, ledger } => {
            let audit: AuditReport = read_json(&audit)?;
            let dump: LedgerDump = read_json(&ledger)?;
            let violations = verify_audit(&audit, &dump);
            if violations.is_empty() {
                println!("ok: {} cycles verified against {} blocks", audit.cycles.len(), dump.blocks.len());
            } else {
                for v in &violations {
                    eprintln!("invariant violation: {v}");
                }
                return Err(ExitCode::from(EXIT_INVARIANT));
            }
        }
        Command::Scenario => {
            let text = toml::to_string_pretty(&Scenario::default()).map_err(|e| {
                eprintln!("cannot render scenario: {e}");
                ExitCode::from(EXIT_CONFIG)
            })?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
