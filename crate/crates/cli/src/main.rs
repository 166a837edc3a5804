//! `ratchetlab`: command-line driver over a workspace directory.

mod commands;
mod error;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;
use crate::workspace::ClockMode;

#[derive(Parser, Debug)]
#[command(name = "ratchetlab", version, about = "Prekey messaging, compromise replay and metadata analysis scenarios")]
struct Cli {
    /// Workspace directory holding all state.
    #[arg(long, short = 'w', global = true, default_value = ".")]
    workspace: PathBuf,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create the workspace with empty server state.
    Init {
        #[arg(long, value_enum, default_value = "system")]
        clock: ClockMode,
        /// Deterministic, insecure entropy for reproducible runs.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a user's identity, signed prekey and one-time prekeys.
    UserAdd {
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 100)]
        one_time: usize,
        /// Replace existing keys and drop all sessions (a fresh install).
        #[arg(long)]
        reinstall: bool,
    },
    /// Upload a user's public keys to the server.
    Register {
        #[arg(long)]
        user: String,
        #[arg(long)]
        replace: bool,
    },
    /// Encrypt and relay one message, establishing a session on first contact.
    Send {
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long)]
        msg: String,
        /// Append the envelope bytes to this capture file.
        #[arg(long)]
        capture: Option<PathBuf>,
    },
    /// Drain a user's queue and print the plaintexts.
    Recv {
        #[arg(long)]
        user: String,
    },
    GroupCreate {
        #[arg(long)]
        group: String,
        #[arg(long, value_delimiter = ',', required = true)]
        members: Vec<String>,
    },
    GroupSend {
        #[arg(long)]
        from: String,
        #[arg(long)]
        group: String,
        #[arg(long)]
        msg: String,
        #[arg(long)]
        capture: Option<PathBuf>,
    },
    /// Print both parties' safety numbers and whether they match.
    Verify {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
    },
    /// Snapshot a device's full state, or replay captured traffic against a snapshot.
    Compromise(CompromiseArgs),
    /// Run traffic analysis over the server ledger.
    MetadataReport(ReportArgs),
    /// Seeded conversation workload; writes sim-ledger.jsonl and sim-report.{json,txt}.
    Simulate {
        #[arg(long, default_value_t = 50)]
        users: usize,
        #[arg(long, default_value_t = 5_000)]
        messages: usize,
        #[arg(long, default_value_t = 5)]
        groups: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
pub struct CompromiseArgs {
    #[arg(long, required_unless_present = "replay", conflicts_with = "replay", requires = "out")]
    pub user: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, requires = "captured")]
    pub replay: Option<PathBuf>,
    #[arg(long)]
    pub captured: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long, default_value_t = ratchetlab_core::metadata::DEFAULT_WINDOW_MS)]
    pub window_ms: u64,
    #[arg(long, default_value_t = ratchetlab_core::metadata::DEFAULT_MIN_GROUP_SIZE)]
    pub min_size: usize,
    /// Cluster fan-out bursts, ignoring group ids (default).
    #[arg(long, conflicts_with = "labeled")]
    pub blind: bool,
    /// Read group ids straight from the ledger.
    #[arg(long)]
    pub labeled: bool,
    /// Minutes east of UTC for the activity histograms.
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pub tz_offset: i32,
    /// Ledger to analyze instead of the workspace's own.
    #[arg(long)]
    pub ledger: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<commands::Output, CliError> {
    let ws = cli.workspace;
    match cli.command {
        Command::Init { clock, seed } => commands::init(&ws, clock, seed),
        Command::UserAdd { user, one_time, reinstall } => commands::user_add(&ws, &user, one_time, reinstall),
        Command::Register { user, replace } => commands::register(&ws, &user, replace),
        Command::Send { from, to, msg, capture } => commands::send(&ws, &from, &to, &msg, capture.as_deref()),
        Command::Recv { user } => commands::recv(&ws, &user),
        Command::GroupCreate { group, members } => commands::group_create(&ws, &group, members),
        Command::GroupSend { from, group, msg, capture } => commands::group_send(&ws, &from, &group, &msg, capture.as_deref()),
        Command::Verify { a, b } => commands::verify(&ws, &a, &b),
        Command::Compromise(args) => commands::compromise(&ws, args),
        Command::MetadataReport(args) => commands::metadata_report(&ws, args),
        Command::Simulate { users, messages, groups, seed } => commands::simulate(&ws, users, messages, groups, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(out) => {
            if json {
                println!("{}", out.json);
            } else {
                print!("{}", out.text);
            }
            ExitCode::from(out.exit)
        }
        Err(e) => {
            if json {
                println!("{}", serde_json::json!({ "error": e.to_string(), "exit_code": e.exit_code() }));
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
