//! `datasafe`: device enrollment, copyright registration and transfer over a
//! file-backed ledger, plus direct access to the watermark tools.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Config;
use error::CliError;
use output::Output;

#[derive(Parser, Debug)]
#[command(
    name = "datasafe",
    version,
    about = "PUF-bound copyright registration and transfer"
)]
struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    root: PathBuf,
    /// Config file (default: datasafe.toml under the root, if present).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// One JSON record per line on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Manufacture, register and inspect devices.
    #[command(subcommand)]
    Device(DeviceCmd),
    /// Register media on the ledger.
    #[command(subcommand)]
    File(FileCmd),
    /// Run scripted transfer sessions.
    #[command(subcommand)]
    Transfer(TransferCmd),
    /// Watermark tools.
    #[command(subcommand)]
    Wm(WmCmd),
    /// Create, inspect and check the ledger file.
    #[command(subcommand)]
    Ledger(LedgerCmd),
}

/// Overrides for the per-device seeds normally derived from the master seed.
#[derive(Args, Debug, Clone, Copy, Default)]
pub struct SeedArgs {
    #[arg(long)]
    pub identity_seed: Option<u64>,
    #[arg(long)]
    pub noise_seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum DeviceCmd {
    /// Enroll a device with the manufacturer and write its state file.
    Enroll {
        id: String,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Register an enrolled device's identity with the CA on the ledger.
    Register {
        id: String,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Print a device's public key and address.
    Show {
        id: String,
        #[command(flatten)]
        seeds: SeedArgs,
    },
}

#[derive(Subcommand, Debug)]
enum FileCmd {
    /// Record a BMP's digest with the device as holder.
    Register {
        bmp: PathBuf,
        #[arg(long)]
        device: String,
        #[command(flatten)]
        seeds: SeedArgs,
    },
}

#[derive(Subcommand, Debug)]
enum TransferCmd {
    /// Execute a scenario file end to end. Exit code 0 iff every step met
    /// its expectation and the last action succeeded.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Where the run's ledger and transcript go (default runs/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum WmCmd {
    /// Embed a watermark and write the location key.
    Embed {
        cover: PathBuf,
        output: PathBuf,
        #[arg(
            long,
            conflicts_with = "watermark_file",
            required_unless_present = "watermark_file"
        )]
        watermark_hex: Option<String>,
        #[arg(long)]
        watermark_file: Option<PathBuf>,
        #[arg(long)]
        key_out: PathBuf,
        /// Embedding seed (default: master seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract a watermark with a location key; prints hex.
    Extract {
        covered: PathBuf,
        #[arg(long)]
        key: PathBuf,
    },
    /// PSNR in dB between two images of equal size; `inf` if identical.
    Psnr { original: PathBuf, covered: PathBuf },
}

#[derive(Subcommand, Debug)]
enum LedgerCmd {
    /// Create the ledger file with a genesis block.
    Init {
        /// Initial token balance, as DEVICE=AMOUNT.
        #[arg(long = "balance")]
        balances: Vec<String>,
    },
    /// Replay the file and check every hash, signature and balance.
    Verify {
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Print every block and transaction.
    Dump {
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Holders of a copyright chain, oldest first. KEY is a txid, a digest
    /// (hex) or a path to the file itself.
    Trace {
        key: String,
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
}

fn run(cli: Cli, out: &mut Output) -> Result<u8, CliError> {
    let cfg = Config::load(&cli.root, cli.config.as_deref(), std::env::vars())?;
    let ctx = commands::Ctx::new(cli.root, cfg);
    match cli.command {
        Command::Device(DeviceCmd::Enroll { id, seeds }) => ctx.device_enroll(out, &id, seeds),
        Command::Device(DeviceCmd::Register { id, seeds }) => ctx.device_register(out, &id, seeds),
        Command::Device(DeviceCmd::Show { id, seeds }) => ctx.device_show(out, &id, seeds),
        Command::File(FileCmd::Register { bmp, device, seeds }) => {
            ctx.file_register(out, &bmp, &device, seeds)
        }
        Command::Transfer(TransferCmd::Run { scenario, out: dir }) => {
            ctx.transfer_run(out, &scenario, dir.as_deref())
        }
        Command::Wm(WmCmd::Embed {
            cover,
            output,
            watermark_hex,
            watermark_file,
            key_out,
            seed,
        }) => ctx.wm_embed(
            out,
            &cover,
            &output,
            watermark_hex.as_deref(),
            watermark_file.as_deref(),
            &key_out,
            seed,
        ),
        Command::Wm(WmCmd::Extract { covered, key }) => ctx.wm_extract(out, &covered, &key),
        Command::Wm(WmCmd::Psnr { original, covered }) => ctx.wm_psnr(out, &original, &covered),
        Command::Ledger(LedgerCmd::Init { balances }) => ctx.ledger_init(out, &balances),
        Command::Ledger(LedgerCmd::Verify { ledger }) => ctx.ledger_verify(out, ledger.as_deref()),
        Command::Ledger(LedgerCmd::Dump { ledger }) => ctx.ledger_dump(out, ledger.as_deref()),
        Command::Ledger(LedgerCmd::Trace { key, ledger }) => {
            ctx.ledger_trace(out, &key, ledger.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = Output::new(cli.json);
    match run(cli, &mut out) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code())
        }
    }
}
