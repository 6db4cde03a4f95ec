//! `pce`: compile firewall rules into sub-rule images, run them over packet
//! captures, cross-check against the reference classifier, and benchmark.
//!
//! Exit codes: 0 ok, 1 policy or diff failure, 2 invalid input, 3 engine
//! fault at run time.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod stats;

#[derive(Debug, Parser)]
#[command(name = "pce", version, about = "Packet classification engine toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compile a rules file into a rules-memory image.
    Compile {
        rules: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Print a disassembly of the compiled image.
        #[arg(long)]
        print_asm: bool,
    },
    /// Classify packets with a compiled image.
    Run {
        image: PathBuf,
        #[command(flatten)]
        packets: PacketSource,
        /// Print the per-clock engine trace under each verdict.
        #[arg(long)]
        trace: bool,
        /// Permit packets that cannot be classified (non-IPv4, fragments).
        #[arg(long)]
        pass_nonip: bool,
        /// Treat malformed CSV rows as non-classifiable instead of failing.
        #[arg(long)]
        lenient: bool,
        /// Print statistics as one JSON object, including wall time.
        #[arg(long)]
        stats_json: bool,
        /// Skip static image validation; looping images then hit the watchdog.
        #[arg(long)]
        no_validate: bool,
    },
    /// Check compiled engine verdicts against the linear reference classifier.
    Diff {
        rules: PathBuf,
        /// Number of header-generator seeds.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Random headers per seed; boundary headers are always added.
        #[arg(long, default_value_t = 1000)]
        headers: usize,
        /// Test this image instead of compiling the rules.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Where to write the JSON-lines mismatch report.
        #[arg(long, default_value = "diff-report.jsonl")]
        report: PathBuf,
    },
    /// Measure software classification throughput and cycle distribution.
    Bench {
        image: PathBuf,
        /// Use these packets instead of synthetic traffic.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Synthetic packets to generate.
        #[arg(long, default_value_t = 100_000)]
        packets: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print a human-readable listing of an image file.
    Disasm { image: PathBuf },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct PacketSource {
    /// CSV rows `proto,src_ip,dst_ip,src_port,dst_port`.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Classic pcap capture with Ethernet link type.
    #[arg(long)]
    pcap: Option<PathBuf>,
}

/// An error carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn policy(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    pub fn fault(message: impl Into<String>) -> Self {
        Failure { code: 3, message: message.into() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compile { rules, output, print_asm } => commands::compile(&rules, &output, print_asm),
        Command::Run {
            image,
            packets,
            trace,
            pass_nonip,
            lenient,
            stats_json,
            no_validate,
        } => commands::run(
            &image,
            packets.csv.as_deref(),
            packets.pcap.as_deref(),
            commands::RunFlags {
                trace,
                pass_nonip,
                lenient,
                stats_json,
                validate: !no_validate,
            },
        ),
        Command::Diff {
            rules,
            seeds,
            headers,
            image,
            report,
        } => commands::diff(&rules, seeds, headers, image.as_deref(), &report),
        Command::Bench { image, csv, packets, seed } => commands::bench(&image, csv.as_deref(), packets, seed),
        Command::Disasm { image } => commands::disasm(&image),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("pce: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
