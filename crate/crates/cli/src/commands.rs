use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use pce_core::compiler::{compile_with_spans, CompileError};
use pce_core::engine::{Engine, TRACE_HEADER};
use pce_core::ingest::{parse_csv, read_pcap, CsvMode, IngestRecord, PacketHeader};
use pce_core::isa::{read_image, validate_image, MemoryImage, MEMORY_WORDS};
use pce_core::oracle::{differential_run_image, gen_boundary_headers, gen_random_headers, DiffReport};
use pce_core::rules::{parse_rules, RuleSet};

use crate::stats::{Histogram, RunStats};
use crate::Failure;

pub const BENCH_DISCLAIMER: &str =
    "hardware frequency not modeled: software throughput below is not comparable to an FPGA clock rate";

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn load_rules(path: &Path) -> Result<RuleSet, Failure> {
    parse_rules(&read_text(path)?).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn load_image(path: &Path) -> Result<MemoryImage, Failure> {
    read_image(&read_text(path)?).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

/// Loads an image and refuses it if static validation finds anything.
fn load_valid_image(path: &Path) -> Result<MemoryImage, Failure> {
    let image = load_image(path)?;
    let diags = validate_image(&image);
    if diags.is_empty() {
        return Ok(image);
    }
    let listing: Vec<String> = diags.iter().map(|d| format!("  {d}")).collect();
    Err(Failure::input(format!(
        "{}: invalid image:\n{}",
        path.display(),
        listing.join("\n")
    )))
}

fn io_failure(e: io::Error) -> Failure {
    Failure::input(format!("write failed: {e}"))
}

pub fn compile(rules: &Path, output: &Path, print_asm: bool) -> Result<(), Failure> {
    let rs = load_rules(rules)?;
    let compiled = compile_with_spans(&rs).map_err(|e| match e {
        CompileError::Overflow { .. } => Failure::policy(e.to_string()),
        _ => Failure::input(e.to_string()),
    })?;
    let image = &compiled.image;
    fs::write(output, image.to_text())
        .map_err(|e| Failure::input(format!("{}: {e}", output.display())))?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    writeln!(
        out,
        "{} words / {MEMORY_WORDS} ({:.1}% of rules memory), {} rules",
        image.len(),
        100.0 * image.len() as f64 / MEMORY_WORDS as f64,
        rs.len()
    )
    .map_err(io_failure)?;
    if print_asm {
        let listing = image.disassemble();
        let lines: Vec<&str> = listing.lines().collect();
        for (i, (rule, span)) in rs.rules.iter().zip(&compiled.rule_spans).enumerate() {
            writeln!(out, "; rule {i}: {rule}").map_err(io_failure)?;
            for line in &lines[span.clone()] {
                writeln!(out, "{line}").map_err(io_failure)?;
            }
        }
        writeln!(out, "; default deny").map_err(io_failure)?;
        writeln!(out, "{}", lines[lines.len() - 1]).map_err(io_failure)?;
    }
    out.flush().map_err(io_failure)
}

pub fn disasm(image: &Path) -> Result<(), Failure> {
    let image = load_image(image)?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    write!(out, "{}", image.disassemble()).map_err(io_failure)?;
    for d in validate_image(&image) {
        writeln!(out, "; warning: {d}").map_err(io_failure)?;
    }
    out.flush().map_err(io_failure)
}

#[derive(Debug, Clone, Copy)]
pub struct RunFlags {
    pub trace: bool,
    pub pass_nonip: bool,
    pub lenient: bool,
    pub stats_json: bool,
    pub validate: bool,
}

fn load_packets(csv: Option<&Path>, pcap: Option<&Path>, lenient: bool) -> Result<Vec<IngestRecord>, Failure> {
    match (csv, pcap) {
        (Some(path), None) => {
            let mode = if lenient { CsvMode::Lenient } else { CsvMode::Strict };
            parse_csv(&read_text(path)?, &path.display().to_string(), mode)
                .map_err(|e| Failure::input(format!("{}: {e}", path.display())))
        }
        (None, Some(path)) => read_pcap(path).map_err(|e| Failure::input(e.to_string())),
        _ => Err(Failure::input("exactly one of --csv or --pcap is required")),
    }
}

#[derive(Serialize)]
struct StatsJson<'a> {
    #[serde(flatten)]
    stats: &'a RunStats,
    wall_time_ms: f64,
}

pub fn run(image: &Path, csv: Option<&Path>, pcap: Option<&Path>, flags: RunFlags) -> Result<(), Failure> {
    let started = Instant::now();
    let image = if flags.validate {
        load_valid_image(image)?
    } else {
        load_image(image)?
    };
    let records = load_packets(csv, pcap, flags.lenient)?;
    let engine = Engine::load(image).map_err(|e| Failure::input(e.to_string()))?;

    // Workers classify in parallel with their own engines; collect keeps
    // input order.
    let results: Vec<_> = records
        .par_iter()
        .map_init(
            || engine.clone(),
            |eng, rec| {
                rec.header().map(|h| {
                    if flags.trace {
                        eng.classify_traced(*h)
                    } else {
                        eng.classify(*h)
                    }
                })
            },
        )
        .collect();

    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut stats = RunStats::default();
    if flags.trace {
        writeln!(out, "{TRACE_HEADER}").map_err(io_failure)?;
    }
    for (i, (rec, result)) in records.iter().zip(results).enumerate() {
        let n = i + 1;
        match (rec.header(), result) {
            (Some(h), Some(Ok(v))) => {
                stats.record_verdict(v.permit, v.cycles);
                let verdict = if v.permit { "PERMIT" } else { "DENY" };
                writeln!(out, "{n} {h} {verdict} {}", v.cycles).map_err(io_failure)?;
                for t in v.trace.iter().flatten() {
                    writeln!(out, "  {t}").map_err(io_failure)?;
                }
            }
            (Some(h), Some(Err(e))) => {
                out.flush().map_err(io_failure)?;
                return Err(Failure::fault(format!("packet {n} ({h}): {e}")));
            }
            _ => {
                stats.record_non_classifiable();
                let verdict = if flags.pass_nonip { "PERMIT" } else { "DENY" };
                let reason = rec.reason().unwrap_or("unknown");
                writeln!(out, "{n} non-classifiable \"{reason}\" {verdict} 0").map_err(io_failure)?;
            }
        }
    }
    if flags.stats_json {
        let json = StatsJson {
            stats: &stats,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        let line = serde_json::to_string(&json).expect("stats serialize");
        writeln!(out, "{line}").map_err(io_failure)?;
    } else {
        write!(out, "{stats}").map_err(io_failure)?;
    }
    out.flush().map_err(io_failure)
}

#[derive(Serialize)]
struct ReportLine<'a> {
    seed: u64,
    #[serde(flatten)]
    mismatch: &'a pce_core::oracle::Mismatch,
}

pub fn diff(rules: &Path, seeds: u64, headers: usize, image: Option<&Path>, report_path: &Path) -> Result<(), Failure> {
    let rs = load_rules(rules)?;
    let image = match image {
        Some(path) => load_image(path)?,
        None => compile_with_spans(&rs)
            .map_err(|e| Failure::input(e.to_string()))?
            .image,
    };
    let boundary = gen_boundary_headers(&rs);

    let reports: Vec<(u64, DiffReport)> = (0..seeds.max(1))
        .into_par_iter()
        .map(|seed| {
            let mut hs = gen_random_headers(&rs, seed, headers);
            if seed == 0 {
                hs.extend_from_slice(&boundary);
            }
            (seed, differential_run_image(&rs, image.clone(), &hs))
        })
        .collect();

    let checked: usize = reports.iter().map(|(_, r)| r.checked).sum();
    let mismatches: usize = reports.iter().map(|(_, r)| r.mismatches.len()).sum();
    println!(
        "checked {checked} headers ({} boundary) over {} seeds: {mismatches} mismatches",
        boundary.len(),
        seeds.max(1)
    );
    if mismatches == 0 {
        return Ok(());
    }

    let file = fs::File::create(report_path)
        .map_err(|e| Failure::input(format!("{}: {e}", report_path.display())))?;
    let mut w = BufWriter::new(file);
    for (seed, report) in &reports {
        for m in &report.mismatches {
            let line = serde_json::to_string(&ReportLine { seed: *seed, mismatch: m }).expect("report serialize");
            writeln!(w, "{line}").map_err(io_failure)?;
        }
    }
    w.flush().map_err(io_failure)?;
    Err(Failure::policy(format!(
        "{mismatches} mismatches; report written to {}",
        report_path.display()
    )))
}

pub fn bench(image: &Path, csv: Option<&Path>, packets: usize, seed: u64) -> Result<(), Failure> {
    let image = load_valid_image(image)?;
    let headers: Vec<PacketHeader> = match csv {
        Some(path) => load_packets(Some(path), None, false)?
            .iter()
            .filter_map(|r| r.header().copied())
            .collect(),
        None => gen_random_headers(&RuleSet::default(), seed, packets),
    };
    let mut engine = Engine::load(image).map_err(|e| Failure::input(e.to_string()))?;

    let mut hist = Histogram::default();
    let started = Instant::now();
    for (i, h) in headers.iter().enumerate() {
        let v = engine
            .classify(*h)
            .map_err(|e| Failure::fault(format!("packet {}: {e}", i + 1)))?;
        hist.add(v.cycles);
    }
    let elapsed = started.elapsed().as_secs_f64();
    let rate = if elapsed > 0.0 { headers.len() as f64 / elapsed } else { f64::INFINITY };

    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mode = hist.mode().map_or("-".to_string(), |m| m.to_string());
    writeln!(out, "{BENCH_DISCLAIMER}").map_err(io_failure)?;
    writeln!(out, "packets {}", headers.len()).map_err(io_failure)?;
    writeln!(out, "elapsed_s {elapsed:.6}").map_err(io_failure)?;
    writeln!(out, "classifications_per_s {rate:.0}").map_err(io_failure)?;
    writeln!(out, "cycles_mode {mode}").map_err(io_failure)?;
    writeln!(out, "# cycles count").map_err(io_failure)?;
    for (cycles, count) in &hist.0 {
        writeln!(out, "{cycles} {count}").map_err(io_failure)?;
    }
    out.flush().map_err(io_failure)?;
    Ok(())
}
