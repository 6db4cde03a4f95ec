use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const RULES: &str = "\
allow tcp 167.205.3.11 167.205.65.32 25 8080
deny  tcp 192.168.*.*  *.*.*.*       80 *
allow udp 167.205.65.5 *.*.*.*       *  *
allow tcp *            134.25.5.2    >1023 80
";

const DENY_ALL: &str = "00000000 000001100000000000000001\n";

fn pce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pce")).args(args).output().expect("spawn pce")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sample(name: &str) -> String {
    format!("{}/../../samples/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Compiles the sample rules into `dir` and returns the image path.
fn compiled(dir: &Path) -> PathBuf {
    let rules = write(dir, "t.rules", RULES);
    let img = dir.join("t.img");
    let o = pce(&["compile", s(&rules), "-o", s(&img)]);
    assert!(o.status.success(), "{}", stderr(&o));
    img
}

#[test]
fn compile_reports_memory_use() {
    let dir = TempDir::new().unwrap();
    let rules = write(dir.path(), "t.rules", RULES);
    let img = dir.path().join("t.img");
    let o = pce(&["compile", s(&rules), "-o", s(&img), "--print-asm"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.starts_with("32 words / 256"), "{out}");
    assert!(out.contains("; rule 3:"));
    assert_eq!(fs::read_to_string(&img).unwrap().lines().count(), 32);
}

#[test]
fn empty_rules_compile_to_one_word() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("e.img");
    let o = pce(&["compile", &sample("empty.rules"), "-o", s(&img)]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("1 words / 256"));
    assert_eq!(fs::read_to_string(&img).unwrap(), DENY_ALL);
}

#[test]
fn overflow_exits_one() {
    let dir = TempDir::new().unwrap();
    let text: String = (0..40).map(|i| format!("allow tcp 10.0.0.{i} 10.0.1.{i} {} 80\n", 1000 + i)).collect();
    let rules = write(dir.path(), "big.rules", &text);
    let img = dir.path().join("big.img");
    let o = pce(&["compile", s(&rules), "-o", s(&img)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rules memory overflow: 521 words > 256"), "{}", stderr(&o));
    assert!(!img.exists(), "no truncated image may be written");
}

#[test]
fn bad_rules_exit_two() {
    let dir = TempDir::new().unwrap();
    let rules = write(dir.path(), "bad.rules", "allow tcp * * 70000 *\n");
    let o = pce(&["compile", s(&rules), "-o", s(&dir.path().join("x.img"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"));
}

#[test]
fn run_classifies_sample_packets() {
    let dir = TempDir::new().unwrap();
    let img = compiled(dir.path());
    let o = pce(&["run", s(&img), "--csv", &sample("packets.csv")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let verdicts: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(verdicts[0], "1 tcp 167.205.3.11 167.205.65.32 25 8080 PERMIT 13");
    assert!(verdicts[1].ends_with("DENY 7"), "{}", verdicts[1]);
    assert!(verdicts[2].contains("PERMIT"));
    assert!(verdicts[3].contains("PERMIT"));
    assert!(verdicts[4].contains("DENY"), "port 1023 is not above 1023");
    assert!(verdicts[5].contains("DENY"));
    assert!(out.contains("# packets 6"));
}

#[test]
fn run_output_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let img = compiled(dir.path());
    let a = pce(&["run", s(&img), "--pcap", &sample("mixed.pcap"), "--trace"]);
    let b = pce(&["run", s(&img), "--pcap", &sample("mixed.pcap"), "--trace"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn deny_all_image_denies_in_one_cycle() {
    let dir = TempDir::new().unwrap();
    let img = write(dir.path(), "deny.img", DENY_ALL);
    let o = pce(&["run", s(&img), "--csv", &sample("packets.csv")]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.ends_with(" DENY 1")).count(), 6);
    assert!(out.contains("# cycles min 1 avg 1.00 max 1"));
}

#[test]
fn pcap_non_ip_is_counted_and_policy_applies() {
    let dir = TempDir::new().unwrap();
    let img = compiled(dir.path());
    let o = pce(&["run", s(&img), "--pcap", &sample("mixed.pcap"), "--stats-json"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("2 non-classifiable \"non-IPv4 ethertype\" DENY 0"));
    let json: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    assert_eq!(json["packets"], 4);
    assert_eq!(json["non_classifiable"], 2);
    assert!(json["wall_time_ms"].is_number());

    let o = pce(&["run", s(&img), "--pcap", &sample("mixed.pcap"), "--pass-nonip"]);
    assert!(stdout(&o).contains("4 non-classifiable \"fragment\" PERMIT 0"));
}

#[test]
fn invalid_image_exits_two() {
    let dir = TempDir::new().unwrap();
    // Selector 15 and no closing terminal.
    let img = write(dir.path(), "bad.img", "00000000 011110000000000000000010\n");
    let o = pce(&["run", s(&img), "--csv", &sample("packets.csv")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("invalid selector"), "{}", stderr(&o));

    let img = write(dir.path(), "short.img", "00000000 0101\n");
    let o = pce(&["run", s(&img), "--csv", &sample("packets.csv")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("word not 24 bits"));
}

#[test]
fn runtime_fault_exits_three() {
    let dir = TempDir::new().unwrap();
    // EQ proto 6, jump to 0 on match: tcp loops until the watchdog.
    let img = write(
        dir.path(),
        "loop.img",
        "00000000 100000000000110000000000\n00000001 000001100000000000000001\n",
    );
    let o = pce(&["run", s(&img), "--csv", &sample("packets.csv")]);
    assert_eq!(o.status.code(), Some(2), "validation refuses the loop");
    assert!(stderr(&o).contains("backward edge"));

    let o = pce(&["run", s(&img), "--csv", &sample("packets.csv"), "--no-validate"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("packet 1") && stderr(&o).contains("watchdog"), "{}", stderr(&o));
}

#[test]
fn diff_is_clean_on_compiled_rules() {
    let dir = TempDir::new().unwrap();
    let rules = write(dir.path(), "t.rules", RULES);
    let report = dir.path().join("r.jsonl");
    let o = pce(&["diff", s(&rules), "--seeds", "5", "--headers", "200", "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains(": 0 mismatches"));
    assert!(!report.exists());

    let o = pce(&["diff", &sample("empty.rules"), "--seeds", "2", "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn diff_catches_flipped_verdict() {
    let dir = TempDir::new().unwrap();
    let img = compiled(dir.path());
    let text = fs::read_to_string(&img).unwrap();
    // Word 12 is rule 0's terminal; clearing bit 23 turns its permit into deny.
    let mutant: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 12 {
                let (addr, word) = l.split_once(' ').unwrap();
                assert!(word.starts_with('1') && word.ends_with('1'));
                format!("{addr} 0{}\n", &word[1..])
            } else {
                format!("{l}\n")
            }
        })
        .collect();
    let mutant_img = write(dir.path(), "mutant.img", &mutant);
    let rules = write(dir.path(), "t.rules", RULES);
    let report = dir.path().join("r.jsonl");
    let o = pce(&[
        "diff",
        s(&rules),
        "--image",
        s(&mutant_img),
        "--seeds",
        "3",
        "--headers",
        "300",
        "--report",
        s(&report),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let lines = fs::read_to_string(&report).unwrap();
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["oracle"]["matched_rule"], 0);
    assert_eq!(first["oracle"]["permit"], true);
    assert!(first["seed"].is_number());
}

#[test]
fn bench_reports_cycles_with_disclaimer() {
    let dir = TempDir::new().unwrap();
    let deny = write(dir.path(), "deny.img", DENY_ALL);
    let o = pce(&["bench", s(&deny), "--packets", "5000"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("hardware frequency not modeled"));
    assert!(out.contains("cycles_mode 1"));
    assert!(out.lines().any(|l| l == "1 5000"), "{out}");

    let img = compiled(dir.path());
    let row1 = write(dir.path(), "row1.csv", "tcp,167.205.3.11,167.205.65.32,25,8080\n");
    let o = pce(&["bench", s(&img), "--csv", s(&row1)]);
    assert!(stdout(&o).contains("cycles_mode 13"));
}

#[test]
fn disasm_lists_every_word() {
    let dir = TempDir::new().unwrap();
    let img = compiled(dir.path());
    let o = pce(&["disasm", s(&img)]);
    assert!(o.status.success());
    assert!(!stdout(&o).contains("warning"));
}
