//! Reference classifier and differential testing harness.
//!
//! The oracle walks the rule list and tests each field with
//! [`FieldPattern::matches`]. It never looks at bytes, sub-rules or the
//! engine, so a disagreement always points at the compiler or the engine.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compiler::{compile, CompileError};
use crate::engine::{Engine, EngineError, Verdict};
use crate::ingest::PacketHeader;
use crate::isa::MemoryImage;
use crate::rules::{Action, Field, FieldPattern, FieldWidth, Rule, RuleSet, PROTO_ICMP, PROTO_TCP, PROTO_UDP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OracleVerdict {
    pub permit: bool,
    pub matched_rule: Option<usize>,
}

/// First matching rule in order decides; no match denies.
pub fn classify_linear(rs: &RuleSet, h: &PacketHeader) -> OracleVerdict {
    for (idx, rule) in rs.rules.iter().enumerate() {
        let hit = Field::ALL
            .iter()
            .all(|&f| rule.pattern(f).matches(f.width(), h.field(f)));
        if hit {
            return OracleVerdict {
                permit: rule.action == Action::Permit,
                matched_rule: Some(idx),
            };
        }
    }
    OracleVerdict {
        permit: rs.default_action() == Action::Permit,
        matched_rule: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    pub index: usize,
    pub header: PacketHeader,
    pub engine: Result<Verdict, EngineError>,
    pub oracle: OracleVerdict,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DiffReport {
    pub checked: usize,
    pub mismatches: Vec<Mismatch>,
}

impl DiffReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }

    /// Combines reports from shards of the same run.
    pub fn merge(&mut self, other: DiffReport) {
        self.checked += other.checked;
        self.mismatches.extend(other.mismatches);
        self.mismatches.sort_by_key(|m| m.index);
    }
}

/// Compiles `rs` and compares engine against oracle on every header.
pub fn differential_run(rs: &RuleSet, headers: &[PacketHeader]) -> Result<DiffReport, CompileError> {
    let image = compile(rs)?;
    Ok(differential_run_image(rs, image, headers))
}

/// Compares a given image (possibly hand-patched) against the oracle for
/// `rs`. Engine faults count as mismatches. Mismatching runs carry a trace.
pub fn differential_run_image(rs: &RuleSet, image: MemoryImage, headers: &[PacketHeader]) -> DiffReport {
    let mut report = DiffReport::default();
    let mut engine = match Engine::load(image) {
        Ok(e) => e,
        Err(err) => {
            report.checked = headers.len();
            report.mismatches = headers
                .iter()
                .enumerate()
                .map(|(index, h)| Mismatch {
                    index,
                    header: *h,
                    engine: Err(err.clone()),
                    oracle: classify_linear(rs, h),
                })
                .collect();
            return report;
        }
    };
    for (index, h) in headers.iter().enumerate() {
        let oracle = classify_linear(rs, h);
        let got = engine.classify(*h);
        report.checked += 1;
        if !matches!(&got, Ok(v) if v.permit == oracle.permit) {
            engine.reset();
            let engine_result = engine.classify_traced(*h);
            engine.reset();
            report.mismatches.push(Mismatch {
                index,
                header: *h,
                engine: engine_result,
                oracle,
            });
        }
    }
    report
}

const PORT_POOL: [u32; 12] = [0, 1, 22, 25, 53, 80, 255, 256, 443, 1023, 1024, 8080];

fn pick_value(rng: &mut ChaCha8Rng, width: FieldWidth, pool: &[u32]) -> u32 {
    if !pool.is_empty() && rng.gen_bool(0.6) {
        *pool.choose(rng).expect("non-empty pool")
    } else {
        rng.gen_range(0..=width.max())
    }
}

fn random_numeric(rng: &mut ChaCha8Rng, width: FieldWidth, pool: &[u32]) -> FieldPattern {
    let max = width.max();
    match rng.gen_range(0..10) {
        0..=3 => FieldPattern::Any,
        4 | 5 => FieldPattern::Exact(pick_value(rng, width, pool)),
        6 => FieldPattern::Greater(pick_value(rng, width, pool).min(max - 1)),
        7 => FieldPattern::Less(pick_value(rng, width, pool).max(1)),
        _ => {
            let a = pick_value(rng, width, pool);
            let b = pick_value(rng, width, pool);
            FieldPattern::Range {
                lo: a.min(b),
                hi: a.max(b),
            }
        }
    }
}

fn random_proto(rng: &mut ChaCha8Rng) -> FieldPattern {
    match rng.gen_range(0..10) {
        0..=2 => FieldPattern::Any,
        3..=5 => FieldPattern::Exact(u32::from(PROTO_TCP)),
        6 => FieldPattern::Exact(u32::from(PROTO_UDP)),
        7 => FieldPattern::Exact(u32::from(PROTO_ICMP)),
        _ => random_numeric(rng, FieldWidth::Bits8, &[1, 6, 17, 47]),
    }
}

fn random_addr(rng: &mut ChaCha8Rng, bases: &[u32]) -> FieldPattern {
    let value = if rng.gen_bool(0.75) {
        // Perturb a shared base so rules overlap.
        bases.choose(rng).expect("bases") ^ (rng.gen::<u32>() >> rng.gen_range(8..=32).min(31))
    } else {
        rng.gen()
    };
    match rng.gen_range(0..10) {
        0..=2 => FieldPattern::Any,
        3 | 4 => FieldPattern::Exact(value),
        5..=7 => FieldPattern::Prefix {
            value,
            len: *[8u8, 16, 24].choose(rng).expect("lens"),
        },
        _ => FieldPattern::Prefix {
            value,
            len: rng.gen_range(1..=31),
        },
    }
}

fn random_rule(rng: &mut ChaCha8Rng, bases: &[u32]) -> Rule {
    let action = if rng.gen_bool(0.5) {
        Action::Permit
    } else {
        Action::Deny
    };
    let rule = Rule {
        proto: random_proto(rng),
        src_ip: random_addr(rng, bases),
        dst_ip: random_addr(rng, bases),
        src_port: random_numeric(rng, FieldWidth::Bits16, &PORT_POOL),
        dst_port: random_numeric(rng, FieldWidth::Bits16, &PORT_POOL),
        action,
    };
    rule.normalized().expect("generator only builds valid patterns")
}

/// Reproducible random rule set of at most `max_rules` rules that always
/// compiles within rules memory. Rules that would overflow are redrawn a few
/// times and then dropped.
pub fn gen_random_ruleset(seed: u64, max_rules: usize) -> RuleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(0..=max_rules);
    let bases: Vec<u32> = (0..3).map(|_| rng.gen()).collect();
    let mut rs = RuleSet::default();
    for _ in 0..target {
        for _attempt in 0..4 {
            rs.rules.push(random_rule(&mut rng, &bases));
            if compile(&rs).is_ok() {
                break;
            }
            rs.rules.pop();
        }
    }
    rs
}

fn sample_in(rng: &mut ChaCha8Rng, p: &FieldPattern, width: FieldWidth) -> u32 {
    match p.bounds(width) {
        Some((lo, hi)) => rng.gen_range(lo..=hi),
        None => rng.gen_range(0..=width.max()),
    }
}

/// `count` reproducible headers for `rs`: a mix of uniform random headers
/// and headers drawn inside a rule's patterns, some with one field
/// perturbed.
pub fn gen_random_headers(rs: &RuleSet, seed: u64, count: usize) -> Vec<PacketHeader> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_4ead);
    (0..count)
        .map(|_| {
            let mut h = PacketHeader {
                proto: rng.gen(),
                src_ip: rng.gen(),
                dst_ip: rng.gen(),
                src_port: rng.gen(),
                dst_port: rng.gen(),
            };
            if rs.is_empty() || rng.gen_bool(0.3) {
                return h;
            }
            let rule = rs.rules.choose(&mut rng).expect("non-empty");
            for f in Field::ALL {
                let v = sample_in(&mut rng, rule.pattern(f), f.width());
                h.set_field(f, v);
            }
            if rng.gen_bool(0.4) {
                let f = *Field::ALL.choose(&mut rng).expect("fields");
                let v = rng.gen_range(0..=f.width().max());
                h.set_field(f, v);
            }
            h
        })
        .collect()
}

/// Values around the edges of a pattern: just outside, on and just inside
/// each end, around the literal of `>`/`<`, and around every byte boundary
/// where the compiled form switches segments. Clamped to the field.
pub fn boundary_values(p: &FieldPattern, width: FieldWidth) -> Vec<u32> {
    let max = u64::from(width.max());
    let Some((lo, hi)) = p.bounds(width) else {
        return vec![];
    };
    let (lo, hi) = (u64::from(lo), u64::from(hi));
    let mut raw: Vec<i64> = Vec::new();
    for edge in [lo as i64, hi as i64] {
        raw.extend([edge - 1, edge, edge + 1]);
    }
    if let FieldPattern::Greater(n) | FieldPattern::Less(n) = p {
        let n = i64::from(*n);
        raw.extend([n - 1, n, n + 1]);
    }
    for shift in (8..width.bits()).step_by(8) {
        let low_mask = (1u64 << shift) - 1;
        for edge in [lo | low_mask, hi & !low_mask] {
            raw.extend([edge as i64 - 1, edge as i64, edge as i64 + 1]);
        }
    }
    let mut seen = HashSet::new();
    raw.into_iter()
        .map(|v| v.clamp(0, max as i64) as u32)
        .filter(|v| seen.insert(*v))
        .collect()
}

/// For every rule, a header sitting at the low end of every pattern, plus
/// variants moving one field across each of its boundary values.
pub fn gen_boundary_headers(rs: &RuleSet) -> Vec<PacketHeader> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut push = |h: PacketHeader| {
        if seen.insert(h) {
            out.push(h);
        }
    };
    for rule in &rs.rules {
        let mut base = PacketHeader::default();
        for f in Field::ALL {
            if let Some((lo, _)) = rule.pattern(f).bounds(f.width()) {
                base.set_field(f, lo);
            }
        }
        push(base);
        for f in Field::ALL {
            for v in boundary_values(rule.pattern(f), f.width()) {
                let mut h = base;
                h.set_field(f, v);
                push(h);
            }
        }
    }
    out
}
