//! Lowers a [`RuleSet`] into rules-memory words.
//!
//! Every field pattern is an interval of field values. The interval is split
//! into byte-level comparisons, most significant byte first, following the
//! inspection order proto, source address, destination address, source port,
//! destination port. A rule becomes one or more conjunctions of such checks.
//! Each conjunction is laid out as consecutive words: a passing check falls
//! through to the next word, a failing one jumps to the next conjunction, and
//! the last check of a conjunction is the terminal that emits the verdict.
//! One unconditional deny word closes the image.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{CompareOp, MemoryImage, Selector, SubRule, MEMORY_WORDS};
use crate::rules::{Action, Field, FieldPattern, FieldWidth, PatternError, Rule, RuleSet};

/// Upper bound on conjunctions produced for a single rule.
pub const MAX_ALTERNATIVES: usize = 64;

/// One comparison of an 8-bit sub-field against a literal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubFieldCheck {
    pub selector: Selector,
    pub op: CompareOp,
    pub operand: u8,
}

impl SubFieldCheck {
    pub fn new(selector: Selector, op: CompareOp, operand: u8) -> Self {
        let operand = if op == CompareOp::Always { 0 } else { operand };
        SubFieldCheck {
            selector,
            op,
            operand,
        }
    }

    pub fn eq(selector: Selector, operand: u8) -> Self {
        Self::new(selector, CompareOp::Eq, operand)
    }

    pub fn gt(selector: Selector, operand: u8) -> Self {
        Self::new(selector, CompareOp::Gt, operand)
    }

    pub fn lt(selector: Selector, operand: u8) -> Self {
        Self::new(selector, CompareOp::Lt, operand)
    }

    pub fn always() -> Self {
        Self::new(Selector::PROTO, CompareOp::Always, 0)
    }
}

/// Checks that must all pass, in execution order.
pub type Conjunction = Vec<SubFieldCheck>;

/// A rule in lowered form: any one alternative passing yields `verdict`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckChain {
    pub alternatives: Vec<Conjunction>,
    pub verdict: Action,
}

impl CheckChain {
    pub fn word_count(&self) -> usize {
        self.alternatives.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("rule {rule}: {field}: {source}")]
    Pattern {
        rule: usize,
        field: &'static str,
        #[source]
        source: PatternError,
    },
    #[error("rule {rule}: {field} pattern matches no value")]
    EmptyMatch { rule: usize, field: &'static str },
    #[error("rule {rule}: expands to {count} alternatives (limit {MAX_ALTERNATIVES})")]
    TooManyAlternatives { rule: usize, count: usize },
    #[error("rules memory overflow: {words} words > {MEMORY_WORDS}")]
    Overflow { words: usize },
}

/// Checks for `lo <= byte <= hi` on one sub-field. Empty when every byte
/// value passes.
fn byte_range(lo: u8, hi: u8, sel: Selector) -> Conjunction {
    debug_assert!(lo <= hi);
    match (lo, hi) {
        (0, 255) => vec![],
        (lo, hi) if lo == hi => vec![SubFieldCheck::eq(sel, lo)],
        (0, hi) => vec![SubFieldCheck::lt(sel, hi + 1)],
        (lo, 255) => vec![SubFieldCheck::gt(sel, lo - 1)],
        (lo, hi) => vec![SubFieldCheck::gt(sel, lo - 1), SubFieldCheck::lt(sel, hi + 1)],
    }
}

fn prefixed(head: SubFieldCheck, tails: Vec<Conjunction>) -> impl Iterator<Item = Conjunction> {
    tails.into_iter().map(move |tail| {
        let mut c = Vec::with_capacity(tail.len() + 1);
        c.push(head);
        c.extend(tail);
        c
    })
}

/// Covers `[lo, hi]` over a value spread across `sels.len()` bytes, most
/// significant first, with a disjunction of byte-level conjunctions.
///
/// Where the leading bytes of `lo` and `hi` differ, the interval splits into
/// a partial segment at the leading byte of `lo`, a middle segment decided by
/// the leading byte alone, and a partial segment at the leading byte of
/// `hi`; segments that are empty or whole collapse. Alternatives come out in
/// ascending value order.
pub fn decompose_range(lo: u32, hi: u32, sels: &[Selector]) -> Vec<Conjunction> {
    assert!(!sels.is_empty() && sels.len() <= 4, "1 to 4 sub-fields");
    assert!(lo <= hi, "inverted range");
    let shift = 8 * (sels.len() as u32 - 1);
    let rest_max = ((1u64 << shift) - 1) as u32;
    let (lead_lo, lead_hi) = ((lo >> shift) as u8, (hi >> shift) as u8);
    if sels.len() == 1 {
        return vec![byte_range(lead_lo, lead_hi, sels[0])];
    }
    let (rest_lo, rest_hi) = (lo & rest_max, hi & rest_max);
    let (lead, rest) = (sels[0], &sels[1..]);

    if lead_lo == lead_hi {
        return prefixed(
            SubFieldCheck::eq(lead, lead_lo),
            decompose_range(rest_lo, rest_hi, rest),
        )
        .collect();
    }

    let mut out = Vec::new();
    let mut mid = (lead_lo, lead_hi);
    if rest_lo != 0 {
        out.extend(prefixed(
            SubFieldCheck::eq(lead, lead_lo),
            decompose_range(rest_lo, rest_max, rest),
        ));
        mid.0 += 1;
    }
    let mut upper = Vec::new();
    if rest_hi != rest_max {
        upper.extend(prefixed(
            SubFieldCheck::eq(lead, lead_hi),
            decompose_range(0, rest_hi, rest),
        ));
        mid.1 -= 1;
    }
    if mid.0 <= mid.1 {
        out.push(byte_range(mid.0, mid.1, lead));
    }
    out.extend(upper);
    out
}

fn field_selectors(field: Field) -> Vec<Selector> {
    let (base, n) = match field {
        Field::Proto => (Selector::PROTO, 1),
        Field::SrcIp => (Selector::SRC_IP, 4),
        Field::DstIp => (Selector::DST_IP, 4),
        Field::SrcPort => (Selector::SRC_PORT, 2),
        Field::DstPort => (Selector::DST_PORT, 2),
    };
    (0..n).map(|i| base.offset(i)).collect()
}

fn pattern_bounds(p: &FieldPattern, width: FieldWidth) -> Result<(u32, u32), PatternError> {
    let p = p.normalize(width)?;
    p.bounds(width)
        .ok_or_else(|| PatternError::EmptyMatch(format!("{p:?}")))
}

/// Alternatives for an 8-bit pattern on one selector. `Any` yields a single
/// alternative with zero checks.
pub fn decompose_pattern8(p: &FieldPattern, sel: Selector) -> Result<Vec<Conjunction>, PatternError> {
    let (lo, hi) = pattern_bounds(p, FieldWidth::Bits8)?;
    Ok(decompose_range(lo, hi, &[sel]))
}

/// Alternatives covering exactly `[lo, hi]` over a 16-bit port split into
/// its high and low bytes.
pub fn decompose_range16(lo: u16, hi: u16, hi_sel: Selector, lo_sel: Selector) -> Vec<Conjunction> {
    decompose_range(u32::from(lo), u32::from(hi), &[hi_sel, lo_sel])
}

/// Alternatives for a 32-bit address pattern on four consecutive selectors
/// starting at `base`. Exact values and prefixes always give exactly one
/// conjunction.
pub fn decompose_ip(p: &FieldPattern, base: Selector) -> Result<Vec<Conjunction>, PatternError> {
    let (lo, hi) = pattern_bounds(p, FieldWidth::Bits32)?;
    let sels: Vec<Selector> = (0..4).map(|i| base.offset(i)).collect();
    Ok(decompose_range(lo, hi, &sels))
}

fn field_alternatives(rule_idx: usize, rule: &Rule, field: Field) -> Result<Vec<Conjunction>, CompileError> {
    let pattern = rule.pattern(field);
    let (lo, hi) = pattern_bounds(pattern, field.width()).map_err(|source| match source {
        PatternError::EmptyMatch(_) => CompileError::EmptyMatch {
            rule: rule_idx,
            field: field.name(),
        },
        source => CompileError::Pattern {
            rule: rule_idx,
            field: field.name(),
            source,
        },
    })?;
    Ok(decompose_range(lo, hi, &field_selectors(field)))
}

/// Lowers one rule (at position `rule_idx`, used in errors) into its
/// alternatives: the cross product of per-field alternatives, each flattened
/// in inspection order.
pub fn lower_rule(rule_idx: usize, rule: &Rule) -> Result<CheckChain, CompileError> {
    let mut acc: Vec<Conjunction> = vec![vec![]];
    for field in Field::ALL {
        let alts = field_alternatives(rule_idx, rule, field)?;
        let count = acc.len() * alts.len();
        if count > MAX_ALTERNATIVES {
            return Err(CompileError::TooManyAlternatives {
                rule: rule_idx,
                count,
            });
        }
        acc = acc
            .iter()
            .flat_map(|head| {
                alts.iter().map(move |tail| {
                    let mut c = head.clone();
                    c.extend_from_slice(tail);
                    c
                })
            })
            .collect();
    }
    for conj in &mut acc {
        if conj.is_empty() {
            conj.push(SubFieldCheck::always());
        }
    }
    Ok(CheckChain {
        alternatives: acc,
        verdict: rule.action,
    })
}

/// A compiled image plus the word span each rule occupies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Compiled {
    pub image: MemoryImage,
    pub rule_spans: Vec<Range<usize>>,
}

/// Compiles a rule set into a rules-memory image.
pub fn compile(rs: &RuleSet) -> Result<MemoryImage, CompileError> {
    compile_with_spans(rs).map(|c| c.image)
}

pub fn compile_with_spans(rs: &RuleSet) -> Result<Compiled, CompileError> {
    let chains = rs
        .rules
        .iter()
        .enumerate()
        .map(|(i, r)| lower_rule(i, r))
        .collect::<Result<Vec<_>, _>>()?;

    let total = chains.iter().map(CheckChain::word_count).sum::<usize>() + 1;
    if total > MEMORY_WORDS {
        return Err(CompileError::Overflow { words: total });
    }

    let mut words = Vec::with_capacity(total);
    let mut rule_spans = Vec::with_capacity(chains.len());
    for chain in &chains {
        let start = words.len();
        let permit = chain.verdict.is_permit();
        for conj in &chain.alternatives {
            let fail_target = (words.len() + conj.len()) as u8;
            for (k, check) in conj.iter().enumerate() {
                let last = k + 1 == conj.len();
                words.push(SubRule {
                    jump: last && permit,
                    selector: check.selector,
                    op: check.op,
                    operand: check.operand,
                    address: fail_target,
                    action: last,
                });
            }
        }
        rule_spans.push(start..words.len());
    }
    words.push(SubRule::terminal(rs.default_action().is_permit()));

    let image = MemoryImage::new(words).expect("size checked above");
    Ok(Compiled { image, rule_spans })
}
