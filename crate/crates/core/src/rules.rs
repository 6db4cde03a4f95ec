//! Ordered 5-tuple firewall rules and the line-oriented rules language.
//!
//! A rules document holds one rule per line:
//!
//! ```text
//! # action proto src_ip        dst_ip        src_port dst_port
//! allow    tcp   167.205.3.11  167.205.65.32 25       8080
//! deny     tcp   192.168.*.*   *             80       *
//! allow    udp   167.205.65.5  *             *        *
//! allow    tcp   *             134.25.5.2    >1023    80
//! ```
//!
//! Rules are evaluated first-match-wins in file order. A packet that matches
//! no rule is denied; the default cannot be changed.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// IANA protocol numbers understood by name in the rules language.
pub const PROTO_ICMP: u8 = 1;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

pub fn protocol_name(proto: u8) -> Option<&'static str> {
    match proto {
        PROTO_ICMP => Some("icmp"),
        PROTO_TCP => Some("tcp"),
        PROTO_UDP => Some("udp"),
        _ => None,
    }
}

pub fn protocol_by_name(name: &str) -> Option<u8> {
    match name.to_ascii_lowercase().as_str() {
        "icmp" => Some(PROTO_ICMP),
        "tcp" => Some(PROTO_TCP),
        "udp" => Some(PROTO_UDP),
        _ => None,
    }
}

/// Bit width of an inspected header field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldWidth {
    Bits8,
    Bits16,
    Bits32,
}

impl FieldWidth {
    pub const fn bits(self) -> u32 {
        match self {
            FieldWidth::Bits8 => 8,
            FieldWidth::Bits16 => 16,
            FieldWidth::Bits32 => 32,
        }
    }

    pub const fn max(self) -> u32 {
        match self {
            FieldWidth::Bits8 => u8::MAX as u32,
            FieldWidth::Bits16 => u16::MAX as u32,
            FieldWidth::Bits32 => u32::MAX,
        }
    }
}

/// The five inspected header fields, in inspection order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Field {
    Proto,
    SrcIp,
    DstIp,
    SrcPort,
    DstPort,
}

impl Field {
    pub const ALL: [Field; 5] = [
        Field::Proto,
        Field::SrcIp,
        Field::DstIp,
        Field::SrcPort,
        Field::DstPort,
    ];

    pub const fn width(self) -> FieldWidth {
        match self {
            Field::Proto => FieldWidth::Bits8,
            Field::SrcIp | Field::DstIp => FieldWidth::Bits32,
            Field::SrcPort | Field::DstPort => FieldWidth::Bits16,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Field::Proto => "proto",
            Field::SrcIp => "src_ip",
            Field::DstIp => "dst_ip",
            Field::SrcPort => "src_port",
            Field::DstPort => "dst_port",
        }
    }
}

/// Match pattern over one header field. Values are held as `u32` and are
/// bounded by the width of the field the pattern is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldPattern {
    Any,
    Exact(u32),
    /// The top `len` bits of the field equal those of `value`.
    Prefix { value: u32, len: u8 },
    /// Strictly greater than the operand.
    Greater(u32),
    /// Strictly less than the operand.
    Less(u32),
    /// Inclusive on both ends.
    Range { lo: u32, hi: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatternError {
    #[error("value {value} out of range for a {bits}-bit field")]
    OutOfRange { value: u64, bits: u32 },
    #[error("invalid prefix length /{len} for a {bits}-bit field")]
    InvalidPrefixLen { len: u32, bits: u32 },
    #[error("pattern `{0}` matches no value")]
    EmptyMatch(String),
    #[error("inverted range {lo}-{hi}")]
    InvertedRange { lo: u32, hi: u32 },
}

fn prefix_mask(len: u8, width: FieldWidth) -> u32 {
    let bits = width.bits();
    let len = u32::from(len);
    if len == 0 {
        0
    } else {
        (width.max() >> (bits - len)) << (bits - len)
    }
}

impl FieldPattern {
    /// Checks the pattern against `width` and puts it in canonical form.
    ///
    /// Full-span ranges and `/0` prefixes become `Any`, a full-length prefix
    /// becomes `Exact`, and host bits below a prefix are cleared. Patterns
    /// that can never match are rejected.
    pub fn normalize(self, width: FieldWidth) -> Result<FieldPattern, PatternError> {
        let max = width.max();
        let bits = width.bits();
        let check = |v: u32| {
            if v > max {
                Err(PatternError::OutOfRange {
                    value: u64::from(v),
                    bits,
                })
            } else {
                Ok(v)
            }
        };
        match self {
            FieldPattern::Any => Ok(FieldPattern::Any),
            FieldPattern::Exact(v) => check(v).map(FieldPattern::Exact),
            FieldPattern::Prefix { value, len } => {
                if u32::from(len) > bits {
                    return Err(PatternError::InvalidPrefixLen {
                        len: u32::from(len),
                        bits,
                    });
                }
                check(value)?;
                if len == 0 {
                    Ok(FieldPattern::Any)
                } else if u32::from(len) == bits {
                    Ok(FieldPattern::Exact(value))
                } else {
                    Ok(FieldPattern::Prefix {
                        value: value & prefix_mask(len, width),
                        len,
                    })
                }
            }
            FieldPattern::Greater(n) => {
                check(n)?;
                if n == max {
                    Err(PatternError::EmptyMatch(format!(">{n}")))
                } else {
                    Ok(FieldPattern::Greater(n))
                }
            }
            FieldPattern::Less(n) => {
                check(n)?;
                if n == 0 {
                    Err(PatternError::EmptyMatch("<0".into()))
                } else {
                    Ok(FieldPattern::Less(n))
                }
            }
            FieldPattern::Range { lo, hi } => {
                check(lo)?;
                check(hi)?;
                if lo > hi {
                    Err(PatternError::InvertedRange { lo, hi })
                } else if lo == 0 && hi == max {
                    Ok(FieldPattern::Any)
                } else {
                    Ok(FieldPattern::Range { lo, hi })
                }
            }
        }
    }

    /// Direct semantic test of `value` against the pattern.
    pub fn matches(&self, width: FieldWidth, value: u32) -> bool {
        match *self {
            FieldPattern::Any => true,
            FieldPattern::Exact(v) => value == v,
            FieldPattern::Prefix { value: p, len } => {
                let mask = prefix_mask(len, width);
                value & mask == p & mask
            }
            FieldPattern::Greater(n) => value > n,
            FieldPattern::Less(n) => value < n,
            FieldPattern::Range { lo, hi } => lo <= value && value <= hi,
        }
    }

    /// Inclusive interval of matching values, or `None` when nothing matches.
    pub fn bounds(&self, width: FieldWidth) -> Option<(u32, u32)> {
        let max = width.max();
        match *self {
            FieldPattern::Any => Some((0, max)),
            FieldPattern::Exact(v) => Some((v, v)),
            FieldPattern::Prefix { value, len } => {
                let mask = prefix_mask(len, width);
                Some((value & mask, (value & mask) | (!mask & max)))
            }
            FieldPattern::Greater(n) => (n < max).then(|| (n + 1, max)),
            FieldPattern::Less(n) => (n > 0).then(|| (0, n - 1)),
            FieldPattern::Range { lo, hi } => (lo <= hi).then_some((lo, hi)),
        }
    }
}

/// Renders `*`, `N`, `N/len`, `>N`, `<N`, `N-M`.
fn fmt_numeric(p: &FieldPattern, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match *p {
        FieldPattern::Any => f.write_str("*"),
        FieldPattern::Exact(v) => write!(f, "{v}"),
        FieldPattern::Prefix { value, len } => write!(f, "{value}/{len}"),
        FieldPattern::Greater(n) => write!(f, ">{n}"),
        FieldPattern::Less(n) => write!(f, "<{n}"),
        FieldPattern::Range { lo, hi } => write!(f, "{lo}-{hi}"),
    }
}

struct Displayed<'a>(Field, &'a FieldPattern);

impl fmt::Display for Displayed<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let Displayed(field, pattern) = *self;
        match (field, pattern) {
            (Field::Proto, FieldPattern::Exact(v)) => match protocol_name(*v as u8) {
                Some(name) => f.write_str(name),
                None => write!(f, "{v}"),
            },
            (Field::SrcIp | Field::DstIp, FieldPattern::Exact(v)) => {
                write!(f, "{}", Ipv4Addr::from(*v))
            }
            (Field::SrcIp | Field::DstIp, FieldPattern::Prefix { value, len }) => {
                write!(f, "{}/{len}", Ipv4Addr::from(*value))
            }
            _ => fmt_numeric(pattern, f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Permit,
    Deny,
}

impl Action {
    pub fn is_permit(self) -> bool {
        self == Action::Permit
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Permit => "allow",
            Action::Deny => "deny",
        })
    }
}

/// One firewall rule. Every field carries an explicit pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rule {
    pub proto: FieldPattern,
    pub src_ip: FieldPattern,
    pub dst_ip: FieldPattern,
    pub src_port: FieldPattern,
    pub dst_port: FieldPattern,
    pub action: Action,
}

impl Rule {
    /// Builds a rule, normalizing each pattern against its field width.
    pub fn new(
        proto: FieldPattern,
        src_ip: FieldPattern,
        dst_ip: FieldPattern,
        src_port: FieldPattern,
        dst_port: FieldPattern,
        action: Action,
    ) -> Result<Rule, PatternError> {
        Rule {
            proto,
            src_ip,
            dst_ip,
            src_port,
            dst_port,
            action,
        }
        .normalized()
    }

    /// A rule that matches every packet.
    pub fn match_all(action: Action) -> Rule {
        Rule {
            proto: FieldPattern::Any,
            src_ip: FieldPattern::Any,
            dst_ip: FieldPattern::Any,
            src_port: FieldPattern::Any,
            dst_port: FieldPattern::Any,
            action,
        }
    }

    pub fn pattern(&self, field: Field) -> &FieldPattern {
        match field {
            Field::Proto => &self.proto,
            Field::SrcIp => &self.src_ip,
            Field::DstIp => &self.dst_ip,
            Field::SrcPort => &self.src_port,
            Field::DstPort => &self.dst_port,
        }
    }

    pub fn pattern_mut(&mut self, field: Field) -> &mut FieldPattern {
        match field {
            Field::Proto => &mut self.proto,
            Field::SrcIp => &mut self.src_ip,
            Field::DstIp => &mut self.dst_ip,
            Field::SrcPort => &mut self.src_port,
            Field::DstPort => &mut self.dst_port,
        }
    }

    pub fn normalized(mut self) -> Result<Rule, PatternError> {
        for field in Field::ALL {
            let p = self.pattern_mut(field);
            *p = p.normalize(field.width())?;
        }
        Ok(self)
    }

    pub fn is_match_all(&self) -> bool {
        Field::ALL
            .iter()
            .all(|&f| *self.pattern(f) == FieldPattern::Any)
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.action)?;
        for field in Field::ALL {
            write!(f, " {}", Displayed(field, self.pattern(field)))?;
        }
        Ok(())
    }
}

/// Ordered rule list with an implicit trailing deny.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> RuleSet {
        RuleSet { rules }
    }

    pub const fn default_action(&self) -> Action {
        Action::Deny
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn normalized(&self) -> Result<RuleSet, PatternError> {
        self.rules
            .iter()
            .map(|r| r.normalized())
            .collect::<Result<_, _>>()
            .map(RuleSet::new)
    }
}

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for rule in &self.rules {
            writeln!(f, "{rule}")?;
        }
        Ok(())
    }
}

impl FromStr for RuleSet {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_rules(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("{0}")]
    Syntax(String),
    #[error(transparent)]
    Pattern(#[from] PatternError),
}

/// Error from [`parse_rules`]; line and column are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub kind: ParseErrorKind,
}

fn syntax(msg: impl Into<String>) -> ParseErrorKind {
    ParseErrorKind::Syntax(msg.into())
}

/// Splits on whitespace, keeping the 1-based character column of each token.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start: Option<(usize, usize)> = None;
    for (col, (idx, ch)) in line.char_indices().enumerate() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some((col + 1, idx)),
            (true, Some((c, s))) => {
                out.push((c, &line[s..idx]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some((c, s)) = start {
        out.push((c, &line[s..]));
    }
    out
}

fn parse_number(tok: &str, width: FieldWidth) -> Result<u32, ParseErrorKind> {
    if tok.is_empty() || !tok.bytes().all(|b| b.is_ascii_digit()) {
        return Err(syntax(format!("expected a number, found `{tok}`")));
    }
    // Anything too long for u64 is out of range for every field anyway.
    let value: u64 = tok.parse().unwrap_or(u64::MAX);
    if value > u64::from(width.max()) {
        return Err(PatternError::OutOfRange {
            value,
            bits: width.bits(),
        }
        .into());
    }
    Ok(value as u32)
}

fn parse_numeric(tok: &str, width: FieldWidth) -> Result<FieldPattern, ParseErrorKind> {
    let pattern = if tok == "*" {
        FieldPattern::Any
    } else if let Some(rest) = tok.strip_prefix('>') {
        FieldPattern::Greater(parse_number(rest, width)?)
    } else if let Some(rest) = tok.strip_prefix('<') {
        FieldPattern::Less(parse_number(rest, width)?)
    } else if let Some((value, len)) = tok.split_once('/') {
        let len = parse_number(len, FieldWidth::Bits8)?;
        if len > width.bits() {
            return Err(PatternError::InvalidPrefixLen {
                len,
                bits: width.bits(),
            }
            .into());
        }
        FieldPattern::Prefix {
            value: parse_number(value, width)?,
            len: len as u8,
        }
    } else if let Some((lo, hi)) = tok.split_once('-') {
        FieldPattern::Range {
            lo: parse_number(lo, width)?,
            hi: parse_number(hi, width)?,
        }
    } else {
        FieldPattern::Exact(parse_number(tok, width)?)
    };
    Ok(pattern.normalize(width)?)
}

fn parse_proto(tok: &str) -> Result<FieldPattern, ParseErrorKind> {
    match protocol_by_name(tok) {
        Some(p) => Ok(FieldPattern::Exact(u32::from(p))),
        None if tok.starts_with(|c: char| c.is_ascii_alphabetic()) => {
            Err(syntax(format!("unknown protocol `{tok}`")))
        }
        None => parse_numeric(tok, FieldWidth::Bits8),
    }
}

fn parse_ip(tok: &str) -> Result<FieldPattern, ParseErrorKind> {
    let width = FieldWidth::Bits32;
    if tok == "*" {
        return Ok(FieldPattern::Any);
    }
    if let Some((addr, len)) = tok.split_once('/') {
        let value: Ipv4Addr = addr
            .parse()
            .map_err(|_| syntax(format!("invalid IPv4 address `{addr}`")))?;
        let len = match parse_number(len, FieldWidth::Bits8) {
            Ok(len) if len <= 32 => len,
            _ => {
                return Err(PatternError::InvalidPrefixLen {
                    len: len.parse().unwrap_or(u32::MAX),
                    bits: 32,
                }
                .into())
            }
        };
        return Ok(FieldPattern::Prefix {
            value: u32::from(value),
            len: len as u8,
        }
        .normalize(width)?);
    }
    let parts: Vec<&str> = tok.split('.').collect();
    if parts.len() != 4 {
        return Err(syntax(format!("invalid IPv4 address `{tok}`")));
    }
    let mut value = 0u32;
    let mut exact_octets = 0u8;
    let mut wildcard_seen = false;
    for part in parts {
        if part == "*" {
            wildcard_seen = true;
            value <<= 8;
            continue;
        }
        if wildcard_seen {
            return Err(syntax(format!(
                "non-contiguous wildcard in `{tok}`; only trailing octets may be `*`"
            )));
        }
        let octet = parse_number(part, FieldWidth::Bits8)?;
        value = (value << 8) | octet;
        exact_octets += 1;
    }
    Ok(FieldPattern::Prefix {
        value,
        len: exact_octets * 8,
    }
    .normalize(width)?)
}

fn parse_action(tok: &str) -> Result<Action, ParseErrorKind> {
    match tok.to_ascii_lowercase().as_str() {
        "allow" | "permit" => Ok(Action::Permit),
        "deny" => Ok(Action::Deny),
        _ => Err(syntax(format!("expected `allow` or `deny`, found `{tok}`"))),
    }
}

fn parse_line(toks: &[(usize, &str)]) -> Result<Rule, (usize, ParseErrorKind)> {
    let at = |i: usize| toks[i].0;
    if toks.len() != 6 {
        let col = toks.get(6).map_or(toks.last().map_or(1, |t| t.0), |t| t.0);
        return Err((
            col,
            syntax(format!(
                "expected 6 tokens (action proto src_ip dst_ip src_port dst_port), found {}",
                toks.len()
            )),
        ));
    }
    let action = parse_action(toks[0].1).map_err(|e| (at(0), e))?;
    let proto = parse_proto(toks[1].1).map_err(|e| (at(1), e))?;
    let src_ip = parse_ip(toks[2].1).map_err(|e| (at(2), e))?;
    let dst_ip = parse_ip(toks[3].1).map_err(|e| (at(3), e))?;
    let src_port = parse_numeric(toks[4].1, FieldWidth::Bits16).map_err(|e| (at(4), e))?;
    let dst_port = parse_numeric(toks[5].1, FieldWidth::Bits16).map_err(|e| (at(5), e))?;
    Ok(Rule {
        proto,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        action,
    })
}

/// Parses a rules document into an ordered [`RuleSet`].
pub fn parse_rules(text: &str) -> Result<RuleSet, ParseError> {
    let mut rules = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let toks = tokens(line);
        if toks.is_empty() {
            continue;
        }
        let rule = parse_line(&toks).map_err(|(column, kind)| ParseError {
            line: idx + 1,
            column,
            kind,
        })?;
        rules.push(rule);
    }
    Ok(RuleSet { rules })
}

/// Convenience wrapper: true iff `value` satisfies `pattern` for a field of
/// the given width.
pub fn pattern_matches(pattern: &FieldPattern, width: FieldWidth, value: u32) -> bool {
    pattern.matches(width, value)
}
