//! The 24-bit sub-rule instruction word and the rules-memory image.
//!
//! Word layout, most significant bit first:
//!
//! ```text
//!  23   22..19    18..17     16..9      8..1     0
//! JUMP  SELECTOR  OPERATION  OPERAND    ADDRESS  ACTION
//!  1b     4b         2b        8b         8b      1b
//! ```
//!
//! A non-terminal word (ACTION=0) that matches continues at `pc + 1`, or at
//! ADDRESS when JUMP is set. A terminal word (ACTION=1) that matches stops
//! the engine, and JUMP then carries the verdict (1 = permit). A word that
//! does not match always continues at ADDRESS.

use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::PacketHeader;

/// Number of addressable rules-memory words.
pub const MEMORY_WORDS: usize = 256;

const WORD_BITS: u32 = 24;
const WORD_MASK: u32 = (1 << WORD_BITS) - 1;

/// A 24-bit instruction word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Word(u32);

impl Word {
    pub const fn new(raw: u32) -> Option<Word> {
        if raw & !WORD_MASK == 0 {
            Some(Word(raw))
        } else {
            None
        }
    }

    pub const fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:024b}", self.0)
    }
}

/// The comparator criterion. The fourth code matches unconditionally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompareOp {
    Eq = 0b00,
    Gt = 0b01,
    Lt = 0b10,
    Always = 0b11,
}

impl CompareOp {
    pub const fn from_bits(bits: u8) -> CompareOp {
        match bits & 0b11 {
            0b00 => CompareOp::Eq,
            0b01 => CompareOp::Gt,
            0b10 => CompareOp::Lt,
            _ => CompareOp::Always,
        }
    }

    pub const fn bits(self) -> u8 {
        self as u8
    }

    /// `subfield <op> operand`.
    pub fn eval(self, subfield: u8, operand: u8) -> bool {
        match self {
            CompareOp::Eq => subfield == operand,
            CompareOp::Gt => subfield > operand,
            CompareOp::Lt => subfield < operand,
            CompareOp::Always => true,
        }
    }

    pub const fn mnemonic(self) -> &'static str {
        match self {
            CompareOp::Eq => "EQ",
            CompareOp::Gt => "GT",
            CompareOp::Lt => "LT",
            CompareOp::Always => "ALWAYS",
        }
    }
}

/// 4-bit index into the 13 header sub-fields. Values 13..=15 are
/// representable but select nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Selector(u8);

impl Selector {
    pub const PROTO: Selector = Selector(0);
    pub const SRC_IP: Selector = Selector(1);
    pub const DST_IP: Selector = Selector(5);
    pub const SRC_PORT: Selector = Selector(9);
    pub const DST_PORT: Selector = Selector(11);
    /// Count of selectors that name a sub-field.
    pub const VALID: u8 = 13;

    pub const fn new(index: u8) -> Option<Selector> {
        if index < 16 {
            Some(Selector(index))
        } else {
            None
        }
    }

    pub const fn index(self) -> u8 {
        self.0
    }

    pub const fn is_valid(self) -> bool {
        self.0 < Self::VALID
    }

    /// The selector `n` bytes further into the same field.
    pub const fn offset(self, n: u8) -> Selector {
        Selector((self.0 + n) & 0x0f)
    }

    /// The selected 8-bit slice of the header, or `None` for 13..=15.
    pub fn subfield(self, h: &PacketHeader) -> Option<u8> {
        let src = h.src_ip.to_be_bytes();
        let dst = h.dst_ip.to_be_bytes();
        let sp = h.src_port.to_be_bytes();
        let dp = h.dst_port.to_be_bytes();
        Some(match self.0 {
            0 => h.proto,
            1..=4 => src[usize::from(self.0 - 1)],
            5..=8 => dst[usize::from(self.0 - 5)],
            9 | 10 => sp[usize::from(self.0 - 9)],
            11 | 12 => dp[usize::from(self.0 - 11)],
            _ => return None,
        })
    }

    pub const fn name(self) -> &'static str {
        match self.0 {
            0 => "proto",
            1 => "sip.0",
            2 => "sip.1",
            3 => "sip.2",
            4 => "sip.3",
            5 => "dip.0",
            6 => "dip.1",
            7 => "dip.2",
            8 => "dip.3",
            9 => "sport.hi",
            10 => "sport.lo",
            11 => "dport.hi",
            12 => "dport.lo",
            _ => "invalid",
        }
    }
}

/// One decoded instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubRule {
    pub jump: bool,
    pub selector: Selector,
    pub op: CompareOp,
    pub operand: u8,
    pub address: u8,
    pub action: bool,
}

impl SubRule {
    /// Unconditional terminal carrying `permit` as its verdict.
    pub const fn terminal(permit: bool) -> SubRule {
        SubRule {
            jump: permit,
            selector: Selector::PROTO,
            op: CompareOp::Always,
            operand: 0,
            address: 0,
            action: true,
        }
    }

    pub fn encode(&self) -> Word {
        let raw = u32::from(self.jump) << 23
            | u32::from(self.selector.0) << 19
            | u32::from(self.op.bits()) << 17
            | u32::from(self.operand) << 9
            | u32::from(self.address) << 1
            | u32::from(self.action);
        Word(raw)
    }

    pub fn decode(word: Word) -> SubRule {
        let w = word.0;
        SubRule {
            jump: w >> 23 & 1 == 1,
            selector: Selector((w >> 19 & 0x0f) as u8),
            op: CompareOp::from_bits((w >> 17 & 0b11) as u8),
            operand: (w >> 9 & 0xff) as u8,
            address: (w >> 1 & 0xff) as u8,
            action: w & 1 == 1,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.action
    }

    /// Verdict a terminal word emits when it matches.
    pub fn verdict(&self) -> Option<bool> {
        self.action.then_some(self.jump)
    }
}

impl fmt::Display for SubRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.op == CompareOp::Always {
            write!(f, "{:<6}", self.op.mnemonic())?;
        } else {
            write!(
                f,
                "{:<6} {:<8} {:#04x}  fail->{:#04x}",
                self.op.mnemonic(),
                self.selector.name(),
                self.operand,
                self.address
            )?;
        }
        match (self.action, self.jump) {
            (true, true) => f.write_str("  => PERMIT"),
            (true, false) => f.write_str("  => DENY"),
            (false, true) => write!(f, "  then->{:#04x}", self.address),
            (false, false) => Ok(()),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IsaError {
    #[error("image has {0} words; rules memory holds at most 256")]
    TooLarge(usize),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
}

/// Contents of the rules memory, based at address 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryImage {
    words: Vec<SubRule>,
}

impl MemoryImage {
    pub fn new(words: Vec<SubRule>) -> Result<MemoryImage, IsaError> {
        if words.len() > MEMORY_WORDS {
            return Err(IsaError::TooLarge(words.len()));
        }
        Ok(MemoryImage { words })
    }

    pub fn words(&self) -> &[SubRule] {
        &self.words
    }

    pub fn get(&self, addr: usize) -> Option<&SubRule> {
        self.words.get(addr)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Replaces one word; used for patching and mutation testing.
    pub fn set(&mut self, addr: usize, word: SubRule) -> Option<SubRule> {
        self.words
            .get_mut(addr)
            .map(|slot| std::mem::replace(slot, word))
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> io::Result<()> {
        for (addr, sr) in self.words.iter().enumerate() {
            writeln!(sink, "{:08b} {}", addr, sr.encode())?;
        }
        Ok(())
    }

    /// Image file text, one `AAAAAAAA DDDD…` line per word.
    pub fn to_text(&self) -> String {
        let mut buf = Vec::with_capacity(self.words.len() * 34);
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("image text is ASCII")
    }

    /// Human-readable listing with addresses, raw words and mnemonics.
    pub fn disassemble(&self) -> String {
        self.words
            .iter()
            .enumerate()
            .map(|(addr, sr)| format!("{addr:#04x}  {}  {sr}\n", sr.encode()))
            .collect()
    }
}

fn parse_binary(digits: &str, width: usize) -> Option<u32> {
    if digits.len() != width || !digits.bytes().all(|b| b == b'0' || b == b'1') {
        return None;
    }
    u32::from_str_radix(digits, 2).ok()
}

/// Parses image file text. Exact inverse of [`MemoryImage::to_text`].
pub fn read_image(text: &str) -> Result<MemoryImage, IsaError> {
    let mut words = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |message: String| IsaError::Syntax {
            line: line_no,
            message,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(addr), Some(word), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err("expected `ADDRESS WORD`".into()));
        };
        let addr = parse_binary(addr, 8).ok_or_else(|| err("address not 8 bits".into()))? as usize;
        let word = parse_binary(word, 24).ok_or_else(|| err("word not 24 bits".into()))?;
        if words.len() >= MEMORY_WORDS {
            return Err(err("more than 256 words".into()));
        }
        if addr != words.len() {
            return Err(err(if addr < words.len() {
                format!("duplicate or non-ascending address {addr:08b}")
            } else {
                format!("address gap: expected {:08b}, found {addr:08b}", words.len())
            }));
        }
        words.push(SubRule::decode(Word(word)));
    }
    MemoryImage::new(words)
}

/// Writes image file text to `sink`.
pub fn write_image<W: Write>(img: &MemoryImage, sink: W) -> io::Result<()> {
    img.write_to(sink)
}

/// Static problems found in an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Diagnostic {
    EmptyImage,
    InvalidSelector { at: u8, selector: u8 },
    /// Control can run past the last word.
    FallOffEnd { at: u8 },
    /// An edge that does not move strictly forward.
    BackwardEdge { at: u8, target: u8 },
    MissingFinalTerminal,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::EmptyImage => f.write_str("empty image"),
            Diagnostic::InvalidSelector { at, selector } => {
                write!(f, "invalid selector {selector} at {at:#04x}")
            }
            Diagnostic::FallOffEnd { at } => write!(f, "fall-off-end reachable at {at:#04x}"),
            Diagnostic::BackwardEdge { at, target } => {
                write!(f, "backward edge at {at:#04x} -> {target:#04x}")
            }
            Diagnostic::MissingFinalTerminal => f.write_str("final word is not an ALWAYS terminal"),
        }
    }
}

/// Control-flow successors of the word at `pc`.
fn successors(pc: usize, sr: &SubRule) -> impl Iterator<Item = usize> {
    let fail = (sr.op != CompareOp::Always).then_some(usize::from(sr.address));
    let success = (!sr.action).then(|| {
        if sr.jump {
            usize::from(sr.address)
        } else {
            pc + 1
        }
    });
    fail.into_iter().chain(success)
}

/// Reports invalid selectors, reachable fall-off-end paths, non-forward
/// edges and a missing final ALWAYS terminal.
pub fn validate_image(img: &MemoryImage) -> Vec<Diagnostic> {
    let words = img.words();
    if words.is_empty() {
        return vec![Diagnostic::EmptyImage];
    }
    let mut diags = Vec::new();

    let mut reachable = vec![false; words.len()];
    let mut stack = vec![0usize];
    let mut fall_off = Vec::new();
    while let Some(pc) = stack.pop() {
        if reachable[pc] {
            continue;
        }
        reachable[pc] = true;
        for next in successors(pc, &words[pc]) {
            if next >= words.len() {
                fall_off.push(pc);
            } else if !reachable[next] {
                stack.push(next);
            }
        }
    }

    for (pc, sr) in words.iter().enumerate() {
        let at = pc as u8;
        if !sr.selector.is_valid() {
            diags.push(Diagnostic::InvalidSelector {
                at,
                selector: sr.selector.index(),
            });
        }
        if let Some(target) = successors(pc, sr).find(|&t| t <= pc) {
            diags.push(Diagnostic::BackwardEdge {
                at,
                target: target as u8,
            });
        }
    }
    fall_off.sort_unstable();
    fall_off.dedup();
    diags.extend(fall_off.into_iter().map(|pc| Diagnostic::FallOffEnd { at: pc as u8 }));

    let last = words[words.len() - 1];
    if !(last.action && last.op == CompareOp::Always) {
        diags.push(Diagnostic::MissingFinalTerminal);
    }
    diags
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn word(bits: &str) -> Word {
        Word::new(u32::from_str_radix(bits, 2).unwrap()).unwrap()
    }

    /// Bit slicing done on the binary string, independent of the shift/mask
    /// arithmetic in `encode`/`decode`.
    fn slice_fields(w: u32) -> (u32, u32, u32, u32, u32, u32) {
        let s = format!("{w:024b}");
        let f = |a: usize, b: usize| u32::from_str_radix(&s[a..b], 2).unwrap();
        (f(0, 1), f(1, 5), f(5, 7), f(7, 15), f(15, 23), f(23, 24))
    }

    #[test]
    fn encode_field_concatenation() {
        let sr = SubRule {
            jump: false,
            selector: Selector::PROTO,
            op: CompareOp::Eq,
            operand: 0x06,
            address: 0x0A,
            action: false,
        };
        assert_eq!(sr.encode().to_string(), "0" .to_owned() + "0000" + "00" + "00000110" + "00001010" + "0");
        let zero = SubRule {
            operand: 0,
            address: 0,
            ..sr
        };
        assert_eq!(zero.encode().get(), 0);
    }

    #[test]
    fn decodes_stored_table_words() {
        let last = SubRule::decode(word("000000000000000000000001"));
        assert_eq!(
            last,
            SubRule {
                jump: false,
                selector: Selector(0),
                op: CompareOp::Eq,
                operand: 0,
                address: 0,
                action: true
            }
        );
        let first = SubRule::decode(word("000001100000001000001000"));
        assert_eq!(
            first,
            SubRule {
                jump: false,
                selector: Selector(0),
                op: CompareOp::Always,
                operand: 0x01,
                address: 0x04,
                action: false
            }
        );
        let ones = SubRule::decode(Word::new(0xFF_FFFF).unwrap());
        assert_eq!(
            ones,
            SubRule {
                jump: true,
                selector: Selector(15),
                op: CompareOp::Always,
                operand: 0xFF,
                address: 0xFF,
                action: true
            }
        );
    }

    #[test]
    fn word_rejects_more_than_24_bits() {
        assert!(Word::new(1 << 24).is_none());
        assert!(Word::new(WORD_MASK).is_some());
    }

    #[test]
    fn selector_map_covers_thirteen_subfields() {
        let h = PacketHeader {
            proto: 6,
            src_ip: 0x0102_0304,
            dst_ip: 0x0506_0708,
            src_port: 0x090A,
            dst_port: 0x0B0C,
        };
        let got: Vec<u8> = (0..16).filter_map(|i| Selector(i).subfield(&h)).collect();
        assert_eq!(got, vec![6, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]);
        assert_eq!((0..16).filter(|&i| Selector(i).is_valid()).count(), 13);
    }

    #[test]
    fn comparator_criteria() {
        assert!(CompareOp::Eq.eval(5, 5));
        assert!(CompareOp::Gt.eval(6, 5) && !CompareOp::Gt.eval(5, 5));
        assert!(CompareOp::Lt.eval(4, 5) && !CompareOp::Lt.eval(5, 5));
        assert!(CompareOp::Always.eval(0, 255));
        for code in 0..4 {
            assert_eq!(CompareOp::from_bits(code).bits(), code);
        }
    }

    #[test]
    fn single_deny_terminal_image_text() {
        let img = MemoryImage::new(vec![SubRule::terminal(false)]).unwrap();
        assert_eq!(img.to_text(), "00000000 000001100000000000000001\n");
        assert_eq!(read_image(&img.to_text()).unwrap(), img);
    }

    #[test]
    fn reader_errors() {
        let e = read_image("00000000 0101").unwrap_err();
        assert_eq!(e.to_string(), "line 1: word not 24 bits");
        let two = "00000000 000001100000000000000001\n";
        assert!(read_image(&format!("{two}{two}"))
            .unwrap_err()
            .to_string()
            .contains("non-ascending"));
        assert!(read_image("00000001 000001100000000000000001")
            .unwrap_err()
            .to_string()
            .contains("gap"));
        assert!(read_image("0000000 000001100000000000000001").is_err());
        assert!(read_image("00000000 00000110000000000000000x").is_err());
        let mut long = String::new();
        for a in 0..256 {
            long.push_str(&format!("{a:08b} 000001100000000000000001\n"));
        }
        assert_eq!(read_image(&long).unwrap().len(), 256);
        long.push_str("00000000 000001100000000000000001\n");
        assert!(read_image(&long).unwrap_err().to_string().contains("more than 256"));
    }

    #[test]
    fn reader_skips_comments_and_blanks() {
        let text = "# image\n\n00000000 000001100000000000000001 # deny all\n";
        assert_eq!(read_image(text).unwrap().len(), 1);
    }

    #[test]
    fn image_capacity() {
        assert!(MemoryImage::new(vec![SubRule::terminal(false); 256]).is_ok());
        assert_eq!(
            MemoryImage::new(vec![SubRule::terminal(false); 257]),
            Err(IsaError::TooLarge(257))
        );
    }

    #[test]
    fn self_loop_is_backward_edge() {
        let sr = SubRule {
            jump: false,
            selector: Selector::PROTO,
            op: CompareOp::Eq,
            operand: 0,
            address: 0,
            action: false,
        };
        let diags = validate_image(&MemoryImage::new(vec![sr]).unwrap());
        assert!(diags.contains(&Diagnostic::BackwardEdge { at: 0, target: 0 }));
        assert!(diags.iter().any(|d| d.to_string().starts_with("backward edge at 0x00")));
    }

    #[test]
    fn missing_terminal_falls_off_end() {
        let check = SubRule {
            jump: false,
            selector: Selector::PROTO,
            op: CompareOp::Eq,
            operand: 6,
            address: 1,
            action: false,
        };
        let last = SubRule {
            action: false,
            ..SubRule::terminal(false)
        };
        let diags = validate_image(&MemoryImage::new(vec![check, last]).unwrap());
        assert!(diags.contains(&Diagnostic::FallOffEnd { at: 1 }));
        assert!(diags.contains(&Diagnostic::MissingFinalTerminal));
        assert!(diags.iter().any(|d| d.to_string().contains("fall-off-end reachable")));
    }

    #[test]
    fn flags_invalid_selectors_and_accepts_deny_all() {
        assert!(validate_image(&MemoryImage::new(vec![SubRule::terminal(false)]).unwrap()).is_empty());
        let bad = SubRule {
            selector: Selector(13),
            ..SubRule::terminal(true)
        };
        assert_eq!(
            validate_image(&MemoryImage::new(vec![bad]).unwrap()),
            vec![Diagnostic::InvalidSelector { at: 0, selector: 13 }]
        );
        assert_eq!(
            validate_image(&MemoryImage::new(vec![]).unwrap()),
            vec![Diagnostic::EmptyImage]
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn decode_matches_string_slicing(raws in prop::collection::vec(0u32..(1 << 24), 1600)) {
            for raw in raws {
                let sr = SubRule::decode(Word::new(raw).unwrap());
                let (j, s, o, v, a, t) = slice_fields(raw);
                prop_assert_eq!(u32::from(sr.jump), j);
                prop_assert_eq!(u32::from(sr.selector.index()), s);
                prop_assert_eq!(u32::from(sr.op.bits()), o);
                prop_assert_eq!(u32::from(sr.operand), v);
                prop_assert_eq!(u32::from(sr.address), a);
                prop_assert_eq!(u32::from(sr.action), t);
                prop_assert_eq!(sr.encode().get(), raw);
            }
        }

        #[test]
        fn image_text_roundtrip(raws in prop::collection::vec(0u32..(1 << 24), 0..=256)) {
            let img = MemoryImage::new(
                raws.into_iter().map(|r| SubRule::decode(Word::new(r).unwrap())).collect(),
            ).unwrap();
            let text = img.to_text();
            for (i, line) in text.lines().enumerate() {
                prop_assert_eq!(&line[..8], format!("{i:08b}"));
            }
            prop_assert_eq!(read_image(&text).unwrap(), img);
        }
    }
}
