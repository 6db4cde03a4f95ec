//! Packet classification engine toolkit.
//!
//! Ordered 5-tuple firewall rules ([`rules`]) are compiled ([`compiler`])
//! into 24-bit sub-rule words ([`isa`]) and executed one word per clock by a
//! cycle-accurate engine ([`engine`]). Headers come from CSV, raw frames or
//! pcap captures ([`ingest`]). A linear-scan reference classifier and a
//! differential harness live in [`oracle`].

pub mod compiler;
pub mod engine;
pub mod ingest;
pub mod isa;
pub mod oracle;
pub mod rules;

pub use compiler::{compile, CompileError};
pub use engine::{Engine, EngineError, Verdict};
pub use ingest::PacketHeader;
pub use isa::{MemoryImage, SubRule};
pub use rules::{parse_rules, Action, FieldPattern, Rule, RuleSet};
