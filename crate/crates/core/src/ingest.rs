//! Packet header extraction from CSV listings, raw Ethernet II frames and
//! classic libpcap capture files.

use std::fmt;
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rules::{protocol_by_name, protocol_name, Field, PROTO_TCP, PROTO_UDP};

/// The five header fields the engine inspects.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PacketHeader {
    pub proto: u8,
    pub src_ip: u32,
    pub dst_ip: u32,
    pub src_port: u16,
    pub dst_port: u16,
}

impl PacketHeader {
    pub fn new(proto: u8, src_ip: Ipv4Addr, dst_ip: Ipv4Addr, src_port: u16, dst_port: u16) -> Self {
        PacketHeader {
            proto,
            src_ip: src_ip.into(),
            dst_ip: dst_ip.into(),
            src_port,
            dst_port,
        }
    }

    pub fn field(&self, field: Field) -> u32 {
        match field {
            Field::Proto => u32::from(self.proto),
            Field::SrcIp => self.src_ip,
            Field::DstIp => self.dst_ip,
            Field::SrcPort => u32::from(self.src_port),
            Field::DstPort => u32::from(self.dst_port),
        }
    }

    /// Sets one field, truncating `value` to the field width.
    pub fn set_field(&mut self, field: Field, value: u32) {
        match field {
            Field::Proto => self.proto = value as u8,
            Field::SrcIp => self.src_ip = value,
            Field::DstIp => self.dst_ip = value,
            Field::SrcPort => self.src_port = value as u16,
            Field::DstPort => self.dst_port = value as u16,
        }
    }

    pub fn has_ports(&self) -> bool {
        carries_ports(self.proto)
    }

    /// `proto,src_ip,dst_ip,src_port,dst_port`
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            ProtoName(self.proto),
            Ipv4Addr::from(self.src_ip),
            Ipv4Addr::from(self.dst_ip),
            self.src_port,
            self.dst_port
        )
    }
}

fn carries_ports(proto: u8) -> bool {
    proto == PROTO_TCP || proto == PROTO_UDP
}

struct ProtoName(u8);

impl fmt::Display for ProtoName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match protocol_name(self.0) {
            Some(name) => f.write_str(name),
            None => write!(f, "{}", self.0),
        }
    }
}

/// Space-separated 5-tuple, as printed in verdict lines.
impl fmt::Display for PacketHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            ProtoName(self.proto),
            Ipv4Addr::from(self.src_ip),
            Ipv4Addr::from(self.dst_ip),
            self.src_port,
            self.dst_port
        )
    }
}

/// Where a record came from: a source label and its 0-based index there.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub source: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ingested {
    Header(PacketHeader),
    NonClassifiable { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestRecord {
    pub origin: Origin,
    pub ingested: Ingested,
}

impl IngestRecord {
    pub fn header(&self) -> Option<&PacketHeader> {
        match &self.ingested {
            Ingested::Header(h) => Some(h),
            Ingested::NonClassifiable { .. } => None,
        }
    }

    pub fn reason(&self) -> Option<&str> {
        match &self.ingested {
            Ingested::Header(_) => None,
            Ingested::NonClassifiable { reason } => Some(reason),
        }
    }
}

pub const REASON_NON_IPV4: &str = "non-IPv4 ethertype";
pub const REASON_FRAGMENT: &str = "fragment";
pub const REASON_TRUNCATED: &str = "truncated";
pub const REASON_BAD_IPV4: &str = "malformed IPv4 header";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{message}, line {line}")]
    Csv { line: usize, message: String },
    #[error("bad pcap magic {0:#010x}")]
    BadMagic(u32),
    #[error("truncated pcap global header")]
    TruncatedGlobalHeader,
    #[error("unsupported pcap link type {0} (only Ethernet, 1)")]
    UnsupportedLinkType(u32),
    #[error("truncated pcap record header at record {index}")]
    TruncatedRecordHeader { index: usize },
    #[error("truncated pcap record data at record {index}")]
    TruncatedRecordData { index: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How [`parse_csv`] treats malformed rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CsvMode {
    /// The first malformed row is an error.
    #[default]
    Strict,
    /// Malformed rows become non-classifiable records.
    Lenient,
}

fn parse_csv_row(line: &str) -> Result<PacketHeader, String> {
    let cols: Vec<&str> = line.split(',').map(str::trim).collect();
    if cols.len() != 5 {
        return Err(format!("expected 5 columns, found {}", cols.len()));
    }
    let proto = match protocol_by_name(cols[0]) {
        Some(p) => p,
        None => cols[0]
            .parse::<u8>()
            .map_err(|_| format!("invalid protocol `{}`", cols[0]))?,
    };
    let ip = |s: &str| {
        s.parse::<Ipv4Addr>()
            .map_err(|_| format!("invalid IPv4 address `{s}`"))
    };
    let port = |s: &str| -> Result<u16, String> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("invalid port `{s}`"));
        }
        s.parse::<u16>().map_err(|_| "port out of range".to_string())
    };
    let header = PacketHeader::new(proto, ip(cols[1])?, ip(cols[2])?, port(cols[3])?, port(cols[4])?);
    if !header.has_ports() && (header.src_port != 0 || header.dst_port != 0) {
        return Err(format!("nonzero port for protocol {proto} without ports"));
    }
    Ok(header)
}

/// Parses `proto,src_ip,dst_ip,src_port,dst_port` rows. `#` starts a comment.
pub fn parse_csv(text: &str, source: &str, mode: CsvMode) -> Result<Vec<IngestRecord>, IngestError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let ingested = match parse_csv_row(line) {
            Ok(h) => Ingested::Header(h),
            Err(message) if mode == CsvMode::Strict => {
                return Err(IngestError::Csv {
                    line: idx + 1,
                    message,
                })
            }
            Err(message) => Ingested::NonClassifiable {
                reason: format!("{message}, line {}", idx + 1),
            },
        };
        out.push(IngestRecord {
            origin: Origin {
                source: source.to_string(),
                index: out.len(),
            },
            ingested,
        });
    }
    Ok(out)
}

const ETH_HEADER_LEN: usize = 14;
const ETHERTYPE_IPV4: u16 = 0x0800;

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Extracts the 5-tuple from one Ethernet II frame.
///
/// Never indexes past `frame.len()`; anything that cannot be read in full
/// becomes a non-classifiable outcome.
pub fn parse_frame(frame: &[u8]) -> Ingested {
    let nc = |reason: &str| Ingested::NonClassifiable {
        reason: reason.to_string(),
    };
    if frame.len() < ETH_HEADER_LEN {
        return nc(REASON_TRUNCATED);
    }
    if be16(frame, 12) != ETHERTYPE_IPV4 {
        return nc(REASON_NON_IPV4);
    }
    let ip = &frame[ETH_HEADER_LEN..];
    if ip.is_empty() {
        return nc(REASON_TRUNCATED);
    }
    let version = ip[0] >> 4;
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    if version != 4 || ihl < 20 {
        return nc(REASON_BAD_IPV4);
    }
    if ip.len() < ihl {
        return nc(REASON_TRUNCATED);
    }
    if be16(ip, 6) & 0x1fff != 0 {
        return nc(REASON_FRAGMENT);
    }
    let proto = ip[9];
    let mut header = PacketHeader {
        proto,
        src_ip: be32(ip, 12),
        dst_ip: be32(ip, 16),
        src_port: 0,
        dst_port: 0,
    };
    if carries_ports(proto) {
        let l4 = &ip[ihl..];
        if l4.len() < 4 {
            return nc(REASON_TRUNCATED);
        }
        header.src_port = be16(l4, 0);
        header.dst_port = be16(l4, 2);
    }
    Ingested::Header(header)
}

const PCAP_MAGIC_USEC: u32 = 0xa1b2_c3d4;
const PCAP_MAGIC_NSEC: u32 = 0xa1b2_3c4d;
const PCAP_GLOBAL_HEADER_LEN: usize = 24;
const PCAP_RECORD_HEADER_LEN: usize = 16;
const LINKTYPE_ETHERNET: u32 = 1;

/// Parses an in-memory classic pcap capture.
pub fn parse_pcap(bytes: &[u8], source: &str) -> Result<Vec<IngestRecord>, IngestError> {
    if bytes.len() < 4 {
        return Err(IngestError::TruncatedGlobalHeader);
    }
    let magic_le = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let magic_be = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let little = match (magic_le, magic_be) {
        (PCAP_MAGIC_USEC | PCAP_MAGIC_NSEC, _) => true,
        (_, PCAP_MAGIC_USEC | PCAP_MAGIC_NSEC) => false,
        _ => return Err(IngestError::BadMagic(magic_be)),
    };
    let read_u32 = |at: usize| {
        let b = [bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]];
        if little {
            u32::from_le_bytes(b)
        } else {
            u32::from_be_bytes(b)
        }
    };
    if bytes.len() < PCAP_GLOBAL_HEADER_LEN {
        return Err(IngestError::TruncatedGlobalHeader);
    }
    let link_type = read_u32(20);
    if link_type != LINKTYPE_ETHERNET {
        return Err(IngestError::UnsupportedLinkType(link_type));
    }

    let mut out = Vec::new();
    let mut at = PCAP_GLOBAL_HEADER_LEN;
    while at < bytes.len() {
        let index = out.len();
        if bytes.len() - at < PCAP_RECORD_HEADER_LEN {
            return Err(IngestError::TruncatedRecordHeader { index });
        }
        let caplen = read_u32(at + 8) as usize;
        at += PCAP_RECORD_HEADER_LEN;
        if bytes.len() - at < caplen {
            return Err(IngestError::TruncatedRecordData { index });
        }
        out.push(IngestRecord {
            origin: Origin {
                source: source.to_string(),
                index,
            },
            ingested: parse_frame(&bytes[at..at + caplen]),
        });
        at += caplen;
    }
    Ok(out)
}

/// Reads a classic pcap file from disk.
pub fn read_pcap(path: impl AsRef<Path>) -> Result<Vec<IngestRecord>, IngestError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_pcap(&bytes, &path.display().to_string())
}
