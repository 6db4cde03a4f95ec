// Fixtures were written by scapy, independently of this crate's parser.

use std::net::Ipv4Addr;
use std::path::PathBuf;

use pce_core::compile;
use pce_core::engine::Engine;
use pce_core::ingest::{parse_frame, read_pcap, Ingested, PacketHeader, REASON_FRAGMENT, REASON_NON_IPV4};
use pce_core::isa::validate_image;
use pce_core::rules::{parse_rules, PROTO_TCP, PROTO_UDP};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn row1() -> PacketHeader {
    PacketHeader::new(
        PROTO_TCP,
        Ipv4Addr::new(167, 205, 3, 11),
        Ipv4Addr::new(167, 205, 65, 32),
        25,
        8080,
    )
}

#[test]
fn frame_fields_land_in_header() {
    let frame = std::fs::read(data("row1_frame.bin")).unwrap();
    assert_eq!(frame.len(), 54);
    match parse_frame(&frame) {
        Ingested::Header(h) => {
            assert_eq!(h, row1());
            assert_eq!(h.src_ip, 0xA7CD_030B);
            assert_eq!(h.dst_ip, 0xA7CD_4120);
        }
        other => panic!("expected a header, got {other:?}"),
    }
}

#[test]
fn both_byte_orders_read_the_same() {
    for name in ["row1.pcap", "row1_be.pcap"] {
        let recs = read_pcap(data(name)).unwrap();
        assert_eq!(recs.len(), 1, "{name}");
        assert_eq!(recs[0].header(), Some(&row1()), "{name}");
        assert_eq!(recs[0].origin.index, 0);
    }
}

#[test]
fn empty_capture_has_no_records() {
    assert!(read_pcap(data("empty.pcap")).unwrap().is_empty());
}

#[test]
fn mixed_capture_keeps_order_and_flags_unclassifiable() {
    let recs = read_pcap(data("mixed.pcap")).unwrap();
    assert_eq!(recs.len(), 4);
    assert_eq!(recs[0].header(), Some(&row1()));
    assert_eq!(recs[1].reason(), Some(REASON_NON_IPV4));
    let udp = recs[2].header().unwrap();
    assert_eq!(
        (udp.proto, udp.src_ip, udp.src_port, udp.dst_port),
        (PROTO_UDP, u32::from(Ipv4Addr::new(167, 205, 65, 5)), 1000, 2000)
    );
    assert_eq!(recs[3].reason(), Some(REASON_FRAGMENT));
    let indices: Vec<usize> = recs.iter().map(|r| r.origin.index).collect();
    assert_eq!(indices, [0, 1, 2, 3]);
}

#[test]
fn sample_rules_classify_captured_packets() {
    let rules = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../samples/sample.rules")).unwrap();
    let image = compile(&parse_rules(&rules).unwrap()).unwrap();
    assert_eq!(image.len(), 32);
    assert!(validate_image(&image).is_empty());

    let mut engine = Engine::load(image).unwrap();
    let verdicts: Vec<(bool, u32)> = read_pcap(data("mixed.pcap"))
        .unwrap()
        .iter()
        .filter_map(|r| r.header())
        .map(|h| engine.classify(*h).map(|v| (v.permit, v.cycles)).unwrap())
        .collect();
    // Row 1 walks its 13 exact checks; the udp packet fails the first rule's
    // proto check, the second rule's, then passes the third rule's 5 words.
    assert_eq!(verdicts, [(true, 13), (true, 7)]);
}
