//! Flow reassembly: canonical grouping, time ordering, idle-timeout splits.

use std::collections::BTreeMap;
use std::net::IpAddr;

use crate::ingest::{Flow, FlowKey, RawPacket, Transport};

/// Flows idle for longer than this are closed (microseconds).
pub const DEFAULT_IDLE_TIMEOUT_US: u64 = 120_000_000;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86DD;
const PROTO_TCP: u8 = 6;
const PROTO_UDP: u8 = 17;

/// Byte positions of the fields needed for grouping and anonymization.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ParsedHeaders {
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub transport: Transport,
    pub ip_offset: usize,
    pub ipv4: bool,
    pub transport_offset: usize,
}

/// Parses Ethernet + IPv4/IPv6 + TCP/UDP headers. Returns `None` for
/// anything else (other link types, other transports, short packets).
pub(crate) fn parse_headers(data: &[u8]) -> Option<ParsedHeaders> {
    const ETH_LEN: usize = 14;
    if data.len() < ETH_LEN {
        return None;
    }
    let ethertype = u16::from_be_bytes([data[12], data[13]]);
    let ip = ETH_LEN;
    let (src_ip, dst_ip, proto, ipv4, transport_offset) = match ethertype {
        ETHERTYPE_IPV4 => {
            if data.len() < ip + 20 || data[ip] >> 4 != 4 {
                return None;
            }
            let ihl = (data[ip] & 0x0F) as usize * 4;
            if ihl < 20 || data.len() < ip + ihl {
                return None;
            }
            let src = IpAddr::from(<[u8; 4]>::try_from(&data[ip + 12..ip + 16]).unwrap());
            let dst = IpAddr::from(<[u8; 4]>::try_from(&data[ip + 16..ip + 20]).unwrap());
            (src, dst, data[ip + 9], true, ip + ihl)
        }
        ETHERTYPE_IPV6 => {
            if data.len() < ip + 40 || data[ip] >> 4 != 6 {
                return None;
            }
            let src = IpAddr::from(<[u8; 16]>::try_from(&data[ip + 8..ip + 24]).unwrap());
            let dst = IpAddr::from(<[u8; 16]>::try_from(&data[ip + 24..ip + 40]).unwrap());
            // extension header chains are out of scope; the transport header
            // must follow the fixed 40-byte IPv6 header directly
            (src, dst, data[ip + 6], false, ip + 40)
        }
        _ => return None,
    };
    let transport = match proto {
        PROTO_TCP => Transport::Tcp,
        PROTO_UDP => Transport::Udp,
        _ => return None,
    };
    if data.len() < transport_offset + 4 {
        return None;
    }
    let src_port = u16::from_be_bytes([data[transport_offset], data[transport_offset + 1]]);
    let dst_port = u16::from_be_bytes([data[transport_offset + 2], data[transport_offset + 3]]);
    Some(ParsedHeaders {
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        transport,
        ip_offset: ip,
        ipv4,
        transport_offset,
    })
}

/// Result of [`assemble_flows`]: the flows plus how many packets were
/// skipped because they did not parse as TCP or UDP over IP.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub flows: Vec<Flow>,
    pub skipped: usize,
}

/// Groups packets into bidirectional flows keyed by the canonical 5-tuple,
/// splitting a conversation whenever it stays idle for longer than
/// `idle_timeout_us`.
///
/// Packets inside a flow are ordered by `(timestamp, bytes)`, so the result
/// does not depend on the order packets arrive in. Flows come back sorted by
/// first activity.
pub fn assemble_flows(packets: Vec<RawPacket>, idle_timeout_us: u64) -> Assembly {
    let mut groups: BTreeMap<FlowKey, Vec<RawPacket>> = BTreeMap::new();
    let mut skipped = 0usize;
    for packet in packets {
        match parse_headers(&packet.data) {
            Some(h) => {
                let key = FlowKey::canonical(h.src_ip, h.src_port, h.dst_ip, h.dst_port, h.transport);
                groups.entry(key).or_default().push(packet);
            }
            None => skipped += 1,
        }
    }

    let mut flows = Vec::new();
    for (key, mut group) in groups {
        // timestamp order with a content tie-break keeps the result stable
        // under input permutation
        group.sort_by(|a, b| a.ts_us.cmp(&b.ts_us).then_with(|| a.data.cmp(&b.data)));
        let mut current: Vec<RawPacket> = Vec::new();
        for packet in group {
            if let Some(last) = current.last() {
                if packet.ts_us - last.ts_us > idle_timeout_us {
                    flows.push(seal(key, std::mem::take(&mut current)));
                }
            }
            current.push(packet);
        }
        if !current.is_empty() {
            flows.push(seal(key, current));
        }
    }
    flows.sort_by(|a, b| a.first_seen_us.cmp(&b.first_seen_us).then_with(|| a.key.cmp(&b.key)));
    Assembly { flows, skipped }
}

fn seal(key: FlowKey, packets: Vec<RawPacket>) -> Flow {
    let first_seen_us = packets.first().map(|p| p.ts_us).unwrap_or(0);
    let last_seen_us = packets.last().map(|p| p.ts_us).unwrap_or(0);
    Flow { key, packets, first_seen_us, last_seen_us }
}

/// Deterministically assigns a flow to one of `n_agents` partitions.
///
/// Uses FNV-1a over the canonical key, so both directions of a conversation
/// land on the same agent on every platform and run.
pub fn assign_flow(key: &FlowKey, n_agents: usize) -> usize {
    assert!(n_agents >= 1, "assign_flow requires at least one agent");
    fn eat(h: &mut u64, bytes: &[u8]) {
        for &b in bytes {
            *h ^= b as u64;
            *h = h.wrapping_mul(0x1000_0000_01B3);
        }
    }
    fn eat_ip(h: &mut u64, ip: &IpAddr) {
        match ip {
            IpAddr::V4(v4) => {
                eat(h, &[4]);
                eat(h, &v4.octets());
            }
            IpAddr::V6(v6) => {
                eat(h, &[6]);
                eat(h, &v6.octets());
            }
        }
    }
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    eat_ip(&mut h, &key.ip_lo);
    eat(&mut h, &key.port_lo.to_be_bytes());
    eat_ip(&mut h, &key.ip_hi);
    eat(&mut h, &key.port_hi.to_be_bytes());
    eat(&mut h, &[match key.transport {
        Transport::Tcp => PROTO_TCP,
        Transport::Udp => PROTO_UDP,
    }]);
    (h % n_agents as u64) as usize
}
