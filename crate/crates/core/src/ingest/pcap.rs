//! Classic pcap (libpcap savefile) reader.
//!
//! Supports the microsecond-resolution format in both byte orders. The
//! nanosecond variant is rejected up front rather than silently misread.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::RawPacket;

const MAGIC_US: u32 = 0xA1B2_C3D4;
const MAGIC_US_SWAPPED: u32 = 0xD4C3_B2A1;
const MAGIC_NS: u32 = 0xA1B2_3C4D;
const MAGIC_NS_SWAPPED: u32 = 0x4D3C_B2A1;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

/// Parses an in-memory classic pcap capture into its packet records.
///
/// Timestamps become microseconds since the epoch (`sec * 1e6 + usec`). A
/// capture with a valid header and no records yields an empty list. Reads
/// past the end of a record body fail with the byte offset of the short
/// record.
pub fn parse_pcap(bytes: &[u8]) -> Result<Vec<RawPacket>> {
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(Error::PcapTruncated { offset: bytes.len(), what: "global header" });
    }
    let magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let swapped = match magic {
        MAGIC_US => false,
        MAGIC_US_SWAPPED => true,
        MAGIC_NS | MAGIC_NS_SWAPPED => return Err(Error::PcapNanosecond { found: magic }),
        other => return Err(Error::PcapMagic { found: other }),
    };

    let read_u32 = |buf: &[u8]| -> u32 {
        let raw: [u8; 4] = buf.try_into().unwrap();
        if swapped {
            u32::from_be_bytes(raw)
        } else {
            u32::from_le_bytes(raw)
        }
    };

    let mut packets = Vec::new();
    let mut off = GLOBAL_HEADER_LEN;
    while off < bytes.len() {
        if bytes.len() - off < RECORD_HEADER_LEN {
            return Err(Error::PcapTruncated { offset: off, what: "record header" });
        }
        let ts_sec = read_u32(&bytes[off..off + 4]) as u64;
        let ts_usec = read_u32(&bytes[off + 4..off + 8]) as u64;
        let incl_len = read_u32(&bytes[off + 8..off + 12]) as usize;
        let orig_len = read_u32(&bytes[off + 12..off + 16]);
        let body = off + RECORD_HEADER_LEN;
        if bytes.len() - body < incl_len {
            return Err(Error::PcapTruncated { offset: off, what: "record body" });
        }
        packets.push(RawPacket {
            ts_us: ts_sec * 1_000_000 + ts_usec,
            orig_len,
            data: bytes[body..body + incl_len].to_vec(),
        });
        off = body + incl_len;
    }
    Ok(packets)
}

/// Reads and parses a pcap file from disk.
pub fn pcap_from_path(path: &Path) -> Result<Vec<RawPacket>> {
    parse_pcap(&std::fs::read(path)?)
}

pub mod fixtures {
    //! Builders for hand-assembled capture bytes.
    //!
    //! These produce classic-format capture files octet by octet, which makes
    //! them useful for tests that need captures with exactly known contents
    //! and for generating tiny demo inputs without an external capture tool.

    /// Classic microsecond global header in the given byte order.
    pub fn global_header(big_endian: bool) -> Vec<u8> {
        let mut out = Vec::with_capacity(24);
        let push32 = |out: &mut Vec<u8>, v: u32| {
            if big_endian {
                out.extend_from_slice(&v.to_be_bytes());
            } else {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push32(&mut out, 0xA1B2_C3D4); // magic, written in file byte order
        let push16 = |out: &mut Vec<u8>, v: u16| {
            if big_endian {
                out.extend_from_slice(&v.to_be_bytes());
            } else {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push16(&mut out, 2); // version major
        push16(&mut out, 4); // version minor
        push32(&mut out, 0); // thiszone
        push32(&mut out, 0); // sigfigs
        push32(&mut out, 65535); // snaplen
        push32(&mut out, 1); // linktype: ethernet
        out
    }

    /// One record header + body.
    pub fn record(big_endian: bool, ts_sec: u32, ts_usec: u32, orig_len: u32, body: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        let push32 = |out: &mut Vec<u8>, v: u32| {
            if big_endian {
                out.extend_from_slice(&v.to_be_bytes());
            } else {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push32(&mut out, ts_sec);
        push32(&mut out, ts_usec);
        push32(&mut out, body.len() as u32);
        push32(&mut out, orig_len);
        out.extend_from_slice(body);
        out
    }

    /// Ethernet + IPv4 + UDP packet with the given endpoints and payload.
    pub fn udp_packet(
        src_ip: [u8; 4],
        dst_ip: [u8; 4],
        src_port: u16,
        dst_port: u16,
        payload: &[u8],
    ) -> Vec<u8> {
        let udp_len = 8 + payload.len();
        let ip_len = 20 + udp_len;
        let mut p = Vec::new();
        // Ethernet: dst mac, src mac, ethertype 0x0800
        p.extend_from_slice(&[0x02, 0, 0, 0, 0, 2]);
        p.extend_from_slice(&[0x02, 0, 0, 0, 0, 1]);
        p.extend_from_slice(&[0x08, 0x00]);
        // IPv4 header, no options
        p.push(0x45); // version 4, ihl 5
        p.push(0); // tos
        p.extend_from_slice(&(ip_len as u16).to_be_bytes());
        p.extend_from_slice(&[0, 0]); // identification
        p.extend_from_slice(&[0, 0]); // flags + fragment offset
        p.push(64); // ttl
        p.push(17); // protocol: udp
        p.extend_from_slice(&[0xAB, 0xCD]); // header checksum (unverified)
        p.extend_from_slice(&src_ip);
        p.extend_from_slice(&dst_ip);
        // UDP header
        p.extend_from_slice(&src_port.to_be_bytes());
        p.extend_from_slice(&dst_port.to_be_bytes());
        p.extend_from_slice(&(udp_len as u16).to_be_bytes());
        p.extend_from_slice(&[0xEE, 0xFF]); // checksum (unverified)
        p.extend_from_slice(payload);
        p
    }

    /// Ethernet + IPv4 + TCP packet (20-byte TCP header, no options).
    pub fn tcp_packet(
        src_ip: [u8; 4],
        dst_ip: [u8; 4],
        src_port: u16,
        dst_port: u16,
        payload: &[u8],
    ) -> Vec<u8> {
        let ip_len = 20 + 20 + payload.len();
        let mut p = Vec::new();
        p.extend_from_slice(&[0x02, 0, 0, 0, 0, 2]);
        p.extend_from_slice(&[0x02, 0, 0, 0, 0, 1]);
        p.extend_from_slice(&[0x08, 0x00]);
        p.push(0x45);
        p.push(0);
        p.extend_from_slice(&(ip_len as u16).to_be_bytes());
        p.extend_from_slice(&[0, 0]);
        p.extend_from_slice(&[0, 0]);
        p.push(64);
        p.push(6); // protocol: tcp
        p.extend_from_slice(&[0xAB, 0xCD]);
        p.extend_from_slice(&src_ip);
        p.extend_from_slice(&dst_ip);
        p.extend_from_slice(&src_port.to_be_bytes());
        p.extend_from_slice(&dst_port.to_be_bytes());
        p.extend_from_slice(&1u32.to_be_bytes()); // seq
        p.extend_from_slice(&0u32.to_be_bytes()); // ack
        p.push(0x50); // data offset 5
        p.push(0x18); // flags: psh+ack
        p.extend_from_slice(&1024u16.to_be_bytes()); // window
        p.extend_from_slice(&[0x12, 0x34]); // checksum (unverified)
        p.extend_from_slice(&[0, 0]); // urgent pointer
        p.extend_from_slice(payload);
        p
    }
}
