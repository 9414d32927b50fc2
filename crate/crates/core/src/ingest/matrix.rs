//! Flow to matrix encoding.

use crate::ingest::flow::parse_headers;
use crate::ingest::{Flow, FlowMatrix, MATRIX_COLS, MATRIX_ROWS};

/// Encodes a flow as its fixed 100x200 matrix: row `i` holds the first 200
/// bytes of packet `i` scaled by 1/255, zero-padded on the right; rows past
/// the packet count stay zero; packets past 100 are dropped.
///
/// With `anonymize` set (the default in every pipeline), IP addresses and
/// IP/TCP/UDP checksums are zeroed before encoding so the model cannot key
/// on endpoint identity.
pub fn flow_to_matrix(flow: &Flow, anonymize: bool) -> FlowMatrix {
    let mut m = FlowMatrix::zeroed();
    let n = flow.packets.len().min(MATRIX_ROWS);
    for (i, packet) in flow.packets.iter().take(MATRIX_ROWS).enumerate() {
        let take = packet.data.len().min(MATRIX_COLS);
        let mut bytes = packet.data[..take].to_vec();
        if anonymize {
            scrub(&mut bytes, &packet.data);
        }
        let row = m.row_mut(i);
        for (j, &b) in bytes.iter().enumerate() {
            row[j] = b as f32 / 255.0;
        }
    }
    m.set_n_real_packets(n as u8);
    m
}

/// Zeroes address and checksum bytes inside the encoded window. Field
/// offsets are located on the full packet, then clipped to the window.
fn scrub(window: &mut [u8], full: &[u8]) {
    let Some(h) = parse_headers(full) else {
        return; // not IP traffic: nothing identifying to scrub
    };
    let mut zero = |start: usize, len: usize| {
        let end = (start + len).min(window.len());
        if start < end {
            window[start..end].fill(0);
        }
    };
    let ip = h.ip_offset;
    if h.ipv4 {
        zero(ip + 10, 2); // header checksum
        zero(ip + 12, 8); // source + destination address
    } else {
        zero(ip + 8, 32); // source + destination address
    }
    match h.transport {
        crate::ingest::Transport::Tcp => zero(h.transport_offset + 16, 2),
        crate::ingest::Transport::Udp => zero(h.transport_offset + 6, 2),
    }
}
