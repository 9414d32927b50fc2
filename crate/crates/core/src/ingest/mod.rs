//! Traffic ingestion: packet captures to labeled flow-matrix datasets.
//!
//! The pipeline is `parse_pcap` -> `assemble_flows` -> `label_flows`, which
//! encodes every flow through [`flow_to_matrix`]. Synthetic corpora from
//! [`generate_synthetic`] skip the capture stage and produce matrices
//! directly. Datasets round-trip through a small binary container
//! ([`write_dataset`] / [`read_dataset`]).

mod container;
mod flow;
mod label;
mod matrix;
mod pcap;
mod synth;

pub use container::{
    dataset_from_path, dataset_to_path, read_dataset, write_dataset, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use flow::{assemble_flows, assign_flow, Assembly, DEFAULT_IDLE_TIMEOUT_US};
pub use label::{label_flows, parse_rules, rules_from_path, LabelOptions, LabelRule, RuleField};
pub use matrix::flow_to_matrix;
pub use pcap::{fixtures, parse_pcap, pcap_from_path};
pub use synth::{generate_synthetic, SyntheticSpec};

use std::net::IpAddr;

use crate::error::{Error, Result};

/// Rows in a flow matrix: one row per packet, at most 100 packets.
pub const MATRIX_ROWS: usize = 100;
/// Columns in a flow matrix: the first 200 bytes of each packet.
pub const MATRIX_COLS: usize = 200;
/// Total cells in one flow matrix.
pub const MATRIX_LEN: usize = MATRIX_ROWS * MATRIX_COLS;

/// One captured packet: a capture timestamp in microseconds, the original
/// on-the-wire length, and the captured link-layer bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPacket {
    pub ts_us: u64,
    pub orig_len: u32,
    pub data: Vec<u8>,
}

impl RawPacket {
    /// Captured length (may be shorter than `orig_len` under a snap limit).
    pub fn cap_len(&self) -> usize {
        self.data.len()
    }
}

/// Transport protocol of a flow. Anything else is skipped during assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Transport {
    Tcp,
    Udp,
}

impl Transport {
    pub fn as_str(self) -> &'static str {
        match self {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
        }
    }
}

impl std::str::FromStr for Transport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tcp" | "6" => Ok(Transport::Tcp),
            "udp" | "17" => Ok(Transport::Udp),
            other => Err(Error::LabelRules(format!("unknown protocol `{other}`"))),
        }
    }
}

/// Canonical bidirectional flow identity.
///
/// Both directions of a conversation map to the same key: the endpoint with
/// the lexicographically smaller `(ip, port)` pair is stored first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    pub ip_lo: IpAddr,
    pub port_lo: u16,
    pub ip_hi: IpAddr,
    pub port_hi: u16,
    pub transport: Transport,
}

impl FlowKey {
    /// Builds the canonical key for a packet seen in either direction.
    pub fn canonical(
        src_ip: IpAddr,
        src_port: u16,
        dst_ip: IpAddr,
        dst_port: u16,
        transport: Transport,
    ) -> FlowKey {
        if (src_ip, src_port) <= (dst_ip, dst_port) {
            FlowKey { ip_lo: src_ip, port_lo: src_port, ip_hi: dst_ip, port_hi: dst_port, transport }
        } else {
            FlowKey { ip_lo: dst_ip, port_lo: dst_port, ip_hi: src_ip, port_hi: src_port, transport }
        }
    }
}

impl std::fmt::Display for FlowKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}:{}<->{}:{}/{}",
            self.ip_lo,
            self.port_lo,
            self.ip_hi,
            self.port_hi,
            self.transport.as_str()
        )
    }
}

/// A reassembled bidirectional flow: its packets in time order plus the
/// observation window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flow {
    pub key: FlowKey,
    pub packets: Vec<RawPacket>,
    pub first_seen_us: u64,
    pub last_seen_us: u64,
}

/// Fixed-size numeric image of one flow: 100 packets x 200 bytes, each byte
/// scaled to `[0, 1]` by division with 255, zero-padded past the real data.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatrix {
    data: Vec<f32>,
    n_real_packets: u8,
}

impl FlowMatrix {
    /// Wraps raw cells, enforcing shape, range, and packet-count invariants.
    pub fn new(data: Vec<f32>, n_real_packets: u8) -> Result<FlowMatrix> {
        if data.len() != MATRIX_LEN {
            return Err(Error::ShapeMismatch {
                expected: format!("{MATRIX_LEN} cells"),
                actual: format!("{} cells", data.len()),
            });
        }
        if n_real_packets as usize > MATRIX_ROWS {
            return Err(Error::Config(format!(
                "n_real_packets {n_real_packets} exceeds {MATRIX_ROWS}"
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Config(format!("matrix cell {bad} outside [0, 1]")));
        }
        Ok(FlowMatrix { data, n_real_packets })
    }

    pub fn zeroed() -> FlowMatrix {
        FlowMatrix { data: vec![0.0; MATRIX_LEN], n_real_packets: 0 }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn n_real_packets(&self) -> u8 {
        self.n_real_packets
    }

    /// One packet row (200 cells).
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * MATRIX_COLS..(i + 1) * MATRIX_COLS]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * MATRIX_COLS..(i + 1) * MATRIX_COLS]
    }

    pub(crate) fn set_n_real_packets(&mut self, n: u8) {
        debug_assert!(n as usize <= MATRIX_ROWS);
        self.n_real_packets = n;
    }
}

/// Numeric class id; 0 is always the benign class.
pub type LabelId = u32;

/// Id to name map for dataset labels. Id 0 is reserved for benign traffic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCatalog {
    names: Vec<String>,
}

impl LabelCatalog {
    /// A catalog holding only the benign class.
    pub fn benign_only() -> LabelCatalog {
        LabelCatalog { names: vec!["benign".to_string()] }
    }

    /// Builds a catalog from names indexed by id. Must be non-empty; id 0 is
    /// the benign class.
    pub fn from_names(names: Vec<String>) -> Result<LabelCatalog> {
        if names.is_empty() {
            return Err(Error::DatasetCatalog("catalog has no entries".into()));
        }
        Ok(LabelCatalog { names })
    }

    /// Returns the id for `name`, adding it to the catalog if new.
    pub fn intern(&mut self, name: &str) -> LabelId {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            return i as LabelId;
        }
        self.names.push(name.to_string());
        (self.names.len() - 1) as LabelId
    }

    pub fn name(&self, id: LabelId) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<LabelId> {
        self.names.iter().position(|n| n == name).map(|i| i as LabelId)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Where a dataset came from; carried through the container format.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Provenance {
    pub fn new(source: impl Into<String>) -> Provenance {
        Provenance { source: source.into(), seed: None }
    }

    pub fn seeded(source: impl Into<String>, seed: u64) -> Provenance {
        Provenance { source: source.into(), seed: Some(seed) }
    }
}

/// One labeled flow matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub matrix: FlowMatrix,
    pub label: LabelId,
}

/// A set of labeled flow matrices plus the label catalog and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub catalog: LabelCatalog,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn empty(provenance: Provenance) -> LabeledDataset {
        LabeledDataset { samples: Vec::new(), catalog: LabelCatalog::benign_only(), provenance }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample count per label id, indexed by id.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.catalog.len()];
        for s in &self.samples {
            if let Some(c) = counts.get_mut(s.label as usize) {
                *c += 1;
            }
        }
        counts
    }

    /// Checks that every label id is present in the catalog.
    pub fn validate_labels(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.label as usize >= self.catalog.len() {
                return Err(Error::DatasetSample {
                    sample: i as u32,
                    reason: format!("label id {} not in catalog", s.label),
                });
            }
        }
        Ok(())
    }

    /// New dataset holding the samples whose label satisfies `keep`, sharing
    /// this dataset's catalog.
    pub fn filter(&self, keep: impl Fn(LabelId) -> bool) -> LabeledDataset {
        LabeledDataset {
            samples: self.samples.iter().filter(|s| keep(s.label)).cloned().collect(),
            catalog: self.catalog.clone(),
            provenance: self.provenance.clone(),
        }
    }
}
