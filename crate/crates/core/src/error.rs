//! Crate-wide error type.
//!
//! Variants are grouped by origin so callers (notably the CLI) can map them
//! onto "bad configuration" versus "bad data" without string matching.

use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    // ---- capture / dataset errors -------------------------------------
    #[error("not a classic pcap file: unrecognized magic 0x{found:08X}")]
    PcapMagic { found: u32 },

    #[error("nanosecond pcap captures are not supported (magic 0x{found:08X})")]
    PcapNanosecond { found: u32 },

    #[error("truncated pcap: {what} at byte offset {offset}")]
    PcapTruncated { offset: usize, what: &'static str },

    #[error("dataset container: bad magic {found:?}, expected {expected:?}")]
    DatasetMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("dataset container: unsupported version {found} (supported: {supported})")]
    DatasetVersion { found: u32, supported: u32 },

    #[error("dataset container: unsupported matrix shape {rows}x{cols}")]
    DatasetShape { rows: u32, cols: u32 },

    #[error("dataset container: truncated while reading sample {sample}")]
    DatasetTruncated { sample: u32 },

    #[error("dataset container: invalid sample {sample}: {reason}")]
    DatasetSample { sample: u32, reason: String },

    #[error("dataset container: bad label catalog: {0}")]
    DatasetCatalog(String),

    #[error("label rules: {0}")]
    LabelRules(String),

    #[error("flow matched no label rule in strict mode: {0}")]
    UnlabeledFlow(String),

    // ---- model / checkpoint errors ------------------------------------
    #[error("checkpoint: bad magic {found:?}, expected {expected:?}")]
    CheckpointMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("checkpoint: unsupported version {found} (supported: {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("parameter count mismatch: model has {model}, message has {message}")]
    ParamCountMismatch { model: usize, message: usize },

    // ---- training / sampling / federation -----------------------------
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sample pool `{pool}` is empty but {needed} draws were requested")]
    EmptyPool { pool: String, needed: usize },

    #[error("dataset is empty where samples are required: {0}")]
    EmptyDataset(String),

    #[error("main-model server unreachable after {attempts} attempts")]
    ServerUnreachable { attempts: u32 },

    #[error("mix fraction {alpha} outside [0, 1]")]
    AlphaOutOfRange { alpha: f64 },

    #[error("transcript replay: {0}")]
    Replay(String),
}

impl Error {
    /// True for errors caused by invalid configuration or arguments rather
    /// than by the content of input data. The CLI maps these to exit code 2
    /// and everything else to 3.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::AlphaOutOfRange { .. } | Error::ShapeMismatch { .. }
        )
    }
}
