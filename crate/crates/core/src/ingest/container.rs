//! Binary dataset container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "FLWM"                magic
//! u32  version   = 1
//! u32  sample count
//! u32  rows      = 100
//! u32  cols      = 200
//! per sample:
//!   u32  label id
//!   u8   n_real_packets
//!   rows*cols f32 cells, row-major
//! trailing UTF-8 JSON object to end of file
//! ```
//!
//! The JSON object maps decimal label ids to class names; keys starting
//! with `_` are reserved for metadata (currently `_provenance` with the
//! source description and seed).

use std::io::{Read, Write};

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::ingest::{
    FlowMatrix, LabelCatalog, LabeledDataset, Provenance, Sample, MATRIX_COLS, MATRIX_LEN,
    MATRIX_ROWS,
};

pub const DATASET_MAGIC: [u8; 4] = *b"FLWM";
pub const DATASET_VERSION: u32 = 1;

/// Writes a dataset container file.
pub fn dataset_to_path(dataset: &LabeledDataset, path: &std::path::Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(dataset, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a dataset container file.
pub fn dataset_from_path(path: &std::path::Path) -> Result<LabeledDataset> {
    read_dataset(std::fs::File::open(path)?)
}

const SAMPLE_BYTES: usize = 4 + 1 + MATRIX_LEN * 4;

/// Serializes a dataset. The byte stream is a pure function of the dataset,
/// so equal datasets always produce identical files.
pub fn write_dataset<W: Write>(dataset: &LabeledDataset, mut out: W) -> Result<()> {
    dataset.validate_labels()?;
    out.write_all(&DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    out.write_all(&(dataset.samples.len() as u32).to_le_bytes())?;
    out.write_all(&(MATRIX_ROWS as u32).to_le_bytes())?;
    out.write_all(&(MATRIX_COLS as u32).to_le_bytes())?;
    let mut cell_buf = Vec::with_capacity(MATRIX_LEN * 4);
    for sample in &dataset.samples {
        out.write_all(&sample.label.to_le_bytes())?;
        out.write_all(&[sample.matrix.n_real_packets()])?;
        cell_buf.clear();
        for v in sample.matrix.data() {
            cell_buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&cell_buf)?;
    }

    let mut catalog = Map::new();
    for (id, name) in dataset.catalog.names().iter().enumerate() {
        catalog.insert(id.to_string(), Value::String(name.clone()));
    }
    catalog.insert("_provenance".to_string(), serde_json::to_value(&dataset.provenance)?);
    out.write_all(serde_json::to_string(&Value::Object(catalog))?.as_bytes())?;
    Ok(())
}

/// Parses a dataset container, enforcing the shape, range, and label
/// invariants as it reads.
pub fn read_dataset<R: Read>(mut input: R) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut off = 0usize;

    let take = |off: &mut usize, n: usize, sample: u32| -> Result<&[u8]> {
        if bytes.len() - *off < n {
            return Err(Error::DatasetTruncated { sample });
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let take_u32 = |off: &mut usize, sample: u32| -> Result<u32> {
        Ok(u32::from_le_bytes(take(off, 4, sample)?.try_into().unwrap()))
    };

    let magic: [u8; 4] = take(&mut off, 4, 0)?
        .try_into()
        .map_err(|_| Error::DatasetTruncated { sample: 0 })?;
    if magic != DATASET_MAGIC {
        return Err(Error::DatasetMagic { found: magic, expected: DATASET_MAGIC });
    }
    let version = take_u32(&mut off, 0)?;
    if version != DATASET_VERSION {
        return Err(Error::DatasetVersion { found: version, supported: DATASET_VERSION });
    }
    let count = take_u32(&mut off, 0)?;
    let rows = take_u32(&mut off, 0)?;
    let cols = take_u32(&mut off, 0)?;
    if rows as usize != MATRIX_ROWS || cols as usize != MATRIX_COLS {
        return Err(Error::DatasetShape { rows, cols });
    }

    let mut samples = Vec::with_capacity(count as usize);
    for i in 0..count {
        let body = take(&mut off, SAMPLE_BYTES, i)?;
        let label = u32::from_le_bytes(body[0..4].try_into().unwrap());
        let n_real = body[4];
        let mut cells = Vec::with_capacity(MATRIX_LEN);
        for chunk in body[5..].chunks_exact(4) {
            cells.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let matrix = FlowMatrix::new(cells, n_real)
            .map_err(|e| Error::DatasetSample { sample: i, reason: e.to_string() })?;
        samples.push(Sample { matrix, label });
    }

    let tail = &bytes[off..];
    let value: Value = serde_json::from_slice(tail)
        .map_err(|e| Error::DatasetCatalog(format!("trailing JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::DatasetCatalog("trailing JSON is not an object".into()))?;

    let mut ids: Vec<(u32, String)> = Vec::new();
    let mut provenance = Provenance::new("unknown");
    for (key, val) in obj {
        if key == "_provenance" {
            provenance = serde_json::from_value(val.clone())
                .map_err(|e| Error::DatasetCatalog(format!("_provenance: {e}")))?;
        } else if let Some(rest) = key.strip_prefix('_') {
            // unknown metadata keys are tolerated for forward compatibility
            let _ = rest;
        } else {
            let id: u32 = key
                .parse()
                .map_err(|_| Error::DatasetCatalog(format!("non-numeric label id `{key}`")))?;
            let name = val
                .as_str()
                .ok_or_else(|| Error::DatasetCatalog(format!("label {id} name is not a string")))?;
            ids.push((id, name.to_string()));
        }
    }
    ids.sort_by_key(|(id, _)| *id);
    for (expect, (id, _)) in ids.iter().enumerate() {
        if *id != expect as u32 {
            return Err(Error::DatasetCatalog(format!(
                "label ids must be contiguous from 0, missing {expect}"
            )));
        }
    }
    let catalog = LabelCatalog::from_names(ids.into_iter().map(|(_, n)| n).collect())?;

    let dataset = LabeledDataset { samples, catalog, provenance };
    dataset.validate_labels().map_err(|e| match e {
        Error::DatasetSample { sample, reason } => Error::DatasetSample { sample, reason },
        other => other,
    })?;
    Ok(dataset)
}
