//! Model checkpoints.
//!
//! Binary layout, all integers little endian:
//!
//! ```text
//! "NNMD"                     magic
//! u32    version, currently 1
//! u32    architecture JSON length
//! bytes  architecture JSON
//! u64    parameter count
//! f64[]  parameters
//! ```
//!
//! An optional trailer carries a parameter-importance vector:
//!
//! ```text
//! "FISH"
//! u64    entry count, must equal the parameter count
//! f64[]  importance entries
//! ```
//!
//! Writing the same model twice produces identical bytes, so checkpoints
//! can be compared for equality directly.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::model::{Architecture, NetworkModel};

const MAGIC: [u8; 4] = *b"NNMD";
const FISHER_MAGIC: [u8; 4] = *b"FISH";
const VERSION: u32 = 1;

/// Serializes a model, and optionally its importance vector, to a writer.
pub fn write_model(
    w: &mut impl Write,
    model: &NetworkModel,
    fisher: Option<&[f64]>,
) -> Result<()> {
    if let Some(f) = fisher {
        if f.len() != model.n_params() {
            return Err(Error::ParamCountMismatch { model: model.n_params(), message: f.len() });
        }
    }
    let arch_json = serde_json::to_vec(model.arch())?;
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(arch_json.len() as u32).to_le_bytes())?;
    w.write_all(&arch_json)?;
    w.write_all(&(model.n_params() as u64).to_le_bytes())?;
    for &p in model.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    if let Some(f) = fisher {
        w.write_all(&FISHER_MAGIC)?;
        w.write_all(&(f.len() as u64).to_le_bytes())?;
        for &v in f {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a model written by [`write_model`].
pub fn read_model(r: &mut impl Read) -> Result<(NetworkModel, Option<Vec<f64>>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::CheckpointFormat(format!(
                "truncated reading {what} at byte {at}",
                at = *at
            )));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };

    let magic: [u8; 4] = take(&mut at, 4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::CheckpointMagic { found: magic, expected: MAGIC });
    }
    let version = u32::from_le_bytes(take(&mut at, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, supported: VERSION });
    }
    let json_len = u32::from_le_bytes(take(&mut at, 4, "header length")?.try_into().unwrap());
    let arch: Architecture = serde_json::from_slice(take(&mut at, json_len as usize, "header")?)
        .map_err(|e| Error::CheckpointFormat(format!("bad architecture header: {e}")))?;
    let mut model = NetworkModel::zeroed(arch)
        .map_err(|e| Error::CheckpointFormat(format!("invalid architecture: {e}")))?;
    let count = u64::from_le_bytes(take(&mut at, 8, "parameter count")?.try_into().unwrap());
    if count as usize != model.n_params() {
        return Err(Error::ParamCountMismatch { model: model.n_params(), message: count as usize });
    }
    {
        let params = model.params_mut();
        let raw = take(&mut at, count as usize * 8, "parameters")?;
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            params[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }

    let fisher = if at < bytes.len() {
        let magic: [u8; 4] = take(&mut at, 4, "importance magic")?.try_into().unwrap();
        if magic != FISHER_MAGIC {
            return Err(Error::CheckpointMagic { found: magic, expected: FISHER_MAGIC });
        }
        let n = u64::from_le_bytes(take(&mut at, 8, "importance count")?.try_into().unwrap());
        if n as usize != model.n_params() {
            return Err(Error::ParamCountMismatch { model: model.n_params(), message: n as usize });
        }
        let raw = take(&mut at, n as usize * 8, "importance entries")?;
        let mut f = vec![0.0; n as usize];
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            f[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Some(f)
    } else {
        None
    };
    if at != bytes.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes after checkpoint body",
            bytes.len() - at
        )));
    }
    Ok((model, fisher))
}

/// Writes a checkpoint file.
pub fn save_model(path: &Path, model: &NetworkModel, fisher: Option<&[f64]>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model, fisher)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a checkpoint file.
pub fn load_model(path: &Path) -> Result<(NetworkModel, Option<Vec<f64>>)> {
    let mut f = std::fs::File::open(path)?;
    read_model(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_model(seed: u64) -> NetworkModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkModel::init(Architecture::mlp(4, &[6, 2]), &mut rng).unwrap()
    }

    #[test]
    fn round_trip_without_importance() {
        let model = sample_model(3);
        let mut buf = Vec::new();
        write_model(&mut buf, &model, None).unwrap();
        let (loaded, fisher) = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.arch(), model.arch());
        assert_eq!(loaded.params(), model.params());
        assert!(fisher.is_none());
    }

    #[test]
    fn round_trip_with_importance_is_byte_stable() {
        let model = sample_model(4);
        let fisher: Vec<f64> = (0..model.n_params()).map(|i| i as f64 * 0.25).collect();
        let mut a = Vec::new();
        write_model(&mut a, &model, Some(&fisher)).unwrap();
        let mut b = Vec::new();
        write_model(&mut b, &model, Some(&fisher)).unwrap();
        assert_eq!(a, b, "serialization is deterministic");
        let (loaded, f2) = read_model(&mut a.as_slice()).unwrap();
        assert_eq!(loaded.params(), model.params());
        assert_eq!(f2.as_deref(), Some(fisher.as_slice()));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let model = sample_model(5);
        let mut buf = Vec::new();
        write_model(&mut buf, &model, None).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            read_model(&mut bad_magic.as_slice()),
            Err(Error::CheckpointMagic { .. })
        ));

        let mut bad_version = buf.clone();
        bad_version[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            read_model(&mut bad_version.as_slice()),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(
            read_model(&mut &truncated[..]),
            Err(Error::CheckpointFormat(_))
        ));

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_model(&mut trailing.as_slice()).is_err());
    }

    #[test]
    fn importance_length_is_checked() {
        let model = sample_model(6);
        let mut buf = Vec::new();
        let short = vec![1.0; 3];
        assert!(matches!(
            write_model(&mut buf, &model, Some(&short)),
            Err(Error::ParamCountMismatch { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nnmd");
        let model = sample_model(7);
        save_model(&path, &model, None).unwrap();
        let (loaded, _) = load_model(&path).unwrap();
        assert_eq!(loaded.params(), model.params());
    }
}
