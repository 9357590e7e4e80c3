//! Named-tensor container: a length-prefixed JSON header describing each
//! tensor (dtype, shape, byte offset) followed by a little-endian float32
//! blob. The header is sorted by tensor name, so identical contents produce
//! identical bytes, and external weight exports can be converted by writing
//! the same layout.
//!
//! Layout:
//! ```text
//! [u64 LE: header length in bytes][header JSON][f32 LE blob]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::diffnum::HasParams;
use crate::{Error, Result};

/// One stored tensor: shape plus row-major values (widened to f64 on load).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorEntry {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 {
            return Err(Error::Checkpoint(format!(
                "tensor shape {shape:?} is empty"
            )));
        }
        if data.len() != numel {
            return Err(Error::Checkpoint(format!(
                "tensor has {} values but shape {shape:?} needs {numel}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Serializes tensors to the container byte layout. Values are truncated to
/// f32; saving an already-loaded container is byte-stable.
pub fn to_bytes(tensors: &BTreeMap<String, TensorEntry>) -> Result<Vec<u8>> {
    if tensors.is_empty() {
        return Err(Error::Checkpoint("container needs at least one tensor".into()));
    }
    let mut header: BTreeMap<&str, HeaderEntry> = BTreeMap::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, entry) in tensors {
        if name.is_empty() {
            return Err(Error::Checkpoint("tensor name is empty".into()));
        }
        let numel: usize = entry.shape.iter().product();
        if numel != entry.data.len() || numel == 0 {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: {} values for shape {:?}",
                entry.data.len(),
                entry.shape
            )));
        }
        header.insert(
            name,
            HeaderEntry {
                dtype: "f32".into(),
                shape: entry.shape.clone(),
                offset: blob.len() as u64,
            },
        );
        for &v in &entry.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_json.len() + blob.len());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses container bytes back into tensors, widening values to f64.
pub fn from_bytes(bytes: &[u8]) -> Result<BTreeMap<String, TensorEntry>> {
    if bytes.len() < 8 {
        return Err(Error::Checkpoint(
            "container shorter than its length prefix".into(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let blob_start = 8usize
        .checked_add(header_len)
        .ok_or_else(|| Error::Checkpoint("header length overflows".into()))?;
    if bytes.len() < blob_start {
        return Err(Error::Checkpoint(format!(
            "header claims {header_len} bytes but only {} remain",
            bytes.len() - 8
        )));
    }
    let header: BTreeMap<String, HeaderEntry> =
        serde_json::from_slice(&bytes[8..blob_start])
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    let blob = &bytes[blob_start..];
    let mut out = BTreeMap::new();
    for (name, h) in header {
        if h.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: unsupported dtype {:?}",
                h.dtype
            )));
        }
        let numel: usize = h.shape.iter().product();
        if numel == 0 {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: empty shape {:?}",
                h.shape
            )));
        }
        let start = h.offset as usize;
        let end = start
            .checked_add(numel * 4)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: offset overflows")))?;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: data range {start}..{end} exceeds blob of {} bytes",
                blob.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in blob[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        out.insert(name, TensorEntry { shape: h.shape, data });
    }
    Ok(out)
}

/// Snapshots every parameter of `model` (trainable and frozen alike) into a
/// name-keyed tensor map ready for [`to_bytes`].
pub fn dump_params<M: HasParams>(model: &M) -> BTreeMap<String, TensorEntry> {
    let mut out = BTreeMap::new();
    model.visit_params(&mut |p| {
        out.insert(
            p.name().to_string(),
            TensorEntry {
                shape: p.shape().to_vec(),
                data: p.data().to_vec(),
            },
        );
    });
    out
}

/// Fills every parameter of `model` from `tensors` by name. Fails listing
/// all missing or shape-mismatched parameters at once; returns the names
/// present in `tensors` that the model does not use, for the caller to
/// surface as warnings.
pub fn load_into<M: HasParams>(
    model: &mut M,
    tensors: &BTreeMap<String, TensorEntry>,
) -> Result<Vec<String>> {
    let mut problems: Vec<String> = Vec::new();
    let mut used: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    model.visit_params_mut(&mut |p| {
        match tensors.get(p.name()) {
            None => problems.push(format!("{}: missing", p.name())),
            Some(entry) if entry.shape != p.shape() => problems.push(format!(
                "{}: shape {:?} in file, model needs {:?}",
                p.name(),
                entry.shape,
                p.shape()
            )),
            Some(entry) => {
                p.data_mut().copy_from_slice(&entry.data);
                used.insert(p.name().to_string());
            }
        }
    });
    if !problems.is_empty() {
        return Err(Error::Checkpoint(problems.join("; ")));
    }
    Ok(tensors
        .keys()
        .filter(|k| !used.contains(*k))
        .cloned()
        .collect())
}

pub fn save(path: &Path, tensors: &BTreeMap<String, TensorEntry>) -> Result<()> {
    std::fs::write(path, to_bytes(tensors)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, TensorEntry>> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, TensorEntry> {
        let mut t = BTreeMap::new();
        t.insert(
            "b.bias".to_string(),
            TensorEntry::new(vec![3], vec![0.25, -1.5, 4.0]).unwrap(),
        );
        t.insert(
            "a.weight".to_string(),
            TensorEntry::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        t
    }

    #[test]
    fn round_trip_preserves_tensors() {
        let t = sample();
        let bytes = to_bytes(&t).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn serialization_is_byte_stable() {
        let t = sample();
        let first = to_bytes(&t).unwrap();
        let reloaded = from_bytes(&first).unwrap();
        let second = to_bytes(&reloaded).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn values_are_f32_precision() {
        let mut t = BTreeMap::new();
        let precise = 0.1f64 + 1e-12;
        t.insert(
            "x".to_string(),
            TensorEntry::new(vec![1], vec![precise]).unwrap(),
        );
        let back = from_bytes(&to_bytes(&t).unwrap()).unwrap();
        assert_eq!(back["x"].data[0], precise as f32 as f64);
    }

    #[test]
    fn truncated_and_malformed_files_error() {
        let bytes = to_bytes(&sample()).unwrap();
        assert!(from_bytes(&bytes[..4]).is_err());
        assert!(from_bytes(&bytes[..bytes.len() / 2]).is_err());
        let mut garbage = bytes.clone();
        garbage[9] = b'!';
        assert!(from_bytes(&garbage).is_err());
    }

    #[test]
    fn header_inconsistencies_error_with_tensor_name() {
        // Offset pointing past the blob.
        let header = br#"{"w":{"dtype":"f32","shape":[4],"offset":100}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]);
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");

        // Wrong dtype.
        let header = br#"{"w":{"dtype":"f64","shape":[1],"offset":0}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let t = sample();
        save(&path, &t).unwrap();
        assert_eq!(load(&path).unwrap(), t);
    }

    #[test]
    fn rejects_empty_or_inconsistent_entries() {
        assert!(TensorEntry::new(vec![], vec![]).is_err());
        assert!(TensorEntry::new(vec![2], vec![1.0]).is_err());
        assert!(to_bytes(&BTreeMap::new()).is_err());
    }
}
