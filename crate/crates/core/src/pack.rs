//! `DNEPACK1` container: magic, little-endian `u32` header length, a JSON
//! header, then raw little-endian `f32` payload.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{DneError, Result};
use crate::features::FeatureGrid;

pub const MAGIC: &[u8; 8] = b"DNEPACK1";
const KIND_GRID: &str = "feature_grid";
pub const KIND_CHECKPOINT: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// A decoded container: its JSON header and the `f32` payload widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pack {
    pub header: Value,
    pub data: Vec<f64>,
}

pub fn write_pack(mut out: impl Write, header: &Value, data: &[f64]) -> Result<()> {
    let head = serde_json::to_vec(header)?;
    let len = u32::try_from(head.len()).map_err(|_| DneError::Format("header too large".into()))?;
    out.write_all(MAGIC)?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&head)?;
    let mut buf = Vec::with_capacity(4 * data.len());
    for &x in data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_pack(mut input: impl Read) -> Result<Pack> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(DneError::Format("missing DNEPACK1 magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(12..12 + len)
        .ok_or_else(|| DneError::Format("truncated header".into()))?;
    let header: Value = serde_json::from_slice(body)?;
    let payload = &bytes[12 + len..];
    if payload.len() % 4 != 0 {
        return Err(DneError::Format("payload is not a whole number of f32".into()));
    }
    if header.get("dtype").and_then(Value::as_str).unwrap_or("f32le") != "f32le" {
        return Err(DneError::Format("only f32le payloads are supported".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Pack { header, data })
}

pub fn encode_grid(grid: &FeatureGrid) -> Result<Vec<u8>> {
    let header = serde_json::json!({
        "shape": grid.shape(),
        "dtype": "f32le",
        "kind": KIND_GRID,
    });
    let mut out = Vec::new();
    write_pack(&mut out, &header, grid.values())?;
    Ok(out)
}

pub fn decode_grid(bytes: &[u8]) -> Result<FeatureGrid> {
    let pack = read_pack(bytes)?;
    if pack.header.get("kind").and_then(Value::as_str) != Some(KIND_GRID) {
        return Err(DneError::Format("not a feature_grid container".into()));
    }
    let shape: [usize; 3] = serde_json::from_value(pack.header["shape"].clone())?;
    FeatureGrid::new(shape[0], shape[1], shape[2], pack.data)
}

/// Named tensors laid out back to back, plus a free-form config object.
pub fn encode_checkpoint(tensors: &[(String, &[f64], Vec<usize>)], config: Value) -> Result<Vec<u8>> {
    let entries: Vec<TensorEntry> = tensors
        .iter()
        .map(|(name, _, shape)| TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
        })
        .collect();
    let header = serde_json::json!({
        "kind": KIND_CHECKPOINT,
        "dtype": "f32le",
        "tensors": entries,
        "config": config,
    });
    let mut data = Vec::new();
    for (name, values, shape) in tensors {
        if values.len() != shape.iter().product::<usize>() {
            return Err(DneError::shape("checkpoint tensor", format!("{name} {shape:?}"), values.len()));
        }
        data.extend_from_slice(values);
    }
    let mut out = Vec::new();
    write_pack(&mut out, &header, &data)?;
    Ok(out)
}

/// Splits a checkpoint into `(config, [(entry, values)])`.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Value, Vec<(TensorEntry, Vec<f64>)>)> {
    let pack = read_pack(bytes)?;
    if pack.header.get("kind").and_then(Value::as_str) != Some(KIND_CHECKPOINT) {
        return Err(DneError::Format("not a checkpoint container".into()));
    }
    let entries: Vec<TensorEntry> = serde_json::from_value(pack.header["tensors"].clone())?;
    let mut offset = 0;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let len: usize = e.shape.iter().product();
        let values = pack
            .data
            .get(offset..offset + len)
            .ok_or_else(|| DneError::Format(format!("tensor {} runs past the payload", e.name)))?
            .to_vec();
        offset += len;
        out.push((e, values));
    }
    if offset != pack.data.len() {
        return Err(DneError::Format("trailing checkpoint payload".into()));
    }
    Ok((pack.header["config"].clone(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip_of_f32_values() {
        let values: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f32 * 0.37 - 1.0) as f64).collect();
        let g = FeatureGrid::new(2, 3, 4, values).unwrap();
        let bytes = encode_grid(&g).unwrap();
        assert_eq!(&bytes[..8], b"DNEPACK1");
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        assert_eq!(header["shape"], serde_json::json!([2, 3, 4]));
        assert_eq!(header["kind"], "feature_grid");
        assert_eq!(bytes.len(), 12 + len + 4 * 24);
        assert_eq!(decode_grid(&bytes).unwrap(), g);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_grid(b"NOTAPACK\0\0\0\0").is_err());
        assert!(decode_grid(b"DNEPACK1\xff\0\0\0{}").is_err());
        let ckpt = encode_checkpoint(&[], serde_json::json!({})).unwrap();
        assert!(decode_grid(&ckpt).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = [0.5, -1.25, 3.0, 4.0];
        let b = [7.0];
        let t = vec![("a".to_string(), &a[..], vec![2, 2]), ("b".to_string(), &b[..], vec![1])];
        let bytes = encode_checkpoint(&t, serde_json::json!({"m": 3})).unwrap();
        let (cfg, tensors) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cfg["m"], 3);
        assert_eq!(tensors[0].0.shape, vec![2, 2]);
        assert_eq!(tensors[0].1, a.to_vec());
        assert_eq!(tensors[1].1, b.to_vec());
    }
}
