//! Reader and writer for the safetensors container.
//!
//! Layout: an 8-byte little-endian header length `N`, `N` bytes of JSON
//! mapping tensor names to `{dtype, shape, data_offsets}` (plus an optional
//! `__metadata__` string map), then the raw little-endian payloads.
//!
//! The writer is canonical: payloads are laid out in lexicographic name
//! order, header keys appear in that same order, and the header is padded
//! with spaces to a multiple of 8 bytes. Saving a loaded checkpoint with
//! [`DTypePolicy::Preserve`] therefore reproduces a canonical file
//! byte for byte.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

use super::{DType, DTypePolicy, NamedTensorMap, Tensor};
use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
const HEADER_ALIGN: usize = 8;
// guards against absurd header lengths in corrupted files
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NamedTensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_checkpoint(&bytes).map_err(|e| e.with_path(path))
}

/// Writes atomically: the file appears under `path` only after a complete
/// write.
pub fn save_checkpoint(
    map: &NamedTensorMap,
    path: impl AsRef<Path>,
    policy: DTypePolicy,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = serialize_checkpoint(map, policy)?;
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.partial", file_name.to_string_lossy()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn serialize_checkpoint(map: &NamedTensorMap, policy: DTypePolicy) -> Result<Vec<u8>> {
    let mut header = String::from("{");
    let mut first = true;
    let mut push_key = |header: &mut String, key: &str| {
        if !first {
            header.push(',');
        }
        first = false;
        header.push_str(&serde_json::to_string(key).expect("string serializes"));
        header.push(':');
    };

    if !map.metadata().is_empty() {
        push_key(&mut header, METADATA_KEY);
        header.push_str(&serde_json::to_string(map.metadata())?);
    }

    let mut payload = Vec::new();
    for (name, tensor) in map.iter() {
        if let Some((index, value)) = tensor.first_non_finite() {
            return Err(Error::NonFinite {
                tensor: name.clone(),
                index,
                value,
            });
        }
        let dtype = policy.resolve(tensor.dtype());
        let start = payload.len();
        encode_values(name, tensor.values(), dtype, &mut payload)?;
        let end = payload.len();
        push_key(&mut header, name);
        header.push_str(&format!(
            "{{\"dtype\":\"{}\",\"shape\":{},\"data_offsets\":[{start},{end}]}}",
            dtype,
            serde_json::to_string(tensor.shape())?
        ));
    }
    header.push('}');
    while header.len() % HEADER_ALIGN != 0 {
        header.push(' ');
    }

    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn encode_values(name: &str, values: &[f64], dtype: DType, out: &mut Vec<u8>) -> Result<()> {
    out.reserve(values.len() * dtype.size());
    for (index, &v) in values.iter().enumerate() {
        let overflow = || Error::NonFinite {
            tensor: name.to_owned(),
            index,
            value: v,
        };
        match dtype {
            DType::F32 => {
                let x = v as f32;
                if !x.is_finite() {
                    return Err(overflow());
                }
                out.extend_from_slice(&x.to_le_bytes());
            }
            DType::F16 => {
                let x = half::f16::from_f64(v);
                if !x.is_finite() {
                    return Err(overflow());
                }
                out.extend_from_slice(&x.to_le_bytes());
            }
            DType::BF16 => {
                let x = half::bf16::from_f64(v);
                if !x.is_finite() {
                    return Err(overflow());
                }
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(())
}

/// Tensor encoded to its storage bytes, as the writer would emit it.
pub(crate) fn tensor_bytes(name: &str, tensor: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_values(name, tensor.values(), dtype, &mut out)?;
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Header entries in file order, rejecting duplicate keys.
struct HeaderEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = HeaderEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut m: A) -> std::result::Result<Self::Value, A::Error> {
                let mut seen = HashSet::new();
                let mut out = Vec::new();
                while let Some((k, v)) = m.next_entry::<String, Value>()? {
                    if !seen.insert(k.clone()) {
                        return Err(de::Error::custom(format!("duplicate tensor name `{k}`")));
                    }
                    out.push((k, v));
                }
                Ok(HeaderEntries(out))
            }
        }
        d.deserialize_map(V)
    }
}

pub fn deserialize_checkpoint(bytes: &[u8]) -> Result<NamedTensorMap> {
    if bytes.len() < 8 {
        return Err(Error::format(
            None,
            0,
            format!("file is {} bytes, too short for the header length", bytes.len()),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_LEN || 8 + header_len > bytes.len() as u64 {
        return Err(Error::format(
            None,
            0,
            format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ),
        ));
    }
    let header_end = 8 + header_len as usize;
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::format(None, 8 + e.valid_up_to() as u64, "header is not UTF-8"))?;
    let entries: HeaderEntries = serde_json::from_str(header)
        .map_err(|e| Error::format(None, 8, format!("invalid header JSON: {e}")))?;

    let payload = &bytes[header_end..];
    let mut map = NamedTensorMap::new();
    let mut spans: Vec<(u64, u64, String)> = Vec::new();

    for (name, value) in entries.0 {
        if name == METADATA_KEY {
            let meta: BTreeMap<String, String> = serde_json::from_value(value).map_err(|e| {
                Error::format(None, 8, format!("`{METADATA_KEY}` must map strings to strings: {e}"))
            })?;
            *map.metadata_mut() = meta;
            continue;
        }
        let info: TensorInfo = serde_json::from_value(value)
            .map_err(|e| Error::format(Some(&name), 8, format!("bad tensor entry: {e}")))?;
        let dtype: DType = info
            .dtype
            .parse()
            .map_err(|msg: String| Error::format(Some(&name), 8, msg))?;
        let [start, end] = info.data_offsets;
        let abs_start = header_end as u64 + start;
        if end < start {
            return Err(Error::format(
                Some(&name),
                abs_start,
                format!("data_offsets [{start}, {end}] are reversed"),
            ));
        }
        if end > payload.len() as u64 {
            return Err(Error::format(
                Some(&name),
                abs_start,
                format!(
                    "payload truncated: tensor ends at {end} but only {} payload bytes exist",
                    payload.len()
                ),
            ));
        }
        let numel = info
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(Some(&name), abs_start, "shape overflows"))?;
        let expected = numel as u64 * dtype.size() as u64;
        if end - start != expected {
            return Err(Error::format(
                Some(&name),
                abs_start,
                format!(
                    "{} bytes for shape {:?} {dtype}, expected {expected}",
                    end - start,
                    info.shape
                ),
            ));
        }
        let values = decode_values(&payload[start as usize..end as usize], dtype);
        spans.push((start, end, name.clone()));
        map.insert(name, Tensor::new(dtype, info.shape, values)?)?;
    }

    spans.sort();
    let mut cursor = 0u64;
    for (start, end, name) in &spans {
        if *start != cursor {
            return Err(Error::format(
                Some(name),
                header_end as u64 + start.min(&cursor),
                if *start < cursor {
                    "tensor payloads overlap"
                } else {
                    "gap between tensor payloads"
                },
            ));
        }
        cursor = *end;
    }
    if cursor != payload.len() as u64 {
        return Err(Error::format(
            None,
            header_end as u64 + cursor,
            format!(
                "{} trailing payload bytes not owned by any tensor",
                payload.len() as u64 - cursor
            ),
        ));
    }
    Ok(map)
}

fn decode_values(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        DType::F16 => bytes
            .chunks_exact(2)
            .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f64())
            .collect(),
        DType::BF16 => bytes
            .chunks_exact(2)
            .map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f64())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_tensor_file() -> Vec<u8> {
        let header = br#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#;
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header);
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    #[test]
    fn decodes_single_f32_tensor() {
        let map = deserialize_checkpoint(&one_tensor_file()).unwrap();
        assert_eq!(map.len(), 1);
        let w = map.get("w").unwrap();
        assert_eq!(w.shape(), &[2, 2]);
        assert_eq!(w.values(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(w.dtype(), DType::F32);
    }

    #[test]
    fn duplicate_names_rejected() {
        let header = br#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]);
        let err = deserialize_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn truncated_payload_reports_tensor_and_offset() {
        let mut bytes = one_tensor_file();
        bytes.truncate(bytes.len() - 3);
        match deserialize_checkpoint(&bytes).unwrap_err() {
            Error::Format { tensor, offset, .. } => {
                assert_eq!(tensor.as_deref(), Some("w"));
                assert!(offset >= 8);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unsupported_dtype_rejected() {
        let header = br#"{"w":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.push(0);
        let err = deserialize_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("I8") && err.contains("`w`"), "{err}");
    }

    #[test]
    fn malformed_header_length() {
        let mut bytes = 1000u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(
            deserialize_checkpoint(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(deserialize_checkpoint(&[1, 2, 3]).is_err());
    }

    #[test]
    fn gaps_and_trailing_bytes_rejected() {
        let header = br#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(deserialize_checkpoint(&bytes).is_err());

        let mut bytes = one_tensor_file();
        bytes.push(0);
        assert!(deserialize_checkpoint(&bytes).is_err());
    }

    #[test]
    fn empty_map_is_minimal_valid_file() {
        let bytes = serialize_checkpoint(&NamedTensorMap::new(), DTypePolicy::Preserve).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[8..10], b"{}");
        assert!(deserialize_checkpoint(&bytes).unwrap().is_empty());
    }

    #[test]
    fn canonical_file_round_trips_byte_identical() {
        let bytes = one_tensor_file();
        // one_tensor_file's header is not space padded, so re-serialize once
        let canonical =
            serialize_checkpoint(&deserialize_checkpoint(&bytes).unwrap(), DTypePolicy::Preserve)
                .unwrap();
        let again = serialize_checkpoint(
            &deserialize_checkpoint(&canonical).unwrap(),
            DTypePolicy::Preserve,
        )
        .unwrap();
        assert_eq!(canonical, again);
        assert_eq!((canonical.len() - 8 - 16) % 8, 0);
    }

    #[test]
    fn non_finite_refused_with_name() {
        let mut map = NamedTensorMap::new();
        map.insert("bad", Tensor::new(DType::F32, vec![2], vec![0.0, f64::NAN]).unwrap())
            .unwrap();
        match serialize_checkpoint(&map, DTypePolicy::Preserve) {
            Err(Error::NonFinite { tensor, index, .. }) => {
                assert_eq!(tensor, "bad");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn f16_overflow_refused() {
        let mut map = NamedTensorMap::new();
        map.insert("big", Tensor::new(DType::F32, vec![1], vec![1e6]).unwrap())
            .unwrap();
        assert!(serialize_checkpoint(&map, DTypePolicy::ForceF16).is_err());
        assert!(serialize_checkpoint(&map, DTypePolicy::ForceBf16).is_ok());
    }

    #[test]
    fn force_f32_widens_bf16_losslessly() {
        let vals: Vec<f64> = [0.1f32, -3.5, 1e-3, 42.0]
            .iter()
            .map(|&v| half::bf16::from_f32(v).to_f64())
            .collect();
        let mut map = NamedTensorMap::new();
        map.insert("w", Tensor::new(DType::BF16, vec![4], vals.clone()).unwrap())
            .unwrap();
        let bytes = serialize_checkpoint(&map, DTypePolicy::ForceF32).unwrap();
        let back = deserialize_checkpoint(&bytes).unwrap();
        assert_eq!(back.get("w").unwrap().dtype(), DType::F32);
        assert_eq!(back.get("w").unwrap().values(), vals.as_slice());
    }

    #[test]
    fn metadata_preserved() {
        let mut map = NamedTensorMap::new();
        map.metadata_mut().insert("format".into(), "pt".into());
        let bytes = serialize_checkpoint(&map, DTypePolicy::Preserve).unwrap();
        let back = deserialize_checkpoint(&bytes).unwrap();
        assert_eq!(back.metadata().get("format").map(String::as_str), Some("pt"));
    }
}
