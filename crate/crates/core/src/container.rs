//! Shared binary container: 8-byte magic, `u32` LE format version, `u64` LE
//! header length, a JSON header `{"arrays": [...], "body": {...}}`, then raw little-endian `f64` arrays in the
//! order the header lists them.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SQSHCKPT";
pub const FISHER_MAGIC: &[u8; 8] = b"SQSHFISH";
pub const DATASET_MAGIC: &[u8; 8] = b"SQSHDATA";

const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct ArrayEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Serialize)]
struct HeaderOut<'a, H> {
    arrays: Vec<ArrayEntry>,
    body: &'a H,
}

#[derive(Deserialize)]
struct HeaderIn<H> {
    arrays: Vec<ArrayEntry>,
    body: H,
}

pub(crate) fn encode<H: Serialize>(
    magic: &[u8; 8],
    version: u32,
    header: &H,
    arrays: &[(&str, &[f64])],
) -> Result<Vec<u8>> {
    let head = HeaderOut {
        arrays: arrays
            .iter()
            .map(|(name, data)| ArrayEntry {
                name: (*name).to_string(),
                len: data.len(),
            })
            .collect(),
        body: header,
    };
    let json = serde_json::to_vec(&head).map_err(|e| Error::format("header", e.to_string()))?;
    let payload: usize = arrays.iter().map(|(_, d)| d.len() * 8).sum();
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, data) in arrays {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a container, checking the magic, version, header and that every
/// array listed in `expected` is present and complete.
pub(crate) fn decode<H: DeserializeOwned>(
    bytes: &[u8],
    magic: &[u8; 8],
    version: u32,
    expected: &[&str],
) -> Result<(H, Vec<Vec<f64>>)> {
    if bytes.len() < PREAMBLE {
        return Err(Error::format(
            "preamble",
            format!("file is {} bytes, shorter than the {PREAMBLE}-byte preamble", bytes.len()),
        ));
    }
    if &bytes[..8] != magic {
        return Err(Error::format(
            "magic",
            format!(
                "expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&bytes[..8])
            ),
        ));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::format(
            "format_version",
            format!("expected version {version}, found {found}"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::format(
                "header",
                format!("header length {header_len} runs past end of file ({} bytes)", bytes.len()),
            )
        })?;
    let mut de = serde_json::Deserializer::from_slice(&bytes[PREAMBLE..header_end]);
    let head: HeaderIn<H> = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = path.strip_prefix("body").unwrap_or(&path).trim_start_matches('.');
        Error::format(
            if inner.is_empty() {
                "header".to_string()
            } else {
                format!("header.{inner}")
            },
            e.into_inner().to_string(),
        )
    })?;
    let names: Vec<&str> = head.arrays.iter().map(|a| a.name.as_str()).collect();
    if names != expected {
        return Err(Error::format(
            "arrays",
            format!("expected arrays {expected:?}, header lists {names:?}"),
        ));
    }
    let mut cursor = header_end;
    let mut arrays = Vec::with_capacity(head.arrays.len());
    for entry in &head.arrays {
        let need = entry.len.checked_mul(8).ok_or_else(|| Error::format(&entry.name, "length overflow"))?;
        let end = cursor + need;
        if end > bytes.len() {
            return Err(Error::format(
                &entry.name,
                format!(
                    "payload truncated: need {need} bytes at offset {cursor}, only {} remain",
                    bytes.len() - cursor
                ),
            ));
        }
        let data: Vec<f64> = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push(data);
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(Error::format(
            "payload",
            format!("{} trailing bytes after the last array", bytes.len() - cursor),
        ));
    }
    Ok((head.body, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Head {
        name: String,
        count: u32,
    }

    fn sample() -> Vec<u8> {
        let h = Head { name: "x".into(), count: 3 };
        encode(b"TESTTEST", 2, &h, &[("a", &[1.0, -0.0]), ("b", &[f64::MIN_POSITIVE])]).unwrap()
    }

    #[test]
    fn round_trip_preserves_bits() {
        let (h, arrays): (Head, _) = decode(&sample(), b"TESTTEST", 2, &["a", "b"]).unwrap();
        assert_eq!(h, Head { name: "x".into(), count: 3 });
        assert_eq!(arrays[0][1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(arrays[1], vec![f64::MIN_POSITIVE]);
    }

    #[test]
    fn corruption_names_the_field() {
        let bytes = sample();
        let err = |r: Result<(Head, Vec<Vec<f64>>)>| match r {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(err(decode(&bytes[..bytes.len() - 3], b"TESTTEST", 2, &["a", "b"])), "b");
        assert_eq!(err(decode(&bytes, b"TESTTEST", 3, &["a", "b"])), "format_version");
        assert_eq!(err(decode(&bytes, b"OTHERMAG", 2, &["a", "b"])), "magic");
        assert_eq!(err(decode(&bytes[..10], b"TESTTEST", 2, &["a", "b"])), "preamble");
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(err(decode(&extra, b"TESTTEST", 2, &["a", "b"])), "payload");

        let h = serde_json::json!({"name": "x", "count": "three"});
        let bad = encode(b"TESTTEST", 2, &h, &[]).unwrap();
        assert_eq!(err(decode(&bad, b"TESTTEST", 2, &[])), "header.count");
    }
}
