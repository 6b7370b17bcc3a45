//! Safetensors-compatible checkpoint container and the elementwise tensor
//! arithmetic the merge pipelines are built from.
//!
//! Layout of a container file:
//!
//! ```text
//! [u64 LE header length N][N bytes of JSON header][payload bytes]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`
//! with offsets relative to the first payload byte, plus an optional
//! `"__metadata__"` string map. Everything is widened to `f32` on load;
//! output is always `F32` with a canonical (sorted, whitespace-free) header.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;

use crate::error::{Error, Result};

/// Largest header accepted or produced (mirrors the reference container).
pub const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

const METADATA_KEY: &str = "__metadata__";

/// Metadata key prefix recording the on-disk dtype of widened tensors.
pub const SOURCE_DTYPE_PREFIX: &str = "source_dtype.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dense row-major `f32` tensor. An empty shape denotes a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn numel_of(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        match numel_of(&shape) {
            Some(n) if n == data.len() => Ok(Self { shape, data }),
            Some(n) => Err(Error::InvalidTensor {
                name: String::new(),
                reason: format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            }),
            None => Err(Error::InvalidTensor {
                name: String::new(),
                reason: format!("shape {shape:?} overflows"),
            }),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape).expect("shape overflows usize");
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = numel_of(&shape).expect("shape overflows usize");
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same shape, new contents. Panics if the length differs.
    pub fn with_data(&self, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), self.data.len(), "with_data length mismatch");
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        self.with_data(self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                key: None,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map(|x| x * factor)
    }

    pub fn abs(&self) -> Self {
        self.map(f32::abs)
    }

    pub fn sign(&self) -> Self {
        self.map(sign)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }
}

/// `sign(0) = 0`; NaN also maps to 0.
#[inline]
pub fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Ordered name → tensor map plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }
}

// Header entries are collected in file order so duplicate names can be
// rejected; serde_json's own map types silently keep the last duplicate.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    out.push((k, v));
                }
                Ok(RawHeader(out))
            }
        }
        deserializer.deserialize_map(V)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Parses a container image held in memory.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let available = (bytes.len() - 8) as u64;
    if header_len > MAX_HEADER_LEN || header_len > available {
        return Err(Error::MalformedHeader(format!(
            "declared header length {header_len} exceeds {} available bytes",
            available.min(MAX_HEADER_LEN)
        )));
    }
    let header_end = 8 + header_len as usize;
    let header_text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let RawHeader(entries) = serde_json::from_str(header_text)
        .map_err(|e| Error::MalformedHeader(format!("header is not a JSON object: {e}")))?;
    let payload = &bytes[header_end..];

    let mut ckpt = Checkpoint::new();
    let mut seen_metadata = false;
    let mut ranges: Vec<(usize, usize, String)> = Vec::new();
    let mut decoded: Vec<(String, DType, Vec<usize>, usize, usize)> = Vec::new();

    for (name, value) in entries {
        if name == METADATA_KEY {
            if seen_metadata {
                return Err(Error::MalformedHeader("duplicate __metadata__".into()));
            }
            seen_metadata = true;
            let map: BTreeMap<String, String> = serde_json::from_value(value).map_err(|e| {
                Error::MalformedHeader(format!("__metadata__ must map strings to strings: {e}"))
            })?;
            ckpt.metadata.extend(map);
            continue;
        }
        if decoded.iter().any(|d| d.0 == name) {
            return Err(Error::MalformedHeader(format!(
                "duplicate tensor name '{name}'"
            )));
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("tensor '{name}': {e}")))?;
        let dtype = DType::parse(&entry.dtype).ok_or_else(|| Error::UnsupportedDtype {
            name: name.clone(),
            dtype: entry.dtype.clone(),
        })?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end > payload.len() {
            return Err(Error::OutOfBounds(name));
        }
        let expected = numel_of(&entry.shape)
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::InvalidTensor {
                name: name.clone(),
                reason: format!("shape {:?} overflows", entry.shape),
            })?;
        if end - begin != expected {
            return Err(Error::InvalidTensor {
                name,
                reason: format!(
                    "data_offsets span {} bytes but shape {:?} of {dtype} needs {expected}",
                    end - begin,
                    entry.shape
                ),
            });
        }
        ranges.push((begin, end, name.clone()));
        decoded.push((name, dtype, entry.shape, begin, end));
    }

    ranges.sort();
    for pair in ranges.windows(2) {
        let (_, prev_end, _) = &pair[0];
        let (begin, end, name) = &pair[1];
        if begin < end && begin < prev_end {
            return Err(Error::Overlap(name.clone()));
        }
    }

    for (name, dtype, shape, begin, end) in decoded {
        let raw = &payload[begin..end];
        let data: Vec<f32> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            DType::F16 => raw
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            DType::BF16 => raw
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        };
        if dtype != DType::F32 {
            ckpt.metadata
                .insert(format!("{SOURCE_DTYPE_PREFIX}{name}"), dtype.to_string());
        }
        ckpt.tensors.insert(name, Tensor { shape, data });
    }
    Ok(ckpt)
}

/// Serializes to the canonical container image: sorted keys, no
/// insignificant whitespace, F32 payloads packed in name order.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries: BTreeMap<&str, String> = BTreeMap::new();
    let mut offset = 0usize;
    for (name, tensor) in &ckpt.tensors {
        let len = tensor
            .numel()
            .checked_mul(4)
            .ok_or_else(|| Error::SizeLimit(format!("tensor '{name}' is too large")))?;
        let end = offset
            .checked_add(len)
            .ok_or_else(|| Error::SizeLimit("payload exceeds addressable size".into()))?;
        entries.insert(
            name,
            format!(
                r#"{{"data_offsets":[{offset},{end}],"dtype":"F32","shape":{}}}"#,
                serde_json::to_string(&tensor.shape).expect("shape serializes")
            ),
        );
        offset = end;
    }
    if !ckpt.metadata.is_empty() {
        // BTreeMap serializes in key order, so this is canonical too.
        entries.insert(
            METADATA_KEY,
            serde_json::to_string(&ckpt.metadata).expect("metadata serializes"),
        );
    }

    let mut header = String::from("{");
    for (i, (key, body)) in entries.iter().enumerate() {
        if i > 0 {
            header.push(',');
        }
        header.push_str(&serde_json::to_string(key).expect("key serializes"));
        header.push(':');
        header.push_str(body);
    }
    header.push('}');
    if header.len() as u64 > MAX_HEADER_LEN {
        return Err(Error::SizeLimit(format!(
            "header of {} bytes exceeds {MAX_HEADER_LEN}",
            header.len()
        )));
    }

    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for tensor in ckpt.tensors.values() {
        for x in &tensor.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_to_bytes(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn empty_header_is_empty_checkpoint() {
        let bytes = [2u8, 0, 0, 0, 0, 0, 0, 0, b'{', b'}'];
        let ckpt = checkpoint_from_bytes(&bytes).unwrap();
        assert!(ckpt.is_empty());
        assert!(ckpt.metadata.is_empty());
        assert_eq!(checkpoint_to_bytes(&Checkpoint::new()).unwrap(), bytes);
    }

    #[test]
    fn reads_hand_built_f32_tensor() {
        // 1.0f32 == 0x3f800000, little-endian.
        let payload = hex::decode("0000803f".repeat(4)).unwrap();
        let bytes = image(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
            &payload,
        );
        let ckpt = checkpoint_from_bytes(&bytes).unwrap();
        let w = ckpt.get("w").unwrap();
        assert_eq!(w.shape(), &[2, 2]);
        assert_eq!(w.data(), &[1.0; 4]);
    }

    #[test]
    fn canonical_writer_matches_hand_layout() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("w", Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
        let expected = image(
            r#"{"w":{"data_offsets":[0,16],"dtype":"F32","shape":[2,2]}}"#,
            &hex::decode("0000803f".repeat(4)).unwrap(),
        );
        assert_eq!(checkpoint_to_bytes(&ckpt).unwrap(), expected);
    }

    #[test]
    fn rejects_out_of_bounds() {
        let bytes = image(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
            &[0u8; 12],
        );
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "out-of-bounds tensor 'w'");
    }

    #[test]
    fn rejects_overlap_and_bad_dtype() {
        let bytes = image(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#,
            &[0u8; 12],
        );
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Overlap(n)) if n == "b"));

        let bytes = image(
            r#"{"q":{"dtype":"I8","shape":[2],"data_offsets":[0,2]}}"#,
            &[0u8; 2],
        );
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("'q'"), "{err}");
    }

    #[test]
    fn rejects_truncated_and_garbled_headers() {
        assert!(matches!(
            checkpoint_from_bytes(&[1, 2, 3]),
            Err(Error::MalformedHeader(_))
        ));
        let mut bytes = image("{}", &[]);
        bytes[0] = 200;
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            checkpoint_from_bytes(&image("[1,2]", &[])),
            Err(Error::MalformedHeader(_))
        ));
        let dup = image(
            r#"{"a":{"dtype":"F32","shape":[],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[],"data_offsets":[4,8]}}"#,
            &[0u8; 8],
        );
        assert!(matches!(
            checkpoint_from_bytes(&dup),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn half_precision_widens_exactly() {
        let h = half::f16::from_f32(-1.5);
        let b = half::bf16::from_f32(3.25);
        let mut payload = h.to_le_bytes().to_vec();
        payload.extend_from_slice(&b.to_le_bytes());
        let bytes = image(
            r#"{"b":{"dtype":"BF16","shape":[1],"data_offsets":[2,4]},"h":{"dtype":"F16","shape":[1],"data_offsets":[0,2]}}"#,
            &payload,
        );
        let ckpt = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(ckpt.get("h").unwrap().data(), &[-1.5]);
        assert_eq!(ckpt.get("b").unwrap().data(), &[3.25]);
        assert_eq!(ckpt.metadata["source_dtype.h"], "F16");
        assert_eq!(ckpt.metadata["source_dtype.b"], "BF16");

        let again = checkpoint_from_bytes(&checkpoint_to_bytes(&ckpt).unwrap()).unwrap();
        assert_eq!(again, ckpt);
    }

    #[test]
    fn zero_size_and_scalar_tensors() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("empty", Tensor::zeros(vec![0, 3]));
        ckpt.insert("scalar", Tensor::new(vec![], vec![7.0]).unwrap());
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&ckpt).unwrap()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn elementwise_ops() {
        let a = Tensor::from_vec(vec![3.0, 5.0]);
        assert_eq!(a.sub(&a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(
            Tensor::from_vec(vec![1.0, -2.0]).scale(0.5).data(),
            &[0.5, -1.0]
        );
        assert_eq!(
            Tensor::from_vec(vec![-2.0, 0.0, 7.0]).sign().data(),
            &[-1.0, 0.0, 1.0]
        );
        assert_eq!(
            Tensor::from_vec(vec![-2.0, 3.0]).abs().data(),
            &[2.0, 3.0]
        );
        assert_eq!(
            a.hadamard(&Tensor::from_vec(vec![2.0, -1.0])).unwrap().data(),
            &[6.0, -5.0]
        );
        let err = a.add(&Tensor::zeros(vec![3])).unwrap_err();
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }
}
