//! Binary tensor files: a one-line JSON header followed by a little-endian
//! payload. Single-tensor files carry `{"shape": [...], "dtype": "f32"}`;
//! archives carry a list of named tensors and free-form string metadata.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn split_header(bytes: &[u8]) -> Result<(Value, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let value: Value =
        serde_json::from_str(header).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    Ok((value, &bytes[nl + 1..]))
}

fn parse_shape(v: &Value) -> Result<Vec<usize>> {
    v.as_array()
        .ok_or_else(|| Error::Format("shape must be an array".into()))?
        .iter()
        .map(|d| {
            d.as_u64()
                .map(|d| d as usize)
                .ok_or_else(|| Error::Format("shape entries must be integers".into()))
        })
        .collect()
}

fn check_dtype<S: Scalar>(v: &Value) -> Result<()> {
    match v.as_str() {
        Some(d) if d == S::DTYPE => Ok(()),
        Some(d) => Err(Error::Format(format!("expected dtype {}, found {d}", S::DTYPE))),
        None => Err(Error::Format("missing dtype".into())),
    }
}

fn decode<S: Scalar>(payload: &[u8], count: usize) -> Result<Vec<S>> {
    if payload.len() != count * S::BYTES {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            count * S::BYTES
        )));
    }
    Ok(payload.chunks_exact(S::BYTES).map(S::read_le).collect())
}

/// Encode one tensor with an explicit logical shape (whose product must
/// equal the element count).
pub fn encode_tensor<S: Scalar>(t: &Tensor<S>, shape: &[usize]) -> Result<Vec<u8>> {
    if shape.iter().product::<usize>() != t.len() {
        return Err(Error::Shape(format!("shape {shape:?} does not hold {} values", t.len())));
    }
    let mut out = format!("{{\"shape\": {shape:?}, \"dtype\": \"{}\"}}\n", S::DTYPE).into_bytes();
    out.reserve(t.len() * S::BYTES);
    for &v in &t.data {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Decode a single-tensor file into a matrix whose column count is the
/// product of all but the first dimension, plus the full logical shape.
pub fn decode_tensor<S: Scalar>(bytes: &[u8]) -> Result<(Tensor<S>, Vec<usize>)> {
    let (header, payload) = split_header(bytes)?;
    check_dtype::<S>(&header["dtype"])?;
    let shape = parse_shape(&header["shape"])?;
    let count = shape.iter().product();
    let data = decode(payload, count)?;
    let rows = shape.first().copied().unwrap_or(1);
    let cols = if rows == 0 { shape[1..].iter().product() } else { count / rows };
    Ok((Tensor::from_vec(rows, cols, data), shape))
}

pub fn write_tensor<S: Scalar>(path: &Path, t: &Tensor<S>, shape: &[usize]) -> Result<()> {
    fs::write(path, encode_tensor(t, shape)?)?;
    Ok(())
}

pub fn read_tensor<S: Scalar>(path: &Path) -> Result<(Tensor<S>, Vec<usize>)> {
    decode_tensor(&fs::read(path)?)
}

/// Named tensors plus string metadata in one file.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive<S> {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Default for Archive<S> {
    fn default() -> Self {
        Archive {
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }
}

impl<S: Scalar> Archive<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("archive lacks {key:?}")))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("archive lacks tensor {name:?}")))
    }

    /// All tensors whose name starts with `prefix.`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor<S>)> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|rest| (rest.to_string(), t.clone())))
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let entries: Vec<Value> = self
            .tensors
            .iter()
            .map(|(n, t)| json!({"name": n, "shape": [t.rows, t.cols]}))
            .collect();
        let meta: Map<String, Value> = self
            .meta
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        let header = json!({"dtype": S::DTYPE, "meta": meta, "tensors": entries});
        let mut out = header.to_string().into_bytes();
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for &v in &t.data {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, mut payload) = split_header(bytes)?;
        check_dtype::<S>(&header["dtype"])?;
        let mut meta = BTreeMap::new();
        if let Some(m) = header["meta"].as_object() {
            for (k, v) in m {
                let v = v
                    .as_str()
                    .ok_or_else(|| Error::Format(format!("metadata {k} is not a string")))?;
                meta.insert(k.clone(), v.to_string());
            }
        }
        let entries = header["tensors"]
            .as_array()
            .ok_or_else(|| Error::Format("missing tensor list".into()))?;
        let mut tensors = Vec::with_capacity(entries.len());
        for e in entries {
            let name = e["name"]
                .as_str()
                .ok_or_else(|| Error::Format("tensor without name".into()))?;
            let shape = parse_shape(&e["shape"])?;
            if shape.len() != 2 {
                return Err(Error::Format(format!("tensor {name} is not 2-D")));
            }
            let n = shape[0] * shape[1] * S::BYTES;
            if payload.len() < n {
                return Err(Error::Format("truncated payload".into()));
            }
            let data = decode(&payload[..n], shape[0] * shape[1])?;
            payload = &payload[n..];
            tensors.push((name.to_string(), Tensor::from_vec(shape[0], shape[1], data)));
        }
        if !payload.is_empty() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Archive { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tensor_round_trip() {
        let t = Tensor::<f32>::from_f64(2, 6, &[1.0, -2.5, 3.25, 0.0, 1e-7, 9.0, 4.0, 5.0, 6.0, 7.0, 8.0, -0.0]);
        let bytes = encode_tensor(&t, &[2, 3, 2]).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes[..nl]).unwrap(),
            r#"{"shape": [2, 3, 2], "dtype": "f32"}"#
        );
        assert_eq!(bytes.len(), nl + 1 + 12 * 4);
        let (back, shape) = decode_tensor::<f32>(&bytes).unwrap();
        assert_eq!(shape, vec![2, 3, 2]);
        assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(encode_tensor(&t, &[5]).is_err());
        assert!(decode_tensor::<f64>(&bytes).is_err());
        assert!(decode_tensor::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn spaced_header_is_accepted() {
        let mut bytes = br#"{"shape": [1, 2], "dtype": "f32"}"#.to_vec();
        bytes.push(b'\n');
        1.5f32.write_le(&mut bytes);
        2.5f32.write_le(&mut bytes);
        let (t, _) = decode_tensor::<f32>(&bytes).unwrap();
        assert_eq!(t.data, vec![1.5, 2.5]);
    }

    #[test]
    fn archive_round_trip() {
        let mut a = Archive::<f32>::new();
        a.set_meta("frozen", true);
        a.set_meta("config_hash", "abc");
        a.push("enc.w", Tensor::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        a.push("enc.b", Tensor::from_f64(1, 2, &[0.5, -0.5]));
        a.push("other", Tensor::zeros(0, 3));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/ck.bin");
        a.save(&p).unwrap();
        let b = Archive::<f32>::load(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.meta("frozen").unwrap(), "true");
        assert_eq!(b.group("enc").len(), 2);
        assert!(b.get("missing").is_err());
        let mut bytes = a.encode();
        bytes.push(0);
        assert!(Archive::<f32>::decode(&bytes).is_err());
    }
}
