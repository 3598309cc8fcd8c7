//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"GILB"
//! u32    format version (currently 1)
//! u32    header byte length, then that many bytes of UTF-8 JSON
//! repeat until EOF:
//!   u32    name byte length, then the name
//!   u32    rank, then rank u32 dims
//!   f64[]  row-major payload, product(dims) values
//! ```
//!
//! Tensors are written in map order and payloads round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GILB";
pub const VERSION: u32 = 1;

fn ck_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes a header value and named tensors to `path`.
pub fn save_tensors(
    path: &Path,
    header: &serde_json::Value,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    w.write_all(&MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let header_bytes = serde_json::to_vec(header)
        .map_err(|e| ck_err(path, format!("header serialization: {e}")))?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;

    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name_bytes).map_err(io)?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a checkpoint written by [`save_tensors`].
pub fn load_tensors(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, Tensor>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != MAGIC {
        return Err(ck_err(path, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(ck_err(path, format!("unsupported version {version}")));
    }
    let header_len = read_u32(&mut r, path)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io)?;
    let header: serde_json::Value = serde_json::from_slice(&header_bytes)
        .map_err(|e| ck_err(path, format!("header parse: {e}")))?;

    let mut tensors = BTreeMap::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(path, e)),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| ck_err(path, format!("tensor name not UTF-8: {e}")))?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > (1 << 31) {
            return Err(ck_err(path, format!("tensor {name}: implausible shape {shape:?}")));
        }
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(io)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| ck_err(path, format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(ck_err(path, format!("duplicate tensor {name}")));
        }
    }
    Ok((header, tensors))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelHeader {
    kind: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let header = serde_json::to_value(ModelHeader {
        kind: "model".into(),
        input_shape: model.input_shape.clone(),
        layers: model.layers.clone(),
    })
    .map_err(|e| ck_err(path, format!("header build: {e}")))?;
    save_tensors(path, &header, &model.params)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let (header, tensors) = load_tensors(path)?;
    let header: ModelHeader = serde_json::from_value(header)
        .map_err(|e| ck_err(path, format!("not a model checkpoint: {e}")))?;
    if header.kind != "model" {
        return Err(ck_err(path, format!("kind {:?} is not \"model\"", header.kind)));
    }
    Model::with_params(header.input_shape, header.layers, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use crate::rng::Rng;

    #[test]
    fn tensors_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gilb");
        let mut tensors = BTreeMap::new();
        let mut rng = Rng::new(3);
        tensors.insert("a.w".to_string(), Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng));
        tensors.insert("z".to_string(), Tensor::new(vec![1], vec![f64::MIN_POSITIVE]).unwrap());
        let header = serde_json::json!({"kind": "raw", "note": 7});
        save_tensors(&path, &header, &tensors).unwrap();

        let (h2, t2) = load_tensors(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(t2, tensors);
    }

    #[test]
    fn model_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gilb");
        let model = Model::new(
            vec![1, 4, 4],
            vec![
                LayerSpec::Conv2d { out: 2 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 3 },
            ],
            9,
        )
        .unwrap();
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.input_shape, model.input_shape);
        assert_eq!(loaded.layers, model.layers);
        assert_eq!(loaded.params, model.params);
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gilb");

        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_tensors(&path).is_err());

        let model = Model::new(vec![2], vec![LayerSpec::Dense { out: 2 }], 1).unwrap();
        save_model(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_tensors(&path).is_err());
    }
}
