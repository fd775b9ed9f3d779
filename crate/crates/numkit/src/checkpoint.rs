//! Single-file checkpoints: one line of JSON header, then raw little-endian
//! `f64` arrays in header order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "numkit-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    config: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode(config: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let header = Header {
        format: FORMAT.into(),
        config: config.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| Entry {
                name: (*n).to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, t) in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(reader: impl Read) -> Result<Checkpoint> {
    let mut reader = BufReader::new(reader);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    let header: Header = serde_json::from_slice(&line)?;
    if header.format != FORMAT {
        return Err(NumError::Checkpoint(format!(
            "unknown format {:?}",
            header.format
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            reader.read_exact(&mut buf).map_err(|_| {
                NumError::Checkpoint(format!("truncated data for tensor {}", e.name))
            })?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    if reader.read(&mut buf)? != 0 {
        return Err(NumError::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(Checkpoint {
        config: header.config,
        tensors,
    })
}

pub fn save(path: &Path, config: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let bytes = encode(config, tensors)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(std::fs::File::open(path)?)
}
