//! Tensor checkpoints: a text manifest with one line per tensor
//! (`<name> dtype=f64 shape=[d0,d1,...]`) and a raw little-endian f64 blob
//! holding the tensors back to back in manifest order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub fn save_tensors(params: &ParamSet, manifest: &Path, blob: &Path) -> Result<()> {
    let mut man = String::new();
    let mut out = BufWriter::new(fs::File::create(blob)?);
    for (name, t) in params.names().iter().zip(params.tensors()) {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid tensor name `{name}`")));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        man.push_str(&format!("{name} dtype=f64 shape=[{}]\n", dims.join(",")));
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    fs::write(manifest, man)?;
    Ok(())
}

fn parse_line(line: &str) -> Option<(String, Vec<usize>)> {
    let mut parts = line.split_whitespace();
    let name = parts.next()?.to_string();
    if parts.next()? != "dtype=f64" {
        return None;
    }
    let shape = parts.next()?.strip_prefix("shape=[")?.strip_suffix(']')?;
    if parts.next().is_some() {
        return None;
    }
    let dims = if shape.is_empty() {
        vec![]
    } else {
        shape
            .split(',')
            .map(|d| d.parse().ok())
            .collect::<Option<Vec<usize>>>()?
    };
    Some((name, dims))
}

pub fn load_tensors(manifest: &Path, blob: &Path) -> Result<ParamSet> {
    let text = fs::read_to_string(manifest)?;
    let bytes = fs::read(blob)?;
    let mut params = ParamSet::new();
    let mut off = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, shape) = parse_line(line).ok_or_else(|| Error::Parse {
            path: manifest.to_path_buf(),
            line: lineno + 1,
            msg: format!("bad manifest line `{line}`"),
        })?;
        let n: usize = shape.iter().product();
        let end = off + n * 8;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("blob too short for `{name}`")));
        }
        let data = bytes[off..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        off = end;
        params.push(name, Tensor::new(shape, data)?);
    }
    if off != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "blob has {} trailing bytes",
            bytes.len() - off
        )));
    }
    Ok(params)
}
