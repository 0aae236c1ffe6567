//! Checkpoint container: a plain-text header of `name dtype shape...` lines,
//! a blank separator line, then the raw little-endian 32-bit floats of every
//! tensor concatenated in header order. Lossless at 32-bit precision.

use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &str = "tta-checkpoint v1";

pub fn save_checkpoint<S: Scalar>(params: &ModelParams<S>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{MAGIC}")?;
    let named = params.named();
    for (name, t) in &named {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(w, "{name} f32 {}", dims.join(" "))?;
    }
    writeln!(w)?;
    for (_, t) in &named {
        for v in t.data() {
            w.write_all(&v.to_f32_lossy().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint into the parameter layout of `expected`, validating
/// every header entry against it. `expected` is typically
/// [`ModelParams::zeros`] of the target configuration.
pub fn load_checkpoint<S: Scalar>(mut expected: ModelParams<S>, path: &Path) -> Result<ModelParams<S>> {
    let label = path.display().to_string();
    let bad = |msg: String| Error::Checkpoint {
        path: label.clone(),
        msg,
    };
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(bad(format!("bad magic line {:?}", line.trim_end())));
    }

    let mut header: Vec<(String, Vec<usize>)> = Vec::new();
    loop {
        line.clear();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            return Err(bad("truncated header".into()));
        }
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            break;
        }
        let mut parts = trimmed.split(' ');
        let name = parts
            .next()
            .ok_or_else(|| bad("empty header line".into()))?
            .to_string();
        match parts.next() {
            Some("f32") => {}
            other => return Err(bad(format!("unsupported dtype {other:?} for {name}"))),
        }
        let dims = parts
            .map(|p| p.parse::<usize>().map_err(|e| bad(format!("{name}: {e}"))))
            .collect::<Result<Vec<usize>>>()?;
        header.push((name, dims));
    }

    {
        let expected_named = expected.named();
        if header.len() != expected_named.len() {
            return Err(bad(format!(
                "{} tensors in file, configuration needs {}",
                header.len(),
                expected_named.len()
            )));
        }
        for ((name, dims), (want_name, want)) in header.iter().zip(&expected_named) {
            if name != want_name || dims != want.shape() {
                return Err(bad(format!(
                    "tensor {name} {dims:?} does not match expected {want_name} {:?}",
                    want.shape()
                )));
            }
        }
    }

    let mut buf = Vec::new();
    for (name, t) in expected.named_mut() {
        buf.resize(t.numel() * 4, 0u8);
        r.read_exact(&mut buf).map_err(|_| Error::Checkpoint {
            path: label.clone(),
            msg: format!("payload truncated at {name}"),
        })?;
        for (slot, chunk) in t.data_mut().iter_mut().zip(buf.chunks_exact(4)) {
            *slot = S::from_f32_exact(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(bad("trailing data after payload".into()));
    }
    Ok(expected)
}
