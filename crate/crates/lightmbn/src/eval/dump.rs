//! Embedding dump files: a JSON header line {"count": m, "dim": D}
//! followed by m binary records of (pid i32, camid i32, flags u8, D f32
//! values), all little-endian.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::data::SampleFlag;
use crate::tensor::Tensor;

use super::{EvalError, EvalItem, Result};

pub fn write_embedding_dump(path: &Path, items: &[EvalItem], embeddings: &Tensor) -> Result<()> {
    let (m, d) = (embeddings.shape()[0], embeddings.shape()[1]);
    if items.len() != m {
        return Err(EvalError::InvalidArgument(format!(
            "{} metadata items for {m} embedding rows",
            items.len()
        )));
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", serde_json::json!({"count": m, "dim": d}))?;
    for (i, item) in items.iter().enumerate() {
        w.write_all(&(item.pid as i32).to_le_bytes())?;
        w.write_all(&(item.camid as i32).to_le_bytes())?;
        w.write_all(&[item.flag.as_byte()])?;
        for &v in &embeddings.data()[i * d..(i + 1) * d] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct Header {
    count: usize,
    dim: usize,
}

pub fn read_embedding_dump(path: &Path) -> Result<(Vec<EvalItem>, Tensor)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut header_line = String::new();
    r.read_line(&mut header_line)?;
    let header: Header = serde_json::from_str(header_line.trim())
        .map_err(|e| EvalError::DumpFormat(format!("header: {e}")))?;

    let mut items = Vec::with_capacity(header.count);
    let mut data = Vec::with_capacity(header.count * header.dim);
    let mut b4 = [0u8; 4];
    let mut b1 = [0u8; 1];
    for i in 0..header.count {
        r.read_exact(&mut b4)?;
        let pid = i32::from_le_bytes(b4) as i64;
        r.read_exact(&mut b4)?;
        let camid = i32::from_le_bytes(b4) as i64;
        r.read_exact(&mut b1)?;
        let flag = SampleFlag::from_byte(b1[0])
            .ok_or_else(|| EvalError::DumpFormat(format!("record {i}: bad flag {}", b1[0])))?;
        items.push(EvalItem { pid, camid, flag });
        for _ in 0..header.dim {
            r.read_exact(&mut b4)?;
            data.push(f32::from_le_bytes(b4) as f64);
        }
    }
    let emb = Tensor::from_vec(data, &[header.count, header.dim])
        .map_err(|e| EvalError::DumpFormat(e.to_string()))?;
    Ok((items, emb))
}
