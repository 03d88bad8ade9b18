//! Checkpoint persistence.
//!
//! Layout: magic "LMBN1", then a u32 entry count, then per entry a u32
//! UTF-8 name length + name, u32 rank, u32 extents, and the row-major
//! little-endian 32-bit IEEE-754 payload. Batch-norm running statistics
//! are stored alongside the parameters under `.running_mean` /
//! `.running_var` names. Loading validates every expected name and shape
//! and reports the full diff on mismatch.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::{RunningStats, Tensor};

use super::{Model, ModelError, Result};

const MAGIC: &[u8; 5] = b"LMBN1";

struct Entry {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn collect_entries(model: &Model) -> Vec<(String, Entry)> {
    let mut entries = Vec::new();
    for (name, t) in model.named_params() {
        entries.push((
            name,
            Entry {
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&v| v as f32).collect(),
            },
        ));
    }
    for (name, bn) in model.batch_norms() {
        let stats = bn.running_stats();
        entries.push((
            format!("{name}.running_mean"),
            Entry {
                shape: vec![stats.mean.len()],
                data: stats.mean.iter().map(|&v| v as f32).collect(),
            },
        ));
        entries.push((
            format!("{name}.running_var"),
            Entry {
                shape: vec![stats.var.len()],
                data: stats.var.iter().map(|&v| v as f32).collect(),
            },
        ));
    }
    entries
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let entries = collect_entries(model);
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, entry) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(entry.shape.len() as u32).to_le_bytes())?;
        for &ext in &entry.shape {
            w.write_all(&(ext as u32).to_le_bytes())?;
        }
        for v in entry.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn parse_file(path: &Path) -> Result<BTreeMap<String, Entry>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let count = read_u32(&mut r)?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| ModelError::Checkpoint(format!("non-UTF-8 entry name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        entries.insert(name, Entry { shape, data });
    }
    Ok(entries)
}

/// Load a checkpoint into a model of matching structure. Missing
/// parameters, shape mismatches, and unexpected entries all fail with a
/// report naming each offender.
pub fn load_checkpoint(model: &mut Model, path: &Path) -> Result<()> {
    let mut file_entries = parse_file(path)?;
    let mut problems: Vec<String> = Vec::new();
    let mut assignments: Vec<(String, Vec<f64>)> = Vec::new();

    let expected: Vec<(String, Vec<usize>)> = collect_entries(model)
        .into_iter()
        .map(|(name, e)| (name, e.shape))
        .collect();
    for (name, shape) in &expected {
        match file_entries.remove(name) {
            Some(entry) if &entry.shape == shape => {
                assignments.push((name.clone(), entry.data.iter().map(|&v| v as f64).collect()));
            }
            Some(entry) => problems.push(format!(
                "  shape mismatch: {name}: file {:?}, model {:?}",
                entry.shape, shape
            )),
            None => problems.push(format!("  missing: {name} {shape:?}")),
        }
    }
    for name in file_entries.keys() {
        problems.push(format!("  unexpected: {name}"));
    }
    if !problems.is_empty() {
        return Err(ModelError::Checkpoint(problems.join("\n")));
    }

    let mut by_name: BTreeMap<String, Vec<f64>> = assignments.into_iter().collect();
    for (name, param) in model.named_params_mut() {
        let data = by_name.remove(&name).expect("validated above");
        let shape = param.shape().to_vec();
        *param = Tensor::from_vec(data, &shape)
            .expect("validated above")
            .requiring_grad();
    }
    for (name, bn) in model.batch_norms() {
        let mean = by_name
            .remove(&format!("{name}.running_mean"))
            .expect("validated above");
        let var = by_name
            .remove(&format!("{name}.running_var"))
            .expect("validated above");
        bn.set_running_stats(RunningStats { mean, var })?;
    }
    Ok(())
}
