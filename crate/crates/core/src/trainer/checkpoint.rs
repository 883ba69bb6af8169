//! Checkpoint container: full run state in one binary file.
//!
//! Layout, little-endian throughout: magic `DCCK`, `u32` version, `u64`
//! JSON length plus the UTF-8 run config, then named tensor records until
//! EOF. Each record is `u32` name length, name bytes, `u64` rank, `rank`
//! dims as `u64`, then the `f64` payload. Record order is fixed, so a
//! load/save round trip is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::RunConfig;
use crate::contrastive::NegativeQueue;
use crate::encoders::{DualEncoder, ModelPair, EMBED_DIM};
use crate::error::{Error, Result};
use crate::tensor::{OptimizerState, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DCCK";

/// Everything needed to resume a run bit-for-bit.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub model: ModelPair,
    pub optimizer: OptimizerState,
    pub queue_point: NegativeQueue,
    pub queue_voxel: NegativeQueue,
    /// Completed optimization steps.
    pub step: u64,
}

fn write_record(w: &mut impl Write, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u64).to_le_bytes())?;
    for &dim in shape {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Record {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn read_record(r: &mut impl Read, path: &Path) -> Result<Option<Record>> {
    let mut len_buf = [0u8; 4];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let truncated = || Error::Format(format!("truncated checkpoint {}", path.display()));
    let name_len = u32::from_le_bytes(len_buf) as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes).map_err(|_| truncated())?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::Format(format!("non-UTF-8 record name in {}", path.display())))?;
    let mut u64_buf = [0u8; 8];
    r.read_exact(&mut u64_buf).map_err(|_| truncated())?;
    let rank = u64::from_le_bytes(u64_buf) as usize;
    if rank > 8 {
        return Err(Error::Format(format!(
            "implausible rank {rank} in {}",
            path.display()
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u64_buf).map_err(|_| truncated())?;
        shape.push(u64::from_le_bytes(u64_buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut values = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut u64_buf).map_err(|_| truncated())?;
        values.push(f64::from_le_bytes(u64_buf));
    }
    Ok(Some(Record {
        name,
        shape,
        values,
    }))
}

/// Serialize to `path`. Record order: online params, momentum params,
/// optimizer velocities, both queues, step counter.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&checkpoint.version.to_le_bytes())?;
    let config_json = serde_json::to_string(&checkpoint.config).map_err(Error::from)?;
    w.write_all(&(config_json.len() as u64).to_le_bytes())?;
    w.write_all(config_json.as_bytes())?;

    for (name, tensor) in checkpoint.model.online.named_params() {
        write_record(&mut w, &format!("online.{name}"), tensor.shape(), tensor.values())?;
    }
    for (name, tensor) in checkpoint.model.momentum.named_params() {
        write_record(
            &mut w,
            &format!("momentum.{name}"),
            tensor.shape(),
            tensor.values(),
        )?;
    }
    let online_names: Vec<String> = checkpoint
        .model
        .online
        .named_params()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    for (name, velocity) in online_names.iter().zip(checkpoint.optimizer.velocities()) {
        write_record(
            &mut w,
            &format!("optimizer.{name}.velocity"),
            velocity.shape(),
            velocity.values(),
        )?;
    }
    for (tag, queue) in [
        ("point", &checkpoint.queue_point),
        ("voxel", &checkpoint.queue_voxel),
    ] {
        write_record(
            &mut w,
            &format!("queue.{tag}.slots"),
            &[queue.capacity(), EMBED_DIM],
            queue.raw_slots(),
        )?;
        write_record(
            &mut w,
            &format!("queue.{tag}.state"),
            &[3],
            &[
                queue.cursor() as f64,
                queue.len() as f64,
                queue.pushed_total() as f64,
            ],
        )?;
    }
    write_record(&mut w, "trainer.step", &[1], &[checkpoint.step as f64])?;
    w.flush()?;
    Ok(())
}

fn take_record(records: &mut std::collections::HashMap<String, Record>, name: &str) -> Result<Record> {
    records
        .remove(name)
        .ok_or_else(|| Error::Format(format!("checkpoint record missing: {name}")))
}

fn fill_params(model: &mut DualEncoder, prefix: &str, records: &mut std::collections::HashMap<String, Record>) -> Result<()> {
    for (name, tensor) in model.named_params_mut() {
        let record = take_record(records, &format!("{prefix}.{name}"))?;
        if record.shape != tensor.shape() {
            return Err(Error::Format(format!(
                "record {prefix}.{name} shape {:?} does not match config-built shape {:?}",
                record.shape,
                tensor.shape()
            )));
        }
        tensor.values_mut().copy_from_slice(&record.values);
    }
    Ok(())
}

/// Deserialize and structurally validate a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("checkpoint {}: {e}", path.display()),
        ))
    })?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("truncated checkpoint {}", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic in {}",
            path.display()
        )));
    }
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf)
        .map_err(|_| Error::Format(format!("truncated checkpoint {}", path.display())))?;
    let version = u32::from_le_bytes(u32_buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut u64_buf = [0u8; 8];
    r.read_exact(&mut u64_buf)
        .map_err(|_| Error::Format(format!("truncated checkpoint {}", path.display())))?;
    let json_len = u64::from_le_bytes(u64_buf) as usize;
    let mut json_bytes = vec![0u8; json_len];
    r.read_exact(&mut json_bytes)
        .map_err(|_| Error::Format(format!("truncated checkpoint {}", path.display())))?;
    let config: RunConfig = serde_json::from_slice(&json_bytes)
        .map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
    config.validate()?;

    let mut records = std::collections::HashMap::new();
    while let Some(record) = read_record(&mut r, path)? {
        records.insert(record.name.clone(), record);
    }

    let train = &config.train;
    let mut online = DualEncoder::init(
        &config.encoder,
        train.width_multiplier,
        train.voxel_dims,
        train.seed,
        true,
    )?;
    fill_params(&mut online, "online", &mut records)?;
    let mut pair = ModelPair::new(online, train.encoder_momentum)?;
    fill_params(&mut pair.momentum, "momentum", &mut records)?;

    let param_refs: Vec<&Tensor> = pair.online.named_params().into_iter().map(|(_, t)| t).collect();
    let mut optimizer =
        OptimizerState::new(&param_refs, train.optimizer_momentum, train.weight_decay)?;
    let names: Vec<String> = pair
        .online
        .named_params()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut velocities = Vec::with_capacity(names.len());
    for name in &names {
        let record = take_record(&mut records, &format!("optimizer.{name}.velocity"))?;
        velocities.push(Tensor::new(record.shape, record.values)?);
    }
    optimizer.restore_velocities(velocities)?;

    let mut load_queue = |tag: &str| -> Result<NegativeQueue> {
        let slots = take_record(&mut records, &format!("queue.{tag}.slots"))?;
        let state = take_record(&mut records, &format!("queue.{tag}.state"))?;
        if slots.shape != [train.queue_capacity, EMBED_DIM] || state.values.len() != 3 {
            return Err(Error::Format(format!(
                "queue.{tag} records inconsistent with config capacity {}",
                train.queue_capacity
            )));
        }
        NegativeQueue::restore(
            train.queue_capacity,
            slots.values,
            state.values[0] as usize,
            state.values[1] as usize,
            state.values[2] as u64,
        )
    };
    let queue_point = load_queue("point")?;
    let queue_voxel = load_queue("voxel")?;

    let step_record = take_record(&mut records, "trainer.step")?;
    let step = step_record
        .values
        .first()
        .copied()
        .unwrap_or_default() as u64;

    if let Some(extra) = records.keys().next() {
        return Err(Error::Format(format!(
            "unexpected checkpoint record: {extra}"
        )));
    }

    Ok(Checkpoint {
        version,
        config,
        model: pair,
        optimizer,
        queue_point,
        queue_voxel,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_run_config;
    use super::super::{init_state, pretrain};
    use super::*;
    use crate::data::{build_dataset, SplitTag};
    use tempfile::tempdir;

    #[test]
    fn save_load_roundtrip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let config = tiny_run_config(20);
        let manifest = build_dataset(
            &config.data,
            8,
            config.train.seed,
            0,
            SplitTag::Pretrain,
            dir.path(),
        )
        .unwrap();
        let outcome = pretrain(&manifest, dir.path(), &config).unwrap();
        let path_a = dir.path().join("a.dcck");
        let path_b = dir.path().join("b.dcck");
        save_checkpoint(&outcome.checkpoint, &path_a).unwrap();
        let loaded = load_checkpoint(&path_a).unwrap();
        save_checkpoint(&loaded, &path_b).unwrap();
        let bytes_a = std::fs::read(&path_a).unwrap();
        let bytes_b = std::fs::read(&path_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(loaded.step, outcome.checkpoint.step);
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let dir = tempdir().unwrap();
        let config = tiny_run_config(21);
        let state = init_state(&config).unwrap();
        let path = dir.path().join("full.dcck");
        save_checkpoint(&state, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.dcck");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempdir().unwrap();
        let config = tiny_run_config(22);
        let state = init_state(&config).unwrap();
        let path = dir.path().join("v.dcck");
        save_checkpoint(&state, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // version little-endian low byte
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.dcck");
        std::fs::write(&path, b"NOPEmore-bytes-follow").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
