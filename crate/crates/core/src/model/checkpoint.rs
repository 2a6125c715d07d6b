//! Checkpoint directories: `meta.json` plus `params.bin`.
//!
//! `params.bin` layout (little-endian):
//! magic `ULPARAM1`, u32 tensor count, then per tensor: u32 name length,
//! UTF-8 name, u32 rank, u64 dims, f64 values in row-major order.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, Ix1, Ix2, IxDyn};
use serde::{Deserialize, Serialize};

use super::arch::ArchDescriptor;
use super::classifier::Classifier;
use crate::error::{Error, Result};
use crate::params::ParamSet;

const MAGIC: &[u8; 8] = b"ULPARAM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchDescriptor,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub seed: u64,
    pub config_hash: String,
    pub param_checksum: String,
}

pub fn write_params(path: &Path, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, t) in params.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.ndim() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<ParamSet> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic in parameter file".into()));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        let t = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Format(e.to_string()))?;
        params.push(name, t);
    }
    Ok(params)
}

pub fn save(dir: &Path, model: &Classifier, seed: u64, config_hash: &str) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        arch: model.descriptor(),
        num_classes: model.num_classes(),
        embed_dim: model.embed_dim(),
        seed,
        config_hash: config_hash.to_string(),
        param_checksum: model.params().checksum(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    write_params(&dir.join("params.bin"), model.params())?;
    Ok(meta)
}

pub fn load(dir: &Path) -> Result<(Classifier, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let params = read_params(&dir.join("params.bin"))?;
    if params.checksum() != meta.param_checksum {
        return Err(Error::Format("parameter checksum mismatch".into()));
    }
    if params.len() < 2 {
        return Err(Error::Format("parameter file lacks a head".into()));
    }
    let extractor = meta.arch.build()?;
    let mut tensors = params.tensors().to_vec();
    let bias = tensors.pop().expect("len checked");
    let weight = tensors.pop().expect("len checked");
    let weight = weight
        .into_dimensionality::<Ix2>()
        .map_err(|e| Error::Format(e.to_string()))?;
    let bias = bias
        .into_dimensionality::<Ix1>()
        .map_err(|e| Error::Format(e.to_string()))?;
    let model = Classifier::new(extractor, tensors, weight, bias)?;
    if model.num_classes() != meta.num_classes {
        return Err(Error::Format("class count disagrees with metadata".into()));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch::Activation;

    #[test]
    fn roundtrip_is_bit_exact() {
        let arch = ArchDescriptor::Mlp {
            input_dim: 5,
            hidden: 7,
            embed_dim: 4,
            hidden_activation: Activation::Relu,
            embed_activation: Activation::Relu,
        };
        let model = Classifier::init(&arch, 3, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, 42, "abc").unwrap();
        let (loaded, meta) = load(dir.path()).unwrap();
        assert!(loaded.params().bit_eq(model.params()));
        assert_eq!(meta.seed, 42);
        assert_eq!(meta.arch, arch);
    }

    #[test]
    fn conv_roundtrip() {
        let arch = ArchDescriptor::Conv {
            channels: 1,
            height: 8,
            width: 8,
            conv1: 2,
            conv2: 3,
            embed_dim: 5,
            embed_activation: Activation::Relu,
        };
        let model = Classifier::init(&arch, 4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, 1, "").unwrap();
        let (loaded, _) = load(dir.path()).unwrap();
        assert!(loaded.params().bit_eq(model.params()));
    }

    #[test]
    fn corrupted_file_is_rejected() {
        let arch = ArchDescriptor::Identity { dim: 2 };
        let model = Classifier::init(&arch, 2, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, 0, "").unwrap();
        fs::write(dir.path().join("params.bin"), b"garbage!").unwrap();
        assert!(load(dir.path()).is_err());
    }
}
