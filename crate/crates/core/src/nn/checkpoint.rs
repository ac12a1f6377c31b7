//! Checkpoint files.
//!
//! Little-endian layout:
//!
//! | field | type |
//! |-------|------|
//! | magic `HFTC` | `[u8; 4]` |
//! | format version (1) | `u32` |
//! | architecture tag: 0 = MLP, 1 = LSTM | `u8` |
//! | flags: bit 0 normalized inputs, bit 1 MLP output activation | `u8` |
//! | reserved | `u16` |
//! | seed | `u64` |
//! | epoch (0-based) | `u32` |
//! | MLP negative slope (0 for LSTM) | `f64` |
//! | shape length `k`, then `k` dims | `u32`, `[u32; k]` |
//! | block count | `u32` |
//! | per block: name length, UTF-8 name, rank `r`, `r` dims, values | `u16`, bytes, `u32`, `[u32; r]`, `[f32; prod(dims)]` |
//!
//! The shape is the layer structure for an MLP and
//! `[seq_len, input_dim, hidden, layers, classes]` for an LSTM.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Architecture, LstmConfig, MlpConfig, Model};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HFTC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub epoch: u32,
    /// Whether the model was trained on per-sample normalized windows.
    pub normalize: bool,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        let io = |e| Error::io("<checkpoint>", e);
        let (tag, slope, out_act, shape) = match &self.model.arch {
            Architecture::Mlp(c) => (0u8, c.negative_slope, c.output_activation, c.structure.clone()),
            Architecture::Lstm(c) => (1u8, 0.0, false, vec![c.seq_len, c.input_dim, c.hidden, c.layers, c.classes]),
        };
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        w.write_u8(tag).map_err(io)?;
        w.write_u8(self.normalize as u8 | (out_act as u8) << 1).map_err(io)?;
        w.write_u16::<LittleEndian>(0).map_err(io)?;
        w.write_u64::<LittleEndian>(self.seed).map_err(io)?;
        w.write_u32::<LittleEndian>(self.epoch).map_err(io)?;
        w.write_f64::<LittleEndian>(slope).map_err(io)?;
        w.write_u32::<LittleEndian>(shape.len() as u32).map_err(io)?;
        for d in &shape {
            w.write_u32::<LittleEndian>(*d as u32).map_err(io)?;
        }
        let layout = self.model.arch.layout();
        w.write_u32::<LittleEndian>(layout.len() as u32).map_err(io)?;
        for block in &layout {
            w.write_u16::<LittleEndian>(block.name.len() as u16).map_err(io)?;
            w.write_all(block.name.as_bytes()).map_err(io)?;
            w.write_u32::<LittleEndian>(block.shape.len() as u32).map_err(io)?;
            for d in &block.shape {
                w.write_u32::<LittleEndian>(*d as u32).map_err(io)?;
            }
            for &v in &self.model.params[block.range()] {
                w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut r = BufReader::new(reader);
        let io = |e| Error::io("<checkpoint>", e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let tag = r.read_u8().map_err(io)?;
        let flags = r.read_u8().map_err(io)?;
        r.read_u16::<LittleEndian>().map_err(io)?;
        let seed = r.read_u64::<LittleEndian>().map_err(io)?;
        let epoch = r.read_u32::<LittleEndian>().map_err(io)?;
        let slope = r.read_f64::<LittleEndian>().map_err(io)?;
        let k = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if k > 64 {
            return Err(Error::Format(format!("implausible shape length {k}")));
        }
        let mut shape = Vec::with_capacity(k);
        for _ in 0..k {
            shape.push(r.read_u32::<LittleEndian>().map_err(io)? as usize);
        }
        let arch = match tag {
            0 => Architecture::Mlp(MlpConfig {
                structure: shape,
                negative_slope: slope,
                output_activation: flags & 2 != 0,
            }),
            1 if shape.len() == 5 => Architecture::Lstm(LstmConfig {
                seq_len: shape[0],
                input_dim: shape[1],
                hidden: shape[2],
                layers: shape[3],
                classes: shape[4],
            }),
            _ => return Err(Error::Format(format!("unknown architecture tag {tag} with shape {shape:?}"))),
        };
        arch.validate()?;
        let layout = arch.layout();
        let n_blocks = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if n_blocks != layout.len() {
            return Err(Error::Format(format!("expected {} parameter blocks, found {n_blocks}", layout.len())));
        }
        let mut params = Vec::with_capacity(arch.num_params());
        for block in &layout {
            let len = r.read_u16::<LittleEndian>().map_err(io)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.read_u32::<LittleEndian>().map_err(io)? as usize);
            }
            if name != block.name.as_bytes() || dims != block.shape {
                return Err(Error::Format(format!(
                    "block `{}` {:?} does not match expected `{}` {:?}",
                    String::from_utf8_lossy(&name),
                    dims,
                    block.name,
                    block.shape
                )));
            }
            let mut vals = vec![0f32; block.len()];
            r.read_f32_into::<LittleEndian>(&mut vals).map_err(io)?;
            params.extend(vals.iter().map(|&v| v as f64));
        }
        Ok(Checkpoint {
            model: Model::with_params(arch, params)?,
            seed,
            epoch,
            normalize: flags & 1 != 0,
        })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(file)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file)
    }
}
