//! Little-endian binary checkpoint container.
//!
//! ```text
//! magic        7 bytes  "PNMINI1"
//! layer_count  u32
//! per layer:
//!   kind         u8     0 conv2d, 1 maxpool2d, 2 dense, 3 batchnorm, 4 relu, 5 softmax
//!   hyper_count  u32
//!   hyper        u32 x hyper_count   (f32 hyperparameters stored as bit patterns)
//!   tensor_count u32
//!   per tensor:
//!     rank u32, dims u32 x rank, data f32 x prod(dims)
//! ```
//!
//! Anything a caller writes after the layer records (for example a model's
//! own configuration block) is left untouched by [`read_layers`].

use std::io::{Read, Write};

use super::layers::{Layer, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"PNMINI1";

const MAX_ELEMENTS: usize = 1 << 28;

pub fn write_layers<'a, W: Write>(w: &mut W, layers: impl IntoIterator<Item = &'a Layer>) -> Result<()> {
    let layers: Vec<&Layer> = layers.into_iter().collect();
    w.write_all(MAGIC)?;
    write_u32(w, layers.len() as u32)?;
    for layer in layers {
        w.write_all(&[layer.kind().tag()])?;
        let hyper = layer.hyperparameters();
        write_u32(w, hyper.len() as u32)?;
        for h in hyper {
            write_u32(w, h)?;
        }
        let tensors = layer.tensors();
        write_u32(w, tensors.len() as u32)?;
        for t in tensors {
            write_tensor(w, t)?;
        }
    }
    Ok(())
}

pub fn read_layers<R: Read>(r: &mut R) -> Result<Vec<Layer>> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let count = read_u32(r)? as usize;
    let mut layers = Vec::with_capacity(count.min(4096));
    for index in 0..count {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(truncated)?;
        let kind = LayerKind::from_tag(tag[0])
            .ok_or_else(|| Error::Checkpoint(format!("layer {index}: unknown kind tag {}", tag[0])))?;
        let hyper_count = read_u32(r)? as usize;
        if hyper_count > 64 {
            return Err(Error::Checkpoint(format!(
                "layer {index}: {hyper_count} hyperparameters"
            )));
        }
        let hyper = (0..hyper_count).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
        let tensor_count = read_u32(r)? as usize;
        if tensor_count > 16 {
            return Err(Error::Checkpoint(format!("layer {index}: {tensor_count} tensors")));
        }
        let tensors = (0..tensor_count).map(|_| read_tensor(r)).collect::<Result<Vec<_>>>()?;
        let layer =
            Layer::from_parts(kind, &hyper, tensors).map_err(|e| Error::Checkpoint(format!("layer {index}: {e}")))?;
        layers.push(layer);
    }
    Ok(layers)
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_u32(w, t.rank() as u32)?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Checkpoint(format!("tensor rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::Checkpoint(format!("tensor shape {shape:?} out of range")))?;
    let mut buf = vec![0u8; len * 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("unexpected end of file".into())
    } else {
        Error::Io(e)
    }
}
