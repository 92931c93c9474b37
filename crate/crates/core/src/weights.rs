//! Binary weight files.
//!
//! All integers are little-endian `u32`, all floats little-endian `f32`:
//!
//! ```text
//! "ACRN" | version | depth | variant (0 classic, 1 accumulated) | classes
//! parameters in registry order          each: rank | dims[rank] | payload
//! batch norm running mean, running var  per layer, in registry order
//! input stats flag (0 or 1)             then mean[3] and std[3] if 1
//! ```

use std::fs;
use std::path::Path;

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::model::{build_model, Model, ModelSpec, Variant};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ACRN";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_weights(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        model.spec.depth as u32,
        model.spec.variant.code(),
        model.spec.num_classes as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in model.parameters() {
        write_tensor(&mut out, &p.value);
    }
    for bn in model.batch_norms() {
        write_tensor(&mut out, &bn.running_mean);
        write_tensor(&mut out, &bn.running_var);
    }
    match &model.input_stats {
        None => out.extend_from_slice(&0u32.to_le_bytes()),
        Some(stats) => {
            out.extend_from_slice(&1u32.to_le_bytes());
            write_tensor(&mut out, &Tensor::new(&[3], stats.mean.to_vec()).unwrap());
            write_tensor(&mut out, &Tensor::new(&[3], stats.std.to_vec()).unwrap());
        }
    }
    out
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        };
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    /// Reads a tensor and checks it against the shape the model expects.
    fn tensor(&mut self, expected: &[usize], what: &str) -> Result<Tensor<f32>> {
        let rank = self.u32(what)? as usize;
        if rank != expected.len() {
            return Err(Error::Format(format!(
                "{what}: rank {rank} does not match expected shape {expected:?}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(what)? as usize);
        }
        if shape != expected {
            return Err(Error::Format(format!(
                "{what}: shape {shape:?}, expected {expected:?}"
            )));
        }
        let len: usize = shape.iter().product();
        let payload = self.take(len * 4, what)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data)
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes, not a weight file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let depth = r.u32("depth")? as usize;
    let variant = r.u32("variant")?;
    let variant = Variant::from_code(variant)
        .ok_or_else(|| Error::Format(format!("unknown variant code {variant}")))?;
    let classes = r.u32("class count")? as usize;
    let mut spec =
        ModelSpec::new(depth, variant).map_err(|e| Error::Format(format!("header: {e}")))?;
    if classes == 0 {
        return Err(Error::Format("header: class count is zero".into()));
    }
    spec.num_classes = classes;

    let mut model: Model<f32> = build_model(spec, 0);
    for (i, p) in model.parameters_mut().into_iter().enumerate() {
        let shape = p.value.shape().to_vec();
        p.value = r.tensor(&shape, &format!("parameter {i}"))?;
    }
    for (i, bn) in model.batch_norms_mut().into_iter().enumerate() {
        let shape = bn.running_mean.shape().to_vec();
        bn.running_mean = r.tensor(&shape, &format!("running mean {i}"))?;
        bn.running_var = r.tensor(&shape, &format!("running var {i}"))?;
    }
    model.input_stats = match r.u32("input stats flag")? {
        0 => None,
        1 => {
            let mean = r.tensor(&[3], "input mean")?;
            let std = r.tensor(&[3], "input std")?;
            Some(ChannelStats {
                mean: mean.data().try_into().unwrap(),
                std: std.data().try_into().unwrap(),
            })
        }
        other => return Err(Error::Format(format!("bad input stats flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save_weights(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
