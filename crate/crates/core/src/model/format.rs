//! Model file: `RRVT`, u32 version, eight u32 config fields (`head_hidden`
//! 0 for none), u32 tensor count, then per tensor a u32-length UTF-8 name,
//! u32 rank, u32 dims and little-endian f32 values. All integers are
//! little-endian.

use ndarray::ArrayViewD;

use super::{ModelConfig, ModelError, ModelParams};

pub const MAGIC: &[u8; 4] = b"RRVT";
pub const VERSION: u32 = 1;

pub fn serialize(params: &ModelParams, cfg: &ModelConfig) -> Vec<u8> {
    let tensors = params.tensors();
    let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(64 + total * 4 + tensors.len() * 48);
    out.extend_from_slice(MAGIC);
    let put = |v: usize, out: &mut Vec<u8>| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(VERSION as usize, &mut out);
    for v in [
        cfg.image_size,
        cfg.patch_size,
        cfg.in_channels,
        cfg.embed_dim,
        cfg.depth,
        cfg.heads,
        cfg.mlp_ratio,
        cfg.head_hidden.unwrap_or(0),
    ] {
        put(v, &mut out);
    }
    put(tensors.len(), &mut out);
    for (name, t) in &tensors {
        put(name.len(), &mut out);
        out.extend_from_slice(name.as_bytes());
        put(t.ndim(), &mut out);
        for &d in t.shape() {
            put(d, &mut out);
        }
        write_values(t, &mut out);
    }
    out
}

fn write_values(t: &ArrayViewD<f64>, out: &mut Vec<u8>) {
    for &v in t.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                ModelError::Format(format!("truncated file while reading {what} at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, ModelError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<(ModelParams, ModelConfig), ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(ModelError::Format("bad magic, not a model file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 8];
    for (i, v) in f.iter_mut().enumerate() {
        *v = r.u32(&format!("config field {i}"))?;
    }
    let cfg = ModelConfig {
        image_size: f[0],
        patch_size: f[1],
        in_channels: f[2],
        embed_dim: f[3],
        depth: f[4],
        heads: f[5],
        mlp_ratio: f[6],
        head_hidden: (f[7] != 0).then_some(f[7]),
    };
    cfg.validate()
        .map_err(|e| ModelError::Format(format!("invalid config: {e}")))?;

    let expected = cfg.tensor_shapes();
    // refuse before allocating anything the file cannot possibly back
    let needed: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>() * 4).sum();
    if needed > bytes.len() {
        return Err(ModelError::Format(format!(
            "truncated file: config needs at least {needed} bytes of tensor data"
        )));
    }
    let count = r.u32("tensor count")?;
    if count != expected.len() {
        return Err(ModelError::Format(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }

    let mut params = ModelParams::zeros(&cfg);
    for ((name, shape), (_, mut dest)) in expected.iter().zip(params.tensors_mut()) {
        let len = r.u32("tensor name length")?;
        let raw = r.take(len, "tensor name")?;
        let found = std::str::from_utf8(raw)
            .map_err(|_| ModelError::Format("tensor name is not UTF-8".into()))?;
        if found != name {
            return Err(ModelError::Format(format!(
                "expected tensor {name}, found {found}"
            )));
        }
        let rank = r.u32("tensor rank")?;
        if rank != shape.len() {
            return Err(ModelError::Format(format!(
                "tensor {name}: expected rank {}, found {rank}",
                shape.len()
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("tensor shape")?);
        }
        if &dims != shape {
            return Err(ModelError::Format(format!(
                "tensor {name}: expected shape {shape:?}, found {dims:?}"
            )));
        }
        let data = r.take(dest.len() * 4, "tensor data")?;
        for (v, chunk) in dest.iter_mut().zip(data.chunks_exact(4)) {
            let x = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !x.is_finite() {
                return Err(ModelError::Format(format!("tensor {name} has a non-finite value")));
            }
            *v = x as f64;
        }
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((params, cfg))
}
