//! `RDCK` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RDCK"  u16 version
//! u32 image_size  u32 patch_size  u32 embed_dim  u32 depth  u32 heads
//! u32 in_channels  f64 mlp_ratio
//! u32 blob_count
//! blob_count × { u32 name_len, name (UTF-8), u32 rank, rank × u32 extent,
//!                product(extents) × f32 }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::VitConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RDCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Writes any named parameter collection; encoder checkpoints hold exactly the
/// encoder blobs, training-state files add prefixed extras.
pub fn write_checkpoint(path: &Path, config: &VitConfig, params: &ParamSet<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(&mut w, config, params).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_params(path: &Path) -> Result<(VitConfig, ParamSet<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    decode(&mut r, &path.display().to_string())
}

/// Reads a checkpoint and checks that its blobs form a complete encoder.
pub fn read_checkpoint(path: &Path) -> Result<super::VitEncoder<f32>> {
    let (cfg, params) = read_params(path)?;
    super::VitEncoder::from_params(cfg, params)
}

fn u32le(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn encode(w: &mut impl Write, c: &VitConfig, params: &ParamSet<f32>) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [c.image_size, c.patch_size, c.embed_dim, c.depth, c.heads, c.in_channels] {
        u32le(w, v)?;
    }
    w.write_all(&c.mlp_ratio.to_le_bytes())?;
    u32le(w, params.len())?;
    for (name, t) in params.iter() {
        u32le(w, name.len())?;
        w.write_all(name.as_bytes())?;
        u32le(w, t.rank())?;
        for &e in t.shape() {
            u32le(w, e)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Reader<'a, R> {
    r: &'a mut R,
    path: &'a str,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0; n];
        self.r
            .read_exact(&mut b)
            .map_err(|_| Error::format(self.path, "truncated checkpoint"))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

fn decode(r: &mut impl Read, path: &str) -> Result<(VitConfig, ParamSet<f32>)> {
    let mut rd = Reader { r, path };
    if rd.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic, expected RDCK"));
    }
    let ver = u16::from_le_bytes(rd.bytes(2)?.try_into().unwrap());
    if ver != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {ver}")));
    }
    let mut f = [0usize; 6];
    for v in &mut f {
        *v = rd.u32()?;
    }
    let mlp_ratio = f64::from_le_bytes(rd.bytes(8)?.try_into().unwrap());
    let config = VitConfig {
        image_size: f[0],
        patch_size: f[1],
        embed_dim: f[2],
        depth: f[3],
        heads: f[4],
        in_channels: f[5],
        mlp_ratio,
    };
    let count = rd.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = rd.u32()?;
        let name = String::from_utf8(rd.bytes(len)?).map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let rank = rd.u32()?;
        let shape = (0..rank).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = rd.bytes(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    let mut rest = Vec::new();
    rd.r.read_to_end(&mut rest)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if !rest.is_empty() {
        return Err(Error::format(path, "trailing bytes after last blob"));
    }
    Ok((config, params))
}
