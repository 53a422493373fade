//! Binary checkpoint format.
//!
//! ```text
//! "TSRC"                      magic
//! u32 LE                      format version (1)
//! u8                          architecture tag: 0 = ViT, 1 = CNN
//! u32 LE × n                  architecture fields
//!     ViT: image_side, channels, patch_size, embed_dim, heads, depth, mlp_ratio, classes
//!     CNN: image_side, channels, conv1, conv2, classes
//! per tensor, in ModelParams::tensors() order:
//!     u8                      rank
//!     u32 LE × rank           dims
//!     f32 LE × prod(dims)     row-major payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Arch, CnnArch, ModelParams, VitArch};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TSRC";
pub const FORMAT_VERSION: u32 = 1;

fn arch_fields(arch: &Arch) -> (u8, Vec<usize>) {
    match arch {
        Arch::Vit(a) => (
            0,
            vec![a.image_side, a.channels, a.patch_size, a.embed_dim, a.heads, a.depth, a.mlp_ratio, a.classes],
        ),
        Arch::Cnn(a) => (1, vec![a.image_side, a.channels, a.conv1, a.conv2, a.classes]),
    }
}

pub fn write_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let (tag, fields) = arch_fields(&params.arch());
    out.push(tag);
    for f in fields {
        out.extend_from_slice(&(f as u32).to_le_bytes());
    }
    for t in params.tensors() {
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(field, format!("truncated at byte {}", self.pos))),
        }
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint. When `expected` is given, the stored architecture
/// must match it exactly.
pub fn read_checkpoint(bytes: &[u8], expected: Option<Arch>) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "expected \"TSRC\""));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let tag = r.u8("arch_tag")?;
    let arch = match tag {
        0 => {
            let mut f = [0usize; 8];
            for (v, name) in f.iter_mut().zip([
                "image_side", "channels", "patch_size", "embed_dim", "heads", "depth", "mlp_ratio", "classes",
            ]) {
                *v = r.u32(name)? as usize;
            }
            Arch::Vit(VitArch {
                image_side: f[0],
                channels: f[1],
                patch_size: f[2],
                embed_dim: f[3],
                heads: f[4],
                depth: f[5],
                mlp_ratio: f[6],
                classes: f[7],
            })
        }
        1 => {
            let mut f = [0usize; 5];
            for (v, name) in f.iter_mut().zip(["image_side", "channels", "conv1", "conv2", "classes"]) {
                *v = r.u32(name)? as usize;
            }
            Arch::Cnn(CnnArch {
                image_side: f[0],
                channels: f[1],
                conv1: f[2],
                conv2: f[3],
                classes: f[4],
            })
        }
        other => return Err(Error::format("arch_tag", format!("unknown tag {other}"))),
    };
    if let Some(want) = expected {
        let (want_tag, want_fields) = arch_fields(&want);
        let (_, got_fields) = arch_fields(&arch);
        if want_tag != tag {
            return Err(Error::format("arch_tag", format!("expected {want_tag}, found {tag}")));
        }
        if want_fields != got_fields {
            return Err(Error::shape(&want_fields, &got_fields));
        }
    }
    arch.validate().map_err(|e| Error::format("arch", e.to_string()))?;

    let mut params = ModelParams::zeros(arch)?;
    for (i, t) in params.tensors_mut().into_iter().enumerate() {
        let field = format!("tensor[{i}]");
        let rank = r.u8(&field)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&field)? as usize);
        }
        if dims != t.shape() {
            return Err(Error::format(field, format!("shape {dims:?}, expected {:?}", t.shape())));
        }
        let payload = r.take(4 * t.len(), &field)?;
        for (v, chunk) in t.as_mut_slice().iter_mut().zip(payload.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(params)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path, expected: Option<Arch>) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(&bytes, expected)
}

/// Rounds every weight to 32-bit, matching what a save/load cycle produces.
pub fn quantize(params: &ModelParams) -> ModelParams {
    let mut out = params.clone();
    for t in out.tensors_mut() {
        let q: Tensor = t.map(|v| v as f32 as f64);
        *t = q;
    }
    out
}
