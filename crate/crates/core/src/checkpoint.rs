//! `CLTC1` checkpoint files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//!      0     8  magic "CLTC1\0\0\0"
//!      8     4  version (u32, = 1)
//!     12     4  layers L (u32)
//!     16     4  hidden D (u32)
//!     20     4  features m (u32)
//!     24     1  sparsifier kind (0 jump_relu, 1 relu_top_k, 2 abs_top_k, 3 identity)
//!     25     1  flags (bit 0: diagonal_only)
//!     26     2  reserved, zero
//!     28     4  k (u32)
//!     32     4  bandwidth ε (f32)
//!     36        encoders   L × [D][m] f32
//!               biases     L × [m]    f32
//!               thresholds L × [m]    f32
//!               decoders   L(L+1)/2 × [m][D] f32, source-major (i outer, j inner)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::clt::{triangle_len, CltParams};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::sparsify::{SparsifierKind, SparsifierSpec};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CLTC1\0\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_HEADER_LEN: usize = 36;

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes a checkpoint into memory.
pub fn encode_checkpoint(params: &CltParams) -> Vec<u8> {
    let (l, d, m) = (params.layers(), params.hidden(), params.features());
    let floats = l * d * m + 2 * l * m + triangle_len(l) * m * d;
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 4 * floats);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    for v in [CHECKPOINT_VERSION, l as u32, d as u32, m as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(params.sparsifier.kind.code());
    out.push(params.diagonal_only() as u8);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(params.sparsifier.k as u32).to_le_bytes());
    out.extend_from_slice(&(params.sparsifier.bandwidth as f32).to_le_bytes());
    for e in &params.encoders {
        put_f32s(&mut out, e.as_slice());
    }
    for b in &params.enc_biases {
        put_f32s(&mut out, b);
    }
    for t in &params.thresholds {
        put_f32s(&mut out, t);
    }
    for w in &params.decoders {
        put_f32s(&mut out, w.as_slice());
    }
    out
}

pub fn write_checkpoint(path: &Path, params: &CltParams) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_checkpoint(params))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

/// Parses a checkpoint; `origin` is used in error messages only.
pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<CltParams> {
    let bad = |reason: &str| Error::format(origin, reason.to_string());
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(8).ok_or_else(|| bad("truncated header"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic (not a CLTC1 checkpoint)"));
    }
    let version = c.u32().ok_or_else(|| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = c.u32().ok_or_else(|| bad("truncated header"))? as usize;
    }
    let [l, d, m] = dims;
    let flags = c.take(4).ok_or_else(|| bad("truncated header"))?;
    let kind = SparsifierKind::from_code(flags[0])
        .ok_or_else(|| bad(&format!("unknown sparsifier code {}", flags[0])))?;
    let diagonal_only = flags[1] & 1 == 1;
    let k = c.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let bandwidth = c.f32s(1).ok_or_else(|| bad("truncated header"))?[0] as f64;
    if l == 0 || d == 0 || m == 0 {
        return Err(bad("zero dimension in header"));
    }

    let expected = CHECKPOINT_HEADER_LEN + 4 * (l * d * m + 2 * l * m + triangle_len(l) * m * d);
    if bytes.len() != expected {
        return Err(bad(&format!(
            "payload size {} does not match header (expected {expected})",
            bytes.len()
        )));
    }
    let truncated = || bad("truncated payload");
    let encoders = (0..l)
        .map(|_| Matrix::from_vec(d, m, c.f32s(d * m).ok_or_else(truncated)?))
        .collect::<Result<Vec<_>>>()?;
    let enc_biases = (0..l)
        .map(|_| c.f32s(m).ok_or_else(truncated))
        .collect::<Result<Vec<_>>>()?;
    let thresholds = (0..l)
        .map(|_| c.f32s(m).ok_or_else(truncated))
        .collect::<Result<Vec<_>>>()?;
    let decoders = (0..triangle_len(l))
        .map(|_| Matrix::from_vec(m, d, c.f32s(m * d).ok_or_else(truncated)?))
        .collect::<Result<Vec<_>>>()?;

    let sparsifier = SparsifierSpec { kind, k, bandwidth };
    CltParams::from_parts(
        l,
        d,
        m,
        sparsifier,
        diagonal_only,
        encoders,
        enc_biases,
        thresholds,
        decoders,
    )
    .map_err(|e| bad(&e.to_string()))
}

pub fn read_checkpoint(path: &Path) -> Result<CltParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
