//! `CLTACTS1` activation trace files.
//!
//! A trace file holds, for every sample, the pre-MLP (`x`) and post-MLP (`y`)
//! token matrices of every layer. All fields are little-endian.
//!
//! ```text
//! offset  size  field
//!      0     8  magic "CLTACTS1"
//!      8     4  version (u32, = 1)
//!     12     4  num_samples N (u32)
//!     16     2  num_layers L (u16)
//!     18     2  tokens_per_sample T (u16)
//!     20     4  hidden_dim D (u32)
//!     24     1  label_present (0 | 1)
//!     25     1  dtype (0 = f32)
//!     26     2  reserved, zero
//!     28        labels: N × u32, only when label_present = 1
//!               samples: N × (L blocks of x, then L blocks of y),
//!               each block T × D f32, token-major
//! ```
//!
//! Token 0 of every sample is the CLS token.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

pub const TRACE_MAGIC: [u8; 8] = *b"CLTACTS1";
pub const TRACE_VERSION: u32 = 1;
pub const TRACE_HEADER_LEN: u64 = 28;
pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceHeader {
    pub num_samples: u32,
    pub num_layers: u16,
    pub tokens: u16,
    pub hidden: u32,
    pub label_present: bool,
    pub dtype: u8,
}

impl TraceHeader {
    pub fn new(
        num_samples: usize,
        layers: usize,
        tokens: usize,
        hidden: usize,
        labels: bool,
    ) -> Result<Self> {
        let header = Self {
            num_samples: u32::try_from(num_samples)
                .map_err(|_| Error::InvalidArgument("too many samples".into()))?,
            num_layers: u16::try_from(layers)
                .map_err(|_| Error::InvalidArgument("too many layers".into()))?,
            tokens: u16::try_from(tokens)
                .map_err(|_| Error::InvalidArgument("too many tokens".into()))?,
            hidden: u32::try_from(hidden)
                .map_err(|_| Error::InvalidArgument("hidden dim too large".into()))?,
            label_present: labels,
            dtype: DTYPE_F32,
        };
        header.validate().map_err(Error::InvalidArgument)?;
        Ok(header)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.num_layers < 1 {
            return Err("num_layers must be >= 1".into());
        }
        if self.tokens < 2 {
            return Err("tokens_per_sample must be >= 2 (CLS + patches)".into());
        }
        if self.hidden < 1 {
            return Err("hidden_dim must be >= 1".into());
        }
        if self.dtype != DTYPE_F32 {
            return Err(format!("unsupported dtype code {}", self.dtype));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.num_layers as usize
    }

    pub fn tokens(&self) -> usize {
        self.tokens as usize
    }

    pub fn hidden(&self) -> usize {
        self.hidden as usize
    }

    pub fn len(&self) -> usize {
        self.num_samples as usize
    }

    pub fn is_empty(&self) -> bool {
        self.num_samples == 0
    }

    fn block_bytes(&self) -> u64 {
        self.tokens as u64 * self.hidden as u64 * 4
    }

    pub fn sample_bytes(&self) -> u64 {
        2 * self.num_layers as u64 * self.block_bytes()
    }

    fn labels_bytes(&self) -> u64 {
        if self.label_present {
            4 * self.num_samples as u64
        } else {
            0
        }
    }

    pub fn sample_offset(&self, index: usize) -> u64 {
        TRACE_HEADER_LEN + self.labels_bytes() + index as u64 * self.sample_bytes()
    }

    pub fn file_len(&self) -> u64 {
        self.sample_offset(self.len())
    }

    pub fn to_bytes(&self) -> [u8; TRACE_HEADER_LEN as usize] {
        let mut b = [0u8; TRACE_HEADER_LEN as usize];
        b[..8].copy_from_slice(&TRACE_MAGIC);
        b[8..12].copy_from_slice(&TRACE_VERSION.to_le_bytes());
        b[12..16].copy_from_slice(&self.num_samples.to_le_bytes());
        b[16..18].copy_from_slice(&self.num_layers.to_le_bytes());
        b[18..20].copy_from_slice(&self.tokens.to_le_bytes());
        b[20..24].copy_from_slice(&self.hidden.to_le_bytes());
        b[24] = self.label_present as u8;
        b[25] = self.dtype;
        b
    }

    pub fn from_bytes(b: &[u8]) -> std::result::Result<Self, String> {
        if b.len() < TRACE_HEADER_LEN as usize {
            return Err("truncated header".into());
        }
        if b[..8] != TRACE_MAGIC {
            return Err("bad magic (not a CLTACTS1 file)".into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(b[o..o + 2].try_into().unwrap());
        let version = u32_at(8);
        if version != TRACE_VERSION {
            return Err(format!(
                "version mismatch: file {version}, reader {TRACE_VERSION}"
            ));
        }
        if b[24] > 1 {
            return Err(format!("invalid label_present flag {}", b[24]));
        }
        let header = Self {
            num_samples: u32_at(12),
            num_layers: u16_at(16),
            tokens: u16_at(18),
            hidden: u32_at(20),
            label_present: b[24] == 1,
            dtype: b[25],
        };
        header.validate()?;
        Ok(header)
    }
}

/// One sample's per-layer activations.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace<T = f32> {
    /// `[L]` pre-MLP (LN2 output) token matrices, `T × D`.
    pub x: Vec<Matrix<T>>,
    /// `[L]` MLP outputs, `T × D`.
    pub y: Vec<Matrix<T>>,
    pub label: Option<u32>,
}

impl<T: Real> ActivationTrace<T> {
    pub fn layers(&self) -> usize {
        self.x.len()
    }

    pub fn cast<U: Real>(&self) -> ActivationTrace<U> {
        ActivationTrace {
            x: self.x.iter().map(Matrix::cast).collect(),
            y: self.y.iter().map(Matrix::cast).collect(),
            label: self.label,
        }
    }

    fn matches(&self, header: &TraceHeader) -> bool {
        let shape = (header.tokens(), header.hidden());
        self.x.len() == header.layers()
            && self.y.len() == header.layers()
            && self.x.iter().chain(&self.y).all(|m| m.shape() == shape)
    }
}

/// Writes a complete trace file.
pub fn write_trace_file(
    path: &Path,
    header: &TraceHeader,
    traces: &[ActivationTrace],
) -> Result<()> {
    header.validate().map_err(Error::InvalidArgument)?;
    if traces.len() != header.len() {
        return Err(Error::shape("trace count", header.len(), traces.len()));
    }
    for (i, t) in traces.iter().enumerate() {
        if !t.matches(header) {
            return Err(Error::shape(
                "trace dims",
                format!(
                    "L={} T={} D={}",
                    header.layers(),
                    header.tokens(),
                    header.hidden()
                ),
                format!("sample {i}"),
            ));
        }
        if header.label_present && t.label.is_none() {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has no label but the header declares labels"
            )));
        }
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&header.to_bytes()).map_err(io)?;
    if header.label_present {
        for t in traces {
            w.write_all(&t.label.unwrap_or(0).to_le_bytes())
                .map_err(io)?;
        }
    }
    for t in traces {
        for m in t.x.iter().chain(&t.y) {
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Writes the free-form `<file>.meta.json` provenance sidecar.
pub fn write_sidecar(trace_path: &Path, meta: &serde_json::Value) -> Result<()> {
    let path = sidecar_path(trace_path);
    let text = serde_json::to_string_pretty(meta).expect("json value serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn sidecar_path(trace_path: &Path) -> PathBuf {
    let mut s = trace_path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Random-access reader over a trace file. Reads are positional, so a shared
/// reference can be used from several threads.
#[derive(Debug)]
pub struct TraceReader {
    path: PathBuf,
    file: File,
    header: TraceHeader,
    labels: Option<Vec<u32>>,
}

fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    #[cfg(unix)]
    {
        use std::os::unix::fs::FileExt;
        file.read_exact_at(buf, offset)
    }
    #[cfg(windows)]
    {
        use std::os::windows::fs::FileExt;
        let mut done = 0;
        while done < buf.len() {
            let n = file.seek_read(&mut buf[done..], offset + done as u64)?;
            if n == 0 {
                return Err(std::io::ErrorKind::UnexpectedEof.into());
            }
            done += n;
        }
        Ok(())
    }
}

impl TraceReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut hb = [0u8; TRACE_HEADER_LEN as usize];
        if len < TRACE_HEADER_LEN {
            return Err(Error::format(path, "truncated header"));
        }
        read_exact_at(&file, &mut hb, 0).map_err(|e| Error::io(path, e))?;
        let header = TraceHeader::from_bytes(&hb).map_err(|r| Error::format(path, r))?;
        let expected = header.file_len();
        if len < expected {
            return Err(Error::format(
                path,
                format!("truncated payload: {len} bytes, header implies {expected}"),
            ));
        }
        if len > expected {
            return Err(Error::format(
                path,
                format!("trailing data: {len} bytes, header implies {expected}"),
            ));
        }
        let labels = if header.label_present {
            let mut lb = vec![0u8; header.len() * 4];
            read_exact_at(&file, &mut lb, TRACE_HEADER_LEN).map_err(|e| Error::io(path, e))?;
            Some(
                lb.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            None
        };
        Ok(Self {
            path: path.to_path_buf(),
            file,
            header,
            labels,
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.header.len()
    }

    pub fn is_empty(&self) -> bool {
        self.header.is_empty()
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Reads sample `index` by offset arithmetic.
    pub fn read_sample(&self, index: usize) -> Result<ActivationTrace> {
        if index >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "sample {index} out of range ({} samples)",
                self.len()
            )));
        }
        let h = &self.header;
        let mut buf = vec![0u8; h.sample_bytes() as usize];
        read_exact_at(&self.file, &mut buf, h.sample_offset(index))
            .map_err(|e| Error::io(&self.path, e))?;
        let values: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                &self.path,
                format!("non-finite value in sample {index} (element {pos})"),
            ));
        }
        let block = h.tokens() * h.hidden();
        let mut blocks = values
            .chunks_exact(block)
            .map(|c| Matrix::from_vec(h.tokens(), h.hidden(), c.to_vec()).expect("sized"));
        let x = blocks.by_ref().take(h.layers()).collect();
        let y = blocks.collect();
        Ok(ActivationTrace {
            x,
            y,
            label: self.labels.as_ref().map(|l| l[index]),
        })
    }

    /// Samples in file order.
    pub fn iter(&self) -> impl Iterator<Item = Result<ActivationTrace>> + '_ {
        (0..self.len()).map(move |i| self.read_sample(i))
    }

    pub fn read_many(&self, indices: &[usize]) -> Result<Vec<ActivationTrace>> {
        indices.iter().map(|&i| self.read_sample(i)).collect()
    }

    pub fn read_all(&self) -> Result<Vec<ActivationTrace>> {
        self.iter().collect()
    }
}

/// Opens a trace file, returning its header and a lazy sample iterator.
pub fn read_trace_file(path: &Path) -> Result<(TraceHeader, TraceIter)> {
    let reader = TraceReader::open(path)?;
    Ok((reader.header, TraceIter { reader, next: 0 }))
}

pub struct TraceIter {
    reader: TraceReader,
    next: usize,
}

impl TraceIter {
    pub fn reader(&self) -> &TraceReader {
        &self.reader
    }
}

impl Iterator for TraceIter {
    type Item = Result<ActivationTrace>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.reader.len() {
            return None;
        }
        let item = self.reader.read_sample(self.next);
        self.next += 1;
        Some(item)
    }
}

/// Deterministic shuffled train/validation partition of `0..n`.
///
/// The training side receives `round(n · fraction)` indices. Both sides are
/// returned sorted.
pub fn split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * fraction).round() as usize;
    let mut val = idx.split_off(n_train);
    idx.sort_unstable();
    val.sort_unstable();
    Ok((idx, val))
}

/// Full seeded permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}
