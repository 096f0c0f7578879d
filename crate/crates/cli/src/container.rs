//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//! `magic[4] version:u32 ndim:u32 dims:u32*ndim dtype:u32 payload meta_len:u32 meta`.
//! The payload is row-major `f32`; `meta` is a JSON object with the frame
//! spec, speaker order and model id. `DUQS` holds Monte Carlo samples
//! `[n, frame, speaker]`, `DUQT` any other tensor.

use std::io::{Read, Write};
use std::path::Path;

use diaruq::{Error, FrameSpec, SampleTensor};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Tensor,
    Samples,
}

impl Kind {
    fn magic(self) -> &'static [u8; 4] {
        match self {
            Kind::Tensor => b"DUQT",
            Kind::Samples => b"DUQS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metadata {
    pub frame_spec: Option<FrameSpec>,
    pub speaker_order: Vec<String>,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub data: ArrayD<f32>,
    pub meta: Metadata,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Container {
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let dims = self.data.shape();
        let mut buf = Vec::with_capacity(16 + 4 * dims.len() + 4 * self.data.len());
        buf.extend_from_slice(self.kind.magic());
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for v in self.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let meta = serde_json::to_vec(&self.meta).map_err(std::io::Error::other)?;
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, Error> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let mut cur = Cursor { bytes, pos: 0 };
        let kind = match cur.take(4)? {
            b"DUQT" => Kind::Tensor,
            b"DUQS" => Kind::Samples,
            m => return Err(format_err(format!("bad magic {:?}", String::from_utf8_lossy(m)))),
        };
        let version = cur.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported container version {version}")));
        }
        let ndim = cur.u32()? as usize;
        if !(1..=4).contains(&ndim) {
            return Err(format_err(format!("container has {ndim} dimensions, expected 1 to 4")));
        }
        let dims = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let dtype = cur.u32()?;
        if dtype != DTYPE_F32 {
            return Err(format_err(format!("unsupported dtype tag {dtype}")));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| format_err("dimensions overflow"))?;
        let payload = cur.take(n * 4)?;
        let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let meta_len = cur.u32()? as usize;
        let meta: Metadata = serde_json::from_slice(cur.take(meta_len)?)
            .map_err(|e| format_err(format!("metadata: {e}")))?;
        if cur.pos != bytes.len() {
            return Err(format_err("trailing bytes after metadata"));
        }
        let data = ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| format_err(e.to_string()))?;
        Ok(Self { kind, data, meta })
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(CliError::io(path))?;
        Self::from_bytes(&bytes).map_err(CliError::input(path))
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let file = std::fs::File::create(path).map_err(CliError::io(path))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(CliError::io(path))
    }

    pub fn from_samples(s: &SampleTensor, frame_spec: Option<FrameSpec>, speaker_order: Vec<String>) -> Self {
        Self {
            kind: Kind::Samples,
            data: s.probs.mapv(|v| v as f32).into_dyn(),
            meta: Metadata {
                frame_spec,
                speaker_order,
                model_id: s.model_id.clone(),
            },
        }
    }

    pub fn into_samples(self) -> Result<SampleTensor, Error> {
        if self.kind != Kind::Samples {
            return Err(format_err("expected a DUQS sample container"));
        }
        let probs = self
            .data
            .mapv(f64::from)
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| format_err("sample containers must be 3-D [n, frame, speaker]"))?;
        if !self.meta.speaker_order.is_empty() && self.meta.speaker_order.len() != probs.shape()[2] {
            return Err(format_err("speaker order does not match the speaker axis"));
        }
        SampleTensor::new(probs, self.meta.model_id)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, Error> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Long-format CSV `n,frame,speaker,prob`, speakers by id.
pub fn write_samples_csv(s: &SampleTensor, speakers: &[String], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "n,frame,speaker,prob")?;
    for ((n, l, k), p) in s.probs.indexed_iter() {
        writeln!(w, "{n},{l},{},{p}", speakers[k])?;
    }
    Ok(())
}

/// Reads the CSV written by [`write_samples_csv`]; speakers keep their order
/// of first appearance.
pub fn read_samples_csv(r: impl Read, model_id: &str) -> Result<(SampleTensor, Vec<String>), Error> {
    let mut rows = Vec::new();
    let mut speakers: Vec<String> = Vec::new();
    let (mut n_max, mut l_max) = (0, 0);
    let mut text = String::new();
    std::io::BufReader::new(r).read_to_string(&mut text)?;
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse { line: i + 1, message: m.into() };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad("expected n,frame,speaker,prob"));
        }
        let n: usize = f[0].parse().map_err(|_| bad("bad draw index"))?;
        let l: usize = f[1].parse().map_err(|_| bad("bad frame index"))?;
        let p: f64 = f[3].parse().map_err(|_| bad("bad probability"))?;
        let k = match speakers.iter().position(|s| s == f[2]) {
            Some(k) => k,
            None => {
                speakers.push(f[2].to_string());
                speakers.len() - 1
            }
        };
        n_max = n_max.max(n + 1);
        l_max = l_max.max(l + 1);
        rows.push((n, l, k, p));
    }
    let mut probs = ndarray::Array3::from_elem((n_max, l_max, speakers.len()), f64::NAN);
    for (n, l, k, p) in rows {
        probs[[n, l, k]] = p;
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(Error::Format("sample CSV does not cover every (n, frame, speaker)".into()));
    }
    Ok((SampleTensor::new(probs, model_id)?, speakers))
}
