//! On-disk formats: corpora, normalization statistics and checkpoints.
//!
//! Binary files are little-endian and start with an 8-byte magic, a `u32`
//! version and the `u32` marker `0x01020304` so a byte-swapped file is
//! rejected rather than misread. Checkpoints end with the SHA-256 of every
//! preceding byte.

use std::path::Path;

use calm_core::nn::ParamStore;
use calm_core::source::{LatentSequence, NormStats};
use calm_core::tensor::{DType, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CORPUS_MAGIC: &[u8; 8] = b"CALMCORP";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CALMCKPT";
pub const VERSION: u32 = 1;
pub const ENDIAN_MARKER: u32 = 0x0102_0304;

#[derive(Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    pub fn preamble(&mut self, magic: &[u8; 8]) {
        self.bytes(magic);
        self.u32(VERSION);
        self.u32(ENDIAN_MARKER);
    }
}

pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8], path: &'a Path) -> Self {
        ByteReader { data, pos: 0, path }
    }

    fn fail(&self, why: &str) -> CliError {
        CliError::format(self.path, format!("{why} at byte {}", self.pos))
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.data.len() - self.pos < n {
            return Err(self.fail("unexpected end of file"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    pub fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    pub fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    pub fn len(&mut self, limit: u64) -> Result<usize, CliError> {
        let n = self.u64()?;
        if n > limit {
            return Err(self.fail("implausible length"));
        }
        Ok(n as usize)
    }
    pub fn preamble(&mut self, magic: &[u8; 8]) -> Result<(), CliError> {
        if self.take(8)? != magic {
            return Err(self.fail("bad magic"));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(self.fail(&format!("unsupported version {v}")));
        }
        if self.u32()? != ENDIAN_MARKER {
            return Err(self.fail("endianness marker mismatch"));
        }
        Ok(())
    }
    pub fn finished(&self) -> bool {
        self.pos == self.data.len()
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Corpus layout: preamble, `u32` channels, `f64` frame rate, `u64` count,
/// then per sequence a `u64` frame count and its `f64` values frame-major.
pub fn encode_corpus(channels: usize, frame_rate: f64, seqs: &[LatentSequence]) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.preamble(CORPUS_MAGIC);
    w.u32(channels as u32);
    w.f64(frame_rate);
    w.u64(seqs.len() as u64);
    for s in seqs {
        w.u64(s.len() as u64);
        for &v in &s.frames {
            w.f64(v);
        }
    }
    w.buf
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub channels: usize,
    pub frame_rate: f64,
    pub sequences: Vec<LatentSequence>,
}

pub fn decode_corpus(data: &[u8], path: &Path) -> Result<Corpus, CliError> {
    let mut r = ByteReader::new(data, path);
    r.preamble(CORPUS_MAGIC)?;
    let channels = r.u32()? as usize;
    let frame_rate = r.f64()?;
    if channels == 0 {
        return Err(CliError::format(path, "corpus declares zero channels"));
    }
    let count = r.len(data.len() as u64)?;
    let mut sequences = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.len((data.len() / 8) as u64)?;
        let raw = r.take(len * channels * 8)?;
        let frames = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        sequences.push(
            LatentSequence::new(frames, channels, frame_rate)
                .map_err(|e| CliError::format(path, e.to_string()))?,
        );
    }
    if !r.finished() {
        return Err(CliError::format(path, "trailing bytes after corpus"));
    }
    Ok(Corpus {
        channels,
        frame_rate,
        sequences,
    })
}

pub fn save_corpus(
    path: &Path,
    channels: usize,
    frame_rate: f64,
    seqs: &[LatentSequence],
) -> Result<(), CliError> {
    write_file(path, &encode_corpus(channels, frame_rate, seqs))
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    decode_corpus(&read_file(path)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub channels: usize,
    pub sequences: usize,
    pub frames: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub variance: Vec<f64>,
}

impl StatsFile {
    pub fn new(stats: &NormStats, seqs: &[LatentSequence]) -> Self {
        StatsFile {
            channels: stats.channels(),
            sequences: seqs.len(),
            frames: seqs.iter().map(LatentSequence::len).sum(),
            mean: stats.mean.clone(),
            std: stats.std.clone(),
            variance: stats.std.iter().map(|s| s * s).collect(),
        }
    }

    pub fn norm(&self) -> NormStats {
        NormStats {
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("stats serialize");
        write_file(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
    }
}

/// A named tensor stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    raw: Vec<u8>,
}

impl Record {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let mut raw = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            match T::DTYPE {
                DType::F32 => raw.extend_from_slice(&(v.to_f32().expect("f32")).to_le_bytes()),
                DType::F64 => raw.extend_from_slice(&(v.to_f64().expect("f64")).to_le_bytes()),
            }
        }
        Record {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            raw,
        }
    }

    /// Values at precision `T`; exact when the stored dtype matches.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = match self.dtype {
            DType::F32 => self
                .raw
                .chunks_exact(4)
                .map(|c| {
                    T::from_f32(f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .expect("finite cast")
                })
                .collect(),
            DType::F64 => self
                .raw
                .chunks_exact(8)
                .map(|c| {
                    T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .expect("finite cast")
                })
                .collect(),
        };
        Tensor::from_vec(&self.shape, data)
    }
}

/// Checkpoint layout after the preamble: `u64` header length, JSON header,
/// `u64` record count, records (`u32` name length, name, `u8` dtype, `u32`
/// rank, `u64` dims, raw values), and a 32-byte SHA-256 trailer.
pub fn encode_checkpoint<H: Serialize>(header: &H, records: &[Record]) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.preamble(CHECKPOINT_MAGIC);
    let h = serde_json::to_vec(header).expect("header serializes");
    w.u64(h.len() as u64);
    w.bytes(&h);
    w.u64(records.len() as u64);
    for r in records {
        w.u32(r.name.len() as u32);
        w.bytes(r.name.as_bytes());
        w.u8(r.dtype.code());
        w.u32(r.shape.len() as u32);
        for &d in &r.shape {
            w.u64(d as u64);
        }
        w.bytes(&r.raw);
    }
    let digest = Sha256::digest(&w.buf);
    w.bytes(&digest);
    w.buf
}

pub fn decode_checkpoint<H: for<'de> Deserialize<'de>>(
    data: &[u8],
    path: &Path,
) -> Result<(H, Vec<Record>), CliError> {
    if data.len() < 32 {
        return Err(CliError::format(path, "checkpoint too short"));
    }
    let (body, digest) = data.split_at(data.len() - 32);
    let mut r = ByteReader::new(body, path);
    r.preamble(CHECKPOINT_MAGIC)?;
    if Sha256::digest(body).as_slice() != digest {
        return Err(CliError::format(path, "checksum mismatch"));
    }
    let hl = r.len(body.len() as u64)?;
    let header: H =
        serde_json::from_slice(r.take(hl)?).map_err(|e| CliError::format(path, e.to_string()))?;
    let count = r.len(body.len() as u64)?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let nl = r.u32()? as usize;
        let name = String::from_utf8(r.take(nl)?.to_vec())
            .map_err(|_| CliError::format(path, "record name is not UTF-8"))?;
        let dtype = match r.u8()? {
            0 => DType::F32,
            1 => DType::F64,
            d => return Err(CliError::format(path, format!("unknown dtype code {d}"))),
        };
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len(body.len() as u64)?);
        }
        let width = if dtype == DType::F32 { 4 } else { 8 };
        let raw = r.take(shape.iter().product::<usize>() * width)?.to_vec();
        records.push(Record {
            name,
            dtype,
            shape,
            raw,
        });
    }
    if !r.finished() {
        return Err(CliError::format(path, "trailing bytes before checksum"));
    }
    Ok((header, records))
}

pub fn store_records<T: Scalar>(prefix: &str, store: &ParamStore<T>) -> Vec<Record> {
    store
        .iter()
        .map(|(n, t)| Record::from_tensor(&format!("{prefix}/{n}"), t))
        .collect()
}

pub fn tensors_records<T: Scalar>(
    prefix: &str,
    store: &ParamStore<T>,
    tensors: &[Tensor<T>],
) -> Vec<Record> {
    store
        .iter()
        .zip(tensors)
        .map(|((n, _), t)| Record::from_tensor(&format!("{prefix}/{n}"), t))
        .collect()
}

/// Tensors for every parameter of `store`, looked up as `prefix/name`.
pub fn lookup<T: Scalar>(
    records: &[Record],
    prefix: &str,
    store: &ParamStore<T>,
    path: &Path,
) -> Result<Vec<Tensor<T>>, CliError> {
    store
        .iter()
        .map(|(n, t)| {
            let key = format!("{prefix}/{n}");
            let r = records
                .iter()
                .find(|r| r.name == key)
                .ok_or_else(|| CliError::format(path, format!("missing record {key}")))?;
            if r.shape != t.shape() {
                return Err(CliError::format(
                    path,
                    format!(
                        "record {key} has shape {:?}, expected {:?}",
                        r.shape,
                        t.shape()
                    ),
                ));
            }
            Ok(r.to_tensor())
        })
        .collect()
}

pub fn has_prefix(records: &[Record], prefix: &str) -> bool {
    let p = format!("{prefix}/");
    records.iter().any(|r| r.name.starts_with(&p))
}
