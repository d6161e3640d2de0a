//! Single-file checkpoint container.
//!
//! Layout:
//!
//! ```text
//! PRUNELAB-CKPT\n
//! header <len>\n
//! <len bytes of TOML metadata>
//! params: every layer's weights (row-major) then biases, little-endian
//! mask:   1 byte flag; if set, per layer 1 byte (0 exempt / 1 present)
//!         followed by the keep bits packed LSB-first
//! checksum: CRC-64/ECMA-182 of every byte after the magic line, as a
//!           little-endian u64
//! ```

use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, ParamSet};
use crate::optimize::TrainSpec;
use crate::prune::{LayerMask, Mask, PruneSpec};
use crate::scalar::Scalar;

pub const MAGIC: &[u8] = b"PRUNELAB-CKPT\n";
pub const FORMAT_VERSION: u32 = 1;

const CRC: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub format_version: u32,
    pub library_version: String,
    pub dtype: String,
    pub model: ModelConfig,
    /// `[out, in]` of every weight matrix.
    pub layer_shapes: Vec<[usize; 2]>,
    pub train: Option<TrainSpec>,
    pub prune: Option<PruneSpec>,
    pub seeds: Vec<u64>,
    pub note: Option<String>,
}

impl Metadata {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            dtype: String::new(),
            model,
            layer_shapes: Vec::new(),
            train: None,
            prune: None,
            seeds: Vec::new(),
            note: None,
        }
    }

    pub fn with_train(mut self, spec: TrainSpec) -> Self {
        self.seeds.push(spec.seed);
        self.train = Some(spec);
        self
    }

    pub fn with_prune(mut self, spec: PruneSpec) -> Self {
        self.prune = Some(spec);
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes.iter().map(|[o, i]| o * i + o).sum()
    }

    fn dtype_width(&self) -> Result<usize> {
        match self.dtype.as_str() {
            "f32" => Ok(4),
            "f64" => Ok(8),
            other => Err(Error::Checkpoint {
                section: "header",
                message: format!("unknown dtype `{other}`"),
            }),
        }
    }
}

fn err(section: &'static str, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        section,
        message: message.into(),
    }
}

fn encode_mask(mask: Option<&Mask>, out: &mut Vec<u8>) {
    let Some(mask) = mask else {
        out.push(0);
        return;
    };
    out.push(1);
    for layer in mask.layers() {
        match layer {
            None => out.push(0),
            Some(m) => {
                out.push(1);
                let mut packed = vec![0u8; m.len().div_ceil(8)];
                for (i, &k) in m.keep().iter().enumerate() {
                    if k {
                        packed[i / 8] |= 1 << (i % 8);
                    }
                }
                out.extend_from_slice(&packed);
            }
        }
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint<S: Scalar>(
    params: &ParamSet<S>,
    mask: Option<&Mask>,
    metadata: &Metadata,
) -> Result<Vec<u8>> {
    if let Some(mask) = mask {
        if !mask.matches(params) {
            return Err(Error::InvalidArgument(
                "mask does not match parameters".into(),
            ));
        }
    }
    let mut meta = metadata.clone();
    meta.format_version = FORMAT_VERSION;
    meta.dtype = S::DTYPE.to_string();
    meta.layer_shapes = params.shapes().into_iter().map(|(o, i)| [o, i]).collect();
    let header = toml::to_string(&meta).map_err(|e| err("header", e.to_string()))?;

    let mut payload = Vec::with_capacity(params.param_count() * S::BYTES + 64);
    for layer in params.layers() {
        layer.weight.iter().for_each(|&v| v.write_le(&mut payload));
        layer.bias.iter().for_each(|&v| v.write_le(&mut payload));
    }
    encode_mask(mask, &mut payload);

    let mut out = Vec::with_capacity(payload.len() + header.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(format!("header {}\n", header.len()).as_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    let crc = CRC.checksum(&out[MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint<S: Scalar>(
    path: impl AsRef<Path>,
    params: &ParamSet<S>,
    mask: Option<&Mask>,
    metadata: &Metadata,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, mask, metadata)?)?;
    Ok(())
}

/// Reads magic and header; returns metadata and the payload offset.
fn read_header<R: Read>(reader: &mut R) -> Result<(Metadata, u64)> {
    let mut magic = vec![0u8; MAGIC.len()];
    reader
        .read_exact(&mut magic)
        .map_err(|_| err("magic", "file too short"))?;
    if magic != MAGIC {
        return Err(err("magic", "not a prunelab checkpoint"));
    }
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        reader
            .read_exact(&mut byte)
            .map_err(|_| err("header", "truncated header length line"))?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 32 {
            return Err(err("header", "malformed header length line"));
        }
    }
    let line = String::from_utf8(line).map_err(|_| err("header", "non-UTF-8 length line"))?;
    let len: usize = line
        .strip_prefix("header ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| err("header", format!("malformed length line `{line}`")))?;
    let mut text = vec![0u8; len];
    reader
        .read_exact(&mut text)
        .map_err(|_| err("header", "truncated metadata"))?;
    let text = String::from_utf8(text).map_err(|_| err("header", "metadata is not UTF-8"))?;
    let meta: Metadata = toml::from_str(&text).map_err(|e| err("header", e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(err(
            "header",
            format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                meta.format_version
            ),
        ));
    }
    meta.dtype_width()?;
    let offset = (MAGIC.len() + line.len() + 1 + len) as u64;
    Ok((meta, offset))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(err(self.section, "truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn decode_mask(cur: &mut Cursor<'_>, shapes: &[[usize; 2]]) -> Result<Option<Mask>> {
    cur.section = "mask";
    match cur.take(1)?[0] {
        0 => Ok(None),
        1 => {
            let mut layers = Vec::with_capacity(shapes.len());
            for &[rows, cols] in shapes {
                match cur.take(1)?[0] {
                    0 => layers.push(None),
                    1 => {
                        let n = rows * cols;
                        let packed = cur.take(n.div_ceil(8))?;
                        let keep = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
                        layers.push(Some(LayerMask::new(rows, cols, keep)?));
                    }
                    f => return Err(err("mask", format!("bad layer flag {f}"))),
                }
            }
            Ok(Some(Mask::new(layers)))
        }
        f => Err(err("mask", format!("bad mask flag {f}"))),
    }
}

/// A decoded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<S> {
    pub params: ParamSet<S>,
    pub mask: Option<Mask>,
    pub metadata: Metadata,
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    let mut reader = bytes;
    let (metadata, offset) = read_header(&mut reader)?;
    if metadata.dtype != S::DTYPE {
        return Err(err(
            "header",
            format!(
                "checkpoint holds {}, caller expects {}",
                metadata.dtype,
                S::DTYPE
            ),
        ));
    }
    let body = &bytes[offset as usize..];
    if body.len() < 8 {
        return Err(err("checksum", "truncated"));
    }
    let (payload, trailer) = body.split_at(body.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));

    let mut cur = Cursor {
        bytes: payload,
        pos: 0,
        section: "params",
    };
    let mut layers = Vec::with_capacity(metadata.layer_shapes.len());
    for &[rows, cols] in &metadata.layer_shapes {
        let w = cur.take(rows * cols * S::BYTES)?;
        let b = cur.take(rows * S::BYTES)?;
        let weight = Array2::from_shape_vec(
            (rows, cols),
            w.chunks_exact(S::BYTES).map(S::read_le).collect(),
        )
        .expect("shape");
        let bias = Array1::from_iter(b.chunks_exact(S::BYTES).map(S::read_le));
        layers.push((weight, bias));
    }
    let mask = decode_mask(&mut cur, &metadata.layer_shapes)?;
    if cur.pos != payload.len() {
        return Err(err("mask", "trailing bytes after mask"));
    }
    if CRC.checksum(&bytes[MAGIC.len()..bytes.len() - 8]) != stored {
        return Err(err("checksum", "checksum mismatch"));
    }
    let params = ParamSet::from_layers(layers).map_err(|e| err("params", e.to_string()))?;
    Ok(Checkpoint {
        params,
        mask,
        metadata,
    })
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<S>> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks it was written for `expected`.
pub fn load_checkpoint_for<S: Scalar>(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<Checkpoint<S>> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.metadata.model != expected {
        return Err(Error::InvalidArgument(format!(
            "structural mismatch: checkpoint model {:?}, expected {:?}",
            ckpt.metadata.model, expected
        )));
    }
    Ok(ckpt)
}

/// Header facts and mask densities, read without decoding parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSummary {
    pub metadata: Metadata,
    pub param_count: usize,
    /// Kept fraction of prunable weights, if a mask is stored.
    pub prunable_density: Option<f64>,
    /// Kept fraction of all parameters, if a mask is stored.
    pub overall_density: Option<f64>,
}

pub fn inspect_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointSummary> {
    let mut file = std::fs::File::open(path)?;
    let (metadata, offset) = read_header(&mut file)?;
    let width = metadata.dtype_width()?;
    let param_count = metadata.param_count();
    file.seek(SeekFrom::Start(offset + (param_count * width) as u64))?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if rest.len() < 8 {
        return Err(err("checksum", "truncated"));
    }
    let mut cur = Cursor {
        bytes: &rest[..rest.len() - 8],
        pos: 0,
        section: "mask",
    };
    let mask = decode_mask(&mut cur, &metadata.layer_shapes)?;
    let (prunable_density, overall_density) = match &mask {
        Some(m) => {
            let dropped = m.prunable_total() - m.kept_prunable();
            (
                Some(m.prunable_density()),
                Some((param_count - dropped) as f64 / param_count as f64),
            )
        }
        None => (None, None),
    };
    Ok(CheckpointSummary {
        metadata,
        param_count,
        prunable_density,
        overall_density,
    })
}
