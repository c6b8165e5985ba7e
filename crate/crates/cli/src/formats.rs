//! On-disk formats: volumes, checkpoints, attention dumps, graymaps.
//!
//! Every reader validates the whole file before returning anything and
//! rejects truncated, oversized or mislabeled input.

use std::path::Path;

use xmorpher::architecture::{ArchConfig, ModelParams};
use xmorpher::attention::AttentionDump;
use xmorpher::volume::{DisplacementField, Volume};
use xmorpher::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(FormatError::Malformed(msg.into()))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub const VOLUME_MAGIC: &str = "XMVOL1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueKind {
    Scalar,
    Label,
    /// Three scalar components (depth, height, width) stored one after another.
    Dvf,
}

impl ValueKind {
    fn name(self) -> &'static str {
        match self {
            ValueKind::Scalar => "scalar",
            ValueKind::Label => "label",
            ValueKind::Dvf => "dvf",
        }
    }
}

/// Payload of a volume file.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Scalar(Vec<f32>),
    Label(Vec<u16>),
    Dvf(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: VolumeData,
}

impl VolumeFile {
    pub fn kind(&self) -> ValueKind {
        match self.data {
            VolumeData::Scalar(_) => ValueKind::Scalar,
            VolumeData::Label(_) => ValueKind::Label,
            VolumeData::Dvf(_) => ValueKind::Dvf,
        }
    }

    pub fn scalar(t: &Tensor<f32>) -> Self {
        let s = t.shape();
        Self {
            dims: [s[0], s[1], s[2]],
            spacing: [1.0; 3],
            data: VolumeData::Scalar(t.data().to_vec()),
        }
    }

    pub fn labels(dims: [usize; 3], labels: &[u16]) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            data: VolumeData::Label(labels.to_vec()),
        }
    }

    pub fn dvf(phi: &DisplacementField<f32>) -> Self {
        Self {
            dims: phi.dims(),
            spacing: [1.0; 3],
            data: VolumeData::Dvf(phi.data.data().to_vec()),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let [d, h, w] = self.dims;
        let [sx, sy, sz] = self.spacing;
        let mut out = format!("{VOLUME_MAGIC}\n{d} {h} {w}\n{}\nspacing {sx} {sy} {sz}\n", self.kind().name()).into_bytes();
        match &self.data {
            VolumeData::Scalar(v) | VolumeData::Dvf(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            VolumeData::Label(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        let mut line = |what: &str| -> Result<String> {
            let Some(end) = rest.iter().position(|&b| b == b'\n') else {
                return bad(format!("volume header truncated before {what}"));
            };
            let text = std::str::from_utf8(&rest[..end])
                .map_err(|_| FormatError::Malformed(format!("volume header {what} is not UTF-8")))?
                .to_string();
            rest = &rest[end + 1..];
            Ok(text)
        };
        let magic = line("magic")?;
        if magic != VOLUME_MAGIC {
            return bad(format!("not a volume file: magic {magic:?}"));
        }
        let dims_line = line("dimensions")?;
        let dims: Vec<usize> = dims_line
            .split(' ')
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| FormatError::Malformed(format!("bad dimensions line {dims_line:?}")))?;
        if dims.len() != 3 || dims.contains(&0) {
            return bad(format!("bad dimensions line {dims_line:?}"));
        }
        let kind = match line("value kind")?.as_str() {
            "scalar" => ValueKind::Scalar,
            "label" => ValueKind::Label,
            "dvf" => ValueKind::Dvf,
            other => return bad(format!("unknown value kind {other:?}")),
        };
        let sp_line = line("spacing")?;
        let sp: Vec<&str> = sp_line.split(' ').collect();
        if sp.len() != 4 || sp[0] != "spacing" {
            return bad(format!("bad spacing line {sp_line:?}"));
        }
        let mut spacing = [0f32; 3];
        for (s, t) in spacing.iter_mut().zip(&sp[1..]) {
            *s = t
                .parse()
                .ok()
                .filter(|v: &f32| v.is_finite() && *v > 0.0)
                .ok_or_else(|| FormatError::Malformed(format!("bad spacing line {sp_line:?}")))?;
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FormatError::Malformed("volume too large".into()))?;
        let (count, width) = match kind {
            ValueKind::Scalar => (n, 4),
            ValueKind::Label => (n, 2),
            ValueKind::Dvf => (3 * n, 4),
        };
        if rest.len() != count * width {
            return bad(format!(
                "payload holds {} bytes, header implies {} ({} {} values)",
                rest.len(),
                count * width,
                count,
                kind.name()
            ));
        }
        let data = match kind {
            ValueKind::Label => VolumeData::Label(rest.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()),
            _ => {
                let v: Vec<f32> = rest.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                if kind == ValueKind::Scalar {
                    VolumeData::Scalar(v)
                } else {
                    VolumeData::Dvf(v)
                }
            }
        };
        Ok(Self {
            dims: [dims[0], dims[1], dims[2]],
            spacing,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?).map_err(|e| FormatError::Malformed(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }

    pub fn into_tensor(self) -> Result<Tensor<f32>> {
        match self.data {
            VolumeData::Scalar(v) => Tensor::new(self.dims.to_vec(), v).map_err(|e| FormatError::Malformed(e.to_string())),
            _ => bad(format!("expected a scalar volume, found {}", self.kind().name())),
        }
    }

    pub fn into_labels(self) -> Result<([usize; 3], Vec<u16>)> {
        match self.data {
            VolumeData::Label(v) => Ok((self.dims, v)),
            _ => bad(format!("expected a label volume, found {}", self.kind().name())),
        }
    }

    pub fn into_dvf(self) -> Result<DisplacementField<f32>> {
        match self.data {
            VolumeData::Dvf(v) => {
                let [d, h, w] = self.dims;
                Tensor::new(vec![3, d, h, w], v)
                    .and_then(DisplacementField::new)
                    .map_err(|e| FormatError::Malformed(e.to_string()))
            }
            _ => bad(format!("expected a dvf volume, found {}", self.kind().name())),
        }
    }
}

pub fn read_volume(path: &Path) -> Result<Volume<f32>> {
    let t = VolumeFile::read(path)?.into_tensor()?;
    Volume::new(t).map_err(|e| FormatError::Malformed(format!("{}: {e}", path.display())))
}

pub fn read_labels(path: &Path) -> Result<([usize; 3], Vec<u16>)> {
    VolumeFile::read(path)?.into_labels()
}

pub fn read_dvf(path: &Path) -> Result<DisplacementField<f32>> {
    VolumeFile::read(path)?.into_dvf()
}

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"XMCKPT1";

struct Cursor<'a> {
    bytes: &'a [u8],
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return bad(format!("{} truncated", self.what));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i32(&mut self) -> Result<i32> {
        let b = self.take(4)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| FormatError::Malformed(format!("{} too large", self.what)))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finish(self) -> Result<()> {
        if !self.bytes.is_empty() {
            return bad(format!("{} has {} trailing bytes", self.what, self.bytes.len()));
        }
        Ok(())
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

/// Architecture plus every weight array, in the parameter visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub params: ModelParams<Tensor<f32>>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        let arch = toml::to_string(&self.arch).expect("architecture serializes");
        push_u32(&mut out, arch.len());
        out.extend(arch.as_bytes());
        let mut arrays = Vec::new();
        self.params.map(&mut |name, t| arrays.push((name.to_string(), t.clone())));
        push_u32(&mut out, arrays.len());
        for (name, t) in arrays {
            push_u32(&mut out, name.len());
            out.extend(name.as_bytes());
            push_u32(&mut out, t.rank());
            t.shape().iter().for_each(|&e| push_u32(&mut out, e));
            t.data().iter().for_each(|x| out.extend(x.to_le_bytes()));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor {
            bytes,
            what: "checkpoint",
        };
        if c.take(CHECKPOINT_MAGIC.len()).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return bad("not a checkpoint: bad magic");
        }
        let len = c.u32()? as usize;
        let arch_text = std::str::from_utf8(c.take(len)?).map_err(|_| FormatError::Malformed("checkpoint architecture is not UTF-8".into()))?;
        let arch: ArchConfig =
            toml::from_str(arch_text).map_err(|e| FormatError::Malformed(format!("checkpoint architecture: {e}")))?;
        arch.validate().map_err(|e| FormatError::Malformed(format!("checkpoint architecture: {e}")))?;
        let template = ModelParams::<Tensor<f32>>::init(&arch, 0).map_err(|e| FormatError::Malformed(e.to_string()))?;
        let names = template.names();
        let count = c.u32()? as usize;
        if count != names.len() {
            return bad(format!("checkpoint holds {count} arrays, architecture needs {}", names.len()));
        }
        let mut arrays = Vec::with_capacity(count);
        for expected in &names {
            let len = c.u32()? as usize;
            let name = c.take(len)?;
            if name != expected.as_bytes() {
                return bad(format!("checkpoint array {:?} where {expected:?} was expected", String::from_utf8_lossy(name)));
            }
            let rank = c.u32()? as usize;
            if rank > 8 {
                return bad(format!("array {expected}: rank {rank}"));
            }
            let shape = (0..rank).map(|_| c.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = c.f32s(numel)?;
            arrays.push(Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?);
        }
        c.finish()?;
        let mut params = template;
        let mut k = 0;
        let mut mismatch = None;
        params.for_each_mut(&mut |name, t| {
            let loaded = &arrays[k];
            if loaded.shape() != t.shape() && mismatch.is_none() {
                mismatch = Some(format!("array {name}: shape {:?}, expected {:?}", loaded.shape(), t.shape()));
            }
            *t = loaded.clone();
            k += 1;
        });
        if let Some(m) = mismatch {
            return bad(m);
        }
        Ok(Self { arch, params })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?).map_err(|e| FormatError::Malformed(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }
}

pub const ATTENTION_MAGIC: &[u8; 8] = b"XMATTN1\0";

/// One window of an [`AttentionDump`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWindow {
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    pub base_origin: [i32; 3],
    pub search_origin: [i32; 3],
    pub key_valid: Vec<bool>,
    /// Row-major `[heads, rows, cols]`.
    pub weights: Vec<f32>,
}

impl AttentionWindow {
    pub fn from_dump(dump: &AttentionDump<f32>, i: usize) -> Self {
        let o = |v: [isize; 3]| v.map(|x| x as i32);
        Self {
            heads: dump.heads,
            rows: dump.rows,
            cols: dump.cols,
            base_origin: o(dump.base_origins[i]),
            search_origin: o(dump.search_origins[i]),
            key_valid: dump.key_valid[i * dump.cols..(i + 1) * dump.cols].to_vec(),
            weights: dump.window(i).to_vec(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = ATTENTION_MAGIC.to_vec();
        for v in [self.heads, self.rows, self.cols] {
            push_u32(&mut out, v);
        }
        for v in self.base_origin.iter().chain(&self.search_origin) {
            out.extend(v.to_le_bytes());
        }
        out.extend(self.key_valid.iter().map(|&v| v as u8));
        self.weights.iter().for_each(|x| out.extend(x.to_le_bytes()));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor {
            bytes,
            what: "attention dump",
        };
        if c.take(ATTENTION_MAGIC.len()).ok() != Some(&ATTENTION_MAGIC[..]) {
            return bad("not an attention dump: bad magic");
        }
        let heads = c.u32()? as usize;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let mut origins = [0i32; 6];
        for o in origins.iter_mut() {
            *o = c.i32()?;
        }
        let key_valid = c
            .take(cols)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                v => bad(format!("key flag {v}")),
            })
            .collect::<Result<Vec<_>>>()?;
        let n = heads
            .checked_mul(rows)
            .and_then(|v| v.checked_mul(cols))
            .ok_or_else(|| FormatError::Malformed("attention dump too large".into()))?;
        let weights = c.f32s(n)?;
        c.finish()?;
        Ok(Self {
            heads,
            rows,
            cols,
            base_origin: [origins[0], origins[1], origins[2]],
            search_origin: [origins[3], origins[4], origins[5]],
            key_valid,
            weights,
        })
    }
}

/// Binary portable graymap of row-major 8-bit pixels.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}
