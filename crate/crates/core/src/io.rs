//! On-disk formats.
//!
//! Tensor container (`.dbpt`), all integers little-endian:
//!
//! ```text
//! "DBPT" | version u8 = 1 | dtype u8 = 1 (f64) | rank u8 | rank x u32 dims | f64 payload
//! ```
//!
//! Checkpoint (`.dbpm`): `"DBPM" | version u8 = 1 | u32 metadata length |
//! UTF-8 key=value lines | tensor containers in layer order`. Each conv
//! layer contributes its weight `(out, in, 3, 3)` and bias; each batch-norm
//! layer contributes gamma, beta, running mean and running variance.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::nn::{Architecture, BatchNorm2d, Conv2d, Layer, Model};
use crate::projection::{uniform_angles, BpTensor, Image, Sinogram};

pub const TENSOR_MAGIC: &[u8; 4] = b"DBPT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DBPM";
pub const VERSION: u8 = 1;
pub const DTYPE_F64: u8 = 1;

/// Shape plus row-major payload, last dimension fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(invalid(format!("unsupported rank {}", dims.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(invalid("dimension exceeds u32"));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(invalid(format!(
                "dims {:?} do not match {} values",
                dims,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn header_len(rank: usize) -> usize {
        7 + 4 * rank
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::header_len(self.dims.len()) + 8 * self.data.len());
        self.write_into(&mut out);
        out
    }

    fn write_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(VERSION);
        out.push(DTYPE_F64);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Decodes one container from the start of `bytes`, returning it with
    /// the number of bytes consumed. `base` offsets error positions.
    fn read_from(bytes: &[u8], base: usize) -> Result<(Self, usize)> {
        let err = |field, offset: usize, reason: String| Error::Format {
            field,
            offset: base + offset,
            reason,
        };
        if bytes.len() < 4 {
            return Err(err("magic", bytes.len(), "file ends inside the magic".into()));
        }
        if &bytes[..4] != TENSOR_MAGIC {
            return Err(err("magic", 0, format!("expected \"DBPT\", found {:?}", &bytes[..4])));
        }
        let byte_at = |i: usize, field| {
            bytes
                .get(i)
                .copied()
                .ok_or_else(|| err(field, bytes.len(), "unexpected end of file".into()))
        };
        let version = byte_at(4, "version")?;
        if version != VERSION {
            return Err(err("version", 4, format!("unsupported version {version}")));
        }
        let dtype = byte_at(5, "dtype")?;
        if dtype != DTYPE_F64 {
            return Err(err("dtype", 5, format!("unsupported dtype {dtype}")));
        }
        let rank = byte_at(6, "rank")? as usize;
        if rank == 0 {
            return Err(err("rank", 6, "rank must be at least 1".into()));
        }
        let header = Self::header_len(rank);
        if bytes.len() < header {
            return Err(err(
                "dims",
                bytes.len(),
                format!("header needs {header} bytes, file has {}", bytes.len()),
            ));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|i| u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().unwrap()) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| err("dims", 7, format!("payload size of {dims:?} overflows")))?;
        let end = header + count;
        if bytes.len() < end {
            return Err(err(
                "payload",
                bytes.len(),
                format!("truncated: payload needs {count} bytes ending at {}", base + end),
            ));
        }
        let data = bytes[header..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Self { dims, data }, end))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::read_from(bytes, 0)?;
        if used != bytes.len() {
            return Err(Error::Format {
                field: "payload",
                offset: used,
                reason: format!("{} trailing bytes", bytes.len() - used),
            });
        }
        Ok(t)
    }
}

pub fn save_tensor(path: &Path, tensor: &RawTensor) -> Result<()> {
    fs::write(path, tensor.to_bytes())?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<RawTensor> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(path.to_path_buf()));
    }
    RawTensor::from_bytes(&fs::read(path)?)
}

fn expect_rank(t: &RawTensor, rank: usize, what: &str) -> Result<()> {
    if t.dims.len() != rank {
        return Err(invalid(format!("{what} needs rank {rank}, container has {:?}", t.dims)));
    }
    Ok(())
}

impl From<&Image> for RawTensor {
    fn from(img: &Image) -> Self {
        Self {
            dims: vec![img.size(), img.size()],
            data: img.data().to_vec(),
        }
    }
}

impl TryFrom<RawTensor> for Image {
    type Error = Error;

    fn try_from(t: RawTensor) -> Result<Self> {
        expect_rank(&t, 2, "image")?;
        if t.dims[0] != t.dims[1] {
            return Err(invalid(format!("image must be square, got {:?}", t.dims)));
        }
        Image::new(t.dims[0], t.data)
    }
}

/// Sinograms are stored as `channels x views`; view angles are the uniform
/// set `j * pi / views`, so only such sinograms can be saved.
pub fn sinogram_to_raw(sino: &Sinogram) -> Result<RawTensor> {
    let uniform = uniform_angles(sino.views());
    if sino.angles().iter().zip(&uniform).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(invalid("only uniformly spaced sinograms can be serialized"));
    }
    RawTensor::new(vec![sino.channels(), sino.views()], sino.data().to_vec())
}

pub fn sinogram_from_raw(t: RawTensor) -> Result<Sinogram> {
    expect_rank(&t, 2, "sinogram")?;
    Sinogram::new(t.dims[0], uniform_angles(t.dims[1]), t.data)
}

/// Back-projection tensors are stored slab-major as `views x n x n`.
pub fn bp_tensor_to_raw(z: &BpTensor) -> Result<RawTensor> {
    RawTensor::new(vec![z.views(), z.size(), z.size()], z.data().to_vec())
}

pub fn bp_tensor_from_raw(t: RawTensor) -> Result<BpTensor> {
    expect_rank(&t, 3, "back-projection tensor")?;
    if t.dims[1] != t.dims[2] {
        return Err(invalid(format!("slabs must be square, got {:?}", t.dims)));
    }
    BpTensor::new(t.dims[1], uniform_angles(t.dims[0]), t.data)
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    save_tensor(path, &img.into())
}

pub fn load_image(path: &Path) -> Result<Image> {
    load_tensor(path)?.try_into()
}

pub fn save_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    save_tensor(path, &sinogram_to_raw(sino)?)
}

pub fn load_sinogram(path: &Path) -> Result<Sinogram> {
    sinogram_from_raw(load_tensor(path)?)
}

/// Training provenance stored with a model.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub arch: Architecture,
    /// Image side length of the training geometry.
    pub size: usize,
    pub seed: u64,
    pub epochs: usize,
}

impl CheckpointMeta {
    pub fn to_text(&self) -> String {
        format!(
            "depth={}\nwidth={}\nviews={}\nsize={}\nseed={}\nepochs={}\n",
            self.arch.depth, self.arch.width, self.arch.views, self.size, self.seed, self.epochs
        )
    }

    pub fn from_text(text: &str, offset: usize) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            field: "metadata",
            offset,
            reason,
        };
        let map = parse_key_values(text).map_err(bad)?;
        let get = |k: &str| -> Result<u64> {
            map.get(k)
                .ok_or_else(|| bad(format!("missing key {k}")))?
                .parse::<u64>()
                .map_err(|e| bad(format!("key {k}: {e}")))
        };
        Ok(Self {
            arch: Architecture {
                depth: get("depth")? as usize,
                width: get("width")? as usize,
                views: get("views")? as usize,
            },
            size: get("size")? as usize,
            seed: get("seed")?,
            epochs: get("epochs")? as usize,
        })
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {} is not key=value", i + 1))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn layer_blobs(model: &Model) -> Vec<RawTensor> {
    let mut blobs = Vec::new();
    for layer in model.layers() {
        match layer {
            Layer::Conv(c) => {
                blobs.push(RawTensor {
                    dims: vec![c.out_channels(), c.in_channels(), 3, 3],
                    data: c.weight.clone(),
                });
                blobs.push(RawTensor {
                    dims: vec![c.out_channels()],
                    data: c.bias.clone(),
                });
            }
            Layer::BatchNorm(bn) => {
                for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                    blobs.push(RawTensor {
                        dims: vec![v.len()],
                        data: v.clone(),
                    });
                }
            }
            Layer::Relu => {}
        }
    }
    blobs
}

pub fn checkpoint_to_bytes(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if model.architecture() != meta.arch {
        return Err(invalid("checkpoint metadata does not describe the model"));
    }
    let text = meta.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for blob in layer_blobs(model) {
        blob.write_into(&mut out);
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let fmt = |field, offset, reason: String| Error::Format { field, offset, reason };
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fmt("magic", 0, "expected \"DBPM\"".into()));
    }
    match bytes.get(4) {
        Some(&VERSION) => {}
        Some(v) => return Err(fmt("version", 4, format!("unsupported version {v}"))),
        None => return Err(fmt("version", bytes.len(), "unexpected end of file".into())),
    }
    if bytes.len() < 9 {
        return Err(fmt("metadata length", bytes.len(), "unexpected end of file".into()));
    }
    let meta_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let meta_end = 9 + meta_len;
    if bytes.len() < meta_end {
        return Err(fmt(
            "metadata",
            bytes.len(),
            format!("truncated: metadata ends at {meta_end}"),
        ));
    }
    let text = std::str::from_utf8(&bytes[9..meta_end]).map_err(|e| fmt("metadata", 9, e.to_string()))?;
    let meta = CheckpointMeta::from_text(text, 9)?;

    let template = Model::zeros(meta.arch).map_err(|e| fmt("metadata", 9, e.to_string()))?;
    let expected = layer_blobs(&template);
    let mut pos = meta_end;
    let mut blobs = Vec::with_capacity(expected.len());
    for want in &expected {
        let (blob, used) = RawTensor::read_from(&bytes[pos..], pos)?;
        if blob.dims != want.dims {
            return Err(fmt(
                "dims",
                pos + 7,
                format!("parameter blob {} has shape {:?}, expected {:?}", blobs.len(), blob.dims, want.dims),
            ));
        }
        blobs.push(blob.data);
        pos += used;
    }
    if pos != bytes.len() {
        return Err(fmt("payload", pos, format!("{} trailing bytes", bytes.len() - pos)));
    }

    let mut blobs = blobs.into_iter();
    let mut next = || blobs.next().expect("blob count checked");
    let mut layers = Vec::with_capacity(template.layers().len());
    for layer in template.layers() {
        layers.push(match layer {
            Layer::Conv(c) => {
                let (w, b) = (next(), next());
                Layer::Conv(Conv2d::from_parts(c.in_channels(), c.out_channels(), w, b)?)
            }
            Layer::BatchNorm(bn) => {
                let mut fresh = BatchNorm2d::new(bn.channels());
                fresh.gamma = next();
                fresh.beta = next();
                fresh.running_mean = next();
                fresh.running_var = next();
                Layer::BatchNorm(fresh)
            }
            Layer::Relu => Layer::Relu,
        });
    }
    Ok((Model::from_layers(meta.arch, layers)?, meta))
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(model, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(path.to_path_buf()));
    }
    checkpoint_from_bytes(&fs::read(path)?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Binary PGM (P5, maxval 255) of images placed side by side, left to right.
pub fn pgm_bytes(images: &[&Image]) -> Result<Vec<u8>> {
    let first = images.first().ok_or_else(|| invalid("no images to export"))?;
    let n = first.size();
    if images.iter().any(|i| i.size() != n) {
        return Err(invalid("side-by-side images must share a size"));
    }
    let mut out = format!("P5\n{} {}\n255\n", n * images.len(), n).into_bytes();
    for r in 0..n {
        for img in images {
            out.extend(img.data()[r * n..(r + 1) * n].iter().map(|&v| quantize(v)));
        }
    }
    Ok(out)
}

pub fn export_pgm(image: &Image, path: &Path) -> Result<()> {
    fs::write(path, pgm_bytes(&[image])?)?;
    Ok(())
}
