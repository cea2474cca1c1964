//! Dataset parsers and deterministic model serialization.
//!
//! MNIST uses the public IDX layout (big-endian magics 0x00000801 and
//! 0x00000803); CIFAR-10 uses the binary 3073-byte-record layout. Gzipped
//! copies of either are decompressed transparently. Model archives use the
//! "ITLM" v1 format: little-endian fixed-width fields, typed sections, and a
//! trailing CRC-32 over the payload; round-trips are bit-identical.

use std::fs;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::{CodebookEncoder, HashTree, PqEncoder, NUM_BUCKETS, TREE_LEVELS};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{DenseLayer, Layer, MlpModel, TrainConfig};
use crate::partition::PartitionSpec;
use crate::table::{Activation, AmmOperator, LookupTable, QuantizedTable};

const MNIST_IMAGES_MAGIC: u32 = 0x0000_0803;
const MNIST_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD_BYTES: usize = 3073;

/// Feature rows plus integer labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<u32>,
    pub num_classes: u32,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<u32>, num_classes: u32) -> Result<Self> {
        let ds = LabeledDataset {
            features,
            labels,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.labels.len() {
            return Err(Error::CountMismatch {
                images: self.features.rows(),
                labels: self.labels.len(),
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidParam(format!(
                "label {bad} out of range [0, {})",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows at the given indices, in order.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Read a whole file, decompressing when it carries the gzip magic.
fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(Error::Io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8], path: &str) -> Self {
        ByteReader {
            buf,
            pos: 0,
            path: path.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                path: self.path.clone(),
                expected: (self.pos + n) as u64,
                actual: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse the MNIST IDX image/label pair; pixels are scaled to [0, 1].
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = read_maybe_gzip(images_path)?;
    let img_name = images_path.display().to_string();
    let mut r = ByteReader::new(&img_bytes, &img_name);
    let magic = r.u32_be()?;
    if magic != MNIST_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: MNIST_IMAGES_MAGIC.to_be_bytes(),
            found: magic.to_be_bytes(),
        });
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let d = rows * cols;
    let expected = 16u64 + (count * d) as u64;
    if img_bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: img_name,
            expected,
            actual: img_bytes.len() as u64,
        });
    }
    let pixels = r.take(count * d)?;
    let mut features = Matrix::zeros(count, d);
    for (dst, &px) in features.data_mut().iter_mut().zip(pixels) {
        *dst = px as f64 / 255.0;
    }

    let lbl_bytes = read_maybe_gzip(labels_path)?;
    let lbl_name = labels_path.display().to_string();
    let mut r = ByteReader::new(&lbl_bytes, &lbl_name);
    let magic = r.u32_be()?;
    if magic != MNIST_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: MNIST_LABELS_MAGIC.to_be_bytes(),
            found: magic.to_be_bytes(),
        });
    }
    let lbl_count = r.u32_be()? as usize;
    let expected = 8u64 + lbl_count as u64;
    if lbl_bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: lbl_name,
            expected,
            actual: lbl_bytes.len() as u64,
        });
    }
    if lbl_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: lbl_count,
        });
    }
    let labels: Vec<u32> = r.take(lbl_count)?.iter().map(|&b| b as u32).collect();
    LabeledDataset::new(features, labels, 10)
}

/// Parse CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per
/// record); pixels are scaled to [0, 1].
pub fn load_cifar10(batch_paths: &[impl AsRef<Path>]) -> Result<LabeledDataset> {
    let mut all_rows: Vec<f64> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for p in batch_paths {
        let path = p.as_ref();
        let bytes = read_maybe_gzip(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::InvalidParam(format!(
                "cifar10 file {}: {} bytes is not a positive multiple of {CIFAR_RECORD_BYTES}",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            labels.push(rec[0] as u32);
            all_rows.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    let features = Matrix::from_vec(n, CIFAR_RECORD_BYTES - 1, all_rows)?;
    LabeledDataset::new(features, labels, 10)
}

/// SHA-256 of a file's (decompressed) contents, lowercase hex.
pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = read_maybe_gzip(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Verify files against a `sha256sum`-style manifest (`<hex>  <name>` lines).
/// Each named file may exist as-is or with a `.gz` suffix; digests are over
/// the decompressed bytes.
pub fn verify_checksums(dir: &Path, manifest: &Path) -> Result<()> {
    let text = fs::read_to_string(manifest)?;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(hex), Some(name)) = (parts.next(), parts.next()) else {
            return Err(Error::InvalidParam(format!(
                "checksum manifest line not in '<hex>  <name>' form: {line}"
            )));
        };
        let mut path = dir.join(name);
        if !path.exists() {
            path = dir.join(format!("{name}.gz"));
        }
        let got = sha256_hex(&path)?;
        if !got.eq_ignore_ascii_case(hex) {
            return Err(Error::Sha256Mismatch {
                path: path.display().to_string(),
                expected: hex.to_string(),
                found: got,
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Model archive ("ITLM" v1)
// ---------------------------------------------------------------------------

const ARCHIVE_MAGIC: [u8; 4] = *b"ITLM";
const ARCHIVE_VERSION: u32 = 1;
const SECTION_METADATA: u32 = 1;
const SECTION_MODEL: u32 = 2;

/// In-memory view of a model archive.
///
/// On disk: magic "ITLM", version (u32 LE), typed sections (tag u32, length
/// u64, bytes), then a CRC-32 over all section bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArchive {
    pub model: MlpModel,
}

pub fn save_model(path: &Path, model: &MlpModel) -> Result<()> {
    let archive = ModelArchive {
        model: model.clone(),
    };
    fs::write(path, archive.to_bytes())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let bytes = fs::read(path)?;
    ModelArchive::from_bytes(&bytes, &path.display().to_string()).map(|a| a.model)
}

impl ModelArchive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        write_section(&mut payload, SECTION_METADATA, &encode_metadata(&self.model.meta));
        write_section(&mut payload, SECTION_MODEL, &encode_model(&self.model));
        let mut out = Vec::with_capacity(payload.len() + 12);
        out.extend_from_slice(&ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Truncated {
                path: path.to_string(),
                expected: 12,
                actual: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != ARCHIVE_MAGIC {
            return Err(Error::BadMagic {
                expected: ARCHIVE_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != ARCHIVE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let payload = &bytes[8..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let crc = crc32(payload);
        if crc != stored_crc {
            return Err(Error::ChecksumMismatch {
                expected: stored_crc,
                found: crc,
            });
        }
        let mut r = Decoder::new(payload, path);
        let mut meta: Option<TrainConfig> = None;
        let mut model_bytes: Option<&[u8]> = None;
        while !r.done() {
            let tag = r.u32()?;
            let len = r.u64()? as usize;
            let body = r.bytes(len)?;
            match tag {
                SECTION_METADATA => meta = Some(decode_metadata(&mut Decoder::new(body, path))?),
                SECTION_MODEL => model_bytes = Some(body),
                other => return Err(Error::UnknownSection(other)),
            }
        }
        let meta = meta.ok_or_else(|| Error::InvalidParam("archive missing metadata".into()))?;
        let body = model_bytes.ok_or_else(|| Error::InvalidParam("archive missing model".into()))?;
        let mut model = decode_model(&mut Decoder::new(body, path))?;
        model.meta = meta;
        model.validate()?;
        Ok(ModelArchive { model })
    }
}

fn write_section(out: &mut Vec<u8>, tag: u32, body: &[u8]) {
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
}

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xffff_ffffu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xedb8_8320 & mask);
        }
    }
    !crc
}

// --- encoding ---------------------------------------------------------------

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
    fn usizes_u32(&mut self, vs: &[usize]) {
        self.u32(vs.len() as u32);
        for &v in vs {
            self.u32(v as u32);
        }
    }
    fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        self.f64s(m.data());
    }
}

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Identity => 0,
        Activation::Relu => 1,
        Activation::Softmax => 2,
    }
}

fn encode_metadata(meta: &TrainConfig) -> Vec<u8> {
    let mut e = Enc(Vec::new());
    e.u64(meta.seed);
    e.u64(meta.epochs as u64);
    e.u64(meta.batch_size as u64);
    e.f64(meta.learn_rate);
    e.0
}

fn encode_model(model: &MlpModel) -> Vec<u8> {
    let mut e = Enc(Vec::new());
    e.u32(model.layers.len() as u32);
    for layer in &model.layers {
        match layer {
            Layer::Dense(d) => {
                e.u8(0);
                e.matrix(&d.weights);
                e.u32(d.bias.len() as u32);
                e.f64s(&d.bias);
                e.u8(activation_tag(d.activation));
            }
            Layer::Amm(op) => {
                e.u8(1);
                e.usizes_u32(&op.spec.perm);
                e.usizes_u32(&op.spec.boundaries);
                e.u32(op.encoders.len() as u32);
                for enc in &op.encoders {
                    match enc {
                        CodebookEncoder::Tree(t) => {
                            e.u8(0);
                            for lvl in 0..TREE_LEVELS {
                                e.u32(t.split_dims[lvl] as u32);
                                e.u32(t.thresholds[lvl].len() as u32);
                                e.f64s(&t.thresholds[lvl]);
                            }
                        }
                        CodebookEncoder::Pq(p) => {
                            e.u8(1);
                            e.matrix(&p.prototypes);
                        }
                    }
                }
                e.u32(op.table.codebooks() as u32);
                e.u32(op.table.outputs() as u32);
                e.f64s(op.table.values());
                match &op.table.quantized {
                    None => e.u8(0),
                    Some(q) => {
                        e.u8(1);
                        e.0.extend_from_slice(&q.q);
                        e.f64s(&q.scale);
                        e.f64s(&q.offset);
                    }
                }
                e.u32(op.bias.len() as u32);
                e.f64s(&op.bias);
                e.u8(activation_tag(op.activation));
            }
        }
    }
    e.0
}

// --- decoding ---------------------------------------------------------------

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Decoder<'a> {
    fn new(buf: &'a [u8], path: &str) -> Self {
        Decoder {
            buf,
            pos: 0,
            path: path.to_string(),
        }
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos.checked_add(n).map_or(true, |end| end > self.buf.len()) {
            return Err(Error::Truncated {
                path: self.path.clone(),
                expected: (self.pos as u64).saturating_add(n as u64),
                actual: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.bytes(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n.checked_mul(8).ok_or_else(|| Error::InvalidParam("length overflow".into()))?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn usizes_u32(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        let b = self.bytes(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect())
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::InvalidParam("matrix size overflow".into()))?;
        Matrix::from_vec(rows, cols, self.f64s(len)?)
    }
}

fn decode_activation(tag: u8) -> Result<Activation> {
    match tag {
        0 => Ok(Activation::Identity),
        1 => Ok(Activation::Relu),
        2 => Ok(Activation::Softmax),
        other => Err(Error::InvalidParam(format!(
            "archive: unknown activation tag {other}"
        ))),
    }
}

fn decode_metadata(d: &mut Decoder) -> Result<TrainConfig> {
    Ok(TrainConfig {
        seed: d.u64()?,
        epochs: d.u64()? as usize,
        batch_size: d.u64()? as usize,
        learn_rate: d.f64()?,
    })
}

fn decode_model(d: &mut Decoder) -> Result<MlpModel> {
    let n_layers = d.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        match d.u8()? {
            0 => {
                let weights = d.matrix()?;
                let bias_len = d.u32()? as usize;
                let bias = d.f64s(bias_len)?;
                let activation = decode_activation(d.u8()?)?;
                layers.push(Layer::Dense(DenseLayer {
                    weights,
                    bias,
                    activation,
                }));
            }
            1 => {
                let perm = d.usizes_u32()?;
                let boundaries = d.usizes_u32()?;
                let spec = PartitionSpec { perm, boundaries };
                spec.validate()?;
                let n_enc = d.u32()? as usize;
                let mut encoders = Vec::with_capacity(n_enc.min(4096));
                for _ in 0..n_enc {
                    match d.u8()? {
                        0 => {
                            let mut split_dims = [0usize; TREE_LEVELS];
                            let mut thresholds: [Vec<f64>; TREE_LEVELS] = Default::default();
                            for lvl in 0..TREE_LEVELS {
                                split_dims[lvl] = d.u32()? as usize;
                                let tlen = d.u32()? as usize;
                                if tlen != 1 << lvl {
                                    return Err(Error::InvalidParam(format!(
                                        "archive: level {lvl} has {tlen} thresholds"
                                    )));
                                }
                                thresholds[lvl] = d.f64s(tlen)?;
                            }
                            encoders.push(CodebookEncoder::Tree(HashTree {
                                split_dims,
                                thresholds,
                            }));
                        }
                        1 => encoders.push(CodebookEncoder::Pq(PqEncoder {
                            prototypes: d.matrix()?,
                        })),
                        other => {
                            return Err(Error::InvalidParam(format!(
                                "archive: unknown encoder tag {other}"
                            )))
                        }
                    }
                }
                let c = d.u32()? as usize;
                let m = d.u32()? as usize;
                let len = c
                    .checked_mul(NUM_BUCKETS)
                    .and_then(|v| v.checked_mul(m))
                    .ok_or_else(|| Error::InvalidParam("table size overflow".into()))?;
                let values = d.f64s(len)?;
                let mut table = LookupTable::new(c, m, values)?;
                if d.u8()? == 1 {
                    let q = d.bytes(len)?.to_vec();
                    let scale = d.f64s(m)?;
                    let offset = d.f64s(m)?;
                    table.quantized = Some(QuantizedTable { q, scale, offset });
                }
                let bias_len = d.u32()? as usize;
                let bias = d.f64s(bias_len)?;
                let activation = decode_activation(d.u8()?)?;
                let op = AmmOperator {
                    spec,
                    encoders,
                    table,
                    bias,
                    activation,
                };
                op.validate()?;
                layers.push(Layer::Amm(op));
            }
            other => {
                return Err(Error::InvalidParam(format!(
                    "archive: unknown layer tag {other}"
                )))
            }
        }
    }
    Ok(MlpModel {
        layers,
        meta: TrainConfig::default(),
    })
}
