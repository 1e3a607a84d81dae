use std::path::Path;

use nalgebra::{DMatrix, Matrix3};

use super::{at_path, read_bytes, write_atomic};
use crate::binarization::{BinaryCode, ItqModel};
use crate::error::{Error, Result};
use crate::geometry::{Lrf, Patch, Vec3};
use crate::mining::{KeypointRef, PairLabel, TrainingPair, TrainingSet, TrainingTriplet};
use crate::model::{EncoderArch, EncoderParams, Variant};

const CHECKPOINT_MAGIC: &[u8; 4] = b"DP3D";
const DESCRIPTOR_MAGIC: &[u8; 4] = b"DP3F";
const CODES_MAGIC: &[u8; 4] = b"DP3B";
const ITQ_MAGIC: &[u8; 4] = b"DP3Q";
const DATASET_MAGIC: &[u8; 4] = b"DP3T";
const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        Writer(magic.to_vec())
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize, what: &'static str) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::format(what, format!("{v} does not fit in 32 bits")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn crc(mut self) -> Vec<u8> {
        let c = crc32fast::hash(&self.0);
        self.0.extend_from_slice(&c.to_le_bytes());
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Checks the magic; a short prefix of the right magic counts as
    /// truncation, anything else as a bad magic.
    fn open(buf: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        let n = buf.len().min(4);
        if buf[..n] != magic[..n] {
            return Err(Error::format(
                what,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&buf[..n]), String::from_utf8_lossy(magic)),
            ));
        }
        let mut r = Reader { buf, pos: 0, what };
        r.take(4)?;
        Ok(r)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(
                self.what,
                format!("truncated: need {n} bytes at offset {}, {} left", self.pos, self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Fails early when `count` records of `size` bytes cannot fit.
    fn expect(&self, count: usize, size: usize) -> Result<()> {
        match count.checked_mul(size) {
            Some(total) if total <= self.remaining() => Ok(()),
            _ => Err(Error::format(
                self.what,
                format!("truncated: {count} records of {size} bytes declared, {} bytes left", self.remaining()),
            )),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != VERSION as usize {
            return Err(Error::format(self.what, format!("unsupported version {v}")));
        }
        Ok(())
    }

    /// Verifies the trailing CRC32 of everything read so far.
    fn finish_crc(mut self) -> Result<()> {
        let body = self.pos;
        let stored = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&self.buf[..body]);
        let what = self.what;
        self.finish()?;
        if stored != actual {
            return Err(Error::format(
                what,
                format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(self.what, format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn dims(r: &mut Reader) -> Result<Vec<usize>> {
    let n = r.u32()?;
    r.expect(n, 4)?;
    (0..n).map(|_| r.u32()).collect()
}

/// `DP3D` checkpoint: arch dims, variant tag, `f32` weights then bias for
/// every layer, CRC32.
pub fn encode_checkpoint(params: &EncoderParams) -> Result<Vec<u8>> {
    params.check_shapes()?;
    const W: &str = "checkpoint";
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.u32(VERSION as usize, W)?;
    for d in [&params.arch.point_mlp_dims, &params.arch.head_dims] {
        w.u32(d.len(), W)?;
        for &x in d {
            w.u32(x, W)?;
        }
    }
    w.u8(params.arch.variant.tag());
    for l in params.layers() {
        l.weight.iter().chain(&l.bias).for_each(|&v| w.f32(v));
    }
    Ok(w.crc())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<EncoderParams> {
    const W: &str = "checkpoint";
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, W)?;
    r.version()?;
    let point = dims(&mut r)?;
    let head = dims(&mut r)?;
    let tag = r.u8()?;
    let variant = Variant::from_tag(tag).ok_or_else(|| Error::format(W, format!("unknown variant tag {tag}")))?;
    let arch = EncoderArch::new(point, head, variant)
        .map_err(|e| Error::format(W, format!("invalid architecture: {e}")))?;
    let count = arch
        .point_mlp_dims
        .windows(2)
        .chain(arch.head_dims.windows(2))
        .try_fold(0usize, |acc, w| w[0].checked_mul(w[1])?.checked_add(w[1])?.checked_add(acc))
        .ok_or_else(|| Error::format(W, "parameter count overflows"))?;
    r.expect(count, 4)?;
    let mut params = EncoderParams::zeros(&arch)?;
    for l in params.layers_mut() {
        for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            *v = r.f32()?;
        }
    }
    r.finish_crc()?;
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &EncoderParams) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    at_path(path, decode_checkpoint(&read_bytes(path)?))
}

/// Descriptor dump: dimension plus `(keypoint, f32 values)` records.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorRecord {
    pub dim: usize,
    pub records: Vec<(usize, Vec<f64>)>,
}

pub fn encode_descriptors(file: &DescriptorRecord) -> Result<Vec<u8>> {
    const W: &str = "descriptor file";
    let mut w = Writer::new(DESCRIPTOR_MAGIC);
    w.u32(VERSION as usize, W)?;
    w.u32(file.dim, W)?;
    w.u32(file.records.len(), W)?;
    for (k, d) in &file.records {
        if d.len() != file.dim {
            return Err(Error::invalid(format!("descriptor of keypoint {k} has dimension {}", d.len())));
        }
        w.u32(*k, W)?;
        d.iter().for_each(|&v| w.f32(v));
    }
    Ok(w.0)
}

pub fn decode_descriptors(bytes: &[u8]) -> Result<DescriptorRecord> {
    const W: &str = "descriptor file";
    let mut r = Reader::open(bytes, DESCRIPTOR_MAGIC, W)?;
    r.version()?;
    let dim = r.u32()?;
    let count = r.u32()?;
    let size = dim
        .checked_add(1)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::format(W, "record size overflows"))?;
    r.expect(count, size)?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let k = r.u32()?;
        let d = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        records.push((k, d));
    }
    r.finish()?;
    Ok(DescriptorRecord { dim, records })
}

pub fn save_descriptors(path: &Path, file: &DescriptorRecord) -> Result<()> {
    write_atomic(path, &encode_descriptors(file)?)
}

pub fn load_descriptors(path: &Path) -> Result<DescriptorRecord> {
    at_path(path, decode_descriptors(&read_bytes(path)?))
}

/// `DP3B`: version byte, `B`, count, then `⌈B/8⌉` bytes per code.
pub fn encode_codes(bits: usize, codes: &[BinaryCode]) -> Result<Vec<u8>> {
    const W: &str = "code file";
    let mut w = Writer::new(CODES_MAGIC);
    w.u8(VERSION as u8);
    w.u32(bits, W)?;
    w.u32(codes.len(), W)?;
    for c in codes {
        if c.len() != bits {
            return Err(Error::invalid(format!("code of {} bits in a {bits}-bit file", c.len())));
        }
        w.0.extend_from_slice(c.bytes());
    }
    Ok(w.0)
}

pub fn decode_codes(bytes: &[u8]) -> Result<(usize, Vec<BinaryCode>)> {
    const W: &str = "code file";
    let mut r = Reader::open(bytes, CODES_MAGIC, W)?;
    let v = r.u8()?;
    if v as u32 != VERSION {
        return Err(Error::format(W, format!("unsupported version {v}")));
    }
    let bits = r.u32()?;
    let count = r.u32()?;
    if bits == 0 {
        return Err(Error::format(W, "zero-length codes"));
    }
    let size = bits.div_ceil(8);
    r.expect(count, size)?;
    let mut codes = Vec::with_capacity(count);
    for i in 0..count {
        let raw = r.take(size)?.to_vec();
        codes.push(
            BinaryCode::from_bytes(bits, raw).map_err(|e| Error::format(W, format!("code {i}: {e}")))?,
        );
    }
    r.finish()?;
    Ok((bits, codes))
}

pub fn save_codes(path: &Path, bits: usize, codes: &[BinaryCode]) -> Result<()> {
    write_atomic(path, &encode_codes(bits, codes)?)
}

pub fn load_codes(path: &Path) -> Result<(usize, Vec<BinaryCode>)> {
    at_path(path, decode_codes(&read_bytes(path)?))
}

/// `DP3Q`: `D`, `B`, then mean, projection and rotation as row-major `f64`,
/// CRC32. Kept at full precision so saved models re-encode bit-exactly.
pub fn encode_itq(model: &ItqModel) -> Result<Vec<u8>> {
    model.validate()?;
    const W: &str = "ITQ model";
    let mut w = Writer::new(ITQ_MAGIC);
    w.u32(VERSION as usize, W)?;
    w.u32(model.dim(), W)?;
    w.u32(model.bits, W)?;
    model.mean.iter().for_each(|&v| w.f64(v));
    for m in [&model.projection, &model.rotation] {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                w.f64(m[(i, j)]);
            }
        }
    }
    Ok(w.crc())
}

pub fn decode_itq(bytes: &[u8]) -> Result<ItqModel> {
    const W: &str = "ITQ model";
    let mut r = Reader::open(bytes, ITQ_MAGIC, W)?;
    r.version()?;
    let d = r.u32()?;
    let b = r.u32()?;
    if b == 0 || b > d {
        return Err(Error::format(W, format!("bits {b} must be in 1..={d}")));
    }
    let total = d
        .checked_mul(b)
        .and_then(|x| x.checked_add(b.checked_mul(b)?))
        .and_then(|x| x.checked_add(d))
        .ok_or_else(|| Error::format(W, "size overflows"))?;
    r.expect(total, 8)?;
    let mean = (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let mut read = |rows: usize, cols: usize| -> Result<DMatrix<f64>> {
        let v = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_row_slice(rows, cols, &v))
    };
    let projection = read(d, b)?;
    let rotation = read(b, b)?;
    r.finish_crc()?;
    Ok(ItqModel {
        mean,
        projection,
        rotation,
        bits: b,
    })
}

pub fn save_itq(path: &Path, model: &ItqModel) -> Result<()> {
    write_atomic(path, &encode_itq(model)?)
}

pub fn load_itq(path: &Path) -> Result<ItqModel> {
    at_path(path, decode_itq(&read_bytes(path)?))
}

const PAIRS_TAG: u8 = 0;
const TRIPLETS_TAG: u8 = 1;
// keypoint, valid count, 16 frame values
const PATCH_HEADER: usize = 4 + 4 + 16 * 8;

fn put_patch(w: &mut Writer, p: &Patch, n: usize) -> Result<()> {
    const W: &str = "training set";
    if p.points.len() != n {
        return Err(Error::invalid(format!("patch of {} points in an N = {n} set", p.points.len())));
    }
    w.u32(p.keypoint_index, W)?;
    w.u32(p.valid_count, W)?;
    let l = &p.lrf;
    l.origin.iter().for_each(|&v| w.f64(v));
    for i in 0..3 {
        for j in 0..3 {
            w.f64(l.axes[(i, j)]);
        }
    }
    w.f64(l.support_radius);
    l.eigenvalues.iter().for_each(|&v| w.f64(v));
    for q in &p.points {
        q.iter().for_each(|&v| w.f64(v));
    }
    Ok(())
}

fn get_patch(r: &mut Reader, n: usize) -> Result<Patch> {
    let keypoint_index = r.u32()?;
    let valid_count = r.u32()?;
    let v3 = |r: &mut Reader| -> Result<Vec3> { Ok(Vec3::new(r.f64()?, r.f64()?, r.f64()?)) };
    let origin = v3(r)?;
    let mut axes = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            axes[(i, j)] = r.f64()?;
        }
    }
    let support_radius = r.f64()?;
    let eigenvalues = v3(r)?;
    let points = (0..n).map(|_| v3(r)).collect::<Result<Vec<_>>>()?;
    if valid_count == 0 || valid_count > n {
        return Err(Error::format("training set", format!("valid count {valid_count} outside 1..={n}")));
    }
    Ok(Patch {
        keypoint_index,
        points,
        valid_count,
        lrf: Lrf {
            origin,
            axes,
            support_radius,
            eigenvalues,
        },
    })
}

/// `DP3T`: kind tag, `N`, count, records with full `f64` patches, CRC32.
pub fn encode_training_set(set: &TrainingSet) -> Result<Vec<u8>> {
    const W: &str = "training set";
    let n = match set {
        TrainingSet::Pairs(p) => p.first().map(|x| x.patch_a.len()),
        TrainingSet::Triplets(t) => t.first().map(|x| x.anchor.len()),
    }
    .unwrap_or(0);
    let mut w = Writer::new(DATASET_MAGIC);
    w.u32(VERSION as usize, W)?;
    match set {
        TrainingSet::Pairs(pairs) => {
            w.u8(PAIRS_TAG);
            w.u32(n, W)?;
            w.u32(pairs.len(), W)?;
            for p in pairs {
                for k in [p.a, p.b] {
                    w.u32(k.model, W)?;
                    w.u32(k.index, W)?;
                }
                w.u8(p.label.tag());
                put_patch(&mut w, &p.patch_a, n)?;
                put_patch(&mut w, &p.patch_b, n)?;
            }
        }
        TrainingSet::Triplets(ts) => {
            w.u8(TRIPLETS_TAG);
            w.u32(n, W)?;
            w.u32(ts.len(), W)?;
            for t in ts {
                for p in [&t.anchor, &t.positive, &t.negative] {
                    put_patch(&mut w, p, n)?;
                }
            }
        }
    }
    Ok(w.crc())
}

pub fn decode_training_set(bytes: &[u8]) -> Result<TrainingSet> {
    const W: &str = "training set";
    let mut r = Reader::open(bytes, DATASET_MAGIC, W)?;
    r.version()?;
    let tag = r.u8()?;
    let n = r.u32()?;
    let count = r.u32()?;
    let patch = n
        .checked_mul(24)
        .and_then(|x| x.checked_add(PATCH_HEADER))
        .ok_or_else(|| Error::format(W, "record size overflows"))?;
    let set = match tag {
        PAIRS_TAG => {
            r.expect(count, 17 + 2 * patch)?;
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let a = KeypointRef::new(r.u32()?, r.u32()?);
                let b = KeypointRef::new(r.u32()?, r.u32()?);
                let t = r.u8()?;
                let label = PairLabel::from_tag(t).ok_or_else(|| Error::format(W, format!("unknown pair label {t}")))?;
                let patch_a = get_patch(&mut r, n)?;
                let patch_b = get_patch(&mut r, n)?;
                out.push(TrainingPair {
                    a,
                    b,
                    patch_a,
                    patch_b,
                    label,
                });
            }
            TrainingSet::Pairs(out)
        }
        TRIPLETS_TAG => {
            r.expect(count, 3 * patch)?;
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                out.push(TrainingTriplet {
                    anchor: get_patch(&mut r, n)?,
                    positive: get_patch(&mut r, n)?,
                    negative: get_patch(&mut r, n)?,
                });
            }
            TrainingSet::Triplets(out)
        }
        t => return Err(Error::format(W, format!("unknown set kind {t}"))),
    };
    r.finish_crc()?;
    Ok(set)
}

pub fn save_training_set(path: &Path, set: &TrainingSet) -> Result<()> {
    write_atomic(path, &encode_training_set(set)?)
}

pub fn load_training_set(path: &Path) -> Result<TrainingSet> {
    at_path(path, decode_training_set(&read_bytes(path)?))
}
