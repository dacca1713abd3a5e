//! Byte formats: the `SCD1` decomposition container, the `DTEN` raw tensor
//! format and binary PPM images. Multi-byte fields are little-endian.
//!
//! `SCD1` layout:
//!
//! ```text
//! "SCD1" | order k: u8 | channel_mode: u8 | [channel axis: u8, mode 1 only]
//! | shape: k × u64 | width: u64 | coeff_bits: u8 (32 or 64)
//! | coefficients: width × q × coeff_bits/8   (q = channel length, or 1)
//! | signs: for each term, for each signed axis, ceil(n_i / 8) bytes
//! ```
//!
//! Sign columns are LSB-first with a set bit meaning `-1`. Terms are stored
//! one after another, so the first `w'` terms of a file form a valid
//! width-`w'` decomposition.

use crate::decompose::CutDecomposition;
use crate::error::{Error, Result};
use crate::signs::{SignMatrix, SignVector};
use crate::tensor::{check_shape, DenseTensor};

const SCD_MAGIC: &[u8; 4] = b"SCD1";
const DTEN_MAGIC: &[u8; 4] = b"DTEN";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoeffBits {
    F32,
    F64,
}

impl CoeffBits {
    pub fn bits(self) -> u32 {
        match self {
            CoeffBits::F32 => 32,
            CoeffBits::F64 => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(CoeffBits::F32),
            64 => Ok(CoeffBits::F64),
            b => Err(Error::Config(format!("coefficient bits must be 32 or 64, got {b}"))),
        }
    }

    fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    /// The value a coefficient takes after a write/read cycle.
    pub fn stored(self, x: f64) -> f64 {
        match self {
            CoeffBits::F32 => x as f32 as f64,
            CoeffBits::F64 => x,
        }
    }
}

fn header_len(order: usize, channel: bool) -> usize {
    4 + 1 + 1 + channel as usize + 8 * order + 8 + 1
}

fn term_sign_bytes(d: &CutDecomposition) -> usize {
    d.factors().iter().map(|f| f.rows().div_ceil(8)).sum()
}

/// Exact byte length of the `SCD1` encoding of `d`.
pub fn scd_size(d: &CutDecomposition, coeff_bits: CoeffBits) -> usize {
    header_len(d.shape().len(), d.channel_axis().is_some())
        + d.width() * (coeff_bits.bytes() * d.channels() + term_sign_bytes(d))
}

pub fn write_scd(d: &CutDecomposition, coeff_bits: CoeffBits) -> Vec<u8> {
    let mut out = Vec::with_capacity(scd_size(d, coeff_bits));
    out.extend_from_slice(SCD_MAGIC);
    out.push(d.shape().len() as u8);
    match d.channel_axis() {
        None => out.push(0),
        Some(c) => {
            out.push(1);
            out.push(c as u8);
        }
    }
    for &n in d.shape() {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    out.extend_from_slice(&(d.width() as u64).to_le_bytes());
    out.push(coeff_bits.bits() as u8);
    for &c in d.coefficients() {
        match coeff_bits {
            CoeffBits::F32 => out.extend_from_slice(&(c as f32).to_le_bytes()),
            CoeffBits::F64 => out.extend_from_slice(&c.to_le_bytes()),
        }
    }
    for j in 0..d.width() {
        for f in d.factors() {
            let col = f.column(j);
            let nbytes = col.len().div_ceil(8);
            let bytes = col.words().iter().flat_map(|w| w.to_le_bytes());
            out.extend(bytes.take(nbytes));
        }
    }
    debug_assert_eq!(out.len(), scd_size(d, coeff_bits));
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4).map_err(|_| Error::Format("file too short".into()))?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn shape(&mut self, order: usize) -> Result<Vec<usize>> {
        let shape = (0..order)
            .map(|_| {
                let n = self.u64()?;
                usize::try_from(n).map_err(|_| Error::Format("shape overflow".into()))
            })
            .collect::<Result<Vec<usize>>>()?;
        check_shape(&shape).map_err(|e| match e {
            Error::TooLarge(_) => Error::Format("shape overflow".into()),
            e => e,
        })?;
        Ok(shape)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

struct ScdHeader {
    shape: Vec<usize>,
    channel_axis: Option<usize>,
    width: usize,
    coeff_bits: CoeffBits,
    body: usize,
}

fn read_scd_header(cur: &mut Cursor) -> Result<ScdHeader> {
    cur.magic(SCD_MAGIC)?;
    let order = cur.u8()? as usize;
    let channel_axis = match cur.u8()? {
        0 => None,
        1 => Some(cur.u8()? as usize),
        m => return Err(Error::Format(format!("unknown channel mode {m}"))),
    };
    let shape = cur.shape(order)?;
    if let Some(c) = channel_axis {
        if c >= order {
            return Err(Error::Format(format!("channel axis {c} out of range")));
        }
    }
    let width = usize::try_from(cur.u64()?).map_err(|_| Error::Format("width overflow".into()))?;
    let coeff_bits = CoeffBits::from_bits(cur.u8()? as u32)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(ScdHeader {
        shape,
        channel_axis,
        width,
        coeff_bits,
        body: cur.pos,
    })
}

fn read_scd_terms(bytes: &[u8], keep: Option<usize>) -> Result<CutDecomposition> {
    let mut cur = Cursor::new(bytes);
    let h = read_scd_header(&mut cur)?;
    let empty = CutDecomposition::new(h.shape.clone(), h.channel_axis)
        .map_err(|e| Error::Format(e.to_string()))?;
    let q = empty.channels();
    let keep = keep.map_or(h.width, |k| k.min(h.width));

    let coeff_len = h
        .width
        .checked_mul(q * h.coeff_bits.bytes())
        .ok_or_else(|| Error::Format("width overflow".into()))?;
    let coeffs = cur.take(coeff_len)?;
    let coefficients: Vec<f64> = match h.coeff_bits {
        CoeffBits::F32 => coeffs
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        CoeffBits::F64 => coeffs
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    };
    if let Some(i) = coefficients.iter().position(|c| !c.is_finite()) {
        return Err(Error::Format(format!("non-finite coefficient {i}")));
    }

    let mut factors: Vec<SignMatrix> = empty
        .factors()
        .iter()
        .map(|f| SignMatrix::new(f.rows()))
        .collect();
    for _ in 0..keep {
        for f in &mut factors {
            let n = f.rows();
            let raw = cur.take(n.div_ceil(8))?;
            let words = raw
                .chunks(8)
                .map(|c| {
                    let mut b = [0u8; 8];
                    b[..c.len()].copy_from_slice(c);
                    u64::from_le_bytes(b)
                })
                .collect();
            f.push(SignVector::from_words(n, words)?)?;
        }
    }
    if keep == h.width {
        cur.finish()?;
    } else {
        debug_assert!(cur.pos > h.body);
    }
    CutDecomposition::from_parts(
        h.shape,
        h.channel_axis,
        factors,
        coefficients[..keep * q].to_vec(),
    )
}

pub fn read_scd(bytes: &[u8]) -> Result<CutDecomposition> {
    read_scd_terms(bytes, None)
}

/// Reads only the first `width` terms (fewer if the file is narrower).
/// Bytes past those terms are not inspected.
pub fn read_scd_prefix(bytes: &[u8], width: usize) -> Result<CutDecomposition> {
    read_scd_terms(bytes, Some(width))
}

/// Coefficient precision recorded in an `SCD1` header.
pub fn scd_coeff_bits(bytes: &[u8]) -> Result<CoeffBits> {
    Ok(read_scd_header(&mut Cursor::new(bytes))?.coeff_bits)
}

/// Re-encodes the first `width` terms of an `SCD1` file as a standalone file.
pub fn truncate_scd(bytes: &[u8], width: usize) -> Result<Vec<u8>> {
    let coeff_bits = scd_coeff_bits(bytes)?;
    Ok(write_scd(&read_scd_prefix(bytes, width)?, coeff_bits))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn bits(self) -> u32 {
        8 * self.size() as u32
    }
}

/// `DTEN` encoding: `"DTEN" | k: u8 | shape: k × u64 | dtype: u8 | payload`.
///
/// dtype tags are 0 = f32, 1 = f64, 2 = u8. Writing as `U8` clamps and rounds
/// like [`to_byte`].
pub fn write_raw(t: &DenseTensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.order() + t.len() * dtype.size());
    out.extend_from_slice(DTEN_MAGIC);
    out.push(t.order() as u8);
    for &n in t.shape() {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    out.push(dtype.tag());
    for &x in t.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&x.to_le_bytes()),
            DType::U8 => out.push(to_byte(x)),
        }
    }
    out
}

/// Parses a `DTEN` file, widening the payload to `f64`.
pub fn read_raw(bytes: &[u8]) -> Result<(DenseTensor, DType)> {
    let mut cur = Cursor::new(bytes);
    cur.magic(DTEN_MAGIC)?;
    let order = cur.u8()? as usize;
    let shape = cur.shape(order)?;
    let dtype = DType::from_tag(cur.u8()?)?;
    let len: usize = shape.iter().product();
    let expected = len
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Format("shape overflow".into()))?;
    let payload = &bytes[cur.pos..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        DType::U8 => payload.iter().map(|&b| b as f64).collect(),
    };
    let t = DenseTensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((t, dtype))
}

/// Clamps to `[0, 255]` and rounds half away from zero.
pub fn to_byte(x: f64) -> u8 {
    x.clamp(0.0, 255.0).round() as u8
}

/// Parses a binary (`P6`) PPM with maxval 255 into an `height × width × 3` tensor.
pub fn read_ppm(bytes: &[u8]) -> Result<DenseTensor> {
    let mut pos = 0;
    let mut field = || -> Result<&[u8]> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(&bytes[start..pos])
    };
    if field()? != b"P6" {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    let mut number = || -> Result<usize> {
        let f = field()?;
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad PPM header field {:?}", String::from_utf8_lossy(f))))
    };
    let width = number()?;
    let height = number()?;
    let maxval = number()?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported, expected 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Format("shape overflow".into()))?;
    let raster = bytes
        .get(pos..)
        .filter(|r| r.len() >= len)
        .ok_or_else(|| Error::Format("short PPM payload".into()))?;
    DenseTensor::new(
        vec![height, width, 3],
        raster[..len].iter().map(|&b| b as f64).collect(),
    )
    .map_err(|e| Error::Format(e.to_string()))
}

/// Encodes an `height × width × 3` tensor as a binary PPM, clamping and
/// rounding each value with [`to_byte`].
pub fn write_ppm(t: &DenseTensor) -> Result<Vec<u8>> {
    let (height, width) = match t.shape()[..] {
        [h, w, 3] => (h, w),
        _ => {
            return Err(Error::Format(format!(
                "PPM needs shape (height, width, 3), got {:?}",
                t.shape()
            )))
        }
    };
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&x| to_byte(x)));
    Ok(out)
}
