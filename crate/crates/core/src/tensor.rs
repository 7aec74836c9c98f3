//! Dense `(n, c, h, w)` feature-map container.
//!
//! All operators in this crate read and write [`Tensor4`] values. Storage is a
//! flat row-major `Vec<f64>`; a channel plane `(n, c)` is a contiguous run of
//! `h * w` values, which is what the kernels iterate over.
//!
//! Channel slicing wraps around the channel ring: asking for `length`
//! channels starting at `start` yields source channels
//! `start, start + 1, ..., start + length - 1`, each taken modulo `c`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Magic tag at the head of every fixture file.
pub const FIXTURE_MAGIC: [u8; 4] = *b"DSX1";

const HEADER_LEN: usize = 4 + 4 * 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

fn check_extents(n: usize, c: usize, h: usize, w: usize) -> Result<()> {
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "all extents must be >= 1, got ({n}, {c}, {h}, {w})"
        )));
    }
    Ok(())
}

impl Tensor4 {
    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: f64) -> Result<Self> {
        check_extents(n, c, h, w)?;
        Ok(Self {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::filled(n, c, h, w, 0.0)
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        check_extents(n, c, h, w)?;
        let expected = n * c * h * w;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "data length {} does not match extents ({n}, {c}, {h}, {w}) = {expected}",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    /// Entries drawn uniformly from `[-1, 1)`.
    pub fn random<R: Rng + ?Sized>(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_extents(n, c, h, w)?;
        let data = (0..n * c * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Ok(Self { n, c, h, w, data })
    }

    /// Builds a tensor of the given shape whose entries come from `f(n, c, y, x)`.
    pub fn from_fn<F>(n: usize, c: usize, h: usize, w: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize, usize) -> f64,
    {
        check_extents(n, c, h, w)?;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    /// The contiguous `h * w` plane of channel `c` in sample `n`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let len = self.plane_len();
        let start = (n * self.c + c) * len;
        &self.data[start..start + len]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of elementwise products. Shapes must match.
    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        self.require_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        self.require_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn require_same_shape(&self, other: &Tensor4) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Copies `length` channels starting at `start`, wrapping past the last
    /// channel back to channel 0.
    pub fn slice_channels_cyclic(&self, start: usize, length: usize) -> Result<Tensor4> {
        if start >= self.c {
            return Err(Error::Index(format!(
                "slice start {start} out of range for {} channels",
                self.c
            )));
        }
        if length == 0 || length > self.c {
            return Err(Error::shape(format!(
                "slice length {length} must be in 1..={}",
                self.c
            )));
        }
        let plane = self.plane_len();
        let mut data = Vec::with_capacity(self.n * length * plane);
        for b in 0..self.n {
            for k in 0..length {
                data.extend_from_slice(self.plane(b, (start + k) % self.c));
            }
        }
        Ok(Tensor4 {
            n: self.n,
            c: length,
            h: self.h,
            w: self.w,
            data,
        })
    }

    pub fn concat_channels(parts: &[Tensor4]) -> Result<Tensor4> {
        concat_channels(parts)
    }

    pub fn write_fixture<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&FIXTURE_MAGIC)?;
        for extent in self.shape() {
            out.write_all(&(extent as u64).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_fixture<R: Read>(mut input: R) -> Result<Tensor4> {
        let mut header = [0u8; HEADER_LEN];
        input
            .read_exact(&mut header)
            .map_err(|_| Error::Format("header shorter than 36 bytes".into()))?;
        if header[..4] != FIXTURE_MAGIC {
            return Err(Error::Format(format!(
                "bad magic tag {:?}",
                String::from_utf8_lossy(&header[..4])
            )));
        }
        let mut extents = [0usize; 4];
        for (i, e) in extents.iter_mut().enumerate() {
            let start = 4 + i * 8;
            let raw = u64::from_le_bytes(header[start..start + 8].try_into().unwrap());
            *e = usize::try_from(raw)
                .map_err(|_| Error::Format(format!("extent {raw} does not fit in memory")))?;
        }
        let [n, c, h, w] = extents;
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Format(format!(
                "zero extent in header ({n}, {c}, {h}, {w})"
            )));
        }
        let count = n
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Format("extents overflow".into()))?;
        let mut payload = Vec::new();
        input.read_to_end(&mut payload)?;
        if payload.len() != count * 8 {
            return Err(Error::Format(format!(
                "payload is {} bytes, extents ({n}, {c}, {h}, {w}) require {}",
                payload.len(),
                count * 8
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        self.write_fixture(BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor4> {
        let file = File::open(path)?;
        Tensor4::read_fixture(BufReader::new(file))
    }
}

/// Joins tensors along the channel axis, in list order.
pub fn concat_channels(parts: &[Tensor4]) -> Result<Tensor4> {
    let first = parts
        .first()
        .ok_or_else(|| Error::argument("concat_channels needs at least one tensor"))?;
    let (n, h, w) = (first.n, first.h, first.w);
    if let Some(bad) = parts.iter().find(|p| p.n != n || p.h != h || p.w != w) {
        return Err(Error::shape(format!(
            "cannot concat {:?} with {:?}: n/h/w differ",
            bad.shape(),
            first.shape()
        )));
    }
    let c: usize = parts.iter().map(|p| p.c).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for part in parts {
            let len = part.c * part.plane_len();
            data.extend_from_slice(&part.data[b * len..(b + 1) * len]);
        }
    }
    Ok(Tensor4 { n, c, h, w, data })
}
