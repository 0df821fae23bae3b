//! Laplacian pyramid decomposition and reconstruction.
//!
//! Smoothing uses the separable binomial kernel `(1, 4, 6, 4, 1) / 16` with
//! reflect borders. `down` blurs then keeps even rows and columns; `up`
//! inserts zeros and blurs with the kernel scaled by 4, so `up(down(c)) = c`
//! for constant images. Band-pass levels store the residual against exactly
//! that `up`, which makes reconstruction an algebraic identity.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

const TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Reflect an index into `[0, n)` without repeating the edge sample.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// 1D blur along rows (`horizontal`) or columns of one plane; `adjoint`
/// applies the transpose of the same operator.
fn blur_pass<T: Scalar>(src: &[T], h: usize, w: usize, horizontal: bool, adjoint: bool) -> Vec<T> {
    let mut out = vec![T::zero(); h * w];
    let taps: [T; 5] = TAPS.map(T::of);
    let (len, count) = if horizontal { (w, h) } else { (h, w) };
    let at = |line: usize, pos: usize| if horizontal { line * w + pos } else { pos * w + line };
    for line in 0..count {
        for i in 0..len {
            for (k, &t) in taps.iter().enumerate() {
                let j = reflect(i as isize + k as isize - 2, len);
                if adjoint {
                    out[at(line, j)] += t * src[at(line, i)];
                } else {
                    out[at(line, i)] += t * src[at(line, j)];
                }
            }
        }
    }
    out
}

fn blur_plane<T: Scalar>(src: &[T], h: usize, w: usize, adjoint: bool) -> Vec<T> {
    let tmp = blur_pass(src, h, w, true, adjoint);
    blur_pass(&tmp, h, w, false, adjoint)
}

fn map_planes<T: Scalar>(x: &Tensor<T>, out_shape: Shape, f: impl Fn(&[T]) -> Vec<T>) -> Tensor<T> {
    let s = x.shape();
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n() {
        for c in 0..s.c() {
            data.extend(f(x.plane(n, c)));
        }
    }
    Tensor::from_vec(out_shape, data).expect("plane map preserves element count")
}

fn check_even(op: &str, s: Shape) -> Result<()> {
    if s.h() % 2 != 0 || s.w() % 2 != 0 || s.h() == 0 || s.w() == 0 {
        return Err(Error::Dimension(format!("{op}: spatial dims of {s} must be even and non-zero")));
    }
    Ok(())
}

/// Blur then keep even-indexed rows and columns.
pub fn down<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    check_even("pyramid down", s)?;
    let (h, w) = (s.h(), s.w());
    Ok(map_planes(x, s.with_hw(h / 2, w / 2), |p| {
        let b = blur_plane(p, h, w, false);
        (0..h / 2).flat_map(|i| (0..w / 2).map(move |j| (i, j))).map(|(i, j)| b[2 * i * w + 2 * j]).collect()
    }))
}

/// Zero-insertion to twice the size followed by the blur scaled by 4.
pub fn up<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    let (h2, w2) = (2 * h, 2 * w);
    let four = T::of(4.0);
    map_planes(x, s.with_hw(h2, w2), |p| {
        let mut z = vec![T::zero(); h2 * w2];
        for i in 0..h {
            for j in 0..w {
                z[2 * i * w2 + 2 * j] = p[i * w + j];
            }
        }
        blur_plane(&z, h2, w2, false).into_iter().map(|v| v * four).collect()
    })
}

/// Transpose of [`down`]: zero-insert then apply the blur's adjoint.
pub(crate) fn down_adjoint<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let (h, w) = (s.h(), s.w());
    let (h2, w2) = (2 * h, 2 * w);
    map_planes(g, s.with_hw(h2, w2), |p| {
        let mut z = vec![T::zero(); h2 * w2];
        for i in 0..h {
            for j in 0..w {
                z[2 * i * w2 + 2 * j] = p[i * w + j];
            }
        }
        blur_plane(&z, h2, w2, true)
    })
}

/// Transpose of [`up`]: adjoint blur scaled by 4, then keep even samples.
pub(crate) fn up_adjoint<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let (h, w) = (s.h(), s.w());
    let four = T::of(4.0);
    map_planes(g, s.with_hw(h / 2, w / 2), |p| {
        let b = blur_plane(p, h, w, true);
        (0..h / 2).flat_map(|i| (0..w / 2).map(move |j| (i, j))).map(|(i, j)| four * b[2 * i * w + 2 * j]).collect()
    })
}

/// Band-pass levels from finest to coarsest, plus the low-pass residual.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevels<T: Scalar = f32> {
    pub bands: Vec<Tensor<T>>,
    pub residual: Tensor<T>,
}

impl<T: Scalar> PyramidLevels<T> {
    pub fn depth(&self) -> usize {
        self.bands.len() + 1
    }

    /// Full-resolution band-pass level.
    pub fn l1(&self) -> &Tensor<T> {
        &self.bands[0]
    }

    /// Half-resolution band-pass level (depth >= 3).
    pub fn l2(&self) -> &Tensor<T> {
        &self.bands[1]
    }

    /// Coarsest level; for depth 3 this is the quarter-resolution residual.
    pub fn l3(&self) -> &Tensor<T> {
        &self.residual
    }

    /// All levels, finest first, residual last.
    pub fn levels(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.bands.iter().chain(std::iter::once(&self.residual))
    }
}

pub fn check_divisible(s: Shape, depth: usize) -> Result<()> {
    let m = 1usize << (depth - 1);
    if s.h() % m != 0 || s.w() % m != 0 || s.h() == 0 || s.w() == 0 {
        return Err(Error::Dimension(format!(
            "image {s} must have spatial dims divisible by {m} for a depth-{depth} pyramid (pad first)"
        )));
    }
    Ok(())
}

pub fn decompose<T: Scalar>(image: &Tensor<T>, depth: usize) -> Result<PyramidLevels<T>> {
    if depth < 2 {
        return Err(Error::Contract(format!("pyramid depth must be at least 2, got {depth}")));
    }
    check_divisible(image.shape(), depth)?;
    let mut bands = Vec::with_capacity(depth - 1);
    let mut current = image.clone();
    for _ in 1..depth {
        let next = down(&current)?;
        bands.push(current.sub(&up(&next))?);
        current = next;
    }
    Ok(PyramidLevels { bands, residual: current })
}

pub fn reconstruct<T: Scalar>(p: &PyramidLevels<T>) -> Result<Tensor<T>> {
    let mut current = p.residual.clone();
    for band in p.bands.iter().rev() {
        let s = current.shape();
        if band.shape() != s.with_hw(2 * s.h(), 2 * s.w()) {
            return Err(Error::Dimension(format!(
                "reconstruct: level {} is not twice the size of {s}",
                band.shape()
            )));
        }
        current = band.add(&up(&current))?;
    }
    Ok(current)
}

/// How to undo [`pad_to_multiple`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl CropRecord {
    pub fn is_empty(&self) -> bool {
        self.pad_bottom == 0 && self.pad_right == 0
    }
}

fn padded_len(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Reflect-pad right and bottom so both spatial dims are multiples of `m`.
pub fn pad_to_multiple<T: Scalar>(image: &Tensor<T>, m: usize) -> Result<(Tensor<T>, CropRecord)> {
    if m == 0 {
        return Err(Error::Contract("pad multiple must be at least 1".into()));
    }
    let s = image.shape();
    let (h, w) = (s.h(), s.w());
    let (ph, pw) = (padded_len(h, m), padded_len(w, m));
    let rec = CropRecord { height: h, width: w, pad_bottom: ph - h, pad_right: pw - w };
    if rec.is_empty() {
        return Ok((image.clone(), rec));
    }
    if h == 0 || w == 0 {
        return Err(Error::Dimension(format!("cannot reflect-pad empty image {s}")));
    }
    let out = map_planes(image, s.with_hw(ph, pw), |p| {
        (0..ph)
            .flat_map(|i| (0..pw).map(move |j| (i, j)))
            .map(|(i, j)| p[reflect(i as isize, h) * w + reflect(j as isize, w)])
            .collect()
    });
    Ok((out, rec))
}

pub fn crop<T: Scalar>(image: &Tensor<T>, rec: &CropRecord) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.h() != rec.height + rec.pad_bottom || s.w() != rec.width + rec.pad_right {
        return Err(Error::Dimension(format!("crop record {rec:?} does not match {s}")));
    }
    let w = s.w();
    Ok(map_planes(image, s.with_hw(rec.height, rec.width), |p| {
        (0..rec.height).flat_map(|i| p[i * w..i * w + rec.width].iter().copied()).collect()
    }))
}
