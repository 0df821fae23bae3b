//! Slice-level forward and backward kernels. Shapes are validated by the
//! callers in `nn` and `autodiff`; everything here assumes consistent sizes.

use rayon::prelude::*;

use crate::tensor::{Mat, Scalar};

/// Upper bound on im2col buffer elements per chunk; keeps large-image
/// inference from materializing the whole unfolded input.
const COL_BUDGET: usize = 1 << 21;

/// Treats subnormal floats as zero on the current thread while alive.
/// Tiny gradients otherwise drift into the subnormal range, where every
/// multiply takes a slow microcode path.
pub(crate) struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    pub(crate) fn new() -> Self {
        const FTZ_DAZ: u32 = 0x8040;
        let mut saved = 0u32;
        // SAFETY: only the FTZ and DAZ bits of the SSE control register change.
        unsafe {
            std::arch::asm!("stmxcsr [{}]", in(reg) &mut saved, options(nostack));
            let flushed = saved | FTZ_DAZ;
            std::arch::asm!("ldmxcsr [{}]", in(reg) &flushed, options(nostack, readonly));
        }
        FlushDenormals { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    pub(crate) fn new() -> Self {
        FlushDenormals {}
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the register value read in `new`.
        unsafe {
            std::arch::asm!("ldmxcsr [{}]", in(reg) &self.saved, options(nostack, readonly));
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    pub fn w_out(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn rows_per_chunk(&self) -> usize {
        let per_row = self.col_rows() * self.w_out();
        (COL_BUDGET / per_row.max(1)).clamp(1, self.h_out().max(1))
    }
}

/// Unfold output rows `[r0, r1)` of one sample into `col`, laid out as
/// `(c_in*k*k) x ((r1-r0)*w_out)`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], r0: usize, r1: usize, col: &mut [T]) {
    let (wo, k, pad) = (g.w_out(), g.k, g.pad as isize);
    let len = (r1 - r0) * wo;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * len..][..len];
                for (ri, oy) in (r0..r1).enumerate() {
                    let iy = oy as isize + ky as isize - pad;
                    let dst = &mut row[ri * wo..(ri + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `col` back into `dx`.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], r0: usize, r1: usize, dx: &mut [T]) {
    let (wo, k, pad) = (g.w_out(), g.k, g.pad as isize);
    let len = (r1 - r0) * wo;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * len..][..len];
                for (ri, oy) in (r0..r1).enumerate() {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[ri * wo..(ri + 1) * wo].iter().enumerate() {
                        let ix = ox as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation with bias. `weight` is `(c_out, c_in, k, k)`.
pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let out_plane = ho * wo;
    let in_sample = g.c_in * g.h * g.w;
    let kk = g.col_rows();
    let rows = g.rows_per_chunk();
    let mut out = vec![T::zero(); g.n * g.c_out * out_plane];
    out.par_chunks_mut(g.c_out * out_plane.max(1)).enumerate().for_each(|(n, y)| {
        let _ftz = FlushDenormals::new();
        let xs = &x[n * in_sample..(n + 1) * in_sample];
        let mut col = vec![T::zero(); kk * rows * wo];
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + rows).min(ho);
            let len = (r1 - r0) * wo;
            im2col(g, xs, r0, r1, &mut col[..kk * len]);
            T::gemm(
                g.c_out,
                kk,
                len,
                Mat::new(weight, kk),
                Mat::new(&col[..kk * len], len),
                T::zero(),
                &mut y[r0 * wo..],
                out_plane,
            );
            r0 = r1;
        }
        for (co, plane) in y.chunks_mut(out_plane.max(1)).enumerate() {
            let b = bias[co];
            plane.iter_mut().for_each(|v| *v += b);
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let out_plane = ho * wo;
    let in_sample = g.c_in * g.h * g.w;
    let kk = g.col_rows();
    let rows = g.rows_per_chunk();
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let _ftz = FlushDenormals::new();
            let xs = &x[n * in_sample..(n + 1) * in_sample];
            let dys = &dy[n * g.c_out * out_plane..(n + 1) * g.c_out * out_plane];
            let mut dw = vec![T::zero(); g.c_out * kk];
            let mut dx = if need_dx { vec![T::zero(); in_sample] } else { Vec::new() };
            let mut col = vec![T::zero(); kk * rows * wo];
            let mut r0 = 0;
            while r0 < ho {
                let r1 = (r0 + rows).min(ho);
                let len = (r1 - r0) * wo;
                let col = &mut col[..kk * len];
                im2col(g, xs, r0, r1, col);
                // dW += dY_chunk * col^T
                T::gemm(g.c_out, len, kk, Mat::new(&dys[r0 * wo..], out_plane), Mat::t(col, len), T::one(), &mut dw, kk);
                if need_dx {
                    // dcol = W^T * dY_chunk
                    T::gemm(kk, g.c_out, len, Mat::t(weight, kk), Mat::new(&dys[r0 * wo..], out_plane), T::zero(), col, len);
                    col2im(g, col, r0, r1, &mut dx);
                }
                r0 = r1;
            }
            let db = (0..g.c_out)
                .map(|co| T::of(dys[co * out_plane..(co + 1) * out_plane].iter().map(|v| v.f64()).sum()))
                .collect();
            (dx, dw, db)
        })
        .collect();
    reduce_grads(per_sample, need_dx, g.c_out * kk, g.c_out)
}

fn reduce_grads<T: Scalar>(per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)>, need_dx: bool, nw: usize, nb: usize) -> ConvGrads<T> {
    let mut dw = vec![T::zero(); nw];
    let mut db = vec![T::zero(); nb];
    let mut dx = need_dx.then(Vec::new);
    for (sdx, sdw, sdb) in per_sample {
        dw.iter_mut().zip(&sdw).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&sdb).for_each(|(a, &b)| *a += b);
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&sdx);
        }
    }
    ConvGrads { dx, dw, db }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct UpGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

/// Kernel-2 stride-2 transposed convolution. `weight` is `(c_in, c_out, 2, 2)`.
pub(crate) fn transpose_conv_forward<T: Scalar>(g: &UpGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let hw = g.h * g.w;
    let (ho, wo) = (2 * g.h, 2 * g.w);
    let c4 = g.c_out * 4;
    let mut out = vec![T::zero(); g.n * g.c_out * ho * wo];
    out.par_chunks_mut((g.c_out * ho * wo).max(1)).enumerate().for_each(|(n, y)| {
        let _ftz = FlushDenormals::new();
        let xs = &x[n * g.c_in * hw..(n + 1) * g.c_in * hw];
        let mut cols = vec![T::zero(); c4 * hw];
        T::gemm(c4, g.c_in, hw, Mat::t(weight, c4), Mat::new(xs, hw), T::zero(), &mut cols, hw);
        for co in 0..g.c_out {
            let b = bias[co];
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let src = &cols[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                for i in 0..g.h {
                    let row = &mut y[co * ho * wo + (2 * i + dy) * wo..][..wo];
                    for j in 0..g.w {
                        row[2 * j + dx] = src[i * g.w + j] + b;
                    }
                }
            }
        }
    });
    out
}

/// Gather `(c_out*4) x (h*w)` columns of one sample's upsampled gradient.
fn gather_up<T: Scalar>(g: &UpGeom, dy: &[T], cols: &mut [T]) {
    let hw = g.h * g.w;
    let wo = 2 * g.w;
    for co in 0..g.c_out {
        for d in 0..4 {
            let (oy, ox) = (d / 2, d % 2);
            let dst = &mut cols[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
            for i in 0..g.h {
                let row = &dy[co * 4 * hw + (2 * i + oy) * wo..][..wo];
                for j in 0..g.w {
                    dst[i * g.w + j] = row[2 * j + ox];
                }
            }
        }
    }
}

/// Kernel-2 stride-2 convolution without bias, mapping `(n, c_out, 2h, 2w)`
/// to `(n, c_in, h, w)`: the linear adjoint of [`transpose_conv_forward`].
pub(crate) fn strided_conv_k2<T: Scalar>(g: &UpGeom, y: &[T], weight: &[T]) -> Vec<T> {
    let hw = g.h * g.w;
    let c4 = g.c_out * 4;
    let mut out = vec![T::zero(); g.n * g.c_in * hw];
    out.par_chunks_mut((g.c_in * hw).max(1)).enumerate().for_each(|(n, z)| {
        let _ftz = FlushDenormals::new();
        let ys = &y[n * c4 * hw..(n + 1) * c4 * hw];
        let mut cols = vec![T::zero(); c4 * hw];
        gather_up(g, ys, &mut cols);
        T::gemm(g.c_in, c4, hw, Mat::new(weight, c4), Mat::new(&cols, hw), T::zero(), z, hw);
    });
    out
}

pub(crate) fn transpose_conv_backward<T: Scalar>(
    g: &UpGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let hw = g.h * g.w;
    let c4 = g.c_out * 4;
    let per_sample: Vec<_> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let _ftz = FlushDenormals::new();
            let xs = &x[n * g.c_in * hw..(n + 1) * g.c_in * hw];
            let dys = &dy[n * c4 * hw..(n + 1) * c4 * hw];
            let mut cols = vec![T::zero(); c4 * hw];
            gather_up(g, dys, &mut cols);
            let mut dw = vec![T::zero(); g.c_in * c4];
            // dW (c_in x c4) = X (c_in x hw) * cols^T
            T::gemm(g.c_in, hw, c4, Mat::new(xs, hw), Mat::t(&cols, hw), T::zero(), &mut dw, c4);
            let dx = if need_dx {
                let mut dx = vec![T::zero(); g.c_in * hw];
                T::gemm(g.c_in, c4, hw, Mat::new(weight, c4), Mat::new(&cols, hw), T::zero(), &mut dx, hw);
                dx
            } else {
                Vec::new()
            };
            let db = (0..g.c_out)
                .map(|co| T::of(dys[co * 4 * hw..(co + 1) * 4 * hw].iter().map(|v| v.f64()).sum()))
                .collect();
            (dx, dw, db)
        })
        .collect();
    reduce_grads(per_sample, need_dx, g.c_in * c4, g.c_out)
}

/// Per-plane `(mean, 1/sqrt(var + eps))` with 64-bit accumulation.
pub(crate) fn plane_stats<T: Scalar>(x: &[T], plane: usize, eps: f64) -> Vec<(f64, f64)> {
    x.chunks(plane)
        .map(|p| {
            let n = p.len() as f64;
            let mean = p.iter().map(|v| v.f64()).sum::<f64>() / n;
            let var = p.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

pub(crate) fn instance_norm_forward<T: Scalar>(
    x: &[T],
    channels: usize,
    plane: usize,
    gamma: &[T],
    beta: &[T],
    stats: &[(f64, f64)],
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (idx, (dst, src)) in out.chunks_mut(plane).zip(x.chunks(plane)).enumerate() {
        let c = idx % channels;
        let (mean, inv) = stats[idx];
        let (g, b) = (gamma[c].f64(), beta[c].f64());
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = T::of(g * (s.f64() - mean) * inv + b);
        }
    }
    out
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn instance_norm_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    channels: usize,
    plane: usize,
    gamma: &[T],
    stats: &[(f64, f64)],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![0.0f64; channels];
    let mut dbeta = vec![0.0f64; channels];
    let m = plane as f64;
    for (idx, ((dxp, xp), dyp)) in dx.chunks_mut(plane).zip(x.chunks(plane)).zip(dy.chunks(plane)).enumerate() {
        let c = idx % channels;
        let (mean, inv) = stats[idx];
        let g = gamma[c].f64();
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for (&xv, &dv) in xp.iter().zip(dyp) {
            let xhat = (xv.f64() - mean) * inv;
            sum_dy += dv.f64();
            sum_dy_xhat += dv.f64() * xhat;
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        for ((d, &xv), &dv) in dxp.iter_mut().zip(xp).zip(dyp) {
            let xhat = (xv.f64() - mean) * inv;
            *d = T::of(g * inv / m * (m * dv.f64() - sum_dy - xhat * sum_dy_xhat));
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect();
    (dx, cast(dgamma), cast(dbeta))
}

#[inline]
pub(crate) fn leaky<T: Scalar>(v: T, slope: T) -> T {
    if v >= T::zero() {
        v
    } else {
        v * slope
    }
}

#[inline]
pub(crate) fn leaky_grad<T: Scalar>(v: T, slope: T) -> T {
    if v >= T::zero() {
        T::one()
    } else {
        slope
    }
}
