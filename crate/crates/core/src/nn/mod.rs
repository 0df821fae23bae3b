//! The layer set: 3x3 convolution, kernel-2 stride-2 transposed convolution,
//! instance normalization, leaky ReLU and the residual block.
//!
//! The free functions here are plain forward passes over tensors. The
//! differentiable versions live on [`crate::autodiff::Tape`] and share the
//! same kernels.

pub(crate) mod kernels;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};
use kernels::{ConvGeom, UpGeom};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T: Scalar = f32> {
    /// `(out_ch, in_ch, k, k)`
    pub weight: Tensor<T>,
    /// `(1, out_ch, 1, 1)`
    pub bias: Tensor<T>,
    pub padding: usize,
}

impl<T: Scalar> Conv2dParams<T> {
    pub fn in_ch(&self) -> usize {
        self.weight.shape().c()
    }
    pub fn out_ch(&self) -> usize {
        self.weight.shape().n()
    }
    pub fn kernel(&self) -> usize {
        self.weight.shape().h()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransposeConv2dParams<T: Scalar = f32> {
    /// `(in_ch, out_ch, 2, 2)`
    pub weight: Tensor<T>,
    /// `(1, out_ch, 1, 1)`
    pub bias: Tensor<T>,
}

impl<T: Scalar> TransposeConv2dParams<T> {
    pub fn in_ch(&self) -> usize {
        self.weight.shape().n()
    }
    pub fn out_ch(&self) -> usize {
        self.weight.shape().c()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNormParams<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlockParams<T: Scalar = f32> {
    pub conv1: Conv2dParams<T>,
    pub conv2: Conv2dParams<T>,
}

pub(crate) fn conv_geom(x: Shape, w: Shape, bias: Shape, padding: usize) -> Result<ConvGeom> {
    let [c_out, c_in, kh, kw] = w.0;
    if kh != kw || kh == 0 {
        return Err(Error::Shape(format!("conv2d: kernel must be square and non-empty, weight {w}")));
    }
    if x.c() != c_in {
        return Err(Error::Shape(format!("conv2d: input {x} vs weight {w} (channel mismatch)")));
    }
    if bias.numel() != c_out {
        return Err(Error::Shape(format!("conv2d: bias {bias} vs weight {w}")));
    }
    if x.h() + 2 * padding < kh || x.w() + 2 * padding < kw {
        return Err(Error::Shape(format!("conv2d: input {x} smaller than kernel {w}")));
    }
    Ok(ConvGeom { n: x.n(), c_in, c_out, h: x.h(), w: x.w(), k: kh, pad: padding })
}

pub(crate) fn up_geom(x: Shape, w: Shape, bias: Shape) -> Result<UpGeom> {
    let [c_in, c_out, kh, kw] = w.0;
    if kh != 2 || kw != 2 {
        return Err(Error::Shape(format!("transpose_conv2d: weight {w} must have a 2x2 kernel")));
    }
    if x.c() != c_in {
        return Err(Error::Shape(format!("transpose_conv2d: input {x} vs weight {w} (channel mismatch)")));
    }
    if bias.numel() != c_out {
        return Err(Error::Shape(format!("transpose_conv2d: bias {bias} vs weight {w}")));
    }
    Ok(UpGeom { n: x.n(), c_in, c_out, h: x.h(), w: x.w() })
}

pub(crate) fn check_norm(x: Shape, gamma: Shape, beta: Shape) -> Result<()> {
    if gamma.numel() != x.c() || beta.numel() != x.c() {
        return Err(Error::Shape(format!("instance_norm: input {x} vs gamma {gamma} / beta {beta}")));
    }
    if x.plane() == 0 {
        return Err(Error::Shape(format!("instance_norm: input {x} has empty planes")));
    }
    Ok(())
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let g = conv_geom(x.shape(), p.weight.shape(), p.bias.shape(), p.padding)?;
    let out = kernels::conv2d_forward(&g, x.data(), p.weight.data(), p.bias.data());
    Tensor::from_vec((g.n, g.c_out, g.h_out(), g.w_out()), out)
}

pub fn transpose_conv2d<T: Scalar>(x: &Tensor<T>, p: &TransposeConv2dParams<T>) -> Result<Tensor<T>> {
    let g = up_geom(x.shape(), p.weight.shape(), p.bias.shape())?;
    let out = kernels::transpose_conv_forward(&g, x.data(), p.weight.data(), p.bias.data());
    Tensor::from_vec((g.n, g.c_out, 2 * g.h, 2 * g.w), out)
}

/// The kernel-2 stride-2 convolution whose adjoint is [`transpose_conv2d`]
/// (bias not applied). Maps `(n, out_ch, 2h, 2w)` to `(n, in_ch, h, w)`.
pub fn strided_conv2d_k2<T: Scalar>(y: &Tensor<T>, p: &TransposeConv2dParams<T>) -> Result<Tensor<T>> {
    let s = y.shape();
    if s.h() % 2 != 0 || s.w() % 2 != 0 {
        return Err(Error::Dimension(format!("strided_conv2d_k2: input {s} needs even spatial dims")));
    }
    let [c_in, c_out, _, _] = p.weight.shape().0;
    if s.c() != c_out {
        return Err(Error::Shape(format!("strided_conv2d_k2: input {s} vs weight {}", p.weight.shape())));
    }
    let g = UpGeom { n: s.n(), c_in, c_out, h: s.h() / 2, w: s.w() / 2 };
    let out = kernels::strided_conv_k2(&g, y.data(), p.weight.data());
    Tensor::from_vec((g.n, c_in, g.h, g.w), out)
}

pub fn instance_norm<T: Scalar>(x: &Tensor<T>, p: &InstanceNormParams<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    check_norm(s, p.gamma.shape(), p.beta.shape())?;
    let stats = kernels::plane_stats(x.data(), s.plane(), p.eps);
    let out = kernels::instance_norm_forward(x.data(), s.c(), s.plane(), p.gamma.data(), p.beta.data(), &stats);
    Tensor::from_vec(s, out)
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let slope = T::of(slope);
    x.map(|v| kernels::leaky(v, slope))
}

/// `x + conv2(leaky_relu(conv1(x)))`
pub fn residual_block<T: Scalar>(x: &Tensor<T>, p: &ResidualBlockParams<T>) -> Result<Tensor<T>> {
    if p.conv1.in_ch() != x.shape().c() || p.conv2.out_ch() != x.shape().c() {
        return Err(Error::Shape(format!(
            "residual_block: input {} vs block weights {} / {}",
            x.shape(),
            p.conv1.weight.shape(),
            p.conv2.weight.shape()
        )));
    }
    let h = leaky_relu(&conv2d(x, &p.conv1)?, LEAKY_SLOPE);
    x.add(&conv2d(&h, &p.conv2)?)
}

/// What [`init_params`] should build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 3x3, stride 1, padding 1.
    Conv { in_ch: usize, out_ch: usize },
    /// 2x2, stride 2.
    TransposeConv { in_ch: usize, out_ch: usize },
    InstanceNorm { channels: usize },
    ResidualBlock { channels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams<T: Scalar = f32> {
    Conv(Conv2dParams<T>),
    TransposeConv(TransposeConv2dParams<T>),
    InstanceNorm(InstanceNormParams<T>),
    ResidualBlock(ResidualBlockParams<T>),
}

/// Deterministic initialization of a single layer from `seed`.
pub fn init_params(kind: LayerKind, seed: u64) -> LayerParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        LayerKind::Conv { in_ch, out_ch } => LayerParams::Conv(init_conv(in_ch, out_ch, &mut rng)),
        LayerKind::TransposeConv { in_ch, out_ch } => {
            LayerParams::TransposeConv(init_transpose_conv(in_ch, out_ch, &mut rng))
        }
        LayerKind::InstanceNorm { channels } => LayerParams::InstanceNorm(init_instance_norm(channels)),
        LayerKind::ResidualBlock { channels } => LayerParams::ResidualBlock(ResidualBlockParams {
            conv1: init_conv(channels, channels, &mut rng),
            conv2: init_conv(channels, channels, &mut rng),
        }),
    }
}

/// He-uniform: bound `sqrt(6 / fan_in)`, giving variance `2 / fan_in`.
fn he_uniform(rng: &mut impl Rng, shape: Shape, fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
    let data = (0..shape.numel()).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(shape, data).expect("numel matches shape")
}

pub(crate) fn init_conv(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Conv2dParams<f32> {
    Conv2dParams {
        weight: he_uniform(rng, Shape::new(out_ch, in_ch, 3, 3), in_ch * 9),
        bias: Tensor::from_vec((1, out_ch, 1, 1), vec![0.0; out_ch]).expect("bias shape"),
        padding: 1,
    }
}

/// Each output pixel of a kernel-2 stride-2 transposed convolution sums
/// exactly `in_ch` products, so that is the fan-in.
pub(crate) fn init_transpose_conv(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> TransposeConv2dParams<f32> {
    TransposeConv2dParams {
        weight: he_uniform(rng, Shape::new(in_ch, out_ch, 2, 2), in_ch),
        bias: Tensor::from_vec((1, out_ch, 1, 1), vec![0.0; out_ch]).expect("bias shape"),
    }
}

pub(crate) fn init_instance_norm(channels: usize) -> InstanceNormParams<f32> {
    InstanceNormParams {
        gamma: Tensor::from_vec((1, channels, 1, 1), vec![1.0; channels]).expect("gamma shape"),
        beta: Tensor::from_vec((1, channels, 1, 1), vec![0.0; channels]).expect("beta shape"),
        eps: NORM_EPS,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Shape = shape.into();
        Tensor::from_vec(s, (0..s.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn conv_from(weight: Tensor<f64>, bias: Vec<f64>) -> Conv2dParams<f64> {
        let c = bias.len();
        Conv2dParams { weight, bias: Tensor::from_vec((1, c, 1, 1), bias).unwrap(), padding: 1 }
    }

    /// Direct nested-loop zero-padded cross-correlation.
    fn conv_oracle(x: &Tensor<f64>, p: &Conv2dParams<f64>) -> Tensor<f64> {
        let s = x.shape();
        let (co_n, k) = (p.out_ch(), p.kernel());
        let mut out = Tensor::zeros((s.n(), co_n, s.h(), s.w())).unwrap();
        for n in 0..s.n() {
            for co in 0..co_n {
                for y in 0..s.h() {
                    for xx in 0..s.w() {
                        let mut acc = p.bias.data()[co];
                        for ci in 0..s.c() {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - 1;
                                    let ix = xx as isize + kx as isize - 1;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h() && (ix as usize) < s.w() {
                                        acc += p.weight.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set(n, co, y, xx, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = rand_tensor((2, 1, 5, 7), 1);
        let mut w = Tensor::zeros((1, 1, 3, 3)).unwrap();
        w.set(0, 0, 1, 1, 1.0);
        let y = conv2d(&x, &conv_from(w, vec![0.0])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_all_ones_interior_nine_corner_four() {
        let x = Tensor::<f64>::ones((1, 1, 5, 5)).unwrap();
        let p = conv_from(Tensor::ones((1, 1, 3, 3)).unwrap(), vec![0.0]);
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.data(), conv_oracle(&x, &p).data());
        assert_eq!(y.at(0, 0, 2, 2), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 4, 4), 4.0);
        assert_eq!(y.at(0, 0, 0, 2), 6.0);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let x = rand_tensor((2, 3, 6, 5), 2);
        let p = conv_from(rand_tensor((4, 3, 3, 3), 3), vec![0.1, -0.2, 0.3, 0.0]);
        let got = conv2d(&x, &p).unwrap();
        assert!(got.max_abs_diff(&conv_oracle(&x, &p)).unwrap() < 1e-12);
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let x = rand_tensor((1, 2, 4, 4), 0);
        let p = conv_from(rand_tensor((1, 3, 3, 3), 1), vec![0.0]);
        assert!(matches!(conv2d(&x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn transpose_conv_zero_weight_gives_bias() {
        let x = rand_tensor((1, 2, 3, 4), 4);
        let p = TransposeConv2dParams {
            weight: Tensor::zeros((2, 3, 2, 2)).unwrap(),
            bias: Tensor::from_vec((1, 3, 1, 1), vec![0.5, -1.0, 2.0]).unwrap(),
        };
        let y = transpose_conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 6, 8));
        for c in 0..3 {
            assert!(y.plane(0, c).iter().all(|&v| v == p.bias.data()[c]));
        }
    }

    #[test]
    fn transpose_conv_impulse_response() {
        let mut x = Tensor::<f64>::zeros((1, 1, 3, 3)).unwrap();
        x.set(0, 0, 1, 2, 1.0);
        let w = Tensor::from_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = TransposeConv2dParams { weight: w, bias: Tensor::zeros((1, 1, 1, 1)).unwrap() };
        let y = transpose_conv2d(&x, &p).unwrap();
        assert_eq!(y.at(0, 0, 2, 4), 1.0);
        assert_eq!(y.at(0, 0, 2, 5), 2.0);
        assert_eq!(y.at(0, 0, 3, 4), 3.0);
        assert_eq!(y.at(0, 0, 3, 5), 4.0);
        assert_eq!(y.sum(), 10.0);
    }

    #[test]
    fn transpose_conv_is_adjoint_of_strided_conv() {
        for seed in 0..5 {
            let p = TransposeConv2dParams {
                weight: rand_tensor((3, 4, 2, 2), 10 + seed),
                bias: Tensor::zeros((1, 4, 1, 1)).unwrap(),
            };
            let x = rand_tensor((2, 3, 5, 6), 20 + seed);
            let y = rand_tensor((2, 4, 10, 12), 30 + seed);
            let lhs = strided_conv2d_k2(&y, &p).unwrap().dot(&x).unwrap();
            let rhs = y.dot(&transpose_conv2d(&x, &p).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn instance_norm_constant_plane_is_zero() {
        let x = Tensor::<f64>::full((1, 2, 4, 4), 3.0).unwrap();
        let p = InstanceNormParams {
            gamma: Tensor::ones((1, 2, 1, 1)).unwrap(),
            beta: Tensor::zeros((1, 2, 1, 1)).unwrap(),
            eps: NORM_EPS,
        };
        assert!(instance_norm(&x, &p).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn instance_norm_standardizes_planes() {
        let x = rand_tensor((2, 3, 8, 8), 5).map(|v| 4.0 * v + 1.5);
        let p = InstanceNormParams {
            gamma: Tensor::ones((1, 3, 1, 1)).unwrap(),
            beta: Tensor::zeros((1, 3, 1, 1)).unwrap(),
            eps: NORM_EPS,
        };
        let y = instance_norm(&x, &p).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let pl = y.plane(n, c);
                let mean = pl.iter().sum::<f64>() / pl.len() as f64;
                let var = pl.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / pl.len() as f64;
                assert!(mean.abs() < 1e-9);
                assert!((var - 1.0).abs() < 1e-4, "{var}");
            }
        }
    }

    #[test]
    fn leaky_relu_branches() {
        let x = Tensor::<f64>::from_vec((1, 1, 1, 3), vec![2.0, -1.0, 0.0]).unwrap();
        let y = leaky_relu(&x, 0.01);
        assert_eq!(y.data(), &[2.0, -0.01, 0.0]);
    }

    #[test]
    fn zeroed_residual_block_is_identity() {
        let x = rand_tensor((1, 4, 6, 6), 6);
        let zero = || conv_from(Tensor::zeros((4, 4, 3, 3)).unwrap(), vec![0.0; 4]);
        let p = ResidualBlockParams { conv1: zero(), conv2: zero() };
        let y = residual_block(&x, &p).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let kind = LayerKind::Conv { in_ch: 64, out_ch: 64 };
        let a = init_params(kind, 7);
        assert_eq!(a, init_params(kind, 7));
        let LayerParams::Conv(c) = a else { unreachable!() };
        assert!(c.bias.data().iter().all(|&b| b == 0.0));
        let w = c.weight.data();
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let want = 2.0 / (9.0 * 64.0);
        assert!((var - want).abs() / want < 0.2, "{var} vs {want}");
        let LayerParams::InstanceNorm(n) = init_params(LayerKind::InstanceNorm { channels: 3 }, 0) else {
            unreachable!()
        };
        assert_eq!(n.gamma.data(), &[1.0; 3]);
        assert_eq!(n.beta.data(), &[0.0; 3]);
    }
}
