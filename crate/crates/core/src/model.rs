//! The three-branch network.
//!
//! The input image is split into a depth-3 Laplacian pyramid `(L1, L2, L3)`
//! at full, half and quarter resolution.
//!
//! * Low-level branch (quarter res): stem conv 3->64 + instance norm + leaky
//!   ReLU, `nrb_l` residual blocks, transposed conv 64->64 + leaky ReLU giving
//!   `l3f` at half res. A side path upsamples raw `L3` with a 3->3
//!   transposed conv + leaky ReLU (`l3_up`).
//! * Middle branch (half res): `[L2; l3f; l3_up]` (70 ch) through stem conv
//!   70->64 + norm + leaky ReLU, `nrb_m` residual blocks and a post conv +
//!   leaky ReLU (`l_mfb`); `[l_mfb; l3f]` (128 ch) goes through a transposed
//!   conv 128->16 + leaky ReLU to full res (`l_out`).
//! * High branch (full res): `[L1; l_out]` (19 ch) through stem conv 19->16 +
//!   leaky ReLU, `nrb_h` residual blocks at 16 ch and a 3x3 head conv to
//!   `nc` class scores.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::nn::{self, LEAKY_SLOPE, NORM_EPS};
use crate::tensor::{Scalar, Tensor};

pub const PYRAMID_DEPTH: usize = 3;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LemmaConfig {
    pub nrb_l: usize,
    pub nrb_m: usize,
    pub nrb_h: usize,
    pub nc: usize,
    pub width_low: usize,
    pub width_high: usize,
}

impl LemmaConfig {
    pub fn new(nrb_l: usize, nrb_m: usize, nrb_h: usize, nc: usize) -> Self {
        LemmaConfig { nrb_l, nrb_m, nrb_h, nc, width_low: 64, width_high: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nc < 2 || self.nc > 255 {
            return Err(Error::Config(format!("class count must be in [2, 255], got {}", self.nc)));
        }
        if self.width_low == 0 || self.width_high == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Residual block counts written `L,M,H`.
    pub fn blocks(&self) -> BlockCounts {
        BlockCounts(self.nrb_l, self.nrb_m, self.nrb_h)
    }
}

/// Residual block counts per branch, parsed from and printed as `"L,M,H"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockCounts(pub usize, pub usize, pub usize);

impl BlockCounts {
    pub fn config(self, nc: usize) -> LemmaConfig {
        LemmaConfig::new(self.0, self.1, self.2, nc)
    }
}

impl FromStr for BlockCounts {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let parse = |p: &str| p.parse::<usize>().ok();
        match parts.as_slice() {
            [l, m, h] => match (parse(l), parse(m), parse(h)) {
                (Some(l), Some(m), Some(h)) => Ok(BlockCounts(l, m, h)),
                _ => Err(Error::Config(format!("block counts must be non-negative integers: {s:?}"))),
            },
            _ => Err(Error::Config(format!("expected three comma-separated block counts \"L,M,H\", got {s:?}"))),
        }
    }
}

impl fmt::Display for BlockCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.0, self.1, self.2)
    }
}

/// Ordered, uniquely named learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push((name, t.with_requires_grad(true)));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total learnable element count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }
}

/// Intermediate feature maps of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<V> {
    /// Low-level branch output, half res, `width_low` channels.
    pub l3f: V,
    /// Upsampled raw residual level, half res, 3 channels.
    pub l3_up: V,
    /// `[L2; l3f; l3_up]`, half res.
    pub l_concat: V,
    /// Middle branch core output, half res, `width_low` channels.
    pub l_mfb: V,
    /// `[l_mfb; l3f]`, half res.
    pub l_cc_mid: V,
    /// Middle branch output at full res, `width_high` channels.
    pub l_out: V,
    /// Class scores at full res (no softmax).
    pub m_final: V,
}

impl ForwardTrace<Var> {
    fn resolve<T: Scalar>(&self, tape: &Tape<T>) -> ForwardTrace<Tensor<T>> {
        let v = |x: Var| tape.value(x).clone();
        ForwardTrace {
            l3f: v(self.l3f),
            l3_up: v(self.l3_up),
            l_concat: v(self.l_concat),
            l_mfb: v(self.l_mfb),
            l_cc_mid: v(self.l_cc_mid),
            l_out: v(self.l_out),
            m_final: v(self.m_final),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaModel<T: Scalar = f32> {
    pub config: LemmaConfig,
    pub params: ParamStore<T>,
}

/// Output of [`LemmaModel::record`].
pub struct Recorded {
    pub trace: ForwardTrace<Var>,
    /// One entry per parameter, in store order.
    pub params: Vec<Var>,
}

fn insert_conv<T: Scalar>(store: &mut ParamStore<T>, name: &str, p: nn::Conv2dParams<T>) -> Result<()> {
    store.insert(format!("{name}.weight"), p.weight)?;
    store.insert(format!("{name}.bias"), p.bias)
}

fn insert_up<T: Scalar>(store: &mut ParamStore<T>, name: &str, p: nn::TransposeConv2dParams<T>) -> Result<()> {
    store.insert(format!("{name}.weight"), p.weight)?;
    store.insert(format!("{name}.bias"), p.bias)
}

fn insert_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, p: nn::InstanceNormParams<T>) -> Result<()> {
    store.insert(format!("{name}.gamma"), p.gamma)?;
    store.insert(format!("{name}.beta"), p.beta)
}

impl LemmaModel<f32> {
    /// Construct and initialize every layer, deterministically for `seed`.
    pub fn build(config: LemmaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (wl, wh, nc) = (config.width_low, config.width_high, config.nc);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();

        insert_conv(&mut s, "lfb.stem.conv", nn::init_conv(IMAGE_CHANNELS, wl, &mut rng))?;
        insert_norm(&mut s, "lfb.stem.norm", nn::init_instance_norm(wl))?;
        for i in 0..config.nrb_l {
            insert_conv(&mut s, &format!("lfb.res{i}.conv1"), nn::init_conv(wl, wl, &mut rng))?;
            insert_conv(&mut s, &format!("lfb.res{i}.conv2"), nn::init_conv(wl, wl, &mut rng))?;
        }
        insert_up(&mut s, "lfb.tail", nn::init_transpose_conv(wl, wl, &mut rng))?;
        insert_up(&mut s, "side.up", nn::init_transpose_conv(IMAGE_CHANNELS, IMAGE_CHANNELS, &mut rng))?;

        insert_conv(&mut s, "mfb.stem.conv", nn::init_conv(2 * IMAGE_CHANNELS + wl, wl, &mut rng))?;
        insert_norm(&mut s, "mfb.stem.norm", nn::init_instance_norm(wl))?;
        for i in 0..config.nrb_m {
            insert_conv(&mut s, &format!("mfb.res{i}.conv1"), nn::init_conv(wl, wl, &mut rng))?;
            insert_conv(&mut s, &format!("mfb.res{i}.conv2"), nn::init_conv(wl, wl, &mut rng))?;
        }
        insert_conv(&mut s, "mfb.post", nn::init_conv(wl, wl, &mut rng))?;
        insert_up(&mut s, "mfb.up", nn::init_transpose_conv(2 * wl, wh, &mut rng))?;

        insert_conv(&mut s, "hfb.stem", nn::init_conv(IMAGE_CHANNELS + wh, wh, &mut rng))?;
        for i in 0..config.nrb_h {
            insert_conv(&mut s, &format!("hfb.res{i}.conv1"), nn::init_conv(wh, wh, &mut rng))?;
            insert_conv(&mut s, &format!("hfb.res{i}.conv2"), nn::init_conv(wh, wh, &mut rng))?;
        }
        insert_conv(&mut s, "hfb.head", nn::init_conv(wh, nc, &mut rng))?;

        Ok(LemmaModel { config, params: s })
    }
}

/// Looks up recorded parameter handles by name.
struct ParamVars<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    vars: &'a [Var],
}

impl<T: Scalar> ParamVars<'_, T> {
    fn get(&self, name: &str) -> Result<Var> {
        self.store
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }
}

impl<T: Scalar> LemmaModel<T> {
    pub fn cast<U: Scalar>(&self) -> LemmaModel<U> {
        LemmaModel { config: self.config, params: self.params.cast() }
    }

    /// Exact learnable element count.
    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    /// Record a forward pass of `image` on `tape`. Parameters are recorded
    /// as gradient-tracked leaves when `track_params` is set.
    pub fn record(&self, tape: &mut Tape<T>, image: Var, track_params: bool) -> Result<Recorded> {
        let s = tape.shape(image);
        if s.c() != IMAGE_CHANNELS {
            return Err(Error::Shape(format!("model expects {IMAGE_CHANNELS}-channel images, got {s}")));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone().with_requires_grad(track_params)))
            .collect();
        let pv = ParamVars { store: &self.params, vars: &params };
        let cfg = self.config;

        let levels = tape.pyramid(image, PYRAMID_DEPTH)?;
        let (l1, l2, l3) = (levels[0], levels[1], levels[2]);

        let conv = |tape: &mut Tape<T>, x: Var, name: &str| -> Result<Var> {
            tape.conv2d(x, pv.get(&format!("{name}.weight"))?, pv.get(&format!("{name}.bias"))?, 1)
        };
        let up = |tape: &mut Tape<T>, x: Var, name: &str| -> Result<Var> {
            let y = tape.transpose_conv2d(x, pv.get(&format!("{name}.weight"))?, pv.get(&format!("{name}.bias"))?)?;
            tape.leaky_relu(y, LEAKY_SLOPE)
        };
        let norm = |tape: &mut Tape<T>, x: Var, name: &str| -> Result<Var> {
            tape.instance_norm(x, pv.get(&format!("{name}.gamma"))?, pv.get(&format!("{name}.beta"))?, NORM_EPS)
        };
        let chain = |tape: &mut Tape<T>, mut x: Var, prefix: &str, count: usize| -> Result<Var> {
            for i in 0..count {
                let h = conv(tape, x, &format!("{prefix}.res{i}.conv1"))?;
                let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
                let h = conv(tape, h, &format!("{prefix}.res{i}.conv2"))?;
                x = tape.add(x, h)?;
            }
            Ok(x)
        };

        // Low-level branch.
        let x = conv(tape, l3, "lfb.stem.conv")?;
        let x = norm(tape, x, "lfb.stem.norm")?;
        let x = tape.leaky_relu(x, LEAKY_SLOPE)?;
        let x = chain(tape, x, "lfb", cfg.nrb_l)?;
        let l3f = up(tape, x, "lfb.tail")?;
        let l3_up = up(tape, l3, "side.up")?;

        // Middle branch.
        let l_concat = tape.concat_channels(&[l2, l3f, l3_up])?;
        let x = conv(tape, l_concat, "mfb.stem.conv")?;
        let x = norm(tape, x, "mfb.stem.norm")?;
        let x = tape.leaky_relu(x, LEAKY_SLOPE)?;
        let x = chain(tape, x, "mfb", cfg.nrb_m)?;
        let x = conv(tape, x, "mfb.post")?;
        let l_mfb = tape.leaky_relu(x, LEAKY_SLOPE)?;
        let l_cc_mid = tape.concat_channels(&[l_mfb, l3f])?;
        let l_out = up(tape, l_cc_mid, "mfb.up")?;

        // High-level branch.
        let x = tape.concat_channels(&[l1, l_out])?;
        let x = conv(tape, x, "hfb.stem")?;
        let x = tape.leaky_relu(x, LEAKY_SLOPE)?;
        let x = chain(tape, x, "hfb", cfg.nrb_h)?;
        let m_final = conv(tape, x, "hfb.head")?;

        Ok(Recorded { trace: ForwardTrace { l3f, l3_up, l_concat, l_mfb, l_cc_mid, l_out, m_final }, params })
    }

    /// Untracked forward pass returning every intermediate map.
    pub fn forward(&self, image: &Tensor<T>) -> Result<ForwardTrace<Tensor<T>>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let rec = self.record(&mut tape, x, false)?;
        Ok(rec.trace.resolve(&tape))
    }

    /// Class scores only.
    pub fn scores(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let rec = self.record(&mut tape, x, false)?;
        Ok(tape.value(rec.trace.m_final).clone())
    }

    pub fn predict_mask(&self, image: &Tensor<T>) -> Result<LabelMap> {
        argmax_channels(&self.scores(image)?)
    }
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn argmax_channels<T: Scalar>(scores: &Tensor<T>) -> Result<LabelMap> {
    let s = scores.shape();
    if s.c() == 0 || s.c() > 256 {
        return Err(Error::Shape(format!("argmax needs 1..=256 channels, got {s}")));
    }
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n() * plane);
    for n in 0..s.n() {
        let sample = scores.sample(n);
        for i in 0..plane {
            let mut best = 0;
            for c in 1..s.c() {
                if sample[c * plane + i] > sample[best * plane + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    LabelMap::new(s.n(), s.h(), s.w(), out)
}

/// Learnable element count from the layer formulas alone, without building.
pub fn closed_form_params(c: &LemmaConfig) -> usize {
    let conv = |cin: usize, cout: usize| cin * cout * 9 + cout;
    let up = |cin: usize, cout: usize| cin * cout * 4 + cout;
    let (wl, wh, nc, img) = (c.width_low, c.width_high, c.nc, IMAGE_CHANNELS);
    conv(img, wl)
        + 2 * wl
        + c.nrb_l * 2 * conv(wl, wl)
        + up(wl, wl)
        + up(img, img)
        + conv(2 * img + wl, wl)
        + 2 * wl
        + c.nrb_m * 2 * conv(wl, wl)
        + conv(wl, wl)
        + up(2 * wl, wh)
        + conv(img + wh, wh)
        + c.nrb_h * 2 * conv(wh, wh)
        + conv(wh, nc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKindTag {
    Conv,
    TransposeConv,
    InstanceNorm,
    LeakyRelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKindTag,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub height: usize,
    pub width: usize,
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_flops: u64,
    pub gflops: f64,
}

/// Analytic cost of one forward pass at `h x w`.
///
/// Convolutions cost `k^2 * c_in * c_out * h_out * w_out` MACs. A kernel-2
/// stride-2 transposed convolution touches each output pixel once per input
/// channel, i.e. `k^2 * c_in * c_out * h_in * w_in` MACs (the count of its
/// adjoint strided convolution). FLOPs are `2 * MACs`; instance norm and
/// leaky ReLU add `h * w * c` FLOPs each.
pub fn count_flops(config: &LemmaConfig, h: usize, w: usize) -> Result<FlopsReport> {
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!("profile size {h}x{w} must be a non-zero multiple of 4")));
    }
    let mut layers = Vec::new();
    let (wl, wh, img) = (config.width_low, config.width_high, IMAGE_CHANNELS);
    let (hq, wq, hh, whf) = (h / 4, w / 4, h / 2, w / 2);

    let conv = |layers: &mut Vec<LayerCost>, name: String, cin: usize, cout: usize, hh: usize, ww: usize| {
        let macs = (9 * cin * cout * hh * ww) as u64;
        layers.push(LayerCost {
            name,
            kind: LayerKindTag::Conv,
            kernel: 3,
            in_ch: cin,
            out_ch: cout,
            h_in: hh,
            w_in: ww,
            h_out: hh,
            w_out: ww,
            macs,
            flops: 2 * macs,
        });
    };
    let up = |layers: &mut Vec<LayerCost>, name: &str, cin: usize, cout: usize, hi: usize, wi: usize| {
        let macs = (4 * cin * cout * hi * wi) as u64;
        layers.push(LayerCost {
            name: name.into(),
            kind: LayerKindTag::TransposeConv,
            kernel: 2,
            in_ch: cin,
            out_ch: cout,
            h_in: hi,
            w_in: wi,
            h_out: 2 * hi,
            w_out: 2 * wi,
            macs,
            flops: 2 * macs,
        });
    };
    let elementwise = |layers: &mut Vec<LayerCost>, name: String, kind: LayerKindTag, c: usize, hh: usize, ww: usize| {
        layers.push(LayerCost {
            name,
            kind,
            kernel: 0,
            in_ch: c,
            out_ch: c,
            h_in: hh,
            w_in: ww,
            h_out: hh,
            w_out: ww,
            macs: 0,
            flops: (c * hh * ww) as u64,
        });
    };
    let act = LayerKindTag::LeakyRelu;
    let chain = |layers: &mut Vec<LayerCost>, prefix: &str, n: usize, c: usize, hh: usize, ww: usize| {
        for i in 0..n {
            conv(layers, format!("{prefix}.res{i}.conv1"), c, c, hh, ww);
            elementwise(layers, format!("{prefix}.res{i}.act"), act, c, hh, ww);
            conv(layers, format!("{prefix}.res{i}.conv2"), c, c, hh, ww);
        }
    };

    conv(&mut layers, "lfb.stem.conv".into(), img, wl, hq, wq);
    elementwise(&mut layers, "lfb.stem.norm".into(), LayerKindTag::InstanceNorm, wl, hq, wq);
    elementwise(&mut layers, "lfb.stem.act".into(), act, wl, hq, wq);
    chain(&mut layers, "lfb", config.nrb_l, wl, hq, wq);
    up(&mut layers, "lfb.tail", wl, wl, hq, wq);
    elementwise(&mut layers, "lfb.tail.act".into(), act, wl, hh, whf);
    up(&mut layers, "side.up", img, img, hq, wq);
    elementwise(&mut layers, "side.up.act".into(), act, img, hh, whf);

    conv(&mut layers, "mfb.stem.conv".into(), 2 * img + wl, wl, hh, whf);
    elementwise(&mut layers, "mfb.stem.norm".into(), LayerKindTag::InstanceNorm, wl, hh, whf);
    elementwise(&mut layers, "mfb.stem.act".into(), act, wl, hh, whf);
    chain(&mut layers, "mfb", config.nrb_m, wl, hh, whf);
    conv(&mut layers, "mfb.post".into(), wl, wl, hh, whf);
    elementwise(&mut layers, "mfb.post.act".into(), act, wl, hh, whf);
    up(&mut layers, "mfb.up", 2 * wl, wh, hh, whf);
    elementwise(&mut layers, "mfb.up.act".into(), act, wh, h, w);

    conv(&mut layers, "hfb.stem".into(), img + wh, wh, h, w);
    elementwise(&mut layers, "hfb.stem.act".into(), act, wh, h, w);
    chain(&mut layers, "hfb", config.nrb_h, wh, h, w);
    conv(&mut layers, "hfb.head".into(), wh, config.nc, h, w);

    let total_macs = layers.iter().map(|l| l.macs).sum();
    let total_flops = layers.iter().map(|l| l.flops).sum::<u64>();
    Ok(FlopsReport { height: h, width: w, layers, total_macs, total_flops, gflops: total_flops as f64 / 1e9 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn parse_block_counts() {
        assert_eq!("7,7,1".parse::<BlockCounts>().unwrap(), BlockCounts(7, 7, 1));
        assert_eq!(BlockCounts(6, 7, 4).to_string(), "6,7,4");
        for bad in ["7,7", "7,7,1,1", "a,b,c", "-1,2,3", ""] {
            assert!(bad.parse::<BlockCounts>().is_err(), "{bad}");
        }
    }

    #[test]
    fn param_counts_match_closed_form() {
        for (cfg, want) in [
            (LemmaConfig::new(7, 7, 1, 5), 1_146_156),
            (LemmaConfig::new(6, 7, 4, 4), 1_086_075),
            (LemmaConfig::new(0, 0, 0, 2), 107_097),
        ] {
            let m = LemmaModel::build(cfg, 0).unwrap();
            assert_eq!(m.count_params(), want);
            assert_eq!(closed_form_params(&cfg), want);
        }
    }

    #[test]
    fn build_is_deterministic_and_names_unique() {
        let cfg = LemmaConfig::new(1, 2, 1, 3);
        let a = LemmaModel::build(cfg, 42).unwrap();
        assert_eq!(a, LemmaModel::build(cfg, 42).unwrap());
        assert_ne!(a, LemmaModel::build(cfg, 43).unwrap());
        let mut names: Vec<&str> = a.params.names().collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn invalid_config() {
        assert!(LemmaModel::build(LemmaConfig::new(1, 1, 1, 1), 0).is_err());
    }

    #[test]
    fn forward_shapes() {
        let m = LemmaModel::build(LemmaConfig::new(0, 1, 0, 5), 1).unwrap();
        let x = Tensor::<f32>::full((2, 3, 16, 24), 0.5).unwrap();
        let t = m.forward(&x).unwrap();
        assert_eq!(t.l_concat.shape(), Shape::new(2, 70, 8, 12));
        assert_eq!(t.l_cc_mid.shape(), Shape::new(2, 128, 8, 12));
        assert_eq!(t.l_out.shape(), Shape::new(2, 16, 16, 24));
        assert_eq!(t.m_final.shape(), Shape::new(2, 5, 16, 24));
    }

    #[test]
    fn forward_input_errors() {
        let m = LemmaModel::build(LemmaConfig::new(0, 0, 0, 2), 1).unwrap();
        let bad_c = Tensor::<f32>::zeros((1, 1, 8, 8)).unwrap();
        assert!(matches!(m.forward(&bad_c), Err(Error::Shape(_))));
        let bad_hw = Tensor::<f32>::zeros((1, 3, 10, 8)).unwrap();
        assert!(matches!(m.forward(&bad_hw), Err(Error::Dimension(_))));
    }

    #[test]
    fn argmax_rules() {
        let mut s = Tensor::<f32>::zeros((1, 3, 2, 2)).unwrap();
        assert!(argmax_channels(&s).unwrap().data().iter().all(|&v| v == 0));
        for i in 0..4 {
            s.data_mut()[2 * 4 + i] = 1.0;
        }
        assert!(argmax_channels(&s).unwrap().data().iter().all(|&v| v == 2));
    }

    #[test]
    fn single_conv_macs() {
        // One 64->64 conv at 128x96 is one residual-block conv of the
        // low-level branch at 512x384 input.
        let r = count_flops(&LemmaConfig::new(1, 0, 0, 2), 512, 384).unwrap();
        let l = r.layers.iter().find(|l| l.name == "lfb.res0.conv1").unwrap();
        assert_eq!((l.h_out, l.w_out), (128, 96));
        assert_eq!(l.macs, 452_984_832);
    }
}
