//! Segmentation losses over raw per-class scores.
//!
//! Each loss computes its value and the gradient wrt the scores in one pass
//! (64-bit accumulation) and records the pair on the tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Focal,
    Dice,
    CeDice,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "focal" => Ok(LossKind::Focal),
            "dice" => Ok(LossKind::Dice),
            "ce_dice" => Ok(LossKind::CeDice),
            other => Err(Error::Config(format!("unknown loss {other:?} (expected focal, dice or ce_dice)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Focal => "focal",
            LossKind::Dice => "dice",
            LossKind::CeDice => "ce_dice",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
    /// Optional per-class weights for the focal term.
    pub alpha: Option<Vec<f64>>,
    pub smooth: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { kind: LossKind::Focal, gamma: 2.0, alpha: None, smooth: 1.0, ce_weight: 0.5, dice_weight: 0.5 }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        LossConfig { kind, ..Default::default() }
    }

    pub fn validate(&self, nc: usize) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if let Some(a) = &self.alpha {
            if a.len() != nc || a.iter().any(|&w| !(w > 0.0)) {
                return Err(Error::Config(format!("focal alpha needs {nc} positive weights, got {a:?}")));
            }
        }
        if !(self.smooth >= 0.0) {
            return Err(Error::Config(format!("dice smooth must be >= 0, got {}", self.smooth)));
        }
        Ok(())
    }
}

/// Per-pixel channel softmax (max-subtracted).
pub fn softmax_channels<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    let s = scores.shape();
    let (nc, plane) = (s.c(), s.plane());
    let mut out = scores.zeros_like();
    let mut buf = vec![0.0f64; nc];
    for n in 0..s.n() {
        let src = scores.sample(n);
        let base = n * nc * plane;
        for i in 0..plane {
            softmax_at(src, plane, i, &mut buf);
            for (c, &p) in buf.iter().enumerate() {
                out.data_mut()[base + c * plane + i] = T::of(p);
            }
        }
    }
    out
}

/// Softmax of pixel `i` of one sample into `out`; returns the log-sum-exp
/// of the max-shifted scores and the max.
fn softmax_at<T: Scalar>(sample: &[T], plane: usize, i: usize, out: &mut [f64]) -> (f64, f64) {
    let max = (0..out.len()).map(|c| sample[c * plane + i].f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (c, o) in out.iter_mut().enumerate() {
        *o = (sample[c * plane + i].f64() - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
    (z.ln(), max)
}

fn is_valid(label: u8) -> bool {
    label != IGNORE_INDEX
}

/// Mean over non-ignored pixels of `-alpha_t (1 - p_t)^gamma ln p_t`.
pub fn focal_loss<T: Scalar>(tape: &mut Tape<T>, scores: Var, target: &LabelMap, cfg: &LossConfig) -> Result<Var> {
    let (value, grad) = focal_terms(tape.value(scores), target, cfg.gamma, cfg.alpha.as_deref())?;
    tape.fused_scalar(scores, value, grad)
}

/// Plain softmax cross-entropy, mean over non-ignored pixels.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, scores: Var, target: &LabelMap) -> Result<Var> {
    let x = tape.value(scores);
    target.check_against(x)?;
    let s = x.shape();
    let (nc, plane) = (s.c(), s.plane());
    let mut grad = vec![T::zero(); x.len()];
    let mut probs = vec![0.0; nc];
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n() {
        let sample = x.sample(n);
        for i in 0..plane {
            let t = target.data()[n * plane + i];
            if !is_valid(t) {
                continue;
            }
            let t = t as usize;
            let (lse, max) = softmax_at(sample, plane, i, &mut probs);
            total += lse + max - sample[t * plane + i].f64();
            count += 1;
            for (c, &p) in probs.iter().enumerate() {
                let delta = if c == t { 1.0 } else { 0.0 };
                grad[n * nc * plane + c * plane + i] = T::of(p - delta);
            }
        }
    }
    finish_mean(tape, scores, total, grad, count)
}

fn finish_mean<T: Scalar>(tape: &mut Tape<T>, scores: Var, total: f64, mut grad: Vec<T>, count: usize) -> Result<Var> {
    if count == 0 {
        return tape.fused_scalar(scores, 0.0, grad);
    }
    let inv = T::of(1.0 / count as f64);
    grad.iter_mut().for_each(|g| *g = *g * inv);
    tape.fused_scalar(scores, total / count as f64, grad)
}

fn focal_terms<T: Scalar>(
    x: &Tensor<T>,
    target: &LabelMap,
    gamma: f64,
    alpha: Option<&[f64]>,
) -> Result<(f64, Vec<T>)> {
    target.check_against(x)?;
    let s = x.shape();
    let (nc, plane) = (s.c(), s.plane());
    let mut grad = vec![T::zero(); x.len()];
    let mut probs = vec![0.0; nc];
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n() {
        let sample = x.sample(n);
        for i in 0..plane {
            let t = target.data()[n * plane + i];
            if !is_valid(t) {
                continue;
            }
            let t = t as usize;
            let (lse, max) = softmax_at(sample, plane, i, &mut probs);
            let log_pt = sample[t * plane + i].f64() - max - lse;
            let pt = probs[t];
            let a = alpha.map_or(1.0, |a| a[t]);
            let q = 1.0 - pt;
            let modulator = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
            total += -a * modulator * log_pt;
            // d/dz_j = -a [ q^g - g q^(g-1) p_t ln p_t ] (delta_tj - p_j)
            let slope = if gamma == 0.0 || q == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * pt * log_pt };
            let coeff = -a * (modulator - slope);
            count += 1;
            for (c, &p) in probs.iter().enumerate() {
                let delta = if c == t { 1.0 } else { 0.0 };
                grad[n * nc * plane + c * plane + i] = T::of(coeff * (delta - p));
            }
        }
    }
    if count > 0 {
        let inv = T::of(1.0 / count as f64);
        grad.iter_mut().for_each(|g| *g = *g * inv);
        total /= count as f64;
    }
    Ok((total, grad))
}

/// `1 - mean_c (2 sum p_c y_c + s) / (sum p_c + sum y_c + s)` over the whole
/// batch, ignored pixels excluded.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, scores: Var, target: &LabelMap, cfg: &LossConfig) -> Result<Var> {
    let x = tape.value(scores);
    target.check_against(x)?;
    let s = x.shape();
    let (nc, plane) = (s.c(), s.plane());
    let probs = softmax_channels(x);
    let mut inter = vec![0.0f64; nc];
    let mut psum = vec![0.0f64; nc];
    let mut ysum = vec![0.0f64; nc];
    for n in 0..s.n() {
        let p = probs.sample(n);
        for i in 0..plane {
            let t = target.data()[n * plane + i];
            if !is_valid(t) {
                continue;
            }
            for c in 0..nc {
                psum[c] += p[c * plane + i].f64();
            }
            inter[t as usize] += p[t as usize * plane + i].f64();
            ysum[t as usize] += 1.0;
        }
    }
    let smooth = cfg.smooth;
    let mut value = 0.0;
    let mut num = vec![0.0; nc];
    let mut den = vec![0.0; nc];
    for c in 0..nc {
        num[c] = 2.0 * inter[c] + smooth;
        den[c] = psum[c] + ysum[c] + smooth;
        value += if den[c] == 0.0 { 1.0 } else { num[c] / den[c] };
    }
    let value = 1.0 - value / nc as f64;

    let mut grad = vec![T::zero(); x.len()];
    let mut g = vec![0.0; nc];
    for n in 0..s.n() {
        let p = probs.sample(n);
        for i in 0..plane {
            let t = target.data()[n * plane + i];
            if !is_valid(t) {
                continue;
            }
            let mut dot = 0.0;
            for c in 0..nc {
                let y = if c == t as usize { 1.0 } else { 0.0 };
                g[c] = if den[c] == 0.0 {
                    0.0
                } else {
                    -(2.0 * y * den[c] - num[c]) / (den[c] * den[c]) / nc as f64
                };
                dot += g[c] * p[c * plane + i].f64();
            }
            for c in 0..nc {
                let pc = p[c * plane + i].f64();
                grad[n * nc * plane + c * plane + i] = T::of(pc * (g[c] - dot));
            }
        }
    }
    tape.fused_scalar(scores, value, grad)
}

/// `ce_weight * CE + dice_weight * dice`.
pub fn ce_dice_loss<T: Scalar>(tape: &mut Tape<T>, scores: Var, target: &LabelMap, cfg: &LossConfig) -> Result<Var> {
    let ce = cross_entropy(tape, scores, target)?;
    let dice = dice_loss(tape, scores, target, cfg)?;
    let ce = tape.mul_scalar(ce, cfg.ce_weight)?;
    let dice = tape.mul_scalar(dice, cfg.dice_weight)?;
    tape.add(ce, dice)
}

/// Dispatch on `cfg.kind`.
pub fn loss<T: Scalar>(tape: &mut Tape<T>, scores: Var, target: &LabelMap, cfg: &LossConfig) -> Result<Var> {
    match cfg.kind {
        LossKind::Focal => focal_loss(tape, scores, target, cfg),
        LossKind::Dice => dice_loss(tape, scores, target, cfg),
        LossKind::CeDice => ce_dice_loss(tape, scores, target, cfg),
    }
}
