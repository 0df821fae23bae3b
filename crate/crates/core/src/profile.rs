//! Wall-clock latency together with the analytic cost counters.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_flops, LemmaModel};
use crate::tensor::Tensor;

/// Published GFLOPs of the (7,7,1) configuration.
pub const REFERENCE_GFLOPS: f64 = 17.83;
pub const WARMUP: usize = 10;

pub const FLOPS_CAVEAT: &str = "FLOPs = 2 x multiply-accumulates of every conv and transposed conv, plus one \
FLOP per element for each instance norm and leaky ReLU; the reference figure does not state its input \
resolution or whether it counts MACs or FLOPs, so the ratio is context, not a target.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub params: usize,
    pub macs: u64,
    pub gflops: f64,
    pub reference_gflops: f64,
    pub ratio_to_reference: f64,
    pub caveat: String,
}

impl ProfileReport {
    pub fn table(&self) -> String {
        let rows = [
            ("input", format!("{}x{}", self.height, self.width)),
            ("runs", format!("{} (+{} warmup)", self.repeats, self.warmup)),
            ("median latency", format!("{:.2} ms", self.median_ms)),
            ("p95 latency", format!("{:.2} ms", self.p95_ms)),
            ("parameters", self.params.to_string()),
            ("MACs", self.macs.to_string()),
            ("GFLOPs", format!("{:.3}", self.gflops)),
            ("reference GFLOPs", format!("{:.2} (ratio {:.2}x)", self.reference_gflops, self.ratio_to_reference)),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            s.push_str(&format!("{k:<18} {v}\n"));
        }
        s.push_str(&format!("note: {}\n", self.caveat));
        s
    }
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

pub fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Time `repeats` single-image forwards after `warmup` untimed ones.
pub fn profile_with(model: &LemmaModel, h: usize, w: usize, warmup: usize, repeats: usize) -> Result<ProfileReport> {
    if repeats == 0 {
        return Err(Error::Config("profile needs at least one timed run".into()));
    }
    let flops = count_flops(&model.config, h, w)?;
    let input = Tensor::full((1, 3, h, w), 0.5f32)?;
    for _ in 0..warmup {
        model.scores(&input)?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(model.scores(&input)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(ProfileReport {
        height: h,
        width: w,
        warmup,
        repeats,
        median_ms: median(&times),
        p95_ms: percentile(&times, 0.95),
        params: model.count_params(),
        macs: flops.total_macs,
        gflops: flops.gflops,
        reference_gflops: REFERENCE_GFLOPS,
        ratio_to_reference: flops.gflops / REFERENCE_GFLOPS,
        caveat: FLOPS_CAVEAT.into(),
    })
}

pub fn profile(model: &LemmaModel, h: usize, w: usize, repeats: usize) -> Result<ProfileReport> {
    profile_with(model, h, w, WARMUP, repeats)
}
