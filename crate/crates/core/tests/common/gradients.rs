//! Central finite differences in 64-bit against the tape's gradients. Each
//! check returns the worst relative error of every random instance.

use super::{activation_pattern, check_tape, finite_difference, rng, uniform, weighted_sum, FdStats};
use lemma::loss::{loss, LossConfig, LossKind};
use lemma::model::{LemmaConfig, LemmaModel};
use lemma::nn::{LEAKY_SLOPE, NORM_EPS};
use lemma::{LabelMap, Tape, Tensor, IGNORE_INDEX};
use rand::Rng;

pub const INSTANCES: u64 = 5;

/// Every differentiable unit with its check.
pub fn all_checks() -> Vec<(&'static str, fn() -> Vec<FdStats>)> {
    vec![
        ("concat_channels", check_concat),
        ("conv2d", check_conv2d),
        ("transpose_conv2d", check_transpose_conv2d),
        ("instance_norm", check_instance_norm),
        ("leaky_relu", check_leaky_relu),
        ("residual_block", check_residual_block),
        ("pyramid", check_pyramid_levels),
        ("focal_loss", check_focal_loss),
        ("dice_loss", check_dice_loss),
        ("ce_dice_loss", check_ce_dice_loss),
        ("tiny_model", check_full_tiny_model),
    ]
}


pub fn check_concat() -> Vec<FdStats> {
    (0..INSTANCES)
        .map(|seed| {
            let mut r = rng(100 + seed);
            let inputs = vec![uniform(&mut r, (1, 2, 4, 4), 1.0), uniform(&mut r, (1, 3, 4, 4), 1.0)];
            check_tape(inputs, |t, v| {
                let y = t.concat_channels(&[v[0], v[1]])?;
                weighted_sum(t, y, seed)
            }, 40, &mut r)
        })
        .collect()
}

pub fn check_conv2d() -> Vec<FdStats> {
    (0..INSTANCES)
        .map(|seed| {
            let mut r = rng(seed);
            let (n, ci, co) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
            let (h, w) = (r.gen_range(3..7), r.gen_range(3..7));
            let inputs = vec![
                uniform(&mut r, (n, ci, h, w), 1.0),
                uniform(&mut r, (co, ci, 3, 3), 0.5),
                uniform(&mut r, (1, co, 1, 1), 0.5),
            ];
            check_tape(inputs, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1)?;
                weighted_sum(t, y, seed)
            }, 40, &mut r)
        })
        .collect()
}

pub fn check_transpose_conv2d() -> Vec<FdStats> {
    (0..INSTANCES)
        .map(|seed| {
            let mut r = rng(10 + seed);
            let (n, ci, co) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
            let (h, w) = (r.gen_range(1..5), r.gen_range(1..5));
            let inputs = vec![
                uniform(&mut r, (n, ci, h, w), 1.0),
                uniform(&mut r, (ci, co, 2, 2), 0.5),
                uniform(&mut r, (1, co, 1, 1), 0.5),
            ];
            check_tape(inputs, |t, v| {
                let y = t.transpose_conv2d(v[0], v[1], v[2])?;
                weighted_sum(t, y, seed)
            }, 40, &mut r)
        })
        .collect()
}

pub fn check_instance_norm() -> Vec<FdStats> {
    (0..INSTANCES)
        .map(|seed| {
            let mut r = rng(20 + seed);
            let (n, c) = (r.gen_range(1..3), r.gen_range(1..4));
            let (h, w) = (r.gen_range(2..6), r.gen_range(2..6));
            let inputs = vec![
                uniform(&mut r, (n, c, h, w), 2.0),
                uniform(&mut r, (1, c, 1, 1), 1.5),
                uniform(&mut r, (1, c, 1, 1), 1.0),
            ];
            check_tape(inputs, |t, v| {
                let y = t.instance_norm(v[0], v[1], v[2], NORM_EPS)?;
                weighted_sum(t, y, seed)
            }, 40, &mut r)
        })
        .collect()
}

pub fn check_leaky_relu() -> Vec<FdStats> {
    (0..INSTANCES)
        .map(|seed| {
            let mut r = rng(30 + seed);
            let x = uniform(&mut r, (1, 2, 4, 4), 1.0);
            check_tape(vec![x], |t, v| {
                let y = t.leaky_relu(v[0], LEAKY_SLOPE)?;
                weighted_sum(t, y, seed)
            }, 40, &mut r)
        })
        .collect()
}

pub fn check_residual_block() -> Vec<FdStats> {
    (0..INSTANCES)
        .map(|seed| {
            let mut r = rng(40 + seed);
            let c = r.gen_range(1..4);
            let inputs = vec![
                uniform(&mut r, (1, c, 5, 4), 1.0),
                uniform(&mut r, (c, c, 3, 3), 0.5),
                uniform(&mut r, (1, c, 1, 1), 0.5),
                uniform(&mut r, (c, c, 3, 3), 0.5),
                uniform(&mut r, (1, c, 1, 1), 0.5),
            ];
            check_tape(inputs, |t, v| {
                let h = t.conv2d(v[0], v[1], v[2], 1)?;
                let h = t.leaky_relu(h, LEAKY_SLOPE)?;
                let h = t.conv2d(h, v[3], v[4], 1)?;
                let y = t.add(v[0], h)?;
                weighted_sum(t, y, seed)
            }, 40, &mut r)
        })
        .collect()
}

pub fn check_pyramid_levels() -> Vec<FdStats> {
    (0..INSTANCES)
        .map(|seed| {
            let mut r = rng(50 + seed);
            let x = uniform(&mut r, (1, 2, 8, 12), 1.0);
            check_tape(vec![x], |t, v| {
                let levels = t.pyramid(v[0], 3)?;
                let mut acc = weighted_sum(t, levels[0], seed)?;
                for (k, l) in levels.iter().enumerate().skip(1) {
                    let s = weighted_sum(t, *l, seed + k as u64)?;
                    acc = t.add(acc, s)?;
                }
                Ok(acc)
            }, 60, &mut r)
        })
        .collect()
}

fn random_labels(r: &mut impl Rng, n: usize, h: usize, w: usize, nc: u8, ignore: bool) -> LabelMap {
    let data = (0..n * h * w)
        .map(|_| if ignore && r.gen_bool(0.15) { IGNORE_INDEX } else { r.gen_range(0..nc) })
        .collect();
    LabelMap::new(n, h, w, data).unwrap()
}

fn check_loss(kind: LossKind, base_seed: u64) -> Vec<FdStats> {
    (0..INSTANCES)
        .map(|seed| {
            let mut r = rng(base_seed + seed);
            let nc = r.gen_range(2..5);
            let (n, h, w) = (r.gen_range(1..3), r.gen_range(2..5), r.gen_range(2..5));
            let target = random_labels(&mut r, n, h, w, nc as u8, seed % 2 == 1);
            let mut cfg = LossConfig::new(kind);
            if seed == 3 {
                cfg.gamma = 1.5;
                cfg.alpha = Some((0..nc).map(|c| 0.5 + c as f64 * 0.25).collect());
            }
            let scores = uniform(&mut r, (n, nc, h, w), 3.0);
            check_tape(vec![scores], |t, v| loss(t, v[0], &target, &cfg), 100, &mut r)
        })
        .collect()
}

pub fn check_focal_loss() -> Vec<FdStats> {
    check_loss(LossKind::Focal, 60)
}

pub fn check_dice_loss() -> Vec<FdStats> {
    check_loss(LossKind::Dice, 70)
}

pub fn check_ce_dice_loss() -> Vec<FdStats> {
    check_loss(LossKind::CeDice, 80)
}

/// Model gradient check on the mean of `m_final` over every parameter tensor
/// and the input image.
fn model_check(seed: u64) -> FdStats {
    let model: LemmaModel<f64> = LemmaModel::build(LemmaConfig::new(1, 1, 1, 3), seed).unwrap().cast();
    let mut r = rng(90 + seed);
    let image = uniform(&mut r, (1, 3, 8, 8), 1.0).map(|v| 0.5 + 0.5 * v);

    let objective = |tape: &mut Tape<f64>, m_final| {
        let n = tape.shape(m_final).numel() as f64;
        let s = tape.sum(m_final).unwrap();
        tape.mul_scalar(s, 1.0 / n).unwrap()
    };
    let mut tape = Tape::new();
    let x = tape.param(image.clone());
    let rec = model.record(&mut tape, x, true).unwrap();
    let out = objective(&mut tape, rec.trace.m_final);
    tape.backward(out).unwrap();
    let mut analytic = vec![tape.grad(x).unwrap().to_vec()];
    analytic.extend(rec.params.iter().map(|v| tape.grad(*v).unwrap().to_vec()));

    let mut values = vec![image];
    values.extend(model.params.iter().map(|(_, t)| t.clone()));
    let eval = |vals: &[Tensor<f64>]| {
        let mut m = model.clone();
        for ((_, t), v) in m.params.iter_mut().zip(&vals[1..]) {
            *t = v.clone();
        }
        let mut tape = Tape::new();
        let x = tape.constant(vals[0].clone());
        let rec = m.record(&mut tape, x, false).unwrap();
        let out = objective(&mut tape, rec.trace.m_final);
        (tape.value(out).data()[0], activation_pattern(&tape))
    };
    finite_difference(&mut values, &analytic, &eval, 6, &mut r)
}

pub fn check_full_tiny_model() -> Vec<FdStats> {
    (0..INSTANCES).map(model_check).collect()
}
