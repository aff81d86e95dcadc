#![allow(dead_code)]

pub mod fd;

use kws_core::model::{BlockSpec, ModelConfig};
use kws_core::tensor::{Tape, Tensor, Var};
use kws_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Direct loop over output positions, taps and channels.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    w: &[f64],
    [n, ci, h, wd]: [usize; 4],
    [co, kh, kw]: [usize; 3],
    stride: usize,
    pad: usize,
    depthwise: bool,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    let chans: Vec<usize> = if depthwise { vec![o] } else { (0..ci).collect() };
                    for &c in &chans {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let r = (i * stride + a) as isize - pad as isize;
                                let s = (j * stride + bb) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * ci + c) * h + r as usize) * wd + s as usize];
                                let wv = if depthwise {
                                    w[(o * kh + a) * kw + bb]
                                } else {
                                    w[((o * ci + c) * kh + a) * kw + bb]
                                };
                                acc += xv * wv;
                            }
                        }
                    }
                    y[((b * co + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (y, [n, co, oh, ow])
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-6;
pub const FD_FLOOR: f64 = 1e-3;

/// Largest relative error between tape gradients and central differences
/// of `sum(r * build(inputs))` for a fixed random `r`, over every input element.
pub fn fd_check_op(
    inputs: &[Tensor<f64>],
    seed: u64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |vals: &[Tensor<f64>], weights: Option<&[f64]>| -> (f64, Vec<Option<Vec<f64>>>, Vec<Var>, Vec<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(&t.clone().with_grad(true))).collect();
        let out = build(&mut tape, &vars).expect("op builds");
        let n = tape.value(out).numel();
        let r: Vec<f64> = match weights {
            Some(w) => w.to_vec(),
            None => {
                let mut g = rng(seed ^ 0xD07);
                (0..n).map(|_| g.gen_range(-1.0..1.0)).collect()
            }
        };
        let loss = tape.dot(out, &r).expect("dot");
        let l = tape.value(loss).data()[0];
        let grads = if weights.is_none() { tape.gradients(loss).expect("grads") } else { Vec::new() };
        (l, grads, vars, r)
    };
    let (_, grads, vars, r) = eval(inputs, None);
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads[vars[k].index()].clone().unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let num = (eval(&plus, Some(&r)).0 - eval(&minus, Some(&r)).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], num, FD_FLOOR));
        }
    }
    worst
}

/// Small bottleneck network used where the full `MN7-45` would be too slow.
pub fn tiny_config(num_classes: usize, frames: usize, bins: usize) -> ModelConfig {
    ModelConfig {
        stem_channels: 6,
        stem_stride: 2,
        blocks: vec![BlockSpec::new(2, 6, 1), BlockSpec::new(2, 8, 2)],
        last_channels: 16,
        num_classes,
        with_simam: true,
        simam_lambda: 1e-4,
        input_frames: frames,
        input_bins: bins,
    }
}

/// Operating point of threshold `t` by direct recount: accept iff score >= t.
pub fn brute_rates(pos: &[f64], neg: &[f64], t: f64) -> (f64, f64) {
    let far = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
    let frr = pos.iter().filter(|&&s| s < t).count() as f64 / pos.len() as f64;
    (far, frr)
}

/// Pairwise AUC: P(pos > neg) + 0.5 P(pos == neg).
pub fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &p in pos {
        for &q in neg {
            acc += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    acc / (pos.len() * neg.len()) as f64
}
