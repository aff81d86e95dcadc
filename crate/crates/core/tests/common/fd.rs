//! Finite-difference gradient suites shared by the gradient tests and the
//! acceptance gate.

use super::*;
use kws_core::model::{Model, ModelConfig, NormConfig, Pass};
use kws_core::tensor::{Tape, Tensor};
use rand::Rng;

pub type OpCase = (&'static str, fn(u64) -> f64);

fn conv2d(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (stride, pad) = (g.gen_range(1..=2), g.gen_range(0..=1));
    let x = random_tensor(&mut g, &[2, 2, 5, 4], -1.0, 1.0);
    let w = random_tensor(&mut g, &[3, 2, 3, 2], -1.0, 1.0);
    fd_check_op(&[x, w], seed, |t, v| t.conv2d(v[0], v[1], stride, pad))
}

fn pointwise(seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[2, 3, 3, 2], -1.0, 1.0);
    let w = random_tensor(&mut g, &[4, 3, 1, 1], -1.0, 1.0);
    fd_check_op(&[x, w], seed, |t, v| t.conv2d(v[0], v[1], 1, 0))
}

fn depthwise(seed: u64) -> f64 {
    let mut g = rng(seed);
    let stride = g.gen_range(1..=2);
    let x = random_tensor(&mut g, &[2, 3, 5, 5], -1.0, 1.0);
    let w = random_tensor(&mut g, &[3, 3, 3], -1.0, 1.0);
    fd_check_op(&[x, w], seed, |t, v| t.depthwise_conv2d(v[0], v[1], stride, 1))
}

fn relu6(seed: u64) -> f64 {
    let mut g = rng(seed);
    // keep every input at least 0.01 from the kinks at 0 and 6
    let x = Tensor::from_fn(&[2, 2, 3, 3], |_| {
        let v: f64 = g.gen_range(-2.0..8.0);
        if v.abs() < 0.01 || (v - 6.0).abs() < 0.01 {
            v + 0.05
        } else {
            v
        }
    });
    fd_check_op(&[x], seed, |t, v| Ok(t.relu6(v[0])))
}

fn add_scale_pool_reshape(seed: u64) -> f64 {
    let mut g = rng(seed);
    let a = random_tensor(&mut g, &[2, 3, 2, 2], -1.0, 1.0);
    let b = random_tensor(&mut g, &[2, 3, 2, 2], -1.0, 1.0);
    fd_check_op(&[a, b], seed, |t, v| {
        let s = t.add(v[0], v[1])?;
        let s = t.scale(s, 0.7);
        let p = t.global_avg_pool(s)?;
        t.reshape(p, vec![2, 3])
    })
}

fn sum(seed: u64) -> f64 {
    let c = random_tensor(&mut rng(seed), &[3, 2], -1.0, 1.0);
    fd_check_op(&[c], seed, |t, v| Ok(t.sum(v[0])))
}

fn batch_norm_train(seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[3, 2, 2, 3], -2.0, 2.0);
    let gamma = random_tensor(&mut g, &[2], 0.5, 1.5);
    let beta = random_tensor(&mut g, &[2], -0.5, 0.5);
    fd_check_op(&[x, gamma, beta], seed, |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0))
}

fn batch_norm_eval(seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[2, 2, 2, 2], -2.0, 2.0);
    let gamma = random_tensor(&mut g, &[2], 0.5, 1.5);
    let beta = random_tensor(&mut g, &[2], -0.5, 0.5);
    let mean = [g.gen_range(-1.0..1.0), g.gen_range(-1.0..1.0)];
    let var = [g.gen_range(0.5..2.0), g.gen_range(0.5..2.0)];
    fd_check_op(&[x, gamma, beta], seed, |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5))
}

fn simam(seed: u64) -> f64 {
    let x = random_tensor(&mut rng(seed), &[2, 2, 3, 3], -2.0, 2.0);
    fd_check_op(&[x], seed, |t, v| t.simam(v[0], 1e-4))
}

fn softmax_ce(seed: u64) -> f64 {
    let mut g = rng(seed);
    let logits = random_tensor(&mut g, &[4, 3], -3.0, 3.0);
    let labels: Vec<usize> = (0..4).map(|_| g.gen_range(0..3)).collect();
    fd_check_op(&[logits], seed, |t, v| t.softmax_cross_entropy(v[0], &labels))
}

/// Every differentiable tape op, each returning its worst relative error for a seed.
pub const OP_CASES: [OpCase; 10] = [
    ("conv2d", conv2d),
    ("pointwise", pointwise),
    ("depthwise", depthwise),
    ("relu6", relu6),
    ("add/scale/pool/reshape", add_scale_pool_reshape),
    ("sum", sum),
    ("batch_norm_train", batch_norm_train),
    ("batch_norm_eval", batch_norm_eval),
    ("simam", simam),
    ("softmax_ce", softmax_ce),
];

/// Loss of the full network in train-mode normalization with frozen
/// statistics, plus the relu6 region of every recorded activation.
fn model_loss(model: &mut Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> (f64, Vec<u8>) {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let logits = model.forward(&mut tape, xv, Pass::probe(0)).unwrap();
    let loss = tape.softmax_cross_entropy(logits, labels).unwrap();
    (tape.value(loss).data()[0], tape.relu6_regions())
}

pub struct FullModelFd {
    pub worst: f64,
    pub seeds: u64,
    /// Seeds redrawn because a perturbation crossed a relu6 kink.
    pub resampled: usize,
}

/// Checks 12 random coordinates (a third of them input coordinates) of
/// the `MN7-45` gradient with 3 classes on 20 x 40 inputs, for `seeds`
/// kink-free seeds.
pub fn full_model_fd(seeds: u64) -> FullModelFd {
    let cfg = ModelConfig {
        input_frames: 20,
        input_bins: 40,
        ..ModelConfig::mn7_45(3)
    };
    let mut out = FullModelFd { worst: 0.0, seeds: 0, resampled: 0 };
    let mut seed = 0u64;
    while out.seeds < seeds {
        let mut model: Model<f64> = Model::new(&cfg, NormConfig::default(), seed).unwrap();
        let mut g = rng(1000 + seed);
        seed += 1;
        // batch of four 1x20x40 inputs; a single example leaves the deepest
        // train-mode norms only two values per channel and an ill-conditioned loss
        let x = random_tensor(&mut g, &[4, 1, 20, 40], -1.0, 1.0).with_grad(true);
        let label: Vec<usize> = (0..4).map(|_| g.gen_range(0..3)).collect();

        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let pass = Pass {
            update_stats: false,
            ..Pass::train(0)
        };
        let logits = model.forward(&mut tape, xv, pass).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &label).unwrap();
        let grads = tape.gradients(loss).unwrap();
        let (_, regions) = model_loss(&mut model, &x, &label);

        let params: Vec<(usize, Vec<f64>)> = tape
            .params()
            .filter_map(|(key, v)| grads[v.index()].clone().map(|gr| (key, gr)))
            .collect();
        let input_grad = grads[xv.index()].clone().unwrap();

        let mut worst: f64 = 0.0;
        let mut kinked = false;
        for c in 0..12 {
            let (analytic, num) = if c % 3 == 0 {
                let i = g.gen_range(0..x.numel());
                let mut p = x.clone();
                p.data_mut()[i] += FD_STEP;
                let mut m = x.clone();
                m.data_mut()[i] -= FD_STEP;
                let (lp, rp) = model_loss(&mut model, &p, &label);
                let (lm, rm) = model_loss(&mut model, &m, &label);
                kinked |= rp != regions || rm != regions;
                (input_grad[i], (lp - lm) / (2.0 * FD_STEP))
            } else {
                let (key, gr) = &params[g.gen_range(0..params.len())];
                let i = g.gen_range(0..gr.len());
                let id = model.store().iter().nth(*key).unwrap().0;
                let orig = model.store().get(id).data()[i];
                model.store_mut().get_mut(id).data_mut()[i] = orig + FD_STEP;
                let (lp, rp) = model_loss(&mut model, &x, &label);
                model.store_mut().get_mut(id).data_mut()[i] = orig - FD_STEP;
                let (lm, rm) = model_loss(&mut model, &x, &label);
                model.store_mut().get_mut(id).data_mut()[i] = orig;
                kinked |= rp != regions || rm != regions;
                (gr[i], (lp - lm) / (2.0 * FD_STEP))
            };
            worst = worst.max(rel_err(analytic, num, FD_FLOOR));
        }
        if kinked {
            // the difference quotient is not a derivative across a kink
            out.resampled += 1;
            assert!(out.resampled < 50, "too many kink crossings");
            continue;
        }
        out.worst = out.worst.max(worst);
        out.seeds += 1;
    }
    out
}
