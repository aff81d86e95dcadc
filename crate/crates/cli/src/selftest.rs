//! Fast invariant checks runnable from the installed binary.

use kws_core::adversary::{linf_distance, pgd_attack, AttackConfig};
use kws_core::evaluator::{auc, det_curve};
use kws_core::model::{decode_checkpoint, encode_checkpoint, simam, BlockSpec, Model, ModelConfig, NormConfig, Pass};
use kws_core::seed::rng_for;
use kws_core::tensor::{Tape, Tensor};
use kws_core::{KwsError, Result};
use rand::Rng;

type Check = (&'static str, fn() -> std::result::Result<(), String>);

pub fn run() -> Result<()> {
    let checks: [Check; 7] = [
        ("MN7-45 parameter counts", param_counts),
        ("SimAM on constant channels", simam_constant),
        ("convolution against direct loops", conv_direct),
        ("gradients against finite differences", gradients),
        ("PGD stays inside the ball", pgd_ball),
        ("evaluation reads branch 0", eval_branch_zero),
        ("AUC against pair counting", auc_pairs),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("ok      {name}"),
            Err(msg) => {
                println!("FAILED  {name}: {msg}");
                failed += 1;
            }
        }
    }
    match failed {
        0 => Ok(()),
        n => Err(KwsError::Numeric(format!("{n} selftest check(s) failed"))),
    }
}

fn tiny() -> ModelConfig {
    ModelConfig {
        stem_channels: 6,
        stem_stride: 2,
        blocks: vec![BlockSpec::new(2, 6, 1), BlockSpec::new(2, 8, 2)],
        last_channels: 16,
        num_classes: 3,
        with_simam: true,
        simam_lambda: 1e-4,
        input_frames: 12,
        input_bins: 10,
    }
}

fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut g = rng_for(&[seed]);
    Tensor::from_fn(shape, |_| g.gen_range(-1.0..1.0))
}

fn err(e: KwsError) -> String {
    e.to_string()
}

fn param_counts() -> std::result::Result<(), String> {
    let m = Model::<f32>::new(&ModelConfig::mn7_45(2), NormConfig::default(), 0).map_err(err)?;
    let total = m.total_conv_params();
    if total != 247_675 {
        return Err(format!("total {total}"));
    }
    Ok(())
}

fn simam_constant() -> std::result::Result<(), String> {
    let y = simam(&Tensor::<f64>::full(&[1, 2, 3, 3], 2.0), 1e-4).map_err(err)?;
    let expect = 2.0 / (1.0 + (-0.5f64).exp());
    match y.data().iter().all(|v| (v - expect).abs() < 1e-9) {
        true => Ok(()),
        false => Err(format!("expected {expect}")),
    }
}

fn conv_direct() -> std::result::Result<(), String> {
    let (n, ci, h, w, co, k) = (2, 3, 5, 4, 2, 3);
    let x = random(1, &[n, ci, h, w]);
    let wt = random(2, &[co, ci, k, k]);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.leaf(&x), tape.leaf(&wt));
    let y = tape.conv2d(xv, wv, 1, 1).map_err(err)?;
    let y = tape.value(y);
    for b in 0..n {
        for o in 0..co {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for a in 0..k {
                            for bb in 0..k {
                                let (r, s) = (i as isize + a as isize - 1, j as isize + bb as isize - 1);
                                if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < w {
                                    acc += x.at(&[b, c, r as usize, s as usize]) * wt.at(&[o, c, a, bb]);
                                }
                            }
                        }
                    }
                    if (y.at(&[b, o, i, j]) - acc).abs() > 1e-9 {
                        return Err(format!("mismatch at {b},{o},{i},{j}"));
                    }
                }
            }
        }
    }
    Ok(())
}

fn gradients() -> std::result::Result<(), String> {
    let mut model: Model<f64> = Model::new(&tiny(), NormConfig::default(), 3).map_err(err)?;
    let x = random(4, &[4, 1, 12, 10]);
    let labels = [0, 1, 2, 1];
    let loss = |m: &mut Model<f64>| -> (f64, Vec<u8>) {
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let l = m.forward(&mut tape, xv, Pass::probe(0)).unwrap();
        let l = tape.softmax_cross_entropy(l, &labels).unwrap();
        (tape.value(l).data()[0], tape.relu6_regions())
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let pass = Pass {
        update_stats: false,
        ..Pass::train(0)
    };
    let l = model.forward(&mut tape, xv, pass).map_err(err)?;
    let l = tape.softmax_cross_entropy(l, &labels).map_err(err)?;
    let grads = tape.gradients(l).map_err(err)?;
    let (_, regions) = loss(&mut model);
    let h = 1e-6;
    let mut checked = 0;
    for (key, var) in tape.params().collect::<Vec<_>>() {
        let Some(g) = grads[var.index()].clone() else { continue };
        let id = model.store().iter().nth(key).expect("bound parameter").0;
        let orig = model.store().get(id).data()[0];
        model.store_mut().get_mut(id).data_mut()[0] = orig + h;
        let (lp, rp) = loss(&mut model);
        model.store_mut().get_mut(id).data_mut()[0] = orig - h;
        let (lm, rm) = loss(&mut model);
        model.store_mut().get_mut(id).data_mut()[0] = orig;
        if rp != regions || rm != regions {
            continue;
        }
        let num = (lp - lm) / (2.0 * h);
        let rel = (g[0] - num).abs() / g[0].abs().max(num.abs()).max(1e-3);
        if rel > 1e-4 {
            return Err(format!("`{}`: analytic {} numeric {num}", model.store().name(id), g[0]));
        }
        checked += 1;
    }
    match checked {
        0 => Err("no coordinate could be checked".into()),
        _ => Ok(()),
    }
}

fn pgd_ball() -> std::result::Result<(), String> {
    let mut model: Model<f32> = Model::new(&tiny(), NormConfig::with_branches(2), 5).map_err(err)?;
    let mut g = rng_for(&[6]);
    for _ in 0..10 {
        let x = Tensor::<f32>::from_fn(&[2, 1, 12, 10], |_| g.gen_range(-20.0..5.0));
        let eps = g.gen_range(0.01..0.5);
        let adv = pgd_attack(&mut model, &x, &[0, 2], &AttackConfig::new(eps), 1).map_err(err)?;
        let d = linf_distance(adv.data(), x.data());
        if d > eps as f32 {
            return Err(format!("distance {d} > {eps}"));
        }
    }
    Ok(())
}

fn eval_branch_zero() -> std::result::Result<(), String> {
    // checkpoints hold f32, so only an f32 model round-trips bit for bit
    let mut model: Model<f32> = Model::new(&tiny(), NormConfig::with_branches(3), 7).map_err(err)?;
    let mut g = rng_for(&[8]);
    let x = Tensor::<f32>::from_fn(&[2, 1, 12, 10], |_| g.gen_range(-1.0..1.0));
    let base = model.predict(&x).map_err(err)?;
    for norm in model.norms_mut() {
        for k in 1..3 {
            norm.branch_mut(k).running_mean.iter_mut().for_each(|v| *v += 5.0);
        }
    }
    let bytes = encode_checkpoint(&model, &serde_json::Value::Null).map_err(err)?;
    let (mut back, _) = decode_checkpoint::<f32>(&bytes).map_err(err)?;
    if back.predict(&x).map_err(err)?.data() != base.data() {
        return Err("auxiliary branches changed evaluation".into());
    }
    Ok(())
}

fn auc_pairs() -> std::result::Result<(), String> {
    let mut g = rng_for(&[9]);
    let mut draw = |n| (0..n).map(|_| f64::from(g.gen_range(0u8..20))).collect::<Vec<_>>();
    let (pos, neg) = (draw(60), draw(45));
    let pairs: f64 = pos
        .iter()
        .flat_map(|p| neg.iter().map(move |q| if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 }))
        .sum::<f64>()
        / (pos.len() * neg.len()) as f64;
    let a = auc(&pos, &neg).map_err(err)?;
    det_curve(&pos, &neg).map_err(err)?;
    match (a - pairs).abs() < 1e-12 {
        true => Ok(()),
        false => Err(format!("{a} vs {pairs}")),
    }
}
