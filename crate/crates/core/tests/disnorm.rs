mod common;

use common::{rng, tiny_config};
use kws_core::disnorm::{BranchPlan, SourceKind, Strategy};
use kws_core::model::{Model, NormConfig, Pass};
use kws_core::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

const K: usize = 3;

fn model(seed: u64) -> Model<f64> {
    Model::new(&tiny_config(3, 12, 10), NormConfig::with_branches(K), seed).unwrap()
}

fn batch(seed: u64, shift: f64) -> Tensor<f64> {
    let mut g = rng(seed);
    Tensor::from_fn(&[3, 1, 12, 10], |_| g.gen_range(-1.0..1.0) + shift)
}

/// One train step's forward + backward through `branch`; grads land in the store.
fn train_forward(m: &mut Model<f64>, x: &Tensor<f64>, branch: usize) {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let logits = m.forward(&mut tape, xv, Pass::train(branch)).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &[0, 1, 2]).unwrap();
    tape.backward(loss).unwrap();
    m.collect_grads(&tape).unwrap();
}

/// Running statistics and counters of branch `k` in every norm layer.
fn branch_state(m: &Model<f64>, k: usize) -> Vec<(Vec<f64>, Vec<f64>, u64)> {
    m.norms()
        .iter()
        .map(|n| {
            let b = n.branch(k);
            (b.running_mean.clone(), b.running_var.clone(), b.update_count)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    /// Replaying a mixed sequence of tagged batches leaves branch k exactly as
    /// replaying only the tag-k batches on a fresh model.
    #[test]
    fn replay_isolates_branches(tags in prop::collection::vec(0usize..K, 1..8), seed in 0u64..1000) {
        let mut mixed = model(seed);
        let mut per: Vec<Model<f64>> = (0..K).map(|_| model(seed)).collect();
        for (i, &t) in tags.iter().enumerate() {
            let x = batch(seed + i as u64, t as f64);
            train_forward(&mut mixed, &x, t);
            train_forward(&mut per[t], &x, t);
        }
        for (k, m) in per.iter().enumerate() {
            prop_assert_eq!(branch_state(&mixed, k), branch_state(m, k));
        }
    }
}

#[test]
fn gradients_reach_only_the_routed_branch() {
    let mut m = model(1);
    train_forward(&mut m, &batch(2, 0.0), 1);
    for norm in m.norms() {
        for k in 0..K {
            let b = norm.branch(k);
            let touched = m.store().get(b.gamma).grad().is_some() || m.store().get(b.beta).grad().is_some();
            assert_eq!(touched, k == 1, "{} branch {k}", norm.name());
            assert_eq!(b.update_count, u64::from(k == 1));
        }
    }
}

#[test]
fn eval_reads_branch_zero_only() {
    let mut m = model(4);
    for k in 0..K {
        train_forward(&mut m, &batch(10 + k as u64, k as f64), k);
    }
    let x = batch(99, 0.0);
    let base = m.predict(&x).unwrap();

    let mut other = m.clone();
    for norm in other.norms_mut() {
        for k in 1..K {
            let b = norm.branch_mut(k);
            b.running_mean.iter_mut().for_each(|v| *v += 3.0);
            b.running_var.iter_mut().for_each(|v| *v *= 5.0);
        }
    }
    let ids: Vec<_> = other.norms().iter().flat_map(|n| (1..K).map(|k| n.branch(k).gamma).collect::<Vec<_>>()).collect();
    for id in ids {
        other.store_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = -2.0);
    }
    assert_eq!(other.predict(&x).unwrap().data(), base.data());

    let mut main = m.clone();
    for norm in main.norms_mut() {
        norm.branch_mut(0).running_mean.iter_mut().for_each(|v| *v += 1.0);
    }
    assert_ne!(main.predict(&x).unwrap().data(), base.data());
}

#[test]
fn branch_counts_per_strategy() {
    for n in 1..=4 {
        for l in 1..=3 {
            let k = |s| BranchPlan::new(s, n, l).unwrap().num_branches();
            assert_eq!(k(Strategy::At), 1);
            assert_eq!(k(Strategy::Baseline), 1);
            assert_eq!(k(Strategy::Dat), 2);
            assert_eq!(k(Strategy::FgDat), 1 + l);
            assert_eq!(k(Strategy::DaDat), 2 * n);
        }
    }
}

#[test]
fn da_dat_routes_every_tag_to_its_own_branch() {
    let plan = BranchPlan::new(Strategy::DaDat, 3, 1).unwrap();
    let mut seen = Vec::new();
    for s in 0..3 {
        seen.push(plan.route(SourceKind::for_source(s)).unwrap());
        seen.push(plan.route(SourceKind::Adversarial { parent: s, level: 0 }).unwrap());
    }
    seen.sort();
    assert_eq!(seen, (0..6).collect::<Vec<_>>());
    assert_eq!(plan.route(SourceKind::Clean).unwrap(), 0);
    let collapsed = plan.collapsed();
    assert_eq!(collapsed.num_branches(), 6);
    assert_eq!(collapsed.route(SourceKind::Adversarial { parent: 2, level: 0 }).unwrap(), 0);
}
