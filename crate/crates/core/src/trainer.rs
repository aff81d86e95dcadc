//! Adam with cosine-annealed learning rate over mixed clean + adversarial
//! objectives.
//!
//! One step forwards a source-homogeneous batch through its routed branch,
//! generates the batch's PGD adversaries, forwards each through its own
//! routed branch, and takes a single Adam step on
//! `L_orig + adv_weight * sum(L_adv)`.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adversary::{attack_windows, make_attack_schedule, AttackConfig, GenerationBranch};
use crate::disnorm::{BranchPlan, SourceKind, Strategy};
use crate::error::{KwsError, Result};
use crate::model::{save_checkpoint, Model, Pass};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::tensor::Tape;
use crate::window::{stack, FeatureWindow};

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments per parameter. A parameter's step count only advances
/// when it has a gradient, so unused branches keep untouched state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub cfg: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: Vec<u64>,
    pub steps: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = |(_, p): (_, &crate::params::Param<T>)| vec![T::zero(); p.tensor.numel()];
        Self {
            cfg,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
            t: vec![0; store.len()],
            steps: 0,
        }
    }
}

/// Bias-corrected Adam update of every parameter holding a gradient.
/// Gradients are left in place; callers zero them.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(KwsError::Dimension(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (id, p) in store.iter() {
        if let Some(g) = p.tensor.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(KwsError::Numeric(format!(
                    "non-finite gradient for `{}`",
                    store.name(id)
                )));
            }
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.cfg;
    let (b1, b2, e) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
    let lr_t = T::lit(lr);
    for (id, p) in store.iter_mut() {
        let i = id.index();
        let Some(g) = p.tensor.grad().map(<[T]>::to_vec) else {
            continue;
        };
        state.t[i] += 1;
        let t = state.t[i] as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(&g).zip(m).zip(v) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr_t * mhat / (vhat.sqrt() + e);
        }
    }
    state.steps += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    /// One entry for AT/DAT/DA_DAT; one per level for FG_DAT.
    pub epsilons: Vec<f64>,
    pub pgd_steps: usize,
    /// Defaults to `epsilon / 4` when absent.
    pub step_size: Option<f64>,
    pub generation_branch: GenerationBranch,
    pub adv_weight: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Also measure the adversarial term's own gradient on shared weights.
    pub audit: bool,
    /// Route every tag to branch 0 while keeping the branch count.
    pub collapse_routing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::DaDat,
            epochs: 15,
            base_lr: 0.005,
            batch_size: 64,
            epsilons: vec![0.1],
            pgd_steps: crate::adversary::DEFAULT_PGD_STEPS,
            step_size: None,
            generation_branch: GenerationBranch::Adversarial,
            adv_weight: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
            audit: false,
            collapse_routing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(KwsError::config(format!("train.{k}"), m));
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", "must be positive");
        }
        if !(self.adv_weight >= 0.0 && self.adv_weight.is_finite()) {
            return bad("adv_weight", "must be non-negative");
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|&e| !(e > 0.0)) {
            return bad("epsilons", "need at least one positive epsilon");
        }
        if self.strategy != Strategy::FgDat && self.epsilons.len() != 1 {
            return bad("epsilons", "only FG_DAT takes several epsilons");
        }
        if self.pgd_steps == 0 {
            return bad("pgd_steps", "must be positive");
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return bad("step_size", "must be positive");
            }
        }
        Ok(())
    }

    pub fn branch_plan(&self, num_datasources: usize) -> Result<BranchPlan> {
        let plan = BranchPlan::new(self.strategy, num_datasources, self.epsilons.len())?;
        Ok(if self.collapse_routing {
            plan.collapsed()
        } else {
            plan
        })
    }

    pub fn attack_schedule(&self, num_datasources: usize) -> Result<Vec<AttackConfig>> {
        let mut schedule = make_attack_schedule(self.strategy, &self.epsilons, num_datasources)?;
        for a in &mut schedule {
            a.steps = self.pgd_steps;
            if let Some(s) = self.step_size {
                a.step_size = s;
            }
            a.generation_branch = self.generation_branch;
        }
        Ok(schedule)
    }
}

/// One forward recorded in a step: what kind of data went through which branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchTouch {
    pub kind: SourceKind,
    pub branch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: f64,
    pub orig_loss: f64,
    pub adv_losses: Vec<f64>,
    pub touches: Vec<BranchTouch>,
    /// Whether the adversarial term alone puts a nonzero gradient on every
    /// shared convolution weight; only measured when auditing.
    pub adv_shared_grad: Option<bool>,
}

/// Everything a step needs besides the model and the batch.
pub struct StepContext<'a> {
    pub plan: &'a BranchPlan,
    pub schedule: &'a [AttackConfig],
    pub adv_weight: f64,
    pub lr: f64,
    pub audit: bool,
}

fn check_homogeneous(batch: &[FeatureWindow]) -> Result<SourceKind> {
    let kind = batch
        .first()
        .ok_or_else(|| KwsError::Contract("empty training batch".into()))?
        .source;
    if batch.iter().any(|w| w.source != kind) {
        return Err(KwsError::Contract("training batch mixes datasource tags".into()));
    }
    Ok(kind)
}

/// One optimizer step on a datasource-homogeneous batch.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    batch: &[FeatureWindow],
    ctx: &StepContext<'_>,
) -> Result<StepReport> {
    let kind = check_homogeneous(batch)?;
    let branch = ctx.plan.route(kind)?;
    let labels: Vec<usize> = batch.iter().map(|w| w.label).collect();

    // adversaries come from the pre-step parameters
    let mut adversaries = Vec::new();
    if ctx.adv_weight > 0.0 {
        for cfg in ctx.schedule.iter().filter(|c| c.applies_to(kind.source())) {
            let adv = attack_windows(model, batch, cfg, ctx.plan)?;
            let adv_kind = adv[0].source;
            adversaries.push((adv_kind, adv));
        }
    }

    model.zero_grads();
    let mut tape = Tape::new();
    let feats: Vec<_> = batch.iter().map(|w| &w.features).collect();
    let x = tape.leaf(&stack::<T>(&feats)?);
    let logits = model.forward(&mut tape, x, Pass::train(branch))?;
    let orig = tape.softmax_cross_entropy(logits, &labels)?;
    let mut touches = vec![BranchTouch { kind, branch }];

    let mut adv_terms = Vec::new();
    for (adv_kind, adv) in &adversaries {
        let adv_branch = ctx.plan.route(*adv_kind)?;
        let feats: Vec<_> = adv.iter().map(|w| &w.features).collect();
        let xa = tape.leaf(&stack::<T>(&feats)?);
        let la = model.forward(&mut tape, xa, Pass::train(adv_branch))?;
        adv_terms.push(tape.softmax_cross_entropy(la, &labels)?);
        touches.push(BranchTouch {
            kind: *adv_kind,
            branch: adv_branch,
        });
    }

    let mut total = orig;
    let mut adv_sum = None;
    for &term in &adv_terms {
        adv_sum = Some(match adv_sum {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    if let Some(a) = adv_sum {
        let weighted = if ctx.adv_weight == 1.0 {
            a
        } else {
            tape.scale(a, T::lit(ctx.adv_weight))
        };
        total = tape.add(orig, weighted)?;
    }

    let adv_shared_grad = match (ctx.audit, adv_sum) {
        (true, Some(a)) => {
            let grads = tape.gradients(a)?;
            // each weight is bound once per forward; any binding may carry it
            let mut reached: std::collections::BTreeMap<usize, bool> = model
                .conv_weights()
                .iter()
                .map(|id| (id.index(), false))
                .collect();
            for (key, var) in tape.params() {
                if let Some(r) = reached.get_mut(&key) {
                    *r |= grads[var.index()]
                        .as_ref()
                        .is_some_and(|g| g.iter().any(|v| *v != T::zero()));
                }
            }
            Some(reached.values().all(|&r| r))
        }
        _ => None,
    };

    tape.backward(total)?;
    model.collect_grads(&tape)?;
    adam_step(model.store_mut(), opt, ctx.lr)?;

    let scalar = |v| tape.value(v).data()[0].as_f64();
    let report = StepReport {
        loss: scalar(total),
        orig_loss: scalar(orig),
        adv_losses: adv_terms.iter().map(|&v| scalar(v)).collect(),
        touches,
        adv_shared_grad,
    };
    if !report.loss.is_finite() {
        return Err(KwsError::Numeric(format!("training loss diverged to {}", report.loss)));
    }
    Ok(report)
}

/// Datasource-homogeneous batches for one epoch: each source is shuffled
/// and chunked, then the batch order is shuffled. Returns `(source, indices)`.
pub fn epoch_batches(sizes: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<(usize, Vec<usize>)> {
    let mut batches = Vec::new();
    for (s, &n) in sizes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(&[seed, epoch, 0xBA7C, s as u64]));
        batches.extend(idx.chunks(batch_size).map(|c| (s, c.to_vec())));
    }
    batches.shuffle(&mut rng_for(&[seed, epoch, 0x0DE5]));
    batches
}

/// `sum_s ceil(n_s / batch_size)`.
pub fn steps_per_epoch(sizes: &[usize], batch_size: usize) -> usize {
    sizes.iter().map(|n| n.div_ceil(batch_size)).sum()
}

/// Eval-mode top-1 accuracy over windows, batched.
pub fn accuracy<T: Scalar>(model: &mut Model<T>, windows: &[FeatureWindow], batch_size: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(KwsError::Contract("accuracy over an empty set".into()));
    }
    let mut correct = 0usize;
    for chunk in windows.chunks(batch_size.max(1)) {
        let feats: Vec<_> = chunk.iter().map(|w| &w.features).collect();
        let logits = model.predict(&stack::<T>(&feats)?)?;
        let k = model.config().num_classes;
        for (row, w) in logits.data().chunks_exact(k).zip(chunk) {
            if crate::evaluator::argmax(row) == w.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / windows.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub val_accuracy: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub strategy: Option<Strategy>,
    pub epochs: Vec<EpochSummary>,
    pub step_losses: Vec<f64>,
    pub lr_trace: Vec<f64>,
    pub steps: Vec<StepReport>,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// Fraction of audited steps where the adversarial term reached every
    /// shared weight.
    pub fn adv_gradient_coverage(&self) -> Option<f64> {
        let audited: Vec<bool> = self.steps.iter().filter_map(|s| s.adv_shared_grad).collect();
        (!audited.is_empty())
            .then(|| audited.iter().filter(|&&b| b).count() as f64 / audited.len() as f64)
    }
}

/// Where `fit` writes checkpoints and the line-delimited report.
#[derive(Clone, Debug, Default)]
pub struct FitOutput {
    pub dir: Option<PathBuf>,
}

impl FitOutput {
    pub fn to_dir(dir: impl AsRef<Path>) -> Self {
        Self {
            dir: Some(dir.as_ref().to_path_buf()),
        }
    }
}

#[derive(Serialize)]
struct StepLine<'a> {
    epoch: usize,
    step: usize,
    lr: f64,
    loss: f64,
    strategy: &'a str,
}

/// Trains for `cfg.epochs` epochs. `epoch_data(e)` yields the per-source
/// windows of epoch `e`; `validation` (clean windows) is scored after
/// every epoch. With an output directory, writes `epoch_XXX.kwsc` per
/// epoch, `final.kwsc`, and `report.jsonl`.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    mut epoch_data: impl FnMut(usize) -> Result<Vec<Vec<FeatureWindow>>>,
    validation: Option<&[FeatureWindow]>,
    cfg: &TrainConfig,
    out: &FitOutput,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut opt = OptimizerState::new(model.store(), cfg.adam);
    let mut report = TrainReport {
        strategy: Some(cfg.strategy),
        ..Default::default()
    };
    let mut log = match &out.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| KwsError::io(dir, e))?;
            let path = dir.join("report.jsonl");
            Some((std::fs::File::create(&path).map_err(|e| KwsError::io(&path, e))?, path))
        }
        None => None,
    };
    let mut write_line = |line: String| -> Result<()> {
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{line}").map_err(|e| KwsError::io(path.as_path(), e))?;
        }
        Ok(())
    };

    let mut total_steps = None;
    let mut global = 0usize;
    for epoch in 0..cfg.epochs {
        let sources = epoch_data(epoch)?;
        let plan = cfg.branch_plan(sources.len())?;
        if plan.num_branches() != model.num_branches() {
            return Err(KwsError::config(
                "norm.branches",
                format!(
                    "{} with {} datasources needs {} branches, model has {}",
                    cfg.strategy,
                    sources.len(),
                    plan.num_branches(),
                    model.num_branches()
                ),
            ));
        }
        let schedule = if cfg.strategy.uses_adversaries() {
            cfg.attack_schedule(sources.len())?
        } else {
            Vec::new()
        };
        let sizes: Vec<usize> = sources.iter().map(Vec::len).collect();
        let total = *total_steps.get_or_insert(cfg.epochs * steps_per_epoch(&sizes, cfg.batch_size));
        let batches = epoch_batches(&sizes, cfg.batch_size, cfg.seed, epoch as u64);

        let mut summary = EpochSummary {
            epoch,
            steps: batches.len(),
            lr_start: cosine_lr(global, total, cfg.base_lr),
            ..Default::default()
        };
        let mut loss_sum = 0.0;
        for (s, idx) in &batches {
            let batch: Vec<FeatureWindow> = idx.iter().map(|&i| sources[*s][i].clone()).collect();
            let lr = cosine_lr(global, total, cfg.base_lr);
            let ctx = StepContext {
                plan: &plan,
                schedule: &schedule,
                adv_weight: cfg.adv_weight,
                lr,
                audit: cfg.audit,
            };
            let step = train_step(model, &mut opt, &batch, &ctx)?;
            write_line(
                serde_json::to_string(&StepLine {
                    epoch,
                    step: global,
                    lr,
                    loss: step.loss,
                    strategy: cfg.strategy.name(),
                })
                .expect("plain struct"),
            )?;
            loss_sum += step.loss;
            report.lr_trace.push(lr);
            report.step_losses.push(step.loss);
            report.steps.push(step);
            summary.lr_end = lr;
            global += 1;
        }
        model.zero_grads();
        summary.mean_loss = loss_sum / batches.len().max(1) as f64;
        if let Some(val) = validation {
            summary.val_accuracy = Some(accuracy(model, val, cfg.batch_size)?);
        }
        let is_final = epoch + 1 == cfg.epochs;
        if let Some(dir) = &out.dir {
            let meta = serde_json::json!({
                "epoch": epoch,
                "steps": global,
                "strategy": cfg.strategy.name(),
                "final": is_final,
            });
            let path = dir.join(format!("epoch_{epoch:03}.kwsc"));
            save_checkpoint(model, &path, &meta)?;
            summary.checkpoint = Some(path);
            if is_final {
                let fin = dir.join("final.kwsc");
                save_checkpoint(model, &fin, &meta)?;
                report.final_checkpoint = Some(fin);
            }
        }
        write_line(serde_json::to_string(&summary).expect("plain struct"))?;
        report.epochs.push(summary);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.005), 0.005);
        assert!(cosine_lr(100, 100, 0.005).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.005) - 0.0025).abs() < 1e-15);
    }

    fn one_param(g: f64) -> (ParamStore<f64>, OptimizerState<f64>) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[1], 1.0));
        store.get_mut(id).accumulate_grad(&[g]).unwrap();
        let opt = OptimizerState::new(&store, AdamConfig::default());
        (store, opt)
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let (mut store, mut opt) = one_param(0.0);
        adam_step(&mut store, &mut opt, 0.1).unwrap();
        assert_eq!(store.iter().next().unwrap().1.tensor.data(), &[1.0]);
        assert_eq!(opt.steps, 1);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let (mut store, mut opt) = one_param(-3.7);
        adam_step(&mut store, &mut opt, 0.01).unwrap();
        let w = store.iter().next().unwrap().1.tensor.data()[0];
        assert!((w - 1.01).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_nan() {
        let (mut store, mut opt) = one_param(f64::NAN);
        assert!(matches!(adam_step(&mut store, &mut opt, 0.01), Err(KwsError::Numeric(_))));
    }

    #[test]
    fn batches_cover_every_example_once() {
        let b = epoch_batches(&[3, 3, 3], 2, 9, 0);
        assert_eq!(b.len(), steps_per_epoch(&[3, 3, 3], 2));
        assert_eq!(b.len(), 6);
        for s in 0..3 {
            let mut seen: Vec<usize> = b.iter().filter(|(src, _)| *src == s).flat_map(|(_, i)| i.clone()).collect();
            seen.sort();
            assert_eq!(seen, [0, 1, 2]);
        }
        assert_eq!(b, epoch_batches(&[3, 3, 3], 2, 9, 0));
    }
}
