//! L-infinity PGD adversaries in log-Mel feature space.
//!
//! Starting from zero perturbation, each step moves every feature by
//! `step_size * sign(grad)` (with `sign(0) = 0`) and projects back into the
//! `epsilon` ball around the original input. Forwards run in train-mode
//! normalization with frozen statistics and frozen parameters.

use serde::{Deserialize, Serialize};

use crate::disnorm::{BranchPlan, SourceKind, Strategy};
use crate::error::{KwsError, Result};
use crate::model::{Classifier, Pass};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::window::{stack, unstack, FeatureWindow};

pub const DEFAULT_PGD_STEPS: usize = 8;

/// Which normalization branch the attack forwards through.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationBranch {
    /// The branch that will consume the adversary during training.
    #[default]
    Adversarial,
    /// The branch of the clean batch the adversary is derived from.
    Parent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// L-infinity ball radius in feature units.
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    /// Datasource this attack applies to; `None` for every datasource.
    pub source: Option<usize>,
    /// Perturbation level index (distinct only under `FG_DAT`).
    pub level: usize,
    pub generation_branch: GenerationBranch,
}

impl AttackConfig {
    /// Defaults: `step_size = epsilon / 4`, 8 steps, any source, level 0.
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: epsilon / 4.0,
            steps: DEFAULT_PGD_STEPS,
            source: None,
            level: 0,
            generation_branch: GenerationBranch::Adversarial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(KwsError::Contract(format!(
                "attack epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(KwsError::Contract(format!(
                "attack step_size must be positive, got {}",
                self.step_size
            )));
        }
        if self.steps == 0 {
            return Err(KwsError::Contract("attack needs at least one step".into()));
        }
        Ok(())
    }

    pub fn applies_to(&self, source: usize) -> bool {
        self.source.is_none_or(|s| s == source)
    }

    /// Tag carried by adversaries generated from data of `parent` source.
    pub fn tag_for(&self, parent: usize) -> SourceKind {
        SourceKind::Adversarial {
            parent,
            level: self.level,
        }
    }
}

/// Attack configurations for a strategy.
///
/// `FG_DAT` gets one config per entry of `epsilons`, applied to every
/// datasource. `AT`, `DAT` and `DA_DAT` take exactly one `epsilon` and get
/// one config per datasource. The baseline has no attacks.
pub fn make_attack_schedule(
    strategy: Strategy,
    epsilons: &[f64],
    num_datasources: usize,
) -> Result<Vec<AttackConfig>> {
    if epsilons.is_empty() {
        return Err(KwsError::Contract("attack schedule needs at least one epsilon".into()));
    }
    if num_datasources == 0 {
        return Err(KwsError::Contract("attack schedule needs a datasource".into()));
    }
    let schedule: Vec<AttackConfig> = match strategy {
        Strategy::Baseline => Vec::new(),
        Strategy::FgDat => epsilons
            .iter()
            .enumerate()
            .map(|(level, &eps)| AttackConfig {
                level,
                ..AttackConfig::new(eps)
            })
            .collect(),
        Strategy::At | Strategy::Dat | Strategy::DaDat => {
            if epsilons.len() != 1 {
                return Err(KwsError::Contract(format!(
                    "{strategy} uses a single epsilon, got {}",
                    epsilons.len()
                )));
            }
            (0..num_datasources)
                .map(|s| AttackConfig {
                    source: Some(s),
                    ..AttackConfig::new(epsilons[0])
                })
                .collect()
        }
    };
    for cfg in &schedule {
        cfg.validate()?;
    }
    Ok(schedule)
}

/// Moves `v` into `[x - eps, x + eps]` so that `|v - x| <= eps` holds when
/// evaluated in `T` arithmetic, not just in exact arithmetic.
fn project<T: Scalar>(v: T, x: T, eps: T) -> T {
    let mut p = v.max(x - eps).min(x + eps);
    while (p - x).abs() > eps {
        let toward = if p > x { -T::one() } else { T::one() };
        p = p + toward * T::epsilon() * p.abs().max(T::min_positive_value());
    }
    p
}

/// Runs PGD on a batch `x` (`N x 1 x frames x bins`) with the model's
/// training-mode normalization on `branch`. Parameters and running
/// statistics are left untouched.
pub fn pgd_attack<T: Scalar, C: Classifier<T>>(
    model: &mut C,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    branch: usize,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(KwsError::Numeric("attack input is not finite".into()));
    }
    let eps = T::lit(cfg.epsilon);
    let alpha = T::lit(cfg.step_size);
    let original = x.data();
    let mut current = x.clone().with_grad(true);
    let mut tape = Tape::new();
    for _ in 0..cfg.steps {
        tape.clear();
        let xv = tape.leaf(&current);
        let logits = model.logits(&mut tape, xv, Pass::probe(branch))?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let grads = tape.gradients(loss)?;
        let zeros;
        let g = match grads[xv.index()].as_deref() {
            Some(g) => g,
            None => {
                zeros = vec![T::zero(); current.numel()];
                &zeros
            }
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(KwsError::Numeric("non-finite input gradient during attack".into()));
        }
        for ((v, &x0), &gi) in current.data_mut().iter_mut().zip(original).zip(g) {
            let step = if gi > T::zero() {
                alpha
            } else if gi < T::zero() {
                -alpha
            } else {
                T::zero()
            };
            *v = project(*v + step, x0, eps);
        }
    }
    Ok(current.with_grad(false))
}

/// Largest `|a - b|` over all elements.
pub fn linf_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |m, (&p, &q)| m.max((p - q).abs()))
}

/// Attacks a source-homogeneous batch of windows and returns adversarial
/// windows tagged `Adversarial { parent, level }`.
pub fn attack_windows<T: Scalar, C: Classifier<T>>(
    model: &mut C,
    windows: &[FeatureWindow],
    cfg: &AttackConfig,
    plan: &BranchPlan,
) -> Result<Vec<FeatureWindow>> {
    let first = windows
        .first()
        .ok_or_else(|| KwsError::Contract("cannot attack an empty batch".into()))?;
    let parent_kind = first.source;
    if windows.iter().any(|w| w.source != parent_kind) {
        return Err(KwsError::Contract("attack batch mixes datasources".into()));
    }
    let adv_kind = cfg.tag_for(parent_kind.source());
    let branch = match cfg.generation_branch {
        GenerationBranch::Adversarial => plan.route(adv_kind)?,
        GenerationBranch::Parent => plan.route(parent_kind)?,
    };
    let feats: Vec<_> = windows.iter().map(|w| &w.features).collect();
    let labels: Vec<usize> = windows.iter().map(|w| w.label).collect();
    let x = stack::<T>(&feats)?;
    let adv = pgd_attack(model, &x, &labels, cfg, branch)?;
    Ok(unstack(&adv)?
        .into_iter()
        .zip(&labels)
        .map(|(f, &label)| FeatureWindow::new(f, label, adv_kind))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use crate::tensor::Var;

    /// Two-class linear model: logits = (w0 . x, w1 . x).
    struct Linear {
        w: Tensor<f64>,
    }

    impl Classifier<f64> for Linear {
        fn num_classes(&self) -> usize {
            2
        }

        fn logits(&mut self, tape: &mut Tape<f64>, input: Var, pass: Pass) -> Result<Var> {
            assert_eq!(pass.mode, Mode::Train);
            let w = tape.param(&self.w, 0, pass.param_grads);
            let y = tape.conv2d(input, w, 1, 0)?;
            let n = tape.shape(input)[0];
            tape.reshape(y, vec![n, 2])
        }
    }

    #[test]
    fn schedules() {
        let s = make_attack_schedule(Strategy::DaDat, &[0.2], 3).unwrap();
        assert_eq!(s.len(), 3);
        let tags: Vec<_> = s.iter().map(|c| c.tag_for(c.source.unwrap())).collect();
        assert_eq!(
            tags,
            (0..3)
                .map(|p| SourceKind::Adversarial { parent: p, level: 0 })
                .collect::<Vec<_>>()
        );
        assert_eq!(make_attack_schedule(Strategy::FgDat, &[0.1, 0.2, 0.3, 0.4], 1).unwrap().len(), 4);
        assert_eq!(make_attack_schedule(Strategy::At, &[0.1], 1).unwrap().len(), 1);
        assert!(make_attack_schedule(Strategy::FgDat, &[], 1).is_err());
        assert!(make_attack_schedule(Strategy::Dat, &[0.1, 0.2], 1).is_err());
    }

    #[test]
    fn zero_gradient_keeps_input() {
        let mut m = Linear {
            w: Tensor::zeros(&[2, 1, 2, 3]),
        };
        let x = Tensor::from_fn(&[2, 1, 2, 3], |i| i as f64 * 0.3 - 1.0);
        let adv = pgd_attack(&mut m, &x, &[0, 1], &AttackConfig::new(0.5), 0).unwrap();
        assert_eq!(adv.data(), x.data());
    }

    #[test]
    fn linear_attack_reaches_corner() {
        let w = Tensor::new(
            vec![2, 1, 1, 4],
            vec![0.5, -1.0, 0.0, 2.0, -0.5, 1.0, 0.25, 0.0],
        )
        .unwrap();
        let mut m = Linear { w: w.clone() };
        let x = Tensor::new(vec![1, 1, 1, 4], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let cfg = AttackConfig::new(0.2);
        let adv = pgd_attack(&mut m, &x, &[0], &cfg, 0).unwrap();
        // label 0: loss grows with (w1 - w0) . x; d = [-1, 2, 0.25, -2]
        let want = [-0.1, 0.4, -0.1, 0.2];
        for (a, b) in adv.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn projection_is_exact_in_float32() {
        for (v, x, e) in [(1.0f32 + 0.3, 1.0, 0.1), (-7.3, 3.1e7, 0.3), (0.5, 0.1, 0.4)] {
            let p = project(v, x, e);
            assert!((p - x).abs() <= e);
        }
    }
}
