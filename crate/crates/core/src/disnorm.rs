//! Batch normalization with `K` parallel parameter/statistic branches.
//!
//! Each branch owns its own scale, shift and running statistics. Training
//! forwards are routed to one branch by datasource tag; evaluation always
//! reads branch 0, the main branch for clean data. A [`BranchPlan`] maps
//! datasource tags to branches for each training strategy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// How the training data and its adversaries are routed through normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// No adversaries, single branch.
    #[serde(rename = "BASELINE")]
    Baseline,
    /// Adversaries share the main branch with the original data.
    #[serde(rename = "AT")]
    At,
    /// One auxiliary branch for all adversaries.
    #[serde(rename = "DAT")]
    Dat,
    /// One auxiliary branch per perturbation level.
    #[serde(rename = "FG_DAT")]
    FgDat,
    /// Auxiliary branches per augmentation datasource and per datasource adversary.
    #[serde(rename = "DA_DAT")]
    DaDat,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "BASELINE",
            Strategy::At => "AT",
            Strategy::Dat => "DAT",
            Strategy::FgDat => "FG_DAT",
            Strategy::DaDat => "DA_DAT",
        }
    }

    pub fn uses_adversaries(self) -> bool {
        self != Strategy::Baseline
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BASELINE" => Ok(Strategy::Baseline),
            "AT" => Ok(Strategy::At),
            "DAT" => Ok(Strategy::Dat),
            "FG_DAT" => Ok(Strategy::FgDat),
            "DA_DAT" => Ok(Strategy::DaDat),
            other => Err(KwsError::config("strategy", format!("unknown strategy `{other}`"))),
        }
    }
}

/// Where a batch of features came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceKind {
    /// Datasource 0, unaugmented.
    Clean,
    /// Augmentation datasource `source >= 1`.
    Augmented { source: usize },
    /// PGD adversary derived from datasource `parent` at perturbation level `level`.
    Adversarial { parent: usize, level: usize },
}

impl SourceKind {
    /// Datasource index this data originates from.
    pub fn source(self) -> usize {
        match self {
            SourceKind::Clean => 0,
            SourceKind::Augmented { source } => source,
            SourceKind::Adversarial { parent, .. } => parent,
        }
    }

    pub fn for_source(source: usize) -> Self {
        if source == 0 {
            SourceKind::Clean
        } else {
            SourceKind::Augmented { source }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DatasourceTag {
    pub id: usize,
    pub kind: SourceKind,
}

impl DatasourceTag {
    pub fn main() -> Self {
        Self {
            id: 0,
            kind: SourceKind::Clean,
        }
    }
}

/// Branch layout of one training strategy.
///
/// Tags are dense `0..K`; tag 0 is always the clean main branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchPlan {
    strategy: Strategy,
    num_datasources: usize,
    num_levels: usize,
    tags: Vec<DatasourceTag>,
    collapsed: bool,
}

/// Branch tags for `strategy`; see [`BranchPlan::new`].
pub fn make_branch_plan(
    strategy: Strategy,
    num_datasources: usize,
    num_levels: usize,
) -> Result<Vec<DatasourceTag>> {
    Ok(BranchPlan::new(strategy, num_datasources, num_levels)?.tags)
}

impl BranchPlan {
    /// `AT`/baseline: 1 branch. `DAT`: main + one adversarial. `FG_DAT`:
    /// main + one per level. `DA_DAT`: one per datasource plus one per
    /// datasource adversary (`2 * num_datasources`).
    pub fn new(strategy: Strategy, num_datasources: usize, num_levels: usize) -> Result<Self> {
        if num_datasources == 0 || num_levels == 0 {
            return Err(KwsError::Contract(
                "branch plans need at least one datasource and one perturbation level".into(),
            ));
        }
        let main = DatasourceTag::main();
        let adv = |id, parent, level| DatasourceTag {
            id,
            kind: SourceKind::Adversarial { parent, level },
        };
        let tags = match strategy {
            Strategy::Baseline | Strategy::At => vec![main],
            Strategy::Dat => vec![main, adv(1, 0, 0)],
            Strategy::FgDat => std::iter::once(main)
                .chain((0..num_levels).map(|l| adv(1 + l, 0, l)))
                .collect(),
            Strategy::DaDat => (0..num_datasources)
                .map(|s| DatasourceTag {
                    id: s,
                    kind: SourceKind::for_source(s),
                })
                .chain((0..num_datasources).map(|s| adv(num_datasources + s, s, 0)))
                .collect(),
        };
        Ok(Self {
            strategy,
            num_datasources,
            num_levels,
            tags,
            collapsed: false,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn num_branches(&self) -> usize {
        self.tags.len()
    }

    pub fn num_datasources(&self) -> usize {
        self.num_datasources
    }

    pub fn tags(&self) -> &[DatasourceTag] {
        &self.tags
    }

    /// Same branch count, but every route resolves to branch 0. Used to
    /// audit that a strategy differs from `AT` only through routing.
    pub fn collapsed(mut self) -> Self {
        self.collapsed = true;
        self
    }

    /// Branch that normalizes data of the given kind during training.
    pub fn route(&self, kind: SourceKind) -> Result<usize> {
        let source = kind.source();
        if source >= self.num_datasources {
            return Err(KwsError::Routing {
                branch: source,
                branches: self.num_datasources,
            });
        }
        if self.collapsed {
            return Ok(0);
        }
        let branch = match (self.strategy, kind) {
            (Strategy::Baseline | Strategy::At, _) => 0,
            (Strategy::Dat, SourceKind::Adversarial { .. }) => 1,
            (Strategy::Dat, _) => 0,
            (Strategy::FgDat, SourceKind::Adversarial { level, .. }) => {
                if level >= self.num_levels {
                    return Err(KwsError::Routing {
                        branch: 1 + level,
                        branches: self.num_branches(),
                    });
                }
                1 + level
            }
            (Strategy::FgDat, _) => 0,
            (Strategy::DaDat, SourceKind::Adversarial { parent, .. }) => {
                self.num_datasources + parent
            }
            (Strategy::DaDat, k) => k.source(),
        };
        Ok(branch)
    }
}

/// One parameter/statistic group inside a [`BranchSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub update_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics; optionally fold them into the
    /// routed branch's running statistics.
    Train { update_stats: bool },
    /// Normalize with branch 0's running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchSet<T> {
    name: String,
    channels: usize,
    momentum: T,
    eps: T,
    branches: Vec<Branch<T>>,
}

impl<T: Scalar> BranchSet<T> {
    /// Registers `k` branches of `channels` scales/shifts in `store`, named
    /// `{name}.b{k}.gamma` / `.beta`.
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        k: usize,
        momentum: f64,
        eps: f64,
    ) -> Self {
        let branches = (0..k)
            .map(|b| Branch {
                gamma: store.add(
                    format!("{name}.b{b}.gamma"),
                    Tensor::full(&[channels], T::one()),
                ),
                beta: store.add(format!("{name}.b{b}.beta"), Tensor::zeros(&[channels])),
                running_mean: vec![T::zero(); channels],
                running_var: vec![T::one(); channels],
                update_count: 0,
            })
            .collect();
        Self {
            name: name.to_string(),
            channels,
            momentum: T::lit(momentum),
            eps: T::lit(eps),
            branches,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn branch(&self, k: usize) -> &Branch<T> {
        &self.branches[k]
    }

    pub fn branch_mut(&mut self, k: usize) -> &mut Branch<T> {
        &mut self.branches[k]
    }

    pub fn branches(&self) -> &[Branch<T>] {
        &self.branches
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    /// Normalizes `x` (`N x C x H x W`) through `branch`.
    ///
    /// Eval mode ignores `branch` and reads branch 0. Scale/shift are bound
    /// to the tape with `param_grads`; running statistics never are.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        branch: usize,
        mode: NormMode,
        param_grads: bool,
    ) -> Result<Var> {
        match mode {
            NormMode::Eval => {
                let b = &self.branches[0];
                let gamma = store.bind(tape, b.gamma, param_grads);
                let beta = store.bind(tape, b.beta, param_grads);
                tape.batch_norm_eval(x, gamma, beta, &b.running_mean, &b.running_var, self.eps)
            }
            NormMode::Train { update_stats } => {
                if branch >= self.branches.len() {
                    return Err(KwsError::Routing {
                        branch,
                        branches: self.branches.len(),
                    });
                }
                let b = &mut self.branches[branch];
                let gamma = store.bind(tape, b.gamma, param_grads);
                let beta = store.bind(tape, b.beta, param_grads);
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                if update_stats {
                    let keep = T::one() - self.momentum;
                    for c in 0..self.channels {
                        b.running_mean[c] = keep * b.running_mean[c] + self.momentum * stats.mean[c];
                        b.running_var[c] = keep * b.running_var[c] + self.momentum * stats.var[c];
                    }
                    b.update_count += 1;
                }
                Ok(y)
            }
        }
    }

    /// Tag-addressed form of [`BranchSet::forward`] with statistic updates on.
    pub fn bn_forward(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        tag: &DatasourceTag,
        train: bool,
    ) -> Result<Var> {
        let mode = if train {
            NormMode::Train { update_stats: true }
        } else {
            NormMode::Eval
        };
        self.forward(tape, store, x, tag.id, mode, true)
    }
}
