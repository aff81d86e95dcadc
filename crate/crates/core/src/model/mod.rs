//! The `MN7-45` keyword-spotting network.
//!
//! A 3x3 stride-2 stem convolution with 45 filters, seven inverted-residual
//! bottleneck blocks, a 1x1 expansion to 1280 channels, global average
//! pooling and a 1x1 classifier. Every normalization layer is a
//! [`BranchSet`]; no convolution carries a bias.

mod checkpoint;
mod simam;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use simam::simam;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::disnorm::{BranchSet, NormMode, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::error::{KwsError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_SIMAM_LAMBDA: f64 = 1e-4;

/// One bottleneck row: expansion factor `t`, output channels `n`, stride `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub t: usize,
    pub n: usize,
    pub s: usize,
}

impl BlockSpec {
    pub const fn new(t: usize, n: usize, s: usize) -> Self {
        Self { t, n, s }
    }

    /// Identity shortcut is active iff the block keeps both resolution and width.
    pub fn has_residual(&self, in_channels: usize) -> bool {
        self.s == 1 && in_channels == self.n
    }
}

/// The seven bottleneck rows of `MN7-45`.
pub const MN7_45_BLOCKS: [BlockSpec; 7] = [
    BlockSpec::new(6, 45, 1),
    BlockSpec::new(6, 45, 2),
    BlockSpec::new(6, 45, 2),
    BlockSpec::new(6, 45, 2),
    BlockSpec::new(6, 45, 1),
    BlockSpec::new(6, 45, 2),
    BlockSpec::new(6, 45, 1),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub blocks: Vec<BlockSpec>,
    pub last_channels: usize,
    pub num_classes: usize,
    pub with_simam: bool,
    pub simam_lambda: f64,
    /// Time frames per input window.
    pub input_frames: usize,
    /// Mel bins per frame.
    pub input_bins: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::mn7_45(11)
    }
}

impl ModelConfig {
    pub fn mn7_45(num_classes: usize) -> Self {
        Self {
            stem_channels: 45,
            stem_stride: 2,
            blocks: MN7_45_BLOCKS.to_vec(),
            last_channels: 1280,
            num_classes,
            with_simam: false,
            simam_lambda: DEFAULT_SIMAM_LAMBDA,
            input_frames: 100,
            input_bins: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(KwsError::config(format!("model.{key}"), msg));
        if self.stem_channels == 0 || self.last_channels == 0 {
            return bad("stem_channels", "channel counts must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes", "need at least two classes");
        }
        if !(1..=2).contains(&self.stem_stride) {
            return bad("stem_stride", "stride must be 1 or 2");
        }
        for b in &self.blocks {
            if b.t == 0 || b.n == 0 || !(1..=2).contains(&b.s) {
                return bad("blocks", "each block needs t >= 1, n >= 1 and s in {1, 2}");
            }
        }
        if !(self.simam_lambda > 0.0) {
            return bad("simam_lambda", "lambda must be positive");
        }
        if self.input_frames == 0 || self.input_bins == 0 {
            return bad("input_frames", "input dimensions must be positive");
        }
        Ok(())
    }
}

/// Normalization settings shared by every [`BranchSet`] in a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConfig {
    pub branches: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl NormConfig {
    pub fn with_branches(branches: usize) -> Self {
        Self {
            branches,
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }
}

impl Default for NormConfig {
    fn default() -> Self {
        Self::with_branches(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How one forward pass treats normalization and parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub mode: Mode,
    /// Normalization branch used in train mode.
    pub branch: usize,
    /// Fold batch statistics into the branch's running statistics.
    pub update_stats: bool,
    /// Bind parameters as gradient-tracked leaves.
    pub param_grads: bool,
}

impl Pass {
    pub fn train(branch: usize) -> Self {
        Self {
            mode: Mode::Train,
            branch,
            update_stats: true,
            param_grads: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            branch: 0,
            update_stats: false,
            param_grads: false,
        }
    }

    /// Train-mode normalization with frozen statistics and frozen
    /// parameters: the pass used for adversary generation.
    pub fn probe(branch: usize) -> Self {
        Self {
            mode: Mode::Train,
            branch,
            update_stats: false,
            param_grads: false,
        }
    }

    fn norm_mode(&self) -> NormMode {
        match self.mode {
            Mode::Train => NormMode::Train {
                update_stats: self.update_stats,
            },
            Mode::Eval => NormMode::Eval,
        }
    }
}

/// Anything that maps an `N x 1 x frames x bins` input to `N x K` logits.
pub trait Classifier<T: Scalar> {
    fn num_classes(&self) -> usize;

    fn logits(&mut self, tape: &mut Tape<T>, input: Var, pass: Pass) -> Result<Var>;
}

/// Named intermediate activations recorded during a traced forward.
pub type Trace = Vec<(String, Var)>;

fn record(trace: &mut Option<&mut Trace>, name: impl FnOnce() -> String, v: Var) {
    if let Some(t) = trace.as_deref_mut() {
        t.push((name(), v));
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBn<T> {
    weight: ParamId,
    stride: usize,
    pad: usize,
    bn: BranchSet<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck<T> {
    spec: BlockSpec,
    in_channels: usize,
    expand: Option<(ParamId, BranchSet<T>)>,
    depthwise: ParamId,
    depthwise_bn: BranchSet<T>,
    project: ParamId,
    project_bn: BranchSet<T>,
    simam_lambda: Option<T>,
}

fn kaiming_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

impl<T: Scalar> Bottleneck<T> {
    fn new(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        layer: usize,
        in_channels: usize,
        spec: BlockSpec,
        simam_lambda: Option<f64>,
        norm: &NormConfig,
    ) -> Self {
        let hidden = in_channels * spec.t;
        let bn = |store: &mut ParamStore<T>, role: &str, c| {
            BranchSet::new(
                store,
                &format!("layer{layer}.{role}"),
                c,
                norm.branches,
                norm.momentum,
                norm.eps,
            )
        };
        let expand = (spec.t != 1).then(|| {
            let w = store.add(
                format!("layer{layer}.expand.weight"),
                kaiming_uniform(rng, &[hidden, in_channels, 1, 1], in_channels),
            );
            (w, bn(store, "expand_bn", hidden))
        });
        let depthwise = store.add(
            format!("layer{layer}.depthwise.weight"),
            kaiming_uniform(rng, &[hidden, 3, 3], 9),
        );
        let depthwise_bn = bn(store, "depthwise_bn", hidden);
        let project = store.add(
            format!("layer{layer}.project.weight"),
            kaiming_uniform(rng, &[spec.n, hidden, 1, 1], hidden),
        );
        let project_bn = bn(store, "project_bn", spec.n);
        Self {
            spec,
            in_channels,
            expand,
            depthwise,
            depthwise_bn,
            project,
            project_bn,
            simam_lambda: simam_lambda.map(T::lit),
        }
    }

    pub fn spec(&self) -> BlockSpec {
        self.spec
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn has_residual(&self) -> bool {
        self.spec.has_residual(self.in_channels)
    }

    fn weights(&self) -> Vec<ParamId> {
        let mut w: Vec<ParamId> = self.expand.iter().map(|(w, _)| *w).collect();
        w.push(self.depthwise);
        w.push(self.project);
        w
    }

    fn norms(&self) -> Vec<&BranchSet<T>> {
        let mut v: Vec<&BranchSet<T>> = self.expand.iter().map(|(_, b)| b).collect();
        v.push(&self.depthwise_bn);
        v.push(&self.project_bn);
        v
    }

    fn norms_mut(&mut self) -> Vec<&mut BranchSet<T>> {
        let mut v: Vec<&mut BranchSet<T>> = self.expand.iter_mut().map(|(_, b)| b).collect();
        v.push(&mut self.depthwise_bn);
        v.push(&mut self.project_bn);
        v
    }

    /// pointwise expand -> BN -> ReLU6 -> depthwise 3x3 -> [SimAM] -> BN ->
    /// ReLU6 -> pointwise project -> BN, plus identity shortcut when shapes allow.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        pass: Pass,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        let channels = tape.shape(x).get(1).copied().unwrap_or(0);
        if channels != self.in_channels {
            return Err(KwsError::Dimension(format!(
                "bottleneck expects {} input channels, got {channels}",
                self.in_channels
            )));
        }
        let mode = pass.norm_mode();
        let mut h = x;
        if let Some((w, bn)) = self.expand.as_mut() {
            let wv = store.bind(tape, *w, pass.param_grads);
            h = tape.conv2d(h, wv, 1, 0)?;
            h = bn.forward(tape, store, h, pass.branch, mode, pass.param_grads)?;
            h = tape.relu6(h);
            record(&mut trace, || "expand".into(), h);
        }
        let wv = store.bind(tape, self.depthwise, pass.param_grads);
        h = tape.depthwise_conv2d(h, wv, self.spec.s, 1)?;
        record(&mut trace, || "depthwise".into(), h);
        if let Some(lambda) = self.simam_lambda {
            h = tape.simam(h, lambda)?;
            record(&mut trace, || "simam".into(), h);
        }
        h = self
            .depthwise_bn
            .forward(tape, store, h, pass.branch, mode, pass.param_grads)?;
        h = tape.relu6(h);
        record(&mut trace, || "depthwise_act".into(), h);
        let wv = store.bind(tape, self.project, pass.param_grads);
        h = tape.conv2d(h, wv, 1, 0)?;
        h = self
            .project_bn
            .forward(tape, store, h, pass.branch, mode, pass.param_grads)?;
        if self.has_residual() {
            h = tape.add(h, x)?;
        }
        record(&mut trace, || "output".into(), h);
        Ok(h)
    }
}

/// Per-layer convolution weight count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub layer: String,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    norm: NormConfig,
    store: ParamStore<T>,
    stem: ConvBn<T>,
    blocks: Vec<Bottleneck<T>>,
    last: ConvBn<T>,
    head: ParamId,
}

impl<T: Scalar> Model<T> {
    /// Builds the network with Kaiming-uniform (fan-in) convolution weights
    /// drawn from `seed`. Weight draws do not depend on the branch count.
    pub fn new(config: &ModelConfig, norm: NormConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if norm.branches == 0 {
            return Err(KwsError::config("norm.branches", "need at least one branch"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mk_bn = |store: &mut ParamStore<T>, name: String, c: usize| {
            BranchSet::new(store, &name, c, norm.branches, norm.momentum, norm.eps)
        };

        let sc = config.stem_channels;
        let stem_w = store.add(
            "layer0.conv.weight",
            kaiming_uniform(&mut rng, &[sc, 1, 3, 3], 9),
        );
        let stem = ConvBn {
            weight: stem_w,
            stride: config.stem_stride,
            pad: 1,
            bn: mk_bn(&mut store, "layer0.bn".into(), sc),
        };

        let simam = config.with_simam.then_some(config.simam_lambda);
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut channels = sc;
        for (i, spec) in config.blocks.iter().enumerate() {
            blocks.push(Bottleneck::new(
                &mut store, &mut rng, i + 1, channels, *spec, simam, &norm,
            ));
            channels = spec.n;
        }

        let li = config.blocks.len() + 1;
        let lc = config.last_channels;
        let last_w = store.add(
            format!("layer{li}.conv.weight"),
            kaiming_uniform(&mut rng, &[lc, channels, 1, 1], channels),
        );
        let last = ConvBn {
            weight: last_w,
            stride: 1,
            pad: 0,
            bn: mk_bn(&mut store, format!("layer{li}.bn"), lc),
        };
        let head = store.add(
            format!("layer{}.head.weight", li + 2),
            kaiming_uniform(&mut rng, &[config.num_classes, lc, 1, 1], lc),
        );

        Ok(Self {
            config: config.clone(),
            norm,
            store,
            stem,
            blocks,
            last,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn norm_config(&self) -> &NormConfig {
        &self.norm
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn blocks(&self) -> &[Bottleneck<T>] {
        &self.blocks
    }

    pub fn num_branches(&self) -> usize {
        self.norm.branches
    }

    /// Every normalization layer, in forward order.
    pub fn norms(&self) -> Vec<&BranchSet<T>> {
        let mut v = vec![&self.stem.bn];
        for b in &self.blocks {
            v.extend(b.norms());
        }
        v.push(&self.last.bn);
        v
    }

    pub fn norms_mut(&mut self) -> Vec<&mut BranchSet<T>> {
        let mut v = vec![&mut self.stem.bn];
        for b in &mut self.blocks {
            v.extend(b.norms_mut());
        }
        v.push(&mut self.last.bn);
        v
    }

    /// Convolution weight ids in forward order.
    pub fn conv_weights(&self) -> Vec<ParamId> {
        let mut v = vec![self.stem.weight];
        for b in &self.blocks {
            v.extend(b.weights());
        }
        v.push(self.last.weight);
        v.push(self.head);
        v
    }

    /// Convolution weight counts per architecture row (stem, each
    /// bottleneck, 1x1 expansion, classifier). Pooling has none.
    pub fn conv_param_counts(&self) -> Vec<LayerParams> {
        let count = |id: ParamId| self.store.get(id).numel();
        let mut rows = vec![LayerParams {
            layer: "layer0.conv".into(),
            params: count(self.stem.weight),
        }];
        for (i, b) in self.blocks.iter().enumerate() {
            rows.push(LayerParams {
                layer: format!("layer{}.bottleneck", i + 1),
                params: b.weights().into_iter().map(count).sum(),
            });
        }
        let li = self.blocks.len() + 1;
        rows.push(LayerParams {
            layer: format!("layer{li}.conv"),
            params: count(self.last.weight),
        });
        rows.push(LayerParams {
            layer: format!("layer{}.head", li + 2),
            params: count(self.head),
        });
        rows
    }

    pub fn total_conv_params(&self) -> usize {
        self.conv_param_counts().iter().map(|r| r.params).sum()
    }

    /// All trainable scalars, including every branch's scale and shift.
    pub fn total_params(&self) -> usize {
        self.store.iter().map(|(_, p)| p.tensor.numel()).sum()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, pass: Pass) -> Result<Var> {
        self.forward_traced(tape, input, pass, None)
    }

    /// Forward pass that also records named block activations as
    /// `layer{i}.{stage}` when `trace` is given.
    pub fn forward_traced(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        pass: Pass,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        let shape = tape.shape(input).to_vec();
        match shape.as_slice() {
            [_, 1, _, _] => {}
            s => {
                return Err(KwsError::Dimension(format!(
                    "model input must be N x 1 x frames x bins, got {s:?}"
                )))
            }
        }
        let mode = pass.norm_mode();
        let store = &self.store;

        let w = store.bind(tape, self.stem.weight, pass.param_grads);
        let mut h = tape.conv2d(input, w, self.stem.stride, self.stem.pad)?;
        h = self
            .stem
            .bn
            .forward(tape, store, h, pass.branch, mode, pass.param_grads)?;
        h = tape.relu6(h);
        record(&mut trace, || "layer0.output".into(), h);

        for (i, block) in self.blocks.iter_mut().enumerate() {
            let mut local = Trace::new();
            h = block.forward(tape, store, h, pass, trace.is_some().then_some(&mut local))?;
            if let Some(t) = trace.as_deref_mut() {
                t.extend(
                    local
                        .into_iter()
                        .map(|(n, v)| (format!("layer{}.{n}", i + 1), v)),
                );
            }
        }

        let w = store.bind(tape, self.last.weight, pass.param_grads);
        h = tape.conv2d(h, w, 1, 0)?;
        h = self
            .last
            .bn
            .forward(tape, store, h, pass.branch, mode, pass.param_grads)?;
        h = tape.relu6(h);
        h = tape.global_avg_pool(h)?;
        let w = store.bind(tape, self.head, pass.param_grads);
        h = tape.conv2d(h, w, 1, 0)?;
        let n = shape[0];
        tape.reshape(h, vec![n, self.config.num_classes])
    }

    /// Eval-mode logits for an `N x 1 x frames x bins` batch.
    pub fn predict(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(&input.detached());
        let y = self.forward(&mut tape, x, Pass::eval())?;
        Ok(tape.value(y).clone())
    }

    /// Adds gradients recorded on `tape` into the parameter accumulators.
    pub fn collect_grads(&mut self, tape: &Tape<T>) -> Result<usize> {
        self.store.collect_grads(tape)
    }

    pub fn zero_grads(&mut self) {
        self.store.zero_grads();
    }
}

impl<T: Scalar> Classifier<T> for Model<T> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn logits(&mut self, tape: &mut Tape<T>, input: Var, pass: Pass) -> Result<Var> {
        self.forward(tape, input, pass)
    }
}
