use crate::error::{KwsError, Result};
use crate::scalar::Scalar;

use super::ops::{self, ConvGeom, NormSaved, SimamSaved};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    Depthwise {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    Relu6 {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AvgPool {
        input: Var,
        plane: usize,
    },
    Reshape {
        input: Var,
    },
    NormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: NormSaved<T>,
        dims: [usize; 3],
    },
    NormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        dims: [usize; 3],
    },
    Simam {
        input: Var,
        plane: usize,
        saved: SimamSaved<T>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
        classes: usize,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Dot {
        input: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    key: Option<usize>,
}

/// Reverse-mode recording of tensor operations.
///
/// Every op appends a node; [`Tape::backward`] walks the nodes in reverse
/// and adds the resulting leaf gradients into the tape's accumulators, so
/// two backward passes from the same loss double every gradient.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            key: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input; gradient tracking follows the tensor's own flag.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor.detached(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Records a parameter leaf labelled with an external `key`, so callers
    /// can route its gradient back to the owning store.
    pub fn param(&mut self, tensor: &Tensor<T>, key: usize, requires_grad: bool) -> Var {
        let v = self.push(tensor.detached(), Op::Leaf, requires_grad);
        self.nodes[v.0].key = Some(key);
        v
    }

    /// `(key, var)` for every parameter leaf, in recording order.
    pub fn params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.key.map(|k| (k, Var(i))))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Relu6 region code of every recorded relu6 input (0 clamped low,
    /// 1 linear, 2 clamped high). Finite-difference checks compare these to
    /// detect perturbations that cross a kink.
    pub fn relu6_regions(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu6 { input } = node.op {
                out.extend(self.nodes[input.0].value.data().iter().map(|&v| {
                    if v <= T::zero() {
                        0
                    } else if v >= T::lit(6.0) {
                        2
                    } else {
                        1
                    }
                }));
            }
        }
        out
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::dense(self.shape(input), self.shape(weight), stride, pad)?;
        let out = ops::conv2d_forward(self.value(input).data(), self.value(weight).data(), &geom);
        let value = Tensor::new(geom.out_shape(), out)?;
        let rg = self.needs(input) || self.needs(weight);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                geom,
            },
            rg,
        ))
    }

    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::depthwise(self.shape(input), self.shape(weight), stride, pad)?;
        let out =
            ops::depthwise_forward(self.value(input).data(), self.value(weight).data(), &geom);
        let value = Tensor::new(geom.out_shape(), out)?;
        let rg = self.needs(input) || self.needs(weight);
        Ok(self.push(
            value,
            Op::Depthwise {
                input,
                weight,
                geom,
            },
            rg,
        ))
    }

    pub fn relu6(&mut self, input: Var) -> Var {
        let value = super::ops::relu6(self.value(input));
        let rg = self.needs(input);
        self.push(value, Op::Relu6 { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(KwsError::Dimension(format!(
                "cannot add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [_, _, h, w] = ops::rank4(self.shape(input), "pool input")?;
        let value = ops::global_avg_pool(self.value(input))?;
        let rg = self.needs(input);
        Ok(self.push(
            value,
            Op::AvgPool {
                input,
                plane: h * w,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).detached().reshape(shape)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    fn norm_dims(&self, input: Var, gamma: Var, beta: Var) -> Result<[usize; 3]> {
        let [n, c, h, w] = ops::rank4(self.shape(input), "normalization input")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(KwsError::Dimension(format!(
                "normalization over {c} channels needs {c} scales and shifts"
            )));
        }
        Ok([n, c, h * w])
    }

    /// Batch normalization with statistics from the current batch.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let dims = self.norm_dims(input, gamma, beta)?;
        let (y, saved) = ops::batch_norm_train_forward(
            self.value(input).data(),
            dims[0],
            dims[1],
            dims[2],
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let stats = BatchStats {
            mean: saved.mean.clone(),
            var: saved.var.clone(),
        };
        let value = Tensor::new(self.shape(input).to_vec(), y)?;
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            value,
            Op::NormTrain {
                input,
                gamma,
                beta,
                saved,
                dims,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let dims = self.norm_dims(input, gamma, beta)?;
        let [n, c, p] = dims;
        if mean.len() != c || var.len() != c {
            return Err(KwsError::Dimension("running statistics length".into()));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut y = vec![T::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * p;
                for i in base..base + p {
                    y[i] = g[ci] * (x[i] - mean[ci]) * inv_std[ci] + b[ci];
                }
            }
        }
        let value = Tensor::new(self.shape(input).to_vec(), y)?;
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::NormEval {
                input,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
                dims,
            },
            rg,
        ))
    }

    /// Parameter-free energy attention over each `H x W` channel plane.
    pub fn simam(&mut self, input: Var, lambda: T) -> Result<Var> {
        let [_, _, h, w] = ops::rank4(self.shape(input), "simam input")?;
        let plane = h * w;
        if plane == 0 {
            return Err(KwsError::Contract("simam over an empty plane".into()));
        }
        if lambda <= T::zero() {
            return Err(KwsError::Contract("simam lambda must be positive".into()));
        }
        let (y, saved) = ops::simam_forward(self.value(input).data(), plane, lambda);
        let value = Tensor::new(self.shape(input).to_vec(), y)?;
        let rg = self.needs(input);
        Ok(self.push(
            value,
            Op::Simam {
                input,
                plane,
                saved,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `N x K` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let classes = match self.shape(logits) {
            &[n, k] if n == labels.len() => k,
            s => {
                return Err(KwsError::Dimension(format!(
                    "logits {s:?} do not match {} labels",
                    labels.len()
                )))
            }
        };
        let (loss, probs) = ops::softmax_ce_forward(self.value(logits).data(), classes, labels)?;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::new(vec![1], vec![loss])?,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
                classes,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum();
        let rg = self.needs(input);
        self.push(Tensor::full(&[1], s), Op::Sum { input }, rg)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = Tensor::new(
            self.shape(input).to_vec(),
            self.value(input).data().iter().map(|&v| v * factor).collect(),
        )
        .expect("same shape");
        let rg = self.needs(input);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    /// Scalar `sum_i weights[i] * input[i]`.
    pub fn dot(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        if weights.len() != self.value(input).numel() {
            return Err(KwsError::Dimension("dot weights length".into()));
        }
        let s = self
            .value(input)
            .data()
            .iter()
            .zip(weights)
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.needs(input);
        Ok(self.push(
            Tensor::full(&[1], s),
            Op::Dot {
                input,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Runs a backward pass from `loss` and adds the leaf gradients into the
    /// tape's accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let pass = self.gradients(loss)?;
        for (slot, g) in self.grads.iter_mut().zip(pass) {
            if let Some(g) = g {
                add_into(slot, g);
            }
        }
        Ok(())
    }

    /// Leaf gradients of `loss` from a single fresh backward pass; the
    /// tape's accumulators are left untouched. Indexed by `Var::index`.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.value(loss).numel() != 1 {
            return Err(KwsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(grads);
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut send = |v: Var, delta: Vec<T>| {
            if self.needs(v) {
                add_into(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let (dx, dw) = ops::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geom,
                    self.needs(*input),
                    self.needs(*weight),
                );
                if let Some(dx) = dx {
                    send(*input, dx);
                }
                if let Some(dw) = dw {
                    send(*weight, dw);
                }
            }
            Op::Depthwise {
                input,
                weight,
                geom,
            } => {
                let (dx, dw) = ops::depthwise_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geom,
                    self.needs(*input),
                    self.needs(*weight),
                );
                if let Some(dx) = dx {
                    send(*input, dx);
                }
                if let Some(dw) = dw {
                    send(*weight, dw);
                }
            }
            Op::Relu6 { input } => {
                let dx = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| if ops::relu6_passes(x) { gi } else { T::zero() })
                    .collect();
                send(*input, dx);
            }
            Op::Add { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AvgPool { input, plane } => {
                let inv = T::lit(1.0 / *plane as f64);
                let mut dx = Vec::with_capacity(g.len() * plane);
                for &gi in g {
                    dx.extend(std::iter::repeat(gi * inv).take(*plane));
                }
                send(*input, dx);
            }
            Op::Reshape { input } => send(*input, g.to_vec()),
            Op::NormTrain {
                input,
                gamma,
                beta,
                saved,
                dims,
            } => {
                let (dx, dgamma, dbeta) = ops::batch_norm_train_backward(
                    g,
                    saved,
                    self.value(*gamma).data(),
                    dims[0],
                    dims[1],
                    dims[2],
                );
                send(*input, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::NormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                dims,
            } => {
                let [n, c, p] = *dims;
                let x = self.value(*input).data();
                let gm = self.value(*gamma).data();
                let mut dx = vec![T::zero(); x.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * p;
                        for i in base..base + p {
                            dx[i] = g[i] * gm[ci] * inv_std[ci];
                            dgamma[ci] += g[i] * (x[i] - mean[ci]) * inv_std[ci];
                            dbeta[ci] += g[i];
                        }
                    }
                }
                send(*input, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::Simam {
                input,
                plane,
                saved,
            } => {
                let dx = ops::simam_backward(self.value(*input).data(), g, *plane, saved);
                send(*input, dx);
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
                classes,
            } => {
                let scale = g[0] / T::lit(labels.len().max(1) as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (n, &label) in labels.iter().enumerate() {
                    dx[n * classes + label] -= scale;
                }
                send(*logits, dx);
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                send(*input, vec![g[0]; n]);
            }
            Op::Scale { input, factor } => {
                send(*input, g.iter().map(|&v| v * *factor).collect());
            }
            Op::Dot { input, weights } => {
                send(*input, weights.iter().map(|&w| w * g[0]).collect());
            }
        }
    }
}
