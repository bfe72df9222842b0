//! Wengert-list reverse-mode differentiation over the fixed operator set.
//!
//! A `Tape` records one forward pass; `backward` replays it in reverse. Gradient
//! buffers exist only for nodes that (transitively) depend on a trainable leaf,
//! so frozen subgraphs cost nothing on the way back and stop-gradient boundaries
//! are structural rather than numerical.

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::tensor::TensorF;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Behaviour of the gradient-isolation layer in front of a client discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GrlMode {
    /// Truncate: no gradient crosses back into the main branch.
    #[default]
    Stop,
    /// Sign-reversing variant, exposed for ablation.
    Reverse,
}

impl GrlMode {
    fn pass_factor(self) -> f64 {
        match self {
            GrlMode::Stop => 0.0,
            GrlMode::Reverse => -1.0,
        }
    }
}

enum Op {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, bias: Option<NodeId> },
    Relu { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Gap { input: NodeId },
    MatVec { weight: NodeId, input: NodeId },
    Grl { input: NodeId, pass: f64 },
    SoftmaxCe { logits: NodeId, true_index: usize, probs: TensorF },
    BceLogits { logits: NodeId, target: TensorF },
    Scale { input: NodeId, factor: f64 },
    AddN { inputs: Vec<NodeId> },
    /// (coeff/2) * sum((x - anchor)^2); the FedProx proximal term.
    SqDistTo { input: NodeId, anchor: TensorF, coeff: f64 },
}

struct Node {
    value: TensorF,
    grad: Option<TensorF>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    /// Trainable input: gradients are tracked.
    pub fn leaf(&mut self, value: TensorF) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Frozen input: no gradient buffer, backward never reaches past it.
    pub fn constant(&mut self, value: TensorF) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &TensorF {
        &self.nodes[id.0].value
    }

    /// Gradient of a node after `backward`.
    pub fn grad(&self, id: NodeId) -> Result<&TensorF> {
        if !self.backward_done {
            return Err(Error::state("gradient requested before backward".to_string()));
        }
        self.nodes[id.0]
            .grad
            .as_ref()
            .ok_or_else(|| Error::state("node does not track gradients".to_string()))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let out = ops::conv2d_same(
            self.val(input),
            self.val(kernel),
            bias.map(|b| self.val(b)),
        )?;
        let req = self.req(input) || self.req(kernel) || bias.map(|b| self.req(b)).unwrap_or(false);
        Ok(self.push(out, req, Op::Conv2d { input, kernel, bias }))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = ops::relu(self.val(input));
        let req = self.req(input);
        self.push(out, req, Op::Relu { input })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::config(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = TensorF::from_vec(self.val(a).shape(), data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(out, req, Op::Add { a, b }))
    }

    pub fn gap(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::global_average_pool(self.val(input))?;
        let req = self.req(input);
        Ok(self.push(out, req, Op::Gap { input }))
    }

    pub fn matvec(&mut self, weight: NodeId, input: NodeId) -> Result<NodeId> {
        let out = ops::matvec(self.val(weight), self.val(input))?;
        let req = self.req(weight) || self.req(input);
        Ok(self.push(out, req, Op::MatVec { weight, input }))
    }

    /// Identity forward; backward multiplies by 0 (stop) or -1 (reverse).
    pub fn grl(&mut self, input: NodeId, mode: GrlMode) -> NodeId {
        let pass = mode.pass_factor();
        let out = self.val(input).clone();
        let req = self.req(input) && pass != 0.0;
        self.push(out, req, Op::Grl { input, pass })
    }

    /// Scalar loss node; cached probs are readable via `softmax_probs`.
    pub fn softmax_ce(&mut self, logits: NodeId, true_index: usize) -> Result<NodeId> {
        let (loss, probs) = ops::softmax_cross_entropy(self.val(logits), true_index)?;
        let req = self.req(logits);
        Ok(self.push(TensorF::scalar(loss), req, Op::SoftmaxCe { logits, true_index, probs }))
    }

    /// Probabilities cached by a `softmax_ce` node.
    pub fn softmax_probs(&self, node: NodeId) -> Result<&TensorF> {
        match &self.nodes[node.0].op {
            Op::SoftmaxCe { probs, .. } => Ok(probs),
            _ => Err(Error::state("softmax_probs on a non-softmax node".to_string())),
        }
    }

    pub fn bce_with_logits(&mut self, logits: NodeId, target: TensorF) -> Result<NodeId> {
        let loss = ops::binary_cross_entropy(self.val(logits), &target)?;
        let req = self.req(logits);
        Ok(self.push(TensorF::scalar(loss), req, Op::BceLogits { logits, target }))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let data = self.val(input).data().iter().map(|v| v * factor).collect();
        let out = TensorF::from_vec(self.val(input).shape(), data).expect("same shape");
        let req = self.req(input);
        self.push(out, req, Op::Scale { input, factor })
    }

    /// Elementwise sum of same-shaped nodes (used to fold per-sample losses).
    pub fn add_n(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::validation("add_n needs at least one input".to_string()));
        }
        let shape = self.val(inputs[0]).shape().to_vec();
        let mut data = vec![0.0; self.val(inputs[0]).len()];
        for &id in inputs {
            if self.val(id).shape() != shape {
                return Err(Error::config("add_n shape mismatch".to_string()));
            }
            for (acc, &v) in data.iter_mut().zip(self.val(id).data()) {
                *acc += v;
            }
        }
        let out = TensorF::from_vec(&shape, data)?;
        let req = inputs.iter().any(|&i| self.req(i));
        Ok(self.push(out, req, Op::AddN { inputs: inputs.to_vec() }))
    }

    /// Scalar (coeff/2) * ||x - anchor||^2.
    pub fn sq_dist_to(&mut self, input: NodeId, anchor: TensorF, coeff: f64) -> Result<NodeId> {
        if self.val(input).shape() != anchor.shape() {
            return Err(Error::config(format!(
                "sq_dist_to shape mismatch: {:?} vs {:?}",
                self.val(input).shape(),
                anchor.shape()
            )));
        }
        let sum: f64 = self
            .val(input)
            .data()
            .iter()
            .zip(anchor.data())
            .map(|(x, a)| (x - a) * (x - a))
            .sum();
        let req = self.req(input);
        Ok(self.push(TensorF::scalar(coeff * 0.5 * sum), req, Op::SqDistTo { input, anchor, coeff }))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// reachable gradient-tracking node; may only run once per tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::state("backward without a recorded forward pass".to_string()));
        }
        if self.backward_done {
            return Err(Error::state("backward already ran on this tape".to_string()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::validation(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g.data_mut()[0] = 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            // Take the node's grad out to appease the borrow checker; leaves keep theirs.
            let Some(gout) = self.nodes[i].grad.take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    self.nodes[i].grad = Some(gout);
                    continue;
                }
                _ => {}
            }
            self.propagate(i, &gout);
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, gout: &TensorF) {
        // Split borrows: clone the small descriptors out of the op.
        enum Step {
            Conv { input: NodeId, kernel: NodeId, bias: Option<NodeId> },
            Relu { input: NodeId },
            Add { a: NodeId, b: NodeId },
            Gap { input: NodeId },
            MatVec { weight: NodeId, input: NodeId },
            Grl { input: NodeId, pass: f64 },
            SoftCe { logits: NodeId, true_index: usize },
            Bce { logits: NodeId },
            Scale { input: NodeId, factor: f64 },
            AddN { inputs: Vec<NodeId> },
            SqDist { input: NodeId, coeff: f64 },
            None,
        }
        let step = match &self.nodes[i].op {
            Op::Leaf => Step::None,
            Op::Conv2d { input, kernel, bias } => {
                Step::Conv { input: *input, kernel: *kernel, bias: *bias }
            }
            Op::Relu { input } => Step::Relu { input: *input },
            Op::Add { a, b } => Step::Add { a: *a, b: *b },
            Op::Gap { input } => Step::Gap { input: *input },
            Op::MatVec { weight, input } => Step::MatVec { weight: *weight, input: *input },
            Op::Grl { input, pass } => Step::Grl { input: *input, pass: *pass },
            Op::SoftmaxCe { logits, true_index, .. } => {
                Step::SoftCe { logits: *logits, true_index: *true_index }
            }
            Op::BceLogits { logits, .. } => Step::Bce { logits: *logits },
            Op::Scale { input, factor } => Step::Scale { input: *input, factor: *factor },
            Op::AddN { inputs } => Step::AddN { inputs: inputs.clone() },
            Op::SqDistTo { input, coeff, .. } => Step::SqDist { input: *input, coeff: *coeff },
        };
        match step {
            Step::None => {}
            Step::Conv { input, kernel, bias } => {
                let (ival, kval) = (self.nodes[input.0].value.clone(), self.nodes[kernel.0].value.clone());
                let mut di = self.take_grad(input);
                let mut dk = self.take_grad(kernel);
                let mut db = bias.and_then(|b| self.take_grad(b));
                ops::conv2d_backward(&ival, &kval, gout, di.as_mut(), dk.as_mut(), db.as_mut());
                self.put_grad(input, di);
                self.put_grad(kernel, dk);
                if let Some(b) = bias {
                    self.put_grad(b, db);
                }
            }
            Step::Relu { input } => {
                if let Some(mut di) = self.take_grad(input) {
                    let ival = &self.nodes[input.0].value;
                    ops::relu_backward(ival, gout, &mut di);
                    self.put_grad(input, Some(di));
                }
            }
            Step::Add { a, b } => {
                for id in [a, b] {
                    if let Some(mut d) = self.take_grad(id) {
                        for (x, &g) in d.data_mut().iter_mut().zip(gout.data()) {
                            *x += g;
                        }
                        self.put_grad(id, Some(d));
                    }
                }
            }
            Step::Gap { input } => {
                if let Some(mut di) = self.take_grad(input) {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    ops::gap_backward(&shape, gout, &mut di);
                    self.put_grad(input, Some(di));
                }
            }
            Step::MatVec { weight, input } => {
                let (wval, ival) = (self.nodes[weight.0].value.clone(), self.nodes[input.0].value.clone());
                let mut dw = self.take_grad(weight);
                let mut dx = self.take_grad(input);
                ops::matvec_backward(&wval, &ival, gout, dw.as_mut(), dx.as_mut());
                self.put_grad(weight, dw);
                self.put_grad(input, dx);
            }
            Step::Grl { input, pass } => {
                if pass != 0.0 {
                    if let Some(mut di) = self.take_grad(input) {
                        for (x, &g) in di.data_mut().iter_mut().zip(gout.data()) {
                            *x += pass * g;
                        }
                        self.put_grad(input, Some(di));
                    }
                }
            }
            Step::SoftCe { logits, true_index } => {
                if let Some(mut dl) = self.take_grad(logits) {
                    let probs = match &self.nodes[i].op {
                        Op::SoftmaxCe { probs, .. } => probs.clone(),
                        _ => unreachable!(),
                    };
                    ops::softmax_ce_backward(&probs, true_index, gout.item(), &mut dl);
                    self.put_grad(logits, Some(dl));
                }
            }
            Step::Bce { logits } => {
                if let Some(mut dl) = self.take_grad(logits) {
                    let (lval, target) = match &self.nodes[i].op {
                        Op::BceLogits { logits: l, target } => {
                            (self.nodes[l.0].value.clone(), target.clone())
                        }
                        _ => unreachable!(),
                    };
                    ops::bce_backward(&lval, &target, gout.item(), &mut dl);
                    self.put_grad(logits, Some(dl));
                }
            }
            Step::Scale { input, factor } => {
                if let Some(mut di) = self.take_grad(input) {
                    for (x, &g) in di.data_mut().iter_mut().zip(gout.data()) {
                        *x += factor * g;
                    }
                    self.put_grad(input, Some(di));
                }
            }
            Step::AddN { inputs } => {
                for id in inputs {
                    if let Some(mut d) = self.take_grad(id) {
                        for (x, &g) in d.data_mut().iter_mut().zip(gout.data()) {
                            *x += g;
                        }
                        self.put_grad(id, Some(d));
                    }
                }
            }
            Step::SqDist { input, coeff } => {
                if let Some(mut di) = self.take_grad(input) {
                    let (ival, anchor) = match &self.nodes[i].op {
                        Op::SqDistTo { input: x, anchor, .. } => {
                            (self.nodes[x.0].value.clone(), anchor.clone())
                        }
                        _ => unreachable!(),
                    };
                    let g = gout.item();
                    for ((x, &v), &a) in
                        di.data_mut().iter_mut().zip(ival.data()).zip(anchor.data())
                    {
                        *x += coeff * (v - a) * g;
                    }
                    self.put_grad(input, Some(di));
                }
            }
        }
    }

    fn take_grad(&mut self, id: NodeId) -> Option<TensorF> {
        self.nodes[id.0].grad.take()
    }

    fn put_grad(&mut self, id: NodeId, grad: Option<TensorF>) {
        self.nodes[id.0].grad = grad;
    }

    fn val(&self, id: NodeId) -> &TensorF {
        &self.nodes[id.0].value
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: TensorF, requires_grad: bool, op: Op) -> NodeId {
        let grad = requires_grad.then(|| TensorF::zeros(value.shape()));
        self.nodes.push(Node { value, grad, requires_grad, op });
        NodeId(self.nodes.len() - 1)
    }
}
