//! Recording tape for the pipeline's fixed operator set.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use crate::diffcore::conv::{self, ConvSpec};
use crate::diffcore::kernels::{self, BnSaved, BnState, Shift};
use crate::diffcore::params::{BnId, ParamId, ParamStore};
use crate::diffcore::tensor::Tensor;
use crate::error::{shape_err, DiclError, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, s: T },
    Sum { x: Var },
    WeightedSum { xs: Vec<Var>, ws: Vec<T> },
    Reshape { x: Var },
    Softmax { x: Var, axis: usize },
    Warp { target: Var, flow: Var },
    Upsample { x: Var, factor: usize, scale: T },
    ConcatDisplaced { f1: Var, f2: Var, shifts: Vec<Shift> },
    DotCorr { f1: Var, f2: Var, shifts: Vec<Shift> },
    CosCorr { f1: Var, f2: Var, shifts: Vec<Shift> },
    PadBr { x: Var },
    Crop { x: Var },
    Cat { a: Var, b: Var, ca: usize },
    NarrowBatch { x: Var, start: usize },
    MaskedEpe { pred: Var, gt: Tensor<T>, mask: Tensor<T> },
    Project { x: Var, w: Tensor<T> },
    HalfSquares { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// A single forward/backward evaluation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    train: bool,
    params: usize,
    bn: Vec<BnState<T>>,
}

impl<T: Scalar> Graph<T> {
    /// Empty graph. `train` selects batch statistics (and running-stat updates) in batch norm.
    pub fn new(train: bool) -> Self {
        Self { nodes: Vec::new(), train, params: 0, bn: Vec::new() }
    }

    /// Graph whose first nodes are the parameters of `store`, in store order.
    pub fn bind(store: &ParamStore<T>, train: bool, requires_grad: bool) -> Self {
        let mut g = Self::new(train);
        for t in store.tensors() {
            g.push(t.clone(), requires_grad, Op::Leaf);
        }
        g.params = store.len();
        g.bn = store.bn_states().to_vec();
        g
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.index() < self.params, "parameter {} not bound to this graph", id.index());
        Var(id.index())
    }

    /// Running statistics after this graph's forward pass.
    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn
    }

    pub fn add_bn_state(&mut self, state: BnState<T>) -> BnId {
        self.bn.push(state);
        BnId::new(self.bn.len() - 1)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradients of the bound parameters in store order (zeros where none flowed).
    pub fn param_grads(&self) -> Vec<Tensor<T>> {
        (0..self.params)
            .map(|i| self.nodes[i].grad.clone().unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape())))
            .collect()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor<T>, parents: &[Var], op: Op<T>) -> Var {
        let rg = self.rg(parents);
        self.push(value, rg, op)
    }

    // ------------------------------------------------------------------
    // operators

    pub fn conv2d(&mut self, x: Var, spec: ConvSpec, w: Var, b: Option<Var>) -> Result<Var> {
        let y = conv::forward(self.value(x), &spec, self.value(w), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.record(y, &parents, Op::Conv { x, w, b, spec }))
    }

    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, state: BnId) -> Result<Var> {
        let train = self.train;
        let mut st = self.bn[state.index()].clone();
        let (y, saved) =
            kernels::batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), &mut st, train)?;
        self.bn[state.index()] = st;
        Ok(self.record(y, &[x, gamma, beta], Op::BatchNorm { x, gamma, beta, saved }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu(self.value(x));
        self.record(y, &[x], Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.record(y, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.record(y, &[a, b], Op::Sub { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).map(|v| v * s);
        self.record(y, &[x], Op::Scale { x, s })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.record(y, &[x], Op::Sum { x })
    }

    /// `sum_i ws[i] * xs[i]` over single-element nodes.
    pub fn weighted_sum(&mut self, xs: &[Var], ws: &[T]) -> Result<Var> {
        if xs.len() != ws.len() || xs.is_empty() {
            return Err(shape_err!("weighted sum needs one weight per term"));
        }
        let mut acc = T::zero();
        for (&x, &w) in xs.iter().zip(ws) {
            let v = self.value(x);
            if v.numel() != 1 {
                return Err(shape_err!("weighted sum terms must be scalars, got {:?}", v.shape()));
            }
            acc += w * v.data()[0];
        }
        Ok(self.record(Tensor::scalar(acc), xs, Op::WeightedSum { xs: xs.to_vec(), ws: ws.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.record(y, &[x], Op::Reshape { x }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = kernels::softmax(self.value(x), axis)?;
        Ok(self.record(y, &[x], Op::Softmax { x, axis }))
    }

    /// Returns the warped node and the (constant) validity mask.
    pub fn warp(&mut self, target: Var, flow: Var) -> Result<(Var, Tensor<T>)> {
        let (y, valid) = kernels::warp_forward(self.value(target), self.value(flow))?;
        Ok((self.record(y, &[target, flow], Op::Warp { target, flow }), valid))
    }

    pub fn upsample(&mut self, x: Var, factor: usize, scale: T) -> Result<Var> {
        let y = kernels::upsample_forward(self.value(x), factor, scale)?;
        Ok(self.record(y, &[x], Op::Upsample { x, factor, scale }))
    }

    pub fn concat_displaced(&mut self, f1: Var, f2: Var, shifts: &[Shift]) -> Result<Var> {
        let y = kernels::concat_displaced_forward(self.value(f1), self.value(f2), shifts)?;
        Ok(self.record(y, &[f1, f2], Op::ConcatDisplaced { f1, f2, shifts: shifts.to_vec() }))
    }

    pub fn dot_corr(&mut self, f1: Var, f2: Var, shifts: &[Shift]) -> Result<Var> {
        let y = kernels::dot_corr_forward(self.value(f1), self.value(f2), shifts)?;
        Ok(self.record(y, &[f1, f2], Op::DotCorr { f1, f2, shifts: shifts.to_vec() }))
    }

    pub fn cos_corr(&mut self, f1: Var, f2: Var, shifts: &[Shift]) -> Result<Var> {
        let y = kernels::cos_corr_forward(self.value(f1), self.value(f2), shifts)?;
        Ok(self.record(y, &[f1, f2], Op::CosCorr { f1, f2, shifts: shifts.to_vec() }))
    }

    pub fn pad_br(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        if ph == 0 && pw == 0 {
            return Ok(x);
        }
        let y = kernels::pad_br(self.value(x), ph, pw)?;
        Ok(self.record(y, &[x], Op::PadBr { x }))
    }

    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (_, _, hi, wi) = self.value(x).dims4()?;
        if (h, w) == (hi, wi) {
            return Ok(x);
        }
        let y = kernels::crop(self.value(x), h, w)?;
        Ok(self.record(y, &[x], Op::Crop { x }))
    }

    pub fn cat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::cat_channels(self.value(a), self.value(b))?;
        let ca = self.value(a).shape()[1];
        Ok(self.record(y, &[a, b], Op::Cat { a, b, ca }))
    }

    /// Batch items `start .. start + len` of a rank >= 2 node.
    pub fn narrow_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let n = v.shape()[0];
        if v.rank() < 2 || len == 0 || start + len > n {
            return Err(shape_err!("cannot take items {start}..{} of {:?}", start + len, v.shape()));
        }
        let per = v.numel() / n;
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let y = Tensor::from_vec(&shape, v.data()[start * per..(start + len) * per].to_vec())?;
        Ok(self.record(y, &[x], Op::NarrowBatch { x, start }))
    }

    pub fn masked_epe(&mut self, pred: Var, gt: Tensor<T>, mask: Tensor<T>) -> Result<Var> {
        let v = kernels::masked_epe(self.value(pred), &gt, &mask)?;
        Ok(self.record(Tensor::scalar(v), &[pred], Op::MaskedEpe { pred, gt, mask }))
    }

    /// Scalar `sum_i x_i * w_i` against a constant tensor.
    pub fn project(&mut self, x: Var, w: Tensor<T>) -> Result<Var> {
        self.value(x).same_shape(&w)?;
        let v = self.value(x).dot(&w);
        Ok(self.record(Tensor::scalar(v), &[x], Op::Project { x, w }))
    }

    /// Scalar `sum_i x_i^2 / 2`.
    pub fn half_squares(&mut self, x: Var) -> Var {
        let v = self.value(x).dot(self.value(x)) / T::lit(2.0);
        self.record(Tensor::scalar(v), &[x], Op::HalfSquares { x })
    }

    // ------------------------------------------------------------------
    // reverse sweep

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(shape_err!("backward needs a scalar root, got shape {:?}", root.value.shape()));
        }
        if !root.value.is_finite() {
            return Err(DiclError::NonFinite("loss".into()));
        }
        let seed = Tensor::full(root.value.shape(), T::one());
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (parent, pg) in self.local_grads(i, &g)? {
                self.accumulate(parent, pg);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(node.value.shape(), g.shape());
        match node.grad.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let grads = conv::backward(self.value(*x), spec, self.value(*w), g, self.needs(*x))?;
                if let Some(dx) = grads.input {
                    out.push((*x, dx));
                }
                out.push((*w, grads.weights));
                if let Some(b) = b {
                    out.push((*b, grads.bias));
                }
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = kernels::batchnorm_backward(self.value(*x), self.value(*gamma), saved, g)?;
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Relu { x } => out.push((*x, kernels::relu_backward(&node.value, g))),
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Scale { x, s } => out.push((*x, g.map(|v| v * *s))),
            Op::Sum { x } => out.push((*x, Tensor::full(self.value(*x).shape(), g.data()[0]))),
            Op::WeightedSum { xs, ws } => {
                for (&x, &w) in xs.iter().zip(ws) {
                    out.push((x, Tensor::full(self.value(x).shape(), w * g.data()[0])));
                }
            }
            Op::Reshape { x } => out.push((*x, g.clone().reshape(self.value(*x).shape())?)),
            Op::Softmax { x, axis } => out.push((*x, kernels::softmax_backward(&node.value, g, *axis)?)),
            Op::Warp { target, flow } => {
                let (dt, df) = kernels::warp_backward(self.value(*target), self.value(*flow), g)?;
                out.push((*target, dt));
                out.push((*flow, df));
            }
            Op::Upsample { x, factor, scale } => {
                out.push((*x, kernels::upsample_backward(self.value(*x).shape(), *factor, *scale, g)))
            }
            Op::ConcatDisplaced { f1, f2, shifts } => {
                let (d1, d2) = kernels::concat_displaced_backward(self.value(*f1).shape(), shifts, g);
                out.push((*f1, d1));
                out.push((*f2, d2));
            }
            Op::DotCorr { f1, f2, shifts } => {
                let (d1, d2) = kernels::dot_corr_backward(self.value(*f1), self.value(*f2), shifts, g);
                out.push((*f1, d1));
                out.push((*f2, d2));
            }
            Op::CosCorr { f1, f2, shifts } => {
                let (d1, d2) = kernels::cos_corr_backward(self.value(*f1), self.value(*f2), shifts, g)?;
                out.push((*f1, d1));
                out.push((*f2, d2));
            }
            Op::PadBr { x } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                out.push((*x, kernels::crop(g, h, w)?));
            }
            Op::Crop { x } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                out.push((*x, kernels::uncrop(g, h, w)?));
            }
            Op::Cat { a, b, ca } => {
                let (da, db) = kernels::split_channels(g, *ca)?;
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::NarrowBatch { x, start } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let off = start * g.numel() / g.shape()[0];
                dx.data_mut()[off..off + g.numel()].copy_from_slice(g.data());
                out.push((*x, dx));
            }
            Op::MaskedEpe { pred, gt, mask } => {
                out.push((*pred, kernels::masked_epe_backward(self.value(*pred), gt, mask, g.data()[0])?))
            }
            Op::Project { x, w } => out.push((*x, w.map(|v| v * g.data()[0]))),
            Op::HalfSquares { x } => out.push((*x, self.value(*x).map(|v| v * g.data()[0]))),
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::testutil::random_tensor;

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(random_tensor(&[2, 3], 1));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(random_tensor(&[2, 3], 1));
        let y = g.scale(x, 2.0);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn shared_value_accumulates_both_paths() {
        // L = sum(3x + x*? ) realized as sum(scale(x,3)) + sum(scale(x,-5)) -> dL/dx = -2
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(random_tensor(&[4], 2));
        let a = g.scale(x, 3.0);
        let b = g.scale(x, -5.0);
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == -2.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(random_tensor(&[3], 2));
        let c = g.constant(random_tensor(&[3], 3));
        let y = g.add(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }
}
