//! The autodiff tape: tensors, ops, and backward passes.

use ndarray::{concatenate, Array1, Array2, ArrayD, ArrayViewD, Axis, IxDyn, Slice};
use std::collections::HashMap;

/// Handle to a node on the tape. Cheap to copy; only valid for the graph
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

/// Handle to a named parameter array in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

struct ParamEntry {
    name: String,
    value: ArrayD<f64>,
}

/// Owns parameter arrays across training steps. Graphs copy values in on
/// `Graph::param` and hand gradients back after `backward`.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Concatenate every parameter into one flat vector (store order).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in &self.entries {
            out.extend(e.value.iter().copied());
        }
        out
    }

    /// Overwrite all parameters from a flat vector laid out as `to_flat`.
    pub fn from_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            for (dst, src) in e.value.iter_mut().zip(&flat[off..off + n]) {
                *dst = *src;
            }
            off += n;
        }
        assert_eq!(off, flat.len(), "flat vector length mismatch");
    }
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    AddScalar(Tensor, #[allow(dead_code)] f64),
    MulScalar(Tensor, f64),
    Exp(Tensor),
    Ln(Tensor),
    Sigmoid(Tensor),
    Tanh(Tensor),
    Relu(Tensor),
    Softplus(Tensor),
    Clamp(Tensor, f64, f64),
    Matmul(Tensor, Tensor),
    Sum(Tensor),
    Mean(Tensor),
    SumAxis(Tensor, usize),
    Reshape(Tensor),
    Broadcast(Tensor),
    Concat(Vec<Tensor>, usize),
    Narrow {
        src: Tensor,
        axis: usize,
        start: usize,
        len: usize,
    },
    LogSumExp(Tensor, usize),
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest2x(Tensor),
    GridPlace {
        glimpse: Tensor,
        params: Tensor,
    },
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// A single-use computation tape. Build the forward pass with the op
/// methods, call [`Graph::backward`] on a scalar node, then read gradients.
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: HashMap<ParamId, Tensor>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Tensor {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
            param: None,
        });
        Tensor(self.nodes.len() - 1)
    }

    /// A constant input; gradients are not tracked through it.
    pub fn input(&mut self, value: ArrayD<f64>) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    /// An input that does track gradients (for gradient checks on data).
    pub fn input_grad(&mut self, value: ArrayD<f64>) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    /// Bring a parameter onto the tape. Repeated calls with the same id
    /// return the same node so gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        if let Some(&t) = self.param_cache.get(&id) {
            return t;
        }
        let t = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[t.0].param = Some(id);
        self.param_cache.insert(id, t);
        t
    }

    pub fn value(&self, t: Tensor) -> &ArrayD<f64> {
        &self.nodes[t.0].value
    }

    pub fn grad(&self, t: Tensor) -> Option<&ArrayD<f64>> {
        self.nodes[t.0].grad.as_ref()
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        let v = self.value(t);
        assert_eq!(v.len(), 1, "scalar() on tensor of len {}", v.len());
        *v.iter().next().unwrap()
    }

    fn needs(&self, t: Tensor) -> bool {
        self.nodes[t.0].needs_grad
    }

    // ---- elementwise / arithmetic ---------------------------------------

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = broadcast_bin(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = broadcast_bin(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = broadcast_bin(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = broadcast_bin(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let ng = self.needs(a);
        self.push(v, Op::Neg(a), ng)
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a, c), ng)
    }

    pub fn mul_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::MulScalar(a, c), ng)
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let ng = self.needs(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let ng = self.needs(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn softplus(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(softplus);
        let ng = self.needs(a);
        self.push(v, Op::Softplus(a), ng)
    }

    /// Clamp values to `[lo, hi]`; gradient is zero where the clamp binds.
    pub fn clamp(&mut self, a: Tensor, lo: f64, hi: f64) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    pub fn square(&mut self, a: Tensor) -> Tensor {
        self.mul(a, a)
    }

    // ---- reductions / shape ----------------------------------------------

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let s = self.nodes[a.0].value.sum();
        let ng = self.needs(a);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let v = &self.nodes[a.0].value;
        let m = v.sum() / v.len() as f64;
        let ng = self.needs(a);
        self.push(ArrayD::from_elem(IxDyn(&[1]), m), Op::Mean(a), ng)
    }

    /// Sum over one axis, keeping it with size 1 (broadcast friendly).
    pub fn sum_axis_keep(&mut self, a: Tensor, axis: usize) -> Tensor {
        let v = self.nodes[a.0].value.sum_axis(Axis(axis));
        let v = v.insert_axis(Axis(axis));
        let ng = self.needs(a);
        self.push(v, Op::SumAxis(a, axis), ng)
    }

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Tensor {
        let v = self.nodes[a.0].value.clone();
        let v = v
            .into_shape(IxDyn(shape))
            .expect("reshape: incompatible shape");
        let ng = self.needs(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Explicit numpy-style broadcast to a target shape.
    pub fn broadcast_to(&mut self, a: Tensor, shape: &[usize]) -> Tensor {
        let v = self.nodes[a.0]
            .value
            .broadcast(IxDyn(shape))
            .expect("broadcast_to: incompatible shape")
            .to_owned();
        let ng = self.needs(a);
        self.push(v, Op::Broadcast(a), ng)
    }

    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<f64>> =
            parts.iter().map(|t| self.nodes[t.0].value.view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let ng = parts.iter().any(|&t| self.needs(t));
        self.push(v, Op::Concat(parts.to_vec(), axis), ng)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Tensor, axis: usize, start: usize, len: usize) -> Tensor {
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let ng = self.needs(a);
        self.push(
            v,
            Op::Narrow {
                src: a,
                axis,
                start,
                len,
            },
            ng,
        )
    }

    /// Numerically stable log-sum-exp over `axis`, keeping the axis with
    /// size 1.
    pub fn logsumexp_keep(&mut self, a: Tensor, axis: usize) -> Tensor {
        let v = &self.nodes[a.0].value;
        let maxes = v.map_axis(Axis(axis), |lane| {
            lane.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        });
        let maxes = maxes.insert_axis(Axis(axis));
        let shifted = v - &maxes;
        let sums = shifted.mapv(f64::exp).sum_axis(Axis(axis));
        let out = sums.mapv(f64::ln).insert_axis(Axis(axis)) + &maxes;
        let ng = self.needs(a);
        self.push(out, Op::LogSumExp(a, axis), ng)
    }

    // ---- linear algebra ---------------------------------------------------

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let v = av.dot(&bv).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Matmul(a, b), ng)
    }

    // ---- structured ops ----------------------------------------------------

    /// 2-D convolution, `input [B,C,H,W]`, `weight [O,C,kh,kw]`, `bias [O]`.
    pub fn conv2d(
        &mut self,
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let v = conv2d_forward(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
            stride,
            pad,
        );
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            ng,
        )
    }

    /// Nearest-neighbour 2x upsampling of `[B,C,H,W]`.
    pub fn upsample_nearest_2x(&mut self, a: Tensor) -> Tensor {
        let v = &self.nodes[a.0].value;
        let (b, c, h, w) = dims4(v);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        {
            let vi = v.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let mut ov = out
                .view_mut()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            ov[[bi, ci, i, j]] = vi[[bi, ci, i / 2, j / 2]];
                        }
                    }
                }
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::UpsampleNearest2x(a), ng)
    }

    /// Place a glimpse into a canvas under a per-sample affine map
    /// (bilinear sampling, zero padding outside the glimpse).
    ///
    /// `glimpse` is `[B,C,gh,gw]`; `params` is `[B,4]` holding
    /// `(scale_x, scale_y, shift_x, shift_y)` with the canvas in normalized
    /// coordinates `[-1,1]^2`. Output is `[B,C,out_h,out_w]`. Differentiable
    /// in both the glimpse pixels and the affine parameters.
    pub fn grid_place(
        &mut self,
        glimpse: Tensor,
        params: Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Tensor {
        let v = grid_place_forward(
            &self.nodes[glimpse.0].value,
            &self.nodes[params.0].value,
            out_h,
            out_w,
        );
        let ng = self.needs(glimpse) || self.needs(params);
        self.push(v, Op::GridPlace { glimpse, params }, ng)
    }

    // ---- backward -----------------------------------------------------------

    /// Accumulate gradients of a scalar `loss` into every node that needs
    /// them. May be called once per graph.
    pub fn backward(&mut self, loss: Tensor) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward() requires a scalar loss"
        );
        let shape = self.nodes[loss.0].value.raw_dim();
        self.nodes[loss.0].grad = Some(ArrayD::ones(shape));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let g = self.nodes[idx].grad.take().unwrap();
            self.step_back(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
    }

    fn accum(&mut self, t: Tensor, delta: ArrayD<f64>) {
        if !self.nodes[t.0].needs_grad {
            return;
        }
        match &mut self.nodes[t.0].grad {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_back(&mut self, idx: usize, g: &ArrayD<f64>) {
        // Values are immutable after creation, so clones here are cheap views
        // materialized only where the math needs them.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                let ga = unbroadcast(g.clone(), self.nodes[a.0].value.shape());
                let gb = unbroadcast(g.clone(), self.nodes[b.0].value.shape());
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let ga = unbroadcast(g.clone(), self.nodes[a.0].value.shape());
                let gb = unbroadcast(g.mapv(|x| -x), self.nodes[b.0].value.shape());
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = broadcast_bin(g, &self.nodes[b.0].value, |x, y| x * y);
                let gb = broadcast_bin(g, &self.nodes[a.0].value, |x, y| x * y);
                self.accum(a, unbroadcast(ga, self.nodes[a.0].value.shape()));
                self.accum(b, unbroadcast(gb, self.nodes[b.0].value.shape()));
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let ga = broadcast_bin(g, &self.nodes[b.0].value, |x, y| x / y);
                let bv = &self.nodes[b.0].value;
                let av = &self.nodes[a.0].value;
                let gb = {
                    let num = broadcast_bin(g, av, |x, y| x * y);
                    broadcast_bin(&num, bv, |x, y| -x / (y * y))
                };
                self.accum(a, unbroadcast(ga, self.nodes[a.0].value.shape()));
                self.accum(b, unbroadcast(gb, self.nodes[b.0].value.shape()));
            }
            Op::Neg(a) => {
                let a = *a;
                self.accum(a, g.mapv(|x| -x));
            }
            Op::AddScalar(a, _) => {
                let a = *a;
                self.accum(a, g.clone());
            }
            Op::MulScalar(a, c) => {
                let (a, c) = (*a, *c);
                self.accum(a, g.mapv(|x| x * c));
            }
            Op::Exp(a) => {
                let a = *a;
                let d = g * &self.nodes[idx].value;
                self.accum(a, d);
            }
            Op::Ln(a) => {
                let a = *a;
                let d = g / &self.nodes[a.0].value;
                self.accum(a, d);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = &self.nodes[idx].value;
                let d = g * &(y * &y.mapv(|v| 1.0 - v));
                self.accum(a, d);
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = &self.nodes[idx].value;
                let d = g * &y.mapv(|v| 1.0 - v * v);
                self.accum(a, d);
            }
            Op::Relu(a) => {
                let a = *a;
                let mask = self.nodes[a.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accum(a, g * &mask);
            }
            Op::Softplus(a) => {
                let a = *a;
                let d = self.nodes[a.0].value.mapv(sigmoid);
                self.accum(a, g * &d);
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let mask = self.nodes[a.0]
                    .value
                    .mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
                self.accum(a, g * &mask);
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let g2 = as2(g);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                let ga = g2.dot(&bv.t()).into_dyn();
                let gb = av.t().dot(&g2).into_dyn();
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::Sum(a) => {
                let a = *a;
                let s = *g.iter().next().unwrap();
                let shape = self.nodes[a.0].value.raw_dim();
                self.accum(a, ArrayD::from_elem(shape, s));
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.nodes[a.0].value.len() as f64;
                let s = *g.iter().next().unwrap() / n;
                let shape = self.nodes[a.0].value.raw_dim();
                self.accum(a, ArrayD::from_elem(shape, s));
            }
            Op::SumAxis(a, _axis) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let d = g
                    .broadcast(IxDyn(&shape))
                    .expect("sum_axis backward broadcast")
                    .to_owned();
                self.accum(a, d);
            }
            Op::Reshape(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.raw_dim();
                let d = g.clone().into_shape(shape).unwrap();
                self.accum(a, d);
            }
            Op::Broadcast(a) => {
                let a = *a;
                let d = unbroadcast(g.clone(), self.nodes[a.0].value.shape());
                self.accum(a, d);
            }
            Op::Concat(parts, axis) => {
                let parts = parts.clone();
                let axis = *axis;
                let mut start = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[axis];
                    let d = g
                        .slice_axis(Axis(axis), Slice::from(start..start + len))
                        .to_owned();
                    self.accum(p, d);
                    start += len;
                }
            }
            Op::Narrow {
                src,
                axis,
                start,
                len,
            } => {
                let (src, axis, start, len) = (*src, *axis, *start, *len);
                let shape = self.nodes[src.0].value.raw_dim();
                let mut d = ArrayD::zeros(shape);
                d.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                self.accum(src, d);
            }
            Op::LogSumExp(a, axis) => {
                let (a, axis) = (*a, *axis);
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[idx].value; // keepdim result
                let soft = (x - y).mapv(f64::exp);
                let d = &soft
                    * &g.broadcast(x.raw_dim())
                        .expect("logsumexp backward broadcast")
                        .to_owned();
                self.accum(a, d);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (input, weight, bias, stride, pad) = (*input, *weight, *bias, *stride, *pad);
                let (gi, gw, gb) = conv2d_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    g,
                    stride,
                    pad,
                );
                self.accum(input, gi);
                self.accum(weight, gw);
                self.accum(bias, gb);
            }
            Op::UpsampleNearest2x(a) => {
                let a = *a;
                let (b, c, h2, w2) = dims4(g);
                let (h, w) = (h2 / 2, w2 / 2);
                let gi = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut d = ndarray::Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h2 {
                            for j in 0..w2 {
                                d[[bi, ci, i / 2, j / 2]] += gi[[bi, ci, i, j]];
                            }
                        }
                    }
                }
                self.accum(a, d.into_dyn());
            }
            Op::GridPlace { glimpse, params } => {
                let (glimpse, params) = (*glimpse, *params);
                let (gg, gp) = grid_place_backward(
                    &self.nodes[glimpse.0].value,
                    &self.nodes[params.0].value,
                    g,
                );
                self.accum(glimpse, gg);
                self.accum(params, gp);
            }
        }
        self.nodes[idx].op = op;
    }

    /// Gradients for every parameter touched by this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, ArrayD<f64>)> {
        let mut out: Vec<(ParamId, ArrayD<f64>)> = Vec::new();
        for n in &self.nodes {
            if let (Some(pid), Some(g)) = (n.param, n.grad.as_ref()) {
                out.push((pid, g.clone()));
            }
        }
        out
    }
}

// ---- free helpers -----------------------------------------------------------

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn as2(v: &ArrayD<f64>) -> Array2<f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected rank-2 tensor")
        .to_owned()
}

fn dims4(v: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    let s = v.shape();
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Elementwise binary op with numpy broadcasting.
fn broadcast_bin(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
        return out;
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("lhs broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("rhs broadcast");
    let mut out = av.to_owned();
    out.zip_mut_with(&bv, |x, &y| *x = f(*x, y));
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Reduce a gradient produced under broadcasting back to `shape`.
fn unbroadcast(mut g: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gs, &ts)) in g.shape().to_vec().iter().zip(shape).enumerate() {
        if gs != ts {
            debug_assert_eq!(ts, 1);
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

// ---- conv2d ------------------------------------------------------------------

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &ndarray::ArrayView4<f64>,
    b: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (_, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut col = Array2::<f64>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        col[[row, oi * ow + oj]] = x[[b, ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    col
}

fn conv2d_forward(
    input: &ArrayD<f64>,
    weight: &ArrayD<f64>,
    bias: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let x = input
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("conv2d input must be [B,C,H,W]");
    let wv = weight
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("conv2d weight must be [O,C,k,k]");
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, wc, k, k2) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    assert_eq!(c, wc, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv2d kernel must be square");
    let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let wmat = wv.to_shape((o, c * k * k)).unwrap().to_owned();
    let bvec = bias
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("conv2d bias must be [O]");

    let mut out = ndarray::Array4::<f64>::zeros((bsz, o, oh, ow));
    for b in 0..bsz {
        let col = im2col(&x, b, k, stride, pad, oh, ow);
        let y = wmat.dot(&col); // [O, oh*ow]
        for oi in 0..o {
            let bias_o = bvec[oi];
            for p in 0..oh * ow {
                out[[b, oi, p / ow, p % ow]] = y[[oi, p]] + bias_o;
            }
        }
    }
    out.into_dyn()
}

fn conv2d_backward(
    input: &ArrayD<f64>,
    weight: &ArrayD<f64>,
    gout: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let x = input.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let wv = weight.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let gy = gout.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (wv.shape()[0], wv.shape()[2]);
    let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
    let wmat = wv.to_shape((o, c * k * k)).unwrap().to_owned();

    let mut gi = ndarray::Array4::<f64>::zeros((bsz, c, h, w));
    let mut gw = Array2::<f64>::zeros((o, c * k * k));
    let mut gb = Array1::<f64>::zeros(o);

    for b in 0..bsz {
        let col = im2col(&x, b, k, stride, pad, oh, ow);
        let mut gmat = Array2::<f64>::zeros((o, oh * ow));
        for oi in 0..o {
            for p in 0..oh * ow {
                let v = gy[[b, oi, p / ow, p % ow]];
                gmat[[oi, p]] = v;
                gb[oi] += v;
            }
        }
        gw += &gmat.dot(&col.t());
        let gcol = wmat.t().dot(&gmat); // [c*k*k, oh*ow]
        // col2im accumulate
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            gi[[b, ci, ii as usize, jj as usize]] += gcol[[row, oi * ow + oj]];
                        }
                    }
                }
            }
        }
    }

    let gw = gw.into_shape(IxDyn(&[o, c, k, k])).unwrap();
    (gi.into_dyn(), gw, gb.into_dyn())
}

// ---- grid place (spatial transformer write) -----------------------------------

/// Canvas pixel centers in normalized [-1,1] coordinates.
#[inline]
fn norm_coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

fn grid_place_forward(
    glimpse: &ArrayD<f64>,
    params: &ArrayD<f64>,
    out_h: usize,
    out_w: usize,
) -> ArrayD<f64> {
    let gl = glimpse
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("grid_place glimpse must be [B,C,gh,gw]");
    let pr = params
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("grid_place params must be [B,4]");
    let (bsz, c, gh, gw) = (gl.shape()[0], gl.shape()[1], gl.shape()[2], gl.shape()[3]);
    assert_eq!(pr.shape(), &[bsz, 4], "grid_place params must be [B,4]");

    let mut out = ndarray::Array4::<f64>::zeros((bsz, c, out_h, out_w));
    for b in 0..bsz {
        let (sx, sy, tx, ty) = (pr[[b, 0]], pr[[b, 1]], pr[[b, 2]], pr[[b, 3]]);
        for i in 0..out_h {
            let uy = norm_coord(i, out_h);
            let gy = (uy - ty) / sy;
            let py = (gy + 1.0) / 2.0 * gh as f64 - 0.5;
            if py <= -1.0 || py >= gh as f64 {
                continue;
            }
            for j in 0..out_w {
                let ux = norm_coord(j, out_w);
                let gx = (ux - tx) / sx;
                let px = (gx + 1.0) / 2.0 * gw as f64 - 0.5;
                if px <= -1.0 || px >= gw as f64 {
                    continue;
                }
                let (x0, y0) = (px.floor(), py.floor());
                let (fx, fy) = (px - x0, py - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                for ci in 0..c {
                    let sample = |yy: isize, xx: isize| -> f64 {
                        if yy < 0 || yy >= gh as isize || xx < 0 || xx >= gw as isize {
                            0.0
                        } else {
                            gl[[b, ci, yy as usize, xx as usize]]
                        }
                    };
                    let v00 = sample(y0, x0);
                    let v01 = sample(y0, x0 + 1);
                    let v10 = sample(y0 + 1, x0);
                    let v11 = sample(y0 + 1, x0 + 1);
                    out[[b, ci, i, j]] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        }
    }
    out.into_dyn()
}

fn grid_place_backward(
    glimpse: &ArrayD<f64>,
    params: &ArrayD<f64>,
    gout: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let gl = glimpse.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let pr = params.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let gy4 = gout.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let (bsz, c, gh, gw) = (gl.shape()[0], gl.shape()[1], gl.shape()[2], gl.shape()[3]);
    let (out_h, out_w) = (gy4.shape()[2], gy4.shape()[3]);

    let mut ggl = ndarray::Array4::<f64>::zeros((bsz, c, gh, gw));
    let mut gpr = Array2::<f64>::zeros((bsz, 4));

    for b in 0..bsz {
        let (sx, sy, tx, ty) = (pr[[b, 0]], pr[[b, 1]], pr[[b, 2]], pr[[b, 3]]);
        for i in 0..out_h {
            let uy = norm_coord(i, out_h);
            let gyc = (uy - ty) / sy;
            let py = (gyc + 1.0) / 2.0 * gh as f64 - 0.5;
            if py <= -1.0 || py >= gh as f64 {
                continue;
            }
            // chain to the affine parameters
            let dpy_dty = -(gh as f64) / (2.0 * sy);
            let dpy_dsy = -(uy - ty) / (sy * sy) * gh as f64 / 2.0;
            for j in 0..out_w {
                let ux = norm_coord(j, out_w);
                let gxc = (ux - tx) / sx;
                let px = (gxc + 1.0) / 2.0 * gw as f64 - 0.5;
                if px <= -1.0 || px >= gw as f64 {
                    continue;
                }
                let dpx_dtx = -(gw as f64) / (2.0 * sx);
                let dpx_dsx = -(ux - tx) / (sx * sx) * gw as f64 / 2.0;

                let (x0f, y0f) = (px.floor(), py.floor());
                let (fx, fy) = (px - x0f, py - y0f);
                let (x0, y0) = (x0f as isize, y0f as isize);
                for ci in 0..c {
                    let go = gy4[[b, ci, i, j]];
                    if go == 0.0 {
                        continue;
                    }
                    let inside = |yy: isize, xx: isize| -> bool {
                        yy >= 0 && yy < gh as isize && xx >= 0 && xx < gw as isize
                    };
                    let sample = |yy: isize, xx: isize| -> f64 {
                        if inside(yy, xx) {
                            gl[[b, ci, yy as usize, xx as usize]]
                        } else {
                            0.0
                        }
                    };
                    let v00 = sample(y0, x0);
                    let v01 = sample(y0, x0 + 1);
                    let v10 = sample(y0 + 1, x0);
                    let v11 = sample(y0 + 1, x0 + 1);

                    // glimpse pixel gradients
                    let mut add = |yy: isize, xx: isize, w: f64| {
                        if inside(yy, xx) {
                            ggl[[b, ci, yy as usize, xx as usize]] += go * w;
                        }
                    };
                    add(y0, x0, (1.0 - fy) * (1.0 - fx));
                    add(y0, x0 + 1, (1.0 - fy) * fx);
                    add(y0 + 1, x0, fy * (1.0 - fx));
                    add(y0 + 1, x0 + 1, fy * fx);

                    // sample-position gradients
                    let dv_dpx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
                    let dv_dpy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
                    gpr[[b, 0]] += go * dv_dpx * dpx_dsx;
                    gpr[[b, 1]] += go * dv_dpy * dpy_dsy;
                    gpr[[b, 2]] += go * dv_dpx * dpx_dtx;
                    gpr[[b, 3]] += go * dv_dpy * dpy_dty;
                }
            }
        }
    }
    (ggl.into_dyn(), gpr.into_dyn())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::finite_diff;
    use ndarray::{arr1, arr2, Array4};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// FD-check gradients of `build` with respect to a flat input vector.
    fn check_grad<F>(shape: &[usize], build: F, seed: u64, tol: f64)
    where
        F: Fn(&mut Graph, Tensor) -> Tensor,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let x0 = rand_vec(&mut rng, n);

        let eval = |x: &[f64]| -> f64 {
            let mut g = Graph::new();
            let t = g.input(ArrayD::from_shape_vec(IxDyn(shape), x.to_vec()).unwrap());
            let y = build(&mut g, t);
            g.scalar(y)
        };

        let mut g = Graph::new();
        let t = g.input_grad(ArrayD::from_shape_vec(IxDyn(shape), x0.clone()).unwrap());
        let y = build(&mut g, t);
        g.backward(y);
        let analytic: Vec<f64> = g.grad(t).unwrap().iter().copied().collect();

        let numeric = finite_diff(eval, &x0, 1e-5);
        for i in 0..n {
            let denom = analytic[i].abs().max(numeric[i].abs()).max(1e-6);
            let rel = (analytic[i] - numeric[i]).abs() / denom;
            assert!(
                rel < tol,
                "grad mismatch at {i}: analytic {} vs numeric {} (rel {rel})",
                analytic[i],
                numeric[i]
            );
        }
    }

    #[test]
    fn elementwise_grads_match_fd() {
        check_grad(
            &[3, 4],
            |g, x| {
                let a = g.sigmoid(x);
                let b = g.tanh(x);
                let c = g.mul(a, b);
                let d = g.softplus(c);
                g.sum(d)
            },
            1,
            1e-6,
        );
        check_grad(
            &[5],
            |g, x| {
                let e = g.exp(x);
                let s = g.add_scalar(e, 1.5);
                let l = g.ln(s);
                let m = g.mul_scalar(l, -2.0);
                g.mean(m)
            },
            2,
            1e-6,
        );
    }

    #[test]
    fn div_and_broadcast_grads_match_fd() {
        check_grad(
            &[2, 3],
            |g, x| {
                let s = g.sum_axis_keep(x, 1);
                let s = g.add_scalar(s, 3.0);
                let d = g.div(x, s);
                let sq = g.square(d);
                g.sum(sq)
            },
            3,
            1e-6,
        );
    }

    #[test]
    fn matmul_grads_match_fd() {
        check_grad(
            &[3, 3],
            |g, x| {
                let y = g.matmul(x, x);
                g.sum(y)
            },
            4,
            1e-6,
        );
    }

    #[test]
    fn logsumexp_matches_manual() {
        let mut g = Graph::new();
        let x = g.input(
            arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
                .into_dyn(),
        );
        let y = g.logsumexp_keep(x, 1);
        let v = g.value(y);
        let expect0 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        let expect1 = (3.0f64).ln();
        assert!((v[[0, 0]] - expect0).abs() < 1e-12);
        assert!((v[[1, 0]] - expect1).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_grads_match_fd() {
        check_grad(
            &[2, 4],
            |g, x| {
                let y = g.logsumexp_keep(x, 1);
                g.sum(y)
            },
            5,
            1e-6,
        );
    }

    #[test]
    fn concat_narrow_grads_match_fd() {
        check_grad(
            &[2, 3],
            |g, x| {
                let a = g.narrow(x, 1, 0, 2);
                let b = g.narrow(x, 1, 1, 2);
                let c = g.concat(&[a, b], 1);
                let sq = g.square(c);
                g.sum(sq)
            },
            6,
            1e-6,
        );
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        let mut g = Graph::new();
        // 1x1x3x3 input, 1x1x2x2 kernel, stride 1, no padding
        let x = Array4::from_shape_vec(
            (1, 1, 3, 3),
            vec![1., 2., 3., 4., 5., 6., 7., 8., 9.],
        )
        .unwrap()
        .into_dyn();
        let w = Array4::from_shape_vec((1, 1, 2, 2), vec![1., 0., 0., -1.]).unwrap().into_dyn();
        let b = arr1(&[0.5]).into_dyn();
        let xi = g.input(x);
        let wi = g.input(w);
        let bi = g.input(b);
        let y = g.conv2d(xi, wi, bi, 1, 0);
        let v = g.value(y);
        // each output = x[i,j] - x[i+1,j+1] + 0.5
        assert_eq!(v.shape(), &[1, 1, 2, 2]);
        assert!((v[[0, 0, 0, 0]] - (1. - 5. + 0.5)).abs() < 1e-12);
        assert!((v[[0, 0, 1, 1]] - (5. - 9. + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn conv2d_grads_match_fd() {
        // differentiate wrt input
        check_grad(
            &[1, 2, 5, 5],
            |g, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(40);
                let wv = ArrayD::from_shape_vec(
                    IxDyn(&[3, 2, 3, 3]),
                    rand_vec(&mut rng, 3 * 2 * 3 * 3),
                )
                .unwrap();
                let bv = ArrayD::from_shape_vec(IxDyn(&[3]), rand_vec(&mut rng, 3)).unwrap();
                let w = g.input(wv);
                let b = g.input(bv);
                let y = g.conv2d(x, w, b, 2, 1);
                let ysq = g.square(y);
                g.sum(ysq)
            },
            7,
            1e-5,
        );
        // differentiate wrt weight+bias
        check_grad(
            &[2, 1, 3, 3],
            |g, w| {
                let mut rng = ChaCha8Rng::seed_from_u64(41);
                let xv = ArrayD::from_shape_vec(
                    IxDyn(&[1, 1, 4, 4]),
                    rand_vec(&mut rng, 16),
                )
                .unwrap();
                let x = g.input(xv);
                let b = g.input(ArrayD::zeros(IxDyn(&[2])));
                let y = g.conv2d(x, w, b, 1, 1);
                let ysq = g.square(y);
                g.sum(ysq)
            },
            8,
            1e-5,
        );
    }

    #[test]
    fn upsample_grads_match_fd() {
        check_grad(
            &[1, 2, 3, 3],
            |g, x| {
                let y = g.upsample_nearest_2x(x);
                let ysq = g.square(y);
                g.sum(ysq)
            },
            9,
            1e-6,
        );
    }

    #[test]
    fn clamp_zeroes_gradient_outside_range() {
        let mut g = Graph::new();
        let x = g.input_grad(arr1(&[-2.0, 0.5, 2.0]).into_dyn());
        let y = g.clamp(x, 0.0, 1.0);
        let s = g.sum(y);
        g.backward(s);
        let gx = g.grad(x).unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn param_reuse_accumulates_gradients() {
        let mut store = ParamStore::new();
        let p = store.add("w", arr1(&[2.0]).into_dyn());
        let mut g = Graph::new();
        let w1 = g.param(&store, p);
        let w2 = g.param(&store, p);
        assert_eq!(w1, w2);
        let y = g.mul(w1, w2); // w^2
        let s = g.sum(y);
        g.backward(s);
        let grads = g.param_grads();
        assert_eq!(grads.len(), 1);
        assert!((grads[0].1[[0]] - 4.0).abs() < 1e-12); // d(w^2)/dw = 2w = 4
    }
}
