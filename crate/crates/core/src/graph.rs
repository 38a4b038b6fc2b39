//! Eager reverse-mode autodiff over `ndarray` tensors.
//!
//! Every operation appends a node holding its value, so the arena doubles as
//! the tape. `grad` walks the tape backwards and expresses each local
//! derivative with the same ops, which makes gradients themselves
//! differentiable; the R1 and path-length penalties rely on that to get
//! second-order parameter gradients.
//!
//! Piecewise-linear activations treat their masks as constants, so the
//! (almost-everywhere zero) curvature terms of leaky ReLU are dropped, same
//! as mainstream frameworks.

use crate::elem::Elem;
use crate::kernels;
use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Slice};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone)]
enum Op<T: Elem> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    MulConst(Var, Rc<ArrayD<T>>),
    BroadcastTo(Var),
    SumTo(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Matmul(Var, Var),
    BatchMatmul(Var, Var),
    Conv2d { x: Var, w: Var },
    ConvBackInput { gy: Var, w: Var },
    ConvBackWeight { x: Var, gy: Var, k: usize },
    Upsample2x(Var),
    Upsample2xT(Var),
    Downsample2x(Var),
    Downsample2xT(Var),
    LeakyRelu(Var, T),
    BiasNoiseAct {
        x: Var,
        bias: Var,
        gain: Var,
        noise: Rc<ArrayD<T>>,
        slope: T,
        out_gain: T,
    },
    BiasAct { x: Var, bias: Var, slope: T, gain: T },
    Softplus(Var),
    Sigmoid(Var),
    Sqrt(Var),
    SoftmaxLast(Var),
    SelectRows(Var, Rc<Vec<usize>>),
    ScatterRows { x: Var, indices: Rc<Vec<usize>> },
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize, len: usize },
    PadSlice { x: Var, axis: usize, start: usize },
}

struct Node<T: Elem> {
    value: ArrayD<T>,
    op: Op<T>,
    rg: bool,
}

pub struct Graph<T: Elem> {
    nodes: Vec<Node<T>>,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1, "scalar_value on non-scalar");
        *val.iter().next().expect("non-empty")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].rg
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_leaf(&mut self, value: T) -> Var {
        self.leaf(ndarray::arr0(value).into_dyn())
    }

    pub fn scalar_const(&mut self, value: T) -> Var {
        self.constant(ndarray::arr0(value).into_dyn())
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, rg: bool) -> Var {
        self.nodes.push(Node { value, op, rg });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: ArrayD<T>, op: Op<T>) -> Var {
        let rg = self.op_requires_grad(&op);
        self.push(value, op, rg)
    }

    fn op_requires_grad(&self, op: &Op<T>) -> bool {
        let mut rg = false;
        visit_inputs(op, |v| rg |= self.nodes[v.0].rg);
        rg
    }

    // ---- elementwise / broadcasting ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binop(self.value(a), self.value(b), |x, y| x + y);
        self.push_op(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binop(self.value(a), self.value(b), |x, y| x - y);
        self.push_op(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binop(self.value(a), self.value(b), |x, y| x * y);
        self.push_op(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binop(self.value(a), self.value(b), |x, y| x / y);
        self.push_op(value, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| -x);
        self.push_op(value, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.push_op(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let k = self.scalar_const(c);
        self.add(a, k)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn mul_const(&mut self, a: Var, c: Rc<ArrayD<T>>) -> Var {
        let value = broadcast_binop(self.value(a), &c, |x, y| x * y);
        self.push_op(value, Op::MulConst(a, c))
    }

    // ---- shape ----

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.value(a).shape(), shape))
            .to_owned();
        self.push_op(value, Op::BroadcastTo(a))
    }

    /// Reduce by summation down to `shape` (numpy broadcast rules reversed).
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = reduce_sum_to(self.value(a), shape);
        self.push_op(value, Op::SumTo(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.sum_to(a, &[])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .to_shape(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", self.value(a).shape(), shape))
            .to_owned();
        self.push_op(value, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .to_owned();
        self.push_op(value, Op::Permute(a, axes.to_vec()))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<ArrayViewD<T>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        self.push_op(value, Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push_op(value, Op::Slice { x: a, axis, start, len })
    }

    fn pad_slice(&mut self, a: Var, axis: usize, start: usize, total: usize) -> Var {
        let src = self.value(a);
        let mut shape = src.shape().to_vec();
        let len = shape[axis];
        shape[axis] = total;
        let mut value = ArrayD::<T>::zeros(IxDyn(&shape));
        value
            .slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(src);
        self.push_op(value, Op::PadSlice { x: a, axis, start })
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a);
        let value = src.select(Axis(0), indices);
        self.push_op(value, Op::SelectRows(a, Rc::new(indices.to_vec())))
    }

    fn scatter_rows(&mut self, a: Var, indices: Rc<Vec<usize>>, out_rows: usize) -> Var {
        let src = self.value(a).clone();
        let mut shape = src.shape().to_vec();
        shape[0] = out_rows;
        let mut value = ArrayD::<T>::zeros(IxDyn(&shape));
        for (row, &dst) in indices.iter().enumerate() {
            let mut target = value.index_axis_mut(Axis(0), dst);
            let source = src.index_axis(Axis(0), row);
            ndarray::Zip::from(&mut target)
                .and(&source)
                .for_each(|t, &s| *t = *t + s);
        }
        self.push_op(value, Op::ScatterRows { x: a, indices })
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<ndarray::Ix2>().expect("matmul lhs 2d");
        let bv = self.value(b).view().into_dimensionality::<ndarray::Ix2>().expect("matmul rhs 2d");
        let value = av.dot(&bv).into_dyn();
        self.push_op(value, Op::Matmul(a, b))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<ndarray::Ix3>().expect("bmm lhs 3d");
        let bv = self.value(b).view().into_dimensionality::<ndarray::Ix3>().expect("bmm rhs 3d");
        let (bsz, m, ka) = av.dim();
        let (bsz2, kb, n) = bv.dim();
        assert_eq!(bsz, bsz2, "bmm batch mismatch");
        assert_eq!(ka, kb, "bmm inner dim mismatch");
        let mut value = ndarray::Array3::<T>::zeros((bsz, m, n));
        for i in 0..bsz {
            let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            value.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.push_op(value.into_dyn(), Op::BatchMatmul(a, b))
    }

    // ---- spatial ----

    pub fn conv2d(&mut self, x: Var, w: Var) -> Var {
        let xv = as4(self.value(x));
        let wv = as4(self.value(w));
        let value = kernels::conv2d(&xv.view(), &wv.view()).into_dyn();
        self.push_op(value, Op::Conv2d { x, w })
    }

    fn conv2d_back_input(&mut self, gy: Var, w: Var) -> Var {
        let gv = as4(self.value(gy));
        let wv = as4(self.value(w));
        let value = kernels::conv2d_back_input(&gv.view(), &wv.view()).into_dyn();
        self.push_op(value, Op::ConvBackInput { gy, w })
    }

    fn conv2d_back_weight(&mut self, x: Var, gy: Var, k: usize) -> Var {
        let xv = as4(self.value(x));
        let gv = as4(self.value(gy));
        let value = kernels::conv2d_back_weight(&xv.view(), &gv.view(), k).into_dyn();
        self.push_op(value, Op::ConvBackWeight { x, gy, k })
    }

    pub fn upsample2x(&mut self, a: Var) -> Var {
        let value = kernels::upsample2x(&as4(self.value(a)).view()).into_dyn();
        self.push_op(value, Op::Upsample2x(a))
    }

    fn upsample2x_t(&mut self, a: Var) -> Var {
        let value = kernels::upsample2x_t(&as4(self.value(a)).view()).into_dyn();
        self.push_op(value, Op::Upsample2xT(a))
    }

    pub fn downsample2x(&mut self, a: Var) -> Var {
        let value = kernels::downsample2x(&as4(self.value(a)).view()).into_dyn();
        self.push_op(value, Op::Downsample2x(a))
    }

    fn downsample2x_t(&mut self, a: Var) -> Var {
        let value = kernels::downsample2x_t(&as4(self.value(a)).view()).into_dyn();
        self.push_op(value, Op::Downsample2xT(a))
    }

    // ---- nonlinearities ----

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.value(a).mapv(|x| if x > T::zero() { x } else { x * slope });
        self.push_op(value, Op::LeakyRelu(a, slope))
    }

    /// out = leaky_relu(x + bias[1,C,1,1] + gain * noise) * out_gain
    ///
    /// `noise` broadcasts over channels (shape [B,1,H,W]); `gain` is a
    /// 0-d trainable scalar.
    pub fn bias_noise_act(
        &mut self,
        x: Var,
        bias: Var,
        gain: Var,
        noise: Rc<ArrayD<T>>,
        slope: T,
        out_gain: T,
    ) -> Var {
        let value = {
            let xv = self.value(x);
            let bv = self.value(bias);
            let gv = self.scalar_value(gain);
            let c = bv.len();
            let bvr = bv.view().into_shape_with_order(IxDyn(&[1, c, 1, 1])).expect("bias reshape");
            let pre = broadcast_binop(xv, &bvr.to_owned(), |a, b| a + b);
            let noisy = broadcast_binop(&pre, &noise.mapv(|n| n * gv), |a, b| a + b);
            noisy.mapv(|v| if v > T::zero() { v * out_gain } else { v * slope * out_gain })
        };
        self.push_op(value, Op::BiasNoiseAct { x, bias, gain, noise, slope, out_gain })
    }

    /// out = leaky_relu(x + bias[1,C,1,1]) * gain
    pub fn bias_act(&mut self, x: Var, bias: Var, slope: T, gain: T) -> Var {
        let value = {
            let xv = self.value(x);
            let bv = self.value(bias);
            let c = bv.len();
            let bvr = bv.view().into_shape_with_order(IxDyn(&[1, c, 1, 1])).expect("bias reshape");
            let pre = broadcast_binop(xv, &bvr.to_owned(), |a, b| a + b);
            pre.mapv(|v| if v > T::zero() { v * gain } else { v * slope * gain })
        };
        self.push_op(value, Op::BiasAct { x, bias, slope, gain })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus_stable);
        self.push_op(value, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let value = self.value(a).mapv(|x| one / (one + (-x).exp()));
        self.push_op(value, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.sqrt());
        self.push_op(value, Op::Sqrt(a))
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        let last = value.ndim() - 1;
        for mut row in value.lanes_mut(Axis(last)) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push_op(value, Op::SoftmaxLast(a))
    }

    // ---- autodiff ----

    /// Gradients of scalar `loss` w.r.t. each of `wrt`.
    ///
    /// The returned vars live in the same graph and are themselves
    /// differentiable. Vars that `loss` does not depend on get zeros.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Vec<Var> {
        let upto = loss.0;
        let mut grads: Vec<Option<Var>> = vec![None; upto + 1];
        let seed = self.constant(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), T::one()));
        grads[loss.0] = Some(seed);
        for id in (0..=upto).rev() {
            if !self.nodes[id].rg {
                continue;
            }
            let Some(gy) = grads[id] else { continue };
            let op = self.nodes[id].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            for (input, gi) in self.backprop(&op, Var(id), gy) {
                if input.0 <= upto {
                    grads[input.0] = Some(match grads[input.0] {
                        None => gi,
                        Some(acc) => self.add(acc, gi),
                    });
                }
            }
        }
        wrt.iter()
            .map(|v| match grads.get(v.0).and_then(|g| *g) {
                Some(g) => g,
                None => {
                    let z = ArrayD::zeros(self.nodes[v.0].value.raw_dim());
                    self.constant(z)
                }
            })
            .collect()
    }

    fn backprop(&mut self, op: &Op<T>, out: Var, gy: Var) -> Vec<(Var, Var)> {
        let mut grads = Vec::new();
        macro_rules! want {
            ($v:expr) => {
                self.nodes[$v.0].rg
            };
        }
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want!(*a) {
                    let g = self.sum_to_shape_of(gy, *a);
                    grads.push((*a, g));
                }
                if want!(*b) {
                    let g = self.sum_to_shape_of(gy, *b);
                    grads.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if want!(*a) {
                    let g = self.sum_to_shape_of(gy, *a);
                    grads.push((*a, g));
                }
                if want!(*b) {
                    let n = self.neg(gy);
                    let g = self.sum_to_shape_of(n, *b);
                    grads.push((*b, g));
                }
            }
            Op::Mul(a, b) => {
                if want!(*a) {
                    let p = self.mul(gy, *b);
                    let g = self.sum_to_shape_of(p, *a);
                    grads.push((*a, g));
                }
                if want!(*b) {
                    let p = self.mul(gy, *a);
                    let g = self.sum_to_shape_of(p, *b);
                    grads.push((*b, g));
                }
            }
            Op::Div(a, b) => {
                if want!(*a) {
                    let p = self.div(gy, *b);
                    let g = self.sum_to_shape_of(p, *a);
                    grads.push((*a, g));
                }
                if want!(*b) {
                    let num = self.mul(gy, *a);
                    let den = self.mul(*b, *b);
                    let frac = self.div(num, den);
                    let n = self.neg(frac);
                    let g = self.sum_to_shape_of(n, *b);
                    grads.push((*b, g));
                }
            }
            Op::Neg(a) => {
                if want!(*a) {
                    let g = self.neg(gy);
                    grads.push((*a, g));
                }
            }
            Op::Scale(a, c) => {
                if want!(*a) {
                    let g = self.scale(gy, *c);
                    grads.push((*a, g));
                }
            }
            Op::MulConst(a, c) => {
                if want!(*a) {
                    let p = self.mul_const(gy, c.clone());
                    let g = self.sum_to_shape_of(p, *a);
                    grads.push((*a, g));
                }
            }
            Op::BroadcastTo(a) => {
                if want!(*a) {
                    let g = self.sum_to_shape_of(gy, *a);
                    grads.push((*a, g));
                }
            }
            Op::SumTo(a) => {
                if want!(*a) {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let g = self.broadcast_to(gy, &shape);
                    grads.push((*a, g));
                }
            }
            Op::Reshape(a) => {
                if want!(*a) {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let g = self.reshape(gy, &shape);
                    grads.push((*a, g));
                }
            }
            Op::Permute(a, axes) => {
                if want!(*a) {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    let g = self.permute(gy, &inv);
                    grads.push((*a, g));
                }
            }
            Op::Matmul(a, b) => {
                if want!(*a) {
                    let bt = self.permute(*b, &[1, 0]);
                    let g = self.matmul(gy, bt);
                    grads.push((*a, g));
                }
                if want!(*b) {
                    let at = self.permute(*a, &[1, 0]);
                    let g = self.matmul(at, gy);
                    grads.push((*b, g));
                }
            }
            Op::BatchMatmul(a, b) => {
                if want!(*a) {
                    let bt = self.permute(*b, &[0, 2, 1]);
                    let g = self.batch_matmul(gy, bt);
                    grads.push((*a, g));
                }
                if want!(*b) {
                    let at = self.permute(*a, &[0, 2, 1]);
                    let g = self.batch_matmul(at, gy);
                    grads.push((*b, g));
                }
            }
            Op::Conv2d { x, w } => {
                if want!(*x) {
                    let g = self.conv2d_back_input(gy, *w);
                    grads.push((*x, g));
                }
                if want!(*w) {
                    let k = self.nodes[w.0].value.shape()[2];
                    let g = self.conv2d_back_weight(*x, gy, k);
                    grads.push((*w, g));
                }
            }
            Op::ConvBackInput { gy: gyi, w } => {
                // z = C^T_x(gy, w); <gz, z> = T(gz, w, gy)
                if want!(*gyi) {
                    let g = self.conv2d(gy, *w);
                    grads.push((*gyi, g));
                }
                if want!(*w) {
                    let k = self.nodes[w.0].value.shape()[2];
                    let g = self.conv2d_back_weight(gy, *gyi, k);
                    grads.push((*w, g));
                }
            }
            Op::ConvBackWeight { x, gy: gyi, k } => {
                // v = C^T_w(x, gy); <gv, v> = T(x, gv, gy)
                if want!(*x) {
                    let g = self.conv2d_back_input(*gyi, gy);
                    grads.push((*x, g));
                }
                if want!(*gyi) {
                    let g = self.conv2d(*x, gy);
                    grads.push((*gyi, g));
                }
                let _ = k;
            }
            Op::Upsample2x(a) => {
                if want!(*a) {
                    let g = self.upsample2x_t(gy);
                    grads.push((*a, g));
                }
            }
            Op::Upsample2xT(a) => {
                if want!(*a) {
                    let g = self.upsample2x(gy);
                    grads.push((*a, g));
                }
            }
            Op::Downsample2x(a) => {
                if want!(*a) {
                    let g = self.downsample2x_t(gy);
                    grads.push((*a, g));
                }
            }
            Op::Downsample2xT(a) => {
                if want!(*a) {
                    let g = self.downsample2x(gy);
                    grads.push((*a, g));
                }
            }
            Op::LeakyRelu(a, slope) => {
                if want!(*a) {
                    let one = T::one();
                    let s = *slope;
                    let mask = self.nodes[a.0]
                        .value
                        .mapv(|x| if x > T::zero() { one } else { s });
                    let g = self.mul_const(gy, Rc::new(mask));
                    grads.push((*a, g));
                }
            }
            Op::BiasNoiseAct { x, bias, gain, noise, slope, out_gain } => {
                let mask = self.act_mask(*x, *bias, Some((*gain, noise)), *slope, *out_gain);
                let mask = Rc::new(mask);
                let gpre = self.mul_const(gy, mask);
                if want!(*x) {
                    grads.push((*x, gpre));
                }
                if want!(*bias) {
                    let c = self.nodes[bias.0].value.len();
                    let keep = self.sum_to(gpre, &[1, c, 1, 1]);
                    let g = self.reshape(keep, &[c]);
                    grads.push((*bias, g));
                }
                if want!(*gain) {
                    let p = self.mul_const(gpre, noise.clone());
                    let g = self.sum_to(p, &[]);
                    grads.push((*gain, g));
                }
            }
            Op::BiasAct { x, bias, slope, gain } => {
                let mask = self.act_mask(*x, *bias, None, *slope, *gain);
                let mask = Rc::new(mask);
                let gpre = self.mul_const(gy, mask);
                if want!(*x) {
                    grads.push((*x, gpre));
                }
                if want!(*bias) {
                    let c = self.nodes[bias.0].value.len();
                    let keep = self.sum_to(gpre, &[1, c, 1, 1]);
                    let g = self.reshape(keep, &[c]);
                    grads.push((*bias, g));
                }
            }
            Op::Softplus(a) => {
                if want!(*a) {
                    let sg = self.sigmoid(*a);
                    let g = self.mul(gy, sg);
                    grads.push((*a, g));
                }
            }
            Op::Sigmoid(a) => {
                if want!(*a) {
                    let ones = self.constant(ArrayD::from_elem(
                        self.nodes[out.0].value.raw_dim(),
                        T::one(),
                    ));
                    let om = self.sub(ones, out);
                    let p = self.mul(out, om);
                    let g = self.mul(gy, p);
                    grads.push((*a, g));
                }
            }
            Op::Sqrt(a) => {
                if want!(*a) {
                    let two = self.scale(out, T::from_f64(2.0));
                    let g = self.div(gy, two);
                    grads.push((*a, g));
                }
            }
            Op::SoftmaxLast(a) => {
                if want!(*a) {
                    let s = out;
                    let p = self.mul(gy, s);
                    let mut keep = self.nodes[out.0].value.shape().to_vec();
                    *keep.last_mut().expect("softmax rank >= 1") = 1;
                    let dot = self.sum_to(p, &keep);
                    let centered = self.sub(gy, dot);
                    let g = self.mul(s, centered);
                    grads.push((*a, g));
                }
            }
            Op::SelectRows(a, indices) => {
                if want!(*a) {
                    let rows = self.nodes[a.0].value.shape()[0];
                    let g = self.scatter_rows(gy, indices.clone(), rows);
                    grads.push((*a, g));
                }
            }
            Op::ScatterRows { x, indices } => {
                if want!(*x) {
                    let g = self.select_rows(gy, indices);
                    grads.push((*x, g));
                }
            }
            Op::Concat(parts, axis) => {
                let mut start = 0usize;
                let parts = parts.clone();
                let axis = *axis;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[axis];
                    if want!(p) {
                        let g = self.slice_axis(gy, axis, start, len);
                        grads.push((p, g));
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start, len } => {
                if want!(*x) {
                    let total = self.nodes[x.0].value.shape()[*axis];
                    let g = self.pad_slice(gy, *axis, *start, total);
                    grads.push((*x, g));
                    let _ = len;
                }
            }
            Op::PadSlice { x, axis, start } => {
                if want!(*x) {
                    let len = self.nodes[x.0].value.shape()[*axis];
                    let g = self.slice_axis(gy, *axis, *start, len);
                    grads.push((*x, g));
                }
            }
        }
        grads
    }

    fn sum_to_shape_of(&mut self, g: Var, target: Var) -> Var {
        let shape = self.nodes[target.0].value.shape().to_vec();
        if self.nodes[g.0].value.shape() == shape.as_slice() {
            g
        } else {
            self.sum_to(g, &shape)
        }
    }

    /// Recompute the (constant) activation mask of a bias(+noise) act node.
    fn act_mask(
        &self,
        x: Var,
        bias: Var,
        noise: Option<(Var, &Rc<ArrayD<T>>)>,
        slope: T,
        out_gain: T,
    ) -> ArrayD<T> {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let c = bv.len();
        let bvr = bv.view().into_shape_with_order(IxDyn(&[1, c, 1, 1])).expect("bias reshape");
        let mut pre = broadcast_binop(xv, &bvr.to_owned(), |a, b| a + b);
        if let Some((gain, noise)) = noise {
            let gv = self.scalar_value(gain);
            pre = broadcast_binop(&pre, &noise.mapv(|n| n * gv), |a, b| a + b);
        }
        pre.mapv(|v| if v > T::zero() { out_gain } else { slope * out_gain })
    }
}

fn visit_inputs<T: Elem>(op: &Op<T>, mut f: impl FnMut(Var)) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Matmul(a, b)
        | Op::BatchMatmul(a, b) => {
            f(*a);
            f(*b);
        }
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::MulConst(a, _)
        | Op::BroadcastTo(a)
        | Op::SumTo(a)
        | Op::Reshape(a)
        | Op::Permute(a, _)
        | Op::Upsample2x(a)
        | Op::Upsample2xT(a)
        | Op::Downsample2x(a)
        | Op::Downsample2xT(a)
        | Op::LeakyRelu(a, _)
        | Op::Softplus(a)
        | Op::Sigmoid(a)
        | Op::Sqrt(a)
        | Op::SoftmaxLast(a)
        | Op::SelectRows(a, _) => f(*a),
        Op::Conv2d { x, w } => {
            f(*x);
            f(*w);
        }
        Op::ConvBackInput { gy, w } => {
            f(*gy);
            f(*w);
        }
        Op::ConvBackWeight { x, gy, .. } => {
            f(*x);
            f(*gy);
        }
        Op::BiasNoiseAct { x, bias, gain, .. } => {
            f(*x);
            f(*bias);
            f(*gain);
        }
        Op::BiasAct { x, bias, .. } => {
            f(*x);
            f(*bias);
        }
        Op::ScatterRows { x, .. } => f(*x),
        Op::Concat(parts, _) => {
            for p in parts {
                f(*p);
            }
        }
        Op::Slice { x, .. } | Op::PadSlice { x, .. } => f(*x),
    }
}

fn softplus_stable<T: Elem>(x: T) -> T {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    let zero = T::zero();
    let m = if x > zero { x } else { zero };
    m + (T::one() + (-x.abs()).exp()).ln()
}

fn as4<T: Elem>(a: &ArrayD<T>) -> ndarray::CowArray<'_, T, ndarray::Ix4> {
    a.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("expected a 4-d tensor")
        .into()
}

/// Elementwise binop with numpy-style broadcasting.
pub(crate) fn broadcast_binop<T: Elem>(
    a: &ArrayD<T>,
    b: &ArrayD<T>,
    f: impl Fn(T, T) -> T,
) -> ArrayD<T> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("lhs broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("rhs broadcast");
    let mut out = ArrayD::<T>::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            panic!("incompatible broadcast: {a:?} vs {b:?}")
        };
    }
    out
}

/// Sum-reduce `x` to `shape` (the reverse of broadcasting to `x`'s shape).
pub(crate) fn reduce_sum_to<T: Elem>(x: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    let mut out = x.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (i, &target) in shape.iter().enumerate() {
        if out.shape()[i] != target {
            assert_eq!(target, 1, "sum_to target must be 1 or equal on axis {i}");
            let summed = out.sum_axis(Axis(i));
            out = summed.insert_axis(Axis(i));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn add_mul_grads() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let b = g.leaf(arr1(&[3.0, 4.0]).into_dyn());
        let p = g.mul(a, b);
        let loss = g.sum_all(p);
        let grads = g.grad(loss, &[a, b]);
        assert_eq!(g.value(grads[0]).as_slice().unwrap(), &[3.0, 4.0]);
        assert_eq!(g.value(grads[1]).as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn broadcast_add_reduces_grad() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.leaf(arr1(&[10.0, 20.0]).into_dyn());
        let s = g.add(a, b);
        let loss = g.sum_all(s);
        let grads = g.grad(loss, &[b]);
        assert_eq!(g.value(grads[0]).as_slice().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_grad() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(arr2(&[[1.0, 2.0]]).into_dyn());
        let b = g.leaf(arr2(&[[3.0], [5.0]]).into_dyn());
        let y = g.matmul(a, b);
        let loss = g.sum_all(y);
        let grads = g.grad(loss, &[a, b]);
        assert_eq!(g.value(grads[0]).as_slice().unwrap(), &[3.0, 5.0]);
        assert_eq!(g.value(grads[1]).as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn second_order_through_square() {
        // y = sum(x^2); g = 2x; h = d(sum g^2)/dx = 8x
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr1(&[1.0, -2.0, 3.0]).into_dyn());
        let y = g.square(x);
        let loss = g.sum_all(y);
        let gx = g.grad(loss, &[x])[0];
        let gsq = g.square(gx);
        let gnorm = g.sum_all(gsq);
        let hx = g.grad(gnorm, &[x])[0];
        assert_eq!(g.value(hx).as_slice().unwrap(), &[8.0, -16.0, 24.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_is_orthogonal_to_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr2(&[[0.5, -1.0, 2.0]]).into_dyn());
        let s = g.softmax_last(x);
        let row_sum: f64 = g.value(s).sum();
        assert!((row_sum - 1.0).abs() < 1e-12);
        // d sum(softmax)/dx = 0 since rows always sum to 1
        let loss = g.sum_all(s);
        let gx = g.grad(loss, &[x])[0];
        for v in g.value(gx).iter() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr1(&[0.0]).into_dyn());
        let y = g.softplus(x);
        assert!((g.value(y)[[0]] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn select_scatter_roundtrip_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr2(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]).into_dyn());
        let sel = g.select_rows(x, &[2, 0]);
        assert_eq!(g.value(sel).shape(), &[2, 2]);
        assert_eq!(g.value(sel)[[0, 0]], 3.0);
        let loss = g.sum_all(sel);
        let gx = g.grad(loss, &[x])[0];
        assert_eq!(
            g.value(gx).as_slice().unwrap(),
            &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn concat_slice_grad() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(arr2(&[[1.0], [2.0]]).into_dyn());
        let b = g.leaf(arr2(&[[3.0], [4.0]]).into_dyn());
        let c = g.concat(&[a, b], 1);
        assert_eq!(g.value(c).shape(), &[2, 2]);
        let first_col = g.slice_axis(c, 1, 0, 1);
        let loss = g.sum_all(first_col);
        let grads = g.grad(loss, &[a, b]);
        assert_eq!(g.value(grads[0]).as_slice().unwrap(), &[1.0, 1.0]);
        assert_eq!(g.value(grads[1]).as_slice().unwrap(), &[0.0, 0.0]);
    }
}
