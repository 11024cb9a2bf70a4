//! Reverse-mode automatic differentiation over dynamically shaped `f64` tensors.
//!
//! The engine is a Wengert list with eager evaluation: every constructor
//! computes its value immediately and records the op on the graph. The
//! backward pass emits adjoint computations as ordinary graph nodes, so
//! gradients are themselves differentiable and `grad` can be nested for
//! second-order meta-gradients. First-order variants are obtained by
//! detaching the inner gradients (`Graph::detach`) rather than by a separate
//! code path.
//!
//! The op set is deliberately closed under differentiation: every VJP is
//! written in terms of ops that are themselves on the list. Convolution is
//! expressed through the `unfold`/`fold` pair (im2col and its transpose),
//! which are linear and mutually adjoint, so their double backward is exact
//! for free.

use ndarray::{ArrayD, Axis, Ix2, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the graph
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of an unfold/fold (im2col) operation on `[B, C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnfoldSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl UnfoldSpec {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddConst(Var, f64),
    MulConst(Var, f64),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Relu(Var),
    Matmul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    /// Sum over the given axes. Axes are kept as size-1 dims.
    SumKeep(Var, Vec<usize>),
    /// Broadcast to the node's own shape.
    Broadcast(Var),
    Unfold(Var, UnfoldSpec),
    Fold(Var, UnfoldSpec),
    Concat(Var, Var, usize),
    Slice(Var, usize, usize, usize),
}

struct Node {
    value: Rc<ArrayD<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Arena of eagerly evaluated tensor ops. Not thread-safe; build one graph
/// per evaluation (episode, attack step, probe) and drop it afterwards.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        // Keep every node C-contiguous so downstream slice-based consumers
        // (unfold, value exports) never see exotic layouts.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// The (eagerly computed) value of a node.
    pub fn value(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    // ---- leaves ------------------------------------------------------

    /// Differentiable leaf (parameter).
    pub fn param(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data, masks, frozen values).
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&self, x: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    /// Copy of `v`'s value as a fresh constant leaf: gradient flow stops here.
    pub fn detach(&self, v: Var) -> Var {
        let val = self.value(v);
        self.push((*val).clone(), Op::Leaf, false)
    }

    // ---- arithmetic ---------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = binary_broadcast(&self.value(a), &self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), self.rg(a) || self.rg(b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = binary_broadcast(&self.value(a), &self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), self.rg(a) || self.rg(b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = binary_broadcast(&self.value(a), &self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), self.rg(a) || self.rg(b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let v = binary_broadcast(&self.value(a), &self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b), self.rg(a) || self.rg(b))
    }

    pub fn neg(&self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, Op::Neg(a), self.rg(a))
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddConst(a, c), self.rg(a))
    }

    pub fn mul_const(&self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::MulConst(a, c), self.rg(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a), self.rg(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a), self.rg(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a), self.rg(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), self.rg(a))
    }

    // ---- linear algebra and shape ops ----------------------------------

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let a2 = av.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
        let b2 = bv.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
        let v = a2.dot(&b2).into_dyn();
        self.push(v, Op::Matmul(a, b), self.rg(a) || self.rg(b))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let val = self.value(a);
        let v = val
            .to_shape(IxDyn(shape))
            .expect("reshape size mismatch")
            .into_owned();
        self.push(v, Op::Reshape(a), self.rg(a))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .to_owned();
        self.push(v, Op::Permute(a, axes.to_vec()), self.rg(a))
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_keep(&self, a: Var, axes: &[usize]) -> Var {
        let mut v = (*self.value(a)).clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in &sorted {
            let summed = v.sum_axis(Axis(ax));
            v = summed.insert_axis(Axis(ax));
        }
        self.push(v, Op::SumKeep(a, axes.to_vec()), self.rg(a))
    }

    /// Sum over `axes` and drop them from the shape.
    pub fn sum_axes(&self, a: Var, axes: &[usize]) -> Var {
        let kept = self.sum_keep(a, axes);
        let shape: Vec<usize> = {
            let s = self.shape(kept);
            s.iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        self.reshape(kept, &shape)
    }

    /// Full reduction to a scalar.
    pub fn sum_all(&self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        let kept = self.sum_keep(a, &axes);
        self.reshape(kept, &[])
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_const(s, 1.0 / n)
    }

    /// Broadcast `a` to `shape` (NumPy semantics).
    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .broadcast(IxDyn(shape))
            .expect("broadcast_to incompatible shape")
            .to_owned();
        self.push(v, Op::Broadcast(a), self.rg(a))
    }

    /// Reduce `a` back to `shape` by summing broadcast axes (adjoint of
    /// `broadcast_to`).
    pub fn sum_to(&self, a: Var, shape: &[usize]) -> Var {
        let a_shape = self.shape(a);
        if a_shape == shape {
            return a;
        }
        // Leading axes that exist only in the source.
        let extra = a_shape.len() - shape.len();
        let mut axes: Vec<usize> = (0..extra).collect();
        for (i, &d) in shape.iter().enumerate() {
            if d == 1 && a_shape[extra + i] != 1 {
                axes.push(extra + i);
            }
        }
        let reduced = if axes.is_empty() { a } else { self.sum_keep(a, &axes) };
        self.reshape(reduced, shape)
    }

    /// im2col: `[B, C, H, W] -> [B, C*k*k, L]` with `L = out_h*out_w`.
    pub fn unfold(&self, a: Var, spec: UnfoldSpec) -> Var {
        let v = unfold_value(&self.value(a), &spec);
        self.push(v, Op::Unfold(a, spec), self.rg(a))
    }

    /// col2im (scatter-add transpose of `unfold`): `[B, C*k*k, L] -> [B, C, H, W]`.
    pub fn fold(&self, a: Var, spec: UnfoldSpec) -> Var {
        let v = fold_value(&self.value(a), &spec);
        self.push(v, Op::Fold(a, spec), self.rg(a))
    }

    pub fn concat(&self, a: Var, b: Var, axis: usize) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let v = ndarray::concatenate(Axis(axis), &[av.view(), bv.view()])
            .expect("concat shape mismatch");
        self.push(v, Op::Concat(a, b, axis), self.rg(a) || self.rg(b))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let v = av
            .slice_axis(Axis(axis), ndarray::Slice::from(start as isize..(start + len) as isize))
            .to_owned();
        self.push(v, Op::Slice(a, axis, start, len), self.rg(a))
    }

    // ---- composite helpers ---------------------------------------------

    /// Row-wise log-softmax of a `[B, N]` matrix. The stabilising row max is
    /// detached, which leaves both the value and the derivative exact.
    pub fn log_softmax(&self, logits: Var) -> Var {
        let shape = self.shape(logits);
        debug_assert_eq!(shape.len(), 2);
        let value = self.value(logits);
        let v2 = value.view().into_dimensionality::<Ix2>().unwrap();
        let rowmax = v2.map_axis(Axis(1), |row| {
            row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        });
        let rowmax = rowmax.insert_axis(Axis(1)).into_dyn();
        let m = self.constant(rowmax);
        let shifted = self.sub(logits, m);
        let ex = self.exp(shifted);
        let denom = self.sum_keep(ex, &[1]);
        let lse = self.ln(denom);
        self.sub(shifted, lse)
    }

    /// L2-normalise the rows of a `[B, d]` matrix.
    pub fn normalize_rows(&self, x: Var, eps: f64) -> Var {
        let sq = self.mul(x, x);
        let ss = self.sum_keep(sq, &[1]);
        let ss = self.add_const(ss, eps);
        let norm = self.sqrt(ss);
        self.div(x, norm)
    }

    // ---- differentiation ------------------------------------------------

    /// Reverse-mode gradients of scalar `out` with respect to each of `wrt`.
    ///
    /// Adjoints are emitted as graph nodes, so the returned `Var`s are
    /// themselves differentiable (second-order works by calling `grad`
    /// again). Parameters with no path to `out` get a zero gradient.
    pub fn grad(&self, out: Var, wrt: &[Var]) -> Vec<Var> {
        debug_assert_eq!(self.value(out).len(), 1, "grad target must be scalar");
        let n = out.0 + 1;
        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        adjoint[out.0] = Some(self.constant(ArrayD::from_elem(self.value(out).raw_dim(), 1.0)));

        for i in (0..n).rev() {
            let g = match adjoint[i] {
                Some(g) => g,
                None => continue,
            };
            if !self.rg(Var(i)) {
                continue;
            }
            // Clone the op out so the graph is free to grow while we build
            // the adjoint expressions. Adjoints are only built for inputs
            // that can reach a differentiable leaf.
            let op = self.nodes.borrow()[i].op.clone();
            let mut feeds: Vec<(Var, Var)> = Vec::with_capacity(2);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if self.rg(a) {
                        feeds.push((a, self.sum_to(g, &self.shape(a))));
                    }
                    if self.rg(b) {
                        feeds.push((b, self.sum_to(g, &self.shape(b))));
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(a) {
                        feeds.push((a, self.sum_to(g, &self.shape(a))));
                    }
                    if self.rg(b) {
                        let gneg = self.neg(g);
                        feeds.push((b, self.sum_to(gneg, &self.shape(b))));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let ga = self.mul(g, b);
                        feeds.push((a, self.sum_to(ga, &self.shape(a))));
                    }
                    if self.rg(b) {
                        let gb = self.mul(g, a);
                        feeds.push((b, self.sum_to(gb, &self.shape(b))));
                    }
                }
                Op::Div(a, b) => {
                    if self.rg(a) {
                        let ga = self.div(g, b);
                        feeds.push((a, self.sum_to(ga, &self.shape(a))));
                    }
                    if self.rg(b) {
                        let num = self.mul(g, a);
                        let bsq = self.mul(b, b);
                        let gb = self.neg(self.div(num, bsq));
                        feeds.push((b, self.sum_to(gb, &self.shape(b))));
                    }
                }
                Op::Neg(a) => {
                    if self.rg(a) {
                        feeds.push((a, self.neg(g)));
                    }
                }
                Op::AddConst(a, _) => {
                    if self.rg(a) {
                        feeds.push((a, g));
                    }
                }
                Op::MulConst(a, c) => {
                    if self.rg(a) {
                        feeds.push((a, self.mul_const(g, c)));
                    }
                }
                Op::Exp(a) => {
                    if self.rg(a) {
                        feeds.push((a, self.mul(g, Var(i))));
                    }
                }
                Op::Ln(a) => {
                    if self.rg(a) {
                        feeds.push((a, self.div(g, a)));
                    }
                }
                Op::Sqrt(a) => {
                    if self.rg(a) {
                        let half = self.mul_const(g, 0.5);
                        feeds.push((a, self.div(half, Var(i))));
                    }
                }
                Op::Relu(a) => {
                    if self.rg(a) {
                        let mask = self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                        let mask = self.constant(mask);
                        feeds.push((a, self.mul(g, mask)));
                    }
                }
                Op::Matmul(a, b) => {
                    if self.rg(a) {
                        let bt = self.permute(b, &[1, 0]);
                        feeds.push((a, self.matmul(g, bt)));
                    }
                    if self.rg(b) {
                        let at = self.permute(a, &[1, 0]);
                        feeds.push((b, self.matmul(at, g)));
                    }
                }
                Op::Reshape(a) => {
                    if self.rg(a) {
                        let shape = self.shape(a);
                        feeds.push((a, self.reshape(g, &shape)));
                    }
                }
                Op::Permute(a, axes) => {
                    if self.rg(a) {
                        let mut inv = vec![0usize; axes.len()];
                        for (dst, &src) in axes.iter().enumerate() {
                            inv[src] = dst;
                        }
                        feeds.push((a, self.permute(g, &inv)));
                    }
                }
                Op::SumKeep(a, _) => {
                    if self.rg(a) {
                        let shape = self.shape(a);
                        feeds.push((a, self.broadcast_to(g, &shape)));
                    }
                }
                Op::Broadcast(a) => {
                    if self.rg(a) {
                        let shape = self.shape(a);
                        feeds.push((a, self.sum_to(g, &shape)));
                    }
                }
                Op::Unfold(a, spec) => {
                    if self.rg(a) {
                        feeds.push((a, self.fold(g, spec)));
                    }
                }
                Op::Fold(a, spec) => {
                    if self.rg(a) {
                        feeds.push((a, self.unfold(g, spec)));
                    }
                }
                Op::Concat(a, b, axis) => {
                    if self.rg(a) {
                        let alen = self.shape(a)[axis];
                        feeds.push((a, self.slice(g, axis, 0, alen)));
                    }
                    if self.rg(b) {
                        let alen = self.shape(a)[axis];
                        let blen = self.shape(b)[axis];
                        feeds.push((b, self.slice(g, axis, alen, blen)));
                    }
                }
                Op::Slice(a, axis, start, len) => {
                    if self.rg(a) {
                        let a_shape = self.shape(a);
                        let total = a_shape[axis];
                        let mut padded = g;
                        if start > 0 {
                            let mut zshape = a_shape.clone();
                            zshape[axis] = start;
                            let z = self.constant(ArrayD::zeros(IxDyn(&zshape)));
                            padded = self.concat(z, padded, axis);
                        }
                        if start + len < total {
                            let mut zshape = a_shape.clone();
                            zshape[axis] = total - start - len;
                            let z = self.constant(ArrayD::zeros(IxDyn(&zshape)));
                            padded = self.concat(padded, z, axis);
                        }
                        feeds.push((a, padded));
                    }
                }
            }
            for (slot, contrib) in feeds {
                adjoint[slot.0] = Some(match adjoint[slot.0] {
                    Some(prev) => self.add(prev, contrib),
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adjoint[w.0] {
                Some(g) => g,
                None => self.constant(ArrayD::zeros(self.value(w).raw_dim())),
            })
            .collect()
    }
}

fn binary_broadcast(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
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
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn unfold_value(x: &ArrayD<f64>, spec: &UnfoldSpec) -> ArrayD<f64> {
    let b = x.shape()[0];
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    debug_assert_eq!(&x.shape()[1..], &[c, h, w]);
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let k = spec.kernel;
    let l = oh * ow;
    let mut out = ArrayD::zeros(IxDyn(&[b, c * k * k, l]));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("contiguous input");
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let m = (ci * k + ki) * k + kj;
                    for oi in 0..oh {
                        let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let src_row = ((bi * c + ci) * h + ii as usize) * w;
                        let dst_row = (bi * c * k * k + m) * l + oi * ow;
                        if spec.stride == 1 {
                            // jj = oj + kj - pad: contiguous span copy.
                            let oj_lo = spec.pad.saturating_sub(kj);
                            let oj_hi = ow.min(w + spec.pad - kj);
                            if oj_lo < oj_hi {
                                let jj_lo = oj_lo + kj - spec.pad;
                                os[dst_row + oj_lo..dst_row + oj_hi].copy_from_slice(
                                    &xs[src_row + jj_lo..src_row + jj_lo + (oj_hi - oj_lo)],
                                );
                            }
                        } else {
                            for oj in 0..ow {
                                let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                os[dst_row + oj] = xs[src_row + jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn fold_value(x: &ArrayD<f64>, spec: &UnfoldSpec) -> ArrayD<f64> {
    let b = x.shape()[0];
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let k = spec.kernel;
    let l = oh * ow;
    debug_assert_eq!(&x.shape()[1..], &[c * k * k, l]);
    let mut out = ArrayD::zeros(IxDyn(&[b, c, h, w]));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("contiguous input");
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let m = (ci * k + ki) * k + kj;
                    for oi in 0..oh {
                        let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let dst_row = ((bi * c + ci) * h + ii as usize) * w;
                        let src_row = (bi * c * k * k + m) * l + oi * ow;
                        if spec.stride == 1 {
                            let oj_lo = spec.pad.saturating_sub(kj);
                            let oj_hi = ow.min(w + spec.pad - kj);
                            if oj_lo < oj_hi {
                                let jj_lo = oj_lo + kj - spec.pad;
                                for (d, s) in os[dst_row + jj_lo..dst_row + jj_lo + (oj_hi - oj_lo)]
                                    .iter_mut()
                                    .zip(&xs[src_row + oj_lo..src_row + oj_hi])
                                {
                                    *d += s;
                                }
                            }
                        } else {
                            for oj in 0..ow {
                                let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                os[dst_row + jj as usize] += xs[src_row + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
