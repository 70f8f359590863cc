use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{concatenate, Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, IxDyn};

use super::kernels;
use super::scalar::Scalar;

/// How rectifier-like nodes propagate gradients during [`Tape::backward_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardMode {
    #[default]
    Standard,
    /// Guided backpropagation: at every rectifier (and MFM) the backward
    /// signal is additionally clamped to its positive part.
    Guided,
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, T),
    Sum(usize),
    SumAxis(usize),
    ExtremumAxis { a: usize, axis: usize, idx: Vec<usize> },
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    IndexSelect { a: usize, axis: usize, idx: Vec<usize> },
    Conv2d { x: usize, w: usize, b: Option<usize>, k: usize, pad: usize, cols: Vec<Array2<T>> },
    MaxPool2 { a: usize, arg: Vec<u8> },
    AvgPool { a: usize, k: usize },
    Upsample2(usize),
    Mfm { a: usize, first: Vec<bool> },
    InstanceNorm { a: usize, eps: T, means: Vec<T>, stds: Vec<T> },
    LogSoftmax(usize),
    PickPerRow { a: usize, idx: Vec<usize> },
}

struct Node<T: Scalar> {
    value: Rc<ArrayD<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A reverse-mode autodiff tape. Nodes are appended in evaluation order, so a
/// backward sweep in reverse index order visits every node after all of its
/// consumers.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by a backward sweep.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when it received none.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> ArrayD<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(&v.shape())))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn std_layout<T: Scalar>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn reshape<T: Scalar>(a: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    std_layout(a)
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape preserves element count")
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to<T: Scalar>(mut g: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("expected a matrix")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        // Nothing upstream needs a gradient: drop saved state and keep the value.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn val(&self, id: usize) -> Rc<ArrayD<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// A leaf that receives gradients (inputs, trainable parameters).
    pub fn var(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(std_layout(value), Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(std_layout(value), Op::Leaf, false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn backward(&self, out: Var<'_, T>) -> Gradients<T> {
        self.backward_with(out, BackwardMode::Standard)
    }

    /// Back-propagates from `out` seeded with ones and returns the gradients
    /// of every leaf that requires one.
    pub fn backward_with(&self, out: Var<'_, T>, mode: BackwardMode) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.id] = Some(ArrayD::from_elem(nodes[out.id].value.raw_dim(), T::one()));
        let guided = mode == BackwardMode::Guided;

        for id in (0..=out.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = |target: usize, delta: ArrayD<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => *existing += &delta,
                    slot => *slot = Some(delta),
                }
            };
            let value = |i: usize| nodes[i].value.as_ref();
            let shape = |i: usize| nodes[i].value.shape().to_vec();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, reduce_to(g.clone(), &shape(*a)));
                    acc(*b, reduce_to(g, &shape(*b)));
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to(g.clone(), &shape(*a)));
                    acc(*b, reduce_to(-g, &shape(*b)));
                }
                Op::Mul(a, b) => {
                    if nodes[*a].requires_grad {
                        acc(*a, reduce_to(&g * value(*b), &shape(*a)));
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, reduce_to(&g * value(*a), &shape(*b)));
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (value(*a), value(*b));
                    if nodes[*a].requires_grad {
                        acc(*a, reduce_to(&g / bv, &shape(*a)));
                    }
                    if nodes[*b].requires_grad {
                        let gb = -(&g * av) / &(bv * bv);
                        acc(*b, reduce_to(gb, &shape(*b)));
                    }
                }
                Op::Scale(a, s) => acc(*a, g * *s),
                Op::Offset(a) => acc(*a, g),
                Op::Exp(a) => acc(*a, g * value(id)),
                Op::Log(a) => acc(*a, g / value(*a)),
                Op::Sqrt(a) => {
                    let half = T::from_f64(0.5);
                    let mut d = g;
                    d.zip_mut_with(value(id), |gv, &y| *gv = *gv * half / y);
                    acc(*a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    d.zip_mut_with(value(id), |gv, &y| *gv = *gv * (T::one() - y * y));
                    acc(*a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(value(*a), |gv, &x| {
                        if x <= T::zero() || (guided && *gv <= T::zero()) {
                            *gv = T::zero();
                        }
                    });
                    acc(*a, d);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut d = g;
                    d.zip_mut_with(value(*a), |gv, &x| {
                        if x <= T::zero() {
                            *gv = *gv * *slope;
                        }
                    });
                    acc(*a, d);
                }
                Op::Sum(a) => {
                    let s = g.first().copied().unwrap_or_else(T::zero);
                    acc(*a, ArrayD::from_elem(IxDyn(&shape(*a)), s));
                }
                Op::SumAxis(a) => {
                    let sh = shape(*a);
                    acc(*a, g.broadcast(IxDyn(&sh)).expect("keepdim broadcast").to_owned());
                }
                Op::ExtremumAxis { a, axis, idx } => {
                    let sh = shape(*a);
                    let mut d = ArrayD::<T>::zeros(IxDyn(&sh));
                    {
                        let g2 = as2(&g);
                        let mut d2 = d.view_mut().into_dimensionality::<Ix2>().unwrap();
                        for (lane, &k) in idx.iter().enumerate() {
                            if *axis == 0 {
                                d2[[k, lane]] = d2[[k, lane]] + g2[[0, lane]];
                            } else {
                                d2[[lane, k]] = d2[[lane, k]] + g2[[lane, 0]];
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::Matmul(a, b) => {
                    let g2 = as2(&g);
                    if nodes[*a].requires_grad {
                        acc(*a, g2.dot(&as2(value(*b)).t()).into_dyn());
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, as2(value(*a)).t().dot(&g2).into_dyn());
                    }
                }
                Op::Transpose(a) => acc(*a, std_layout(as2(&g).t().to_owned().into_dyn())),
                Op::Reshape(a) => {
                    let sh = shape(*a);
                    acc(*a, reshape(g, &sh));
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for &p in parts {
                        let len = nodes[p].value.shape()[*axis];
                        let piece = g
                            .slice_axis(Axis(*axis), (start..start + len).into())
                            .to_owned();
                        acc(p, std_layout(piece));
                        start += len;
                    }
                }
                Op::IndexSelect { a, axis, idx } => {
                    let mut d = ArrayD::<T>::zeros(IxDyn(&shape(*a)));
                    for (k, &i) in idx.iter().enumerate() {
                        let mut dst = d.index_axis_mut(Axis(*axis), i);
                        dst += &g.index_axis(Axis(*axis), k);
                    }
                    acc(*a, d);
                }
                Op::Conv2d { x, w, b, k, pad, cols } => {
                    let (k, pad) = (*k, *pad);
                    let xs = shape(*x);
                    let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let wv = value(*w);
                    let co = wv.shape()[0];
                    let hw = h * wd;
                    let rows = ci * k * k;
                    let g = std_layout(g);
                    let gs = g.as_slice().unwrap();
                    let w2 = ArrayView2::from_shape((co, rows), wv.as_slice().unwrap()).unwrap();
                    if let Some(b) = b {
                        if nodes[*b].requires_grad {
                            let mut gb = ArrayD::<T>::zeros(IxDyn(&[co]));
                            for ni in 0..n {
                                for c in 0..co {
                                    let seg = &gs[(ni * co + c) * hw..(ni * co + c + 1) * hw];
                                    gb[c] = gb[c] + seg.iter().copied().sum::<T>();
                                }
                            }
                            acc(*b, gb);
                        }
                    }
                    if nodes[*w].requires_grad {
                        let mut gw = Array2::<T>::zeros((co, rows));
                        for (ni, col) in cols.iter().enumerate() {
                            let gn = ArrayView2::from_shape((co, hw), &gs[ni * co * hw..(ni + 1) * co * hw]).unwrap();
                            kernels::matmul_into(gn, col.t(), gw.view_mut(), true);
                        }
                        acc(*w, reshape(gw.into_dyn(), &[co, ci, k, k]));
                    }
                    if nodes[*x].requires_grad {
                        let mut gx = vec![T::zero(); n * ci * hw];
                        let mut dcols = Array2::<T>::zeros((rows, hw));
                        for ni in 0..n {
                            let gn = ArrayView2::from_shape((co, hw), &gs[ni * co * hw..(ni + 1) * co * hw]).unwrap();
                            kernels::matmul_into(w2.t(), gn, dcols.view_mut(), false);
                            kernels::col2im(
                                dcols.as_slice().unwrap(),
                                ci,
                                h,
                                wd,
                                k,
                                pad,
                                &mut gx[ni * ci * hw..(ni + 1) * ci * hw],
                            );
                        }
                        acc(*x, ArrayD::from_shape_vec(IxDyn(&xs), gx).unwrap());
                    }
                }
                Op::MaxPool2 { a, arg } => {
                    let sh = shape(*a);
                    let (h, w) = (sh[sh.len() - 2], sh[sh.len() - 1]);
                    let planes = sh.iter().product::<usize>() / (h * w);
                    let g = std_layout(g);
                    let d = kernels::maxpool2_backward(g.as_slice().unwrap(), arg, planes, h, w);
                    acc(*a, ArrayD::from_shape_vec(IxDyn(&sh), d).unwrap());
                }
                Op::AvgPool { a, k } => {
                    let sh = shape(*a);
                    let (h, w) = (sh[sh.len() - 2], sh[sh.len() - 1]);
                    let planes = sh.iter().product::<usize>() / (h * w);
                    let g = std_layout(g);
                    let d = kernels::avgpool_backward(g.as_slice().unwrap(), planes, h, w, *k);
                    acc(*a, ArrayD::from_shape_vec(IxDyn(&sh), d).unwrap());
                }
                Op::Upsample2(a) => {
                    let sh = shape(*a);
                    let (h, w) = (sh[sh.len() - 2], sh[sh.len() - 1]);
                    let planes = sh.iter().product::<usize>() / (h * w);
                    let g = std_layout(g);
                    let d = kernels::upsample2_backward(g.as_slice().unwrap(), planes, h, w);
                    acc(*a, ArrayD::from_shape_vec(IxDyn(&sh), d).unwrap());
                }
                Op::Mfm { a, first } => {
                    let sh = shape(*a);
                    let n = sh[0];
                    let half = sh[1..].iter().product::<usize>() / 2;
                    let g = std_layout(g);
                    let gs = g.as_slice().unwrap();
                    let mut d = vec![T::zero(); n * 2 * half];
                    for ni in 0..n {
                        for j in 0..half {
                            let o = ni * half + j;
                            let mut gv = gs[o];
                            if guided && gv < T::zero() {
                                gv = T::zero();
                            }
                            let src = if first[o] { ni * 2 * half + j } else { ni * 2 * half + half + j };
                            d[src] = gv;
                        }
                    }
                    acc(*a, ArrayD::from_shape_vec(IxDyn(&sh), d).unwrap());
                }
                Op::InstanceNorm { a, eps, means, stds } => {
                    let sh = shape(*a);
                    let len = sh[sh.len() - 2] * sh[sh.len() - 1];
                    let g = std_layout(g);
                    let d = kernels::instance_norm_backward(
                        value(*a).as_slice().unwrap(),
                        g.as_slice().unwrap(),
                        len,
                        *eps,
                        means,
                        stds,
                    );
                    acc(*a, ArrayD::from_shape_vec(IxDyn(&sh), d).unwrap());
                }
                Op::LogSoftmax(a) => {
                    // d/dx log_softmax: g - softmax * sum(g)
                    let y = as2(value(id));
                    let g2 = as2(&g);
                    let mut d = Array2::<T>::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let gsum = g2.row(r).sum();
                        for c in 0..y.ncols() {
                            d[[r, c]] = g2[[r, c]] - y[[r, c]].exp() * gsum;
                        }
                    }
                    acc(*a, d.into_dyn());
                }
                Op::PickPerRow { a, idx } => {
                    let mut d = Array2::<T>::zeros(as2(value(*a)).raw_dim());
                    for (r, &c) in idx.iter().enumerate() {
                        d[[r, c]] = g[[r]];
                    }
                    acc(*a, d.into_dyn());
                }
            }
        }

        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        Gradients { grads }
    }
}

macro_rules! unary {
    ($name:ident, $op:ident, $f:expr) => {
        pub fn $name(self) -> Var<'t, T> {
            let v = self.value().mapv($f);
            self.tape.push(v, Op::$op(self.id), self.requires_grad())
        }
    };
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<ArrayD<T>> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    /// Value of a single-element node.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar node");
        *v.iter().next().unwrap()
    }

    fn binary(self, other: Var<'t, T>, f: impl Fn(&ArrayD<T>, &ArrayD<T>) -> ArrayD<T>, op: Op<T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(std_layout(f(&a, &b)), op, rg)
    }

    pub fn add(self, o: Var<'t, T>) -> Var<'t, T> {
        self.binary(o, |a, b| a + b, Op::Add(self.id, o.id))
    }

    pub fn sub(self, o: Var<'t, T>) -> Var<'t, T> {
        self.binary(o, |a, b| a - b, Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Var<'t, T>) -> Var<'t, T> {
        self.binary(o, |a, b| a * b, Op::Mul(self.id, o.id))
    }

    pub fn div(self, o: Var<'t, T>) -> Var<'t, T> {
        self.binary(o, |a, b| a / b, Op::Div(self.id, o.id))
    }

    pub fn scale(self, s: f64) -> Var<'t, T> {
        let s = T::from_f64(s);
        let v = self.value().mapv(|x| x * s);
        self.tape.push(v, Op::Scale(self.id, s), self.requires_grad())
    }

    pub fn add_scalar(self, s: f64) -> Var<'t, T> {
        let s = T::from_f64(s);
        let v = self.value().mapv(|x| x + s);
        self.tape.push(v, Op::Offset(self.id), self.requires_grad())
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self)
    }

    unary!(exp, Exp, |x: T| x.exp());
    unary!(ln, Log, |x: T| x.ln());
    unary!(sqrt, Sqrt, |x: T| x.sqrt());
    unary!(tanh, Tanh, |x: T| x.tanh());
    unary!(relu, Relu, |x: T| if x > T::zero() { x } else { T::zero() });

    pub fn leaky_relu(self, slope: f64) -> Var<'t, T> {
        let s = T::from_f64(slope);
        let v = self.value().mapv(|x| if x > T::zero() { x } else { x * s });
        self.tape.push(v, Op::LeakyRelu(self.id, s), self.requires_grad())
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().sum();
        self.tape
            .push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(self, axis: usize) -> Var<'t, T> {
        let v = self.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.tape.push(v, Op::SumAxis(self.id), self.requires_grad())
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t, T> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    fn extremum_axis(self, axis: usize, want_max: bool) -> Var<'t, T> {
        let v = self.value();
        let m = as2(&v);
        assert!(axis < 2, "extremum reductions are defined on matrices");
        let lanes = if axis == 0 { m.ncols() } else { m.nrows() };
        let mut idx = Vec::with_capacity(lanes);
        let mut out = Vec::with_capacity(lanes);
        for lane in 0..lanes {
            let line = if axis == 0 { m.column(lane) } else { m.row(lane) };
            let mut best = 0;
            for (k, &x) in line.iter().enumerate().skip(1) {
                let better = if want_max { x > line[best] } else { x < line[best] };
                if better {
                    best = k;
                }
            }
            idx.push(best);
            out.push(line[best]);
        }
        let shape = if axis == 0 { vec![1, lanes] } else { vec![lanes, 1] };
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.tape.push(value, Op::ExtremumAxis { a: self.id, axis, idx }, self.requires_grad())
    }

    /// Row/column maximum of a matrix (keepdim). Ties resolve to the first index.
    pub fn max_axis(self, axis: usize) -> Var<'t, T> {
        self.extremum_axis(axis, true)
    }

    pub fn min_axis(self, axis: usize) -> Var<'t, T> {
        self.extremum_axis(axis, false)
    }

    pub fn matmul(self, o: Var<'t, T>) -> Var<'t, T> {
        let v = as2(&self.value()).dot(&as2(&o.value())).into_dyn();
        let rg = self.requires_grad() || o.requires_grad();
        self.tape.push(v, Op::Matmul(self.id, o.id), rg)
    }

    pub fn t(self) -> Var<'t, T> {
        let v = std_layout(as2(&self.value()).t().to_owned().into_dyn());
        self.tape.push(v, Op::Transpose(self.id), self.requires_grad())
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let v = reshape((*self.value()).clone(), shape);
        self.tape.push(v, Op::Reshape(self.id), self.requires_grad())
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
        let tape = parts[0].tape;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shapes agree");
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        tape.push(std_layout(v), Op::Concat { parts: ids, axis }, rg)
    }

    pub fn index_select(self, axis: usize, idx: &[usize]) -> Var<'t, T> {
        let v = std_layout(self.value().select(Axis(axis), idx));
        self.tape
            .push(v, Op::IndexSelect { a: self.id, axis, idx: idx.to_vec() }, self.requires_grad())
    }

    /// Stride-1 "same" convolution of an `N x Ci x H x W` input with a
    /// `Co x Ci x k x k` kernel (odd `k`).
    pub fn conv2d(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Var<'t, T> {
        let xv = self.value();
        let wv = w.value();
        let xs = xv.shape();
        let ws = wv.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let pad = k / 2;
        let hw = h * wd;
        let rows = ci * k * k;
        let w2 = ArrayView2::from_shape((co, rows), wv.as_slice().unwrap()).unwrap();
        let xsl = xv.as_slice().unwrap();
        let mut out = vec![T::zero(); n * co * hw];
        let mut cols = Vec::with_capacity(n);
        for ni in 0..n {
            let mut col = Array2::<T>::zeros((rows, hw));
            kernels::im2col(
                &xsl[ni * ci * hw..(ni + 1) * ci * hw],
                ci,
                h,
                wd,
                k,
                pad,
                col.as_slice_mut().unwrap(),
            );
            let dst = ArrayViewMut2::from_shape((co, hw), &mut out[ni * co * hw..(ni + 1) * co * hw]).unwrap();
            kernels::matmul_into(w2, col.view(), dst, false);
            cols.push(col);
        }
        if let Some(b) = b {
            let bv = b.value();
            for ni in 0..n {
                for c in 0..co {
                    let bias = bv[c];
                    out[(ni * co + c) * hw..(ni * co + c + 1) * hw]
                        .iter_mut()
                        .for_each(|v| *v = *v + bias);
                }
            }
        }
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        if !w.requires_grad() {
            // Columns are only needed for the weight gradient.
            cols.clear();
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, co, h, wd]), out).unwrap();
        self.tape.push(
            value,
            Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), k, pad, cols },
            rg,
        )
    }

    fn spatial(&self) -> (Vec<usize>, usize, usize, usize) {
        let sh = self.shape();
        let (h, w) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let planes = sh.iter().product::<usize>() / (h * w);
        (sh, planes, h, w)
    }

    pub fn maxpool2(self) -> Var<'t, T> {
        let (mut sh, planes, h, w) = self.spatial();
        let (v, arg) = kernels::maxpool2_forward(self.value().as_slice().unwrap(), planes, h, w);
        let nd = sh.len();
        sh[nd - 2] = h / 2;
        sh[nd - 1] = w / 2;
        let value = ArrayD::from_shape_vec(IxDyn(&sh), v).unwrap();
        self.tape.push(value, Op::MaxPool2 { a: self.id, arg }, self.requires_grad())
    }

    pub fn avgpool(self, k: usize) -> Var<'t, T> {
        let (mut sh, planes, h, w) = self.spatial();
        assert!(h % k == 0 && w % k == 0, "avgpool window must tile the input");
        let v = kernels::avgpool_forward(self.value().as_slice().unwrap(), planes, h, w, k);
        let nd = sh.len();
        sh[nd - 2] = h / k;
        sh[nd - 1] = w / k;
        let value = ArrayD::from_shape_vec(IxDyn(&sh), v).unwrap();
        self.tape.push(value, Op::AvgPool { a: self.id, k }, self.requires_grad())
    }

    pub fn upsample2(self) -> Var<'t, T> {
        let (mut sh, planes, h, w) = self.spatial();
        let v = kernels::upsample2_forward(self.value().as_slice().unwrap(), planes, h, w);
        let nd = sh.len();
        sh[nd - 2] = 2 * h;
        sh[nd - 1] = 2 * w;
        let value = ArrayD::from_shape_vec(IxDyn(&sh), v).unwrap();
        self.tape.push(value, Op::Upsample2(self.id), self.requires_grad())
    }

    /// Max-feature-map over the channel axis (axis 1): `out[c] = max(x[c], x[c + C])`.
    /// Panics on an odd channel count; callers validate shapes first.
    pub fn mfm(self) -> Var<'t, T> {
        let sh = self.shape();
        assert!(sh.len() >= 2 && sh[1] % 2 == 0, "mfm needs an even channel count");
        let n = sh[0];
        let half = sh[1..].iter().product::<usize>() / 2;
        let v = self.value();
        let xs = v.as_slice().unwrap();
        let mut out = Vec::with_capacity(n * half);
        let mut first = Vec::with_capacity(n * half);
        for ni in 0..n {
            let base = ni * 2 * half;
            for j in 0..half {
                let (a, b) = (xs[base + j], xs[base + half + j]);
                let pick_first = a >= b;
                first.push(pick_first);
                out.push(if pick_first { a } else { b });
            }
        }
        let mut osh = sh.clone();
        osh[1] /= 2;
        let value = ArrayD::from_shape_vec(IxDyn(&osh), out).unwrap();
        self.tape.push(value, Op::Mfm { a: self.id, first }, self.requires_grad())
    }

    /// `(x - mean) / (std + eps)` over the trailing two (spatial) axes.
    pub fn instance_norm(self, eps: f64) -> Var<'t, T> {
        let sh = self.shape();
        let len = sh[sh.len() - 2] * sh[sh.len() - 1];
        let eps = T::from_f64(eps);
        let (v, means, stds) = kernels::instance_norm_forward(self.value().as_slice().unwrap(), len, eps);
        let value = ArrayD::from_shape_vec(IxDyn(&sh), v).unwrap();
        self.tape.push(
            value,
            Op::InstanceNorm { a: self.id, eps, means, stds },
            self.requires_grad(),
        )
    }

    /// Row-wise log-softmax of an `N x K` matrix.
    pub fn log_softmax(self) -> Var<'t, T> {
        let v = self.value();
        let m = as2(&v);
        let mut out = Array2::<T>::zeros(m.raw_dim());
        for r in 0..m.nrows() {
            let row = m.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            for c in 0..m.ncols() {
                out[[r, c]] = row[c] - lse;
            }
        }
        self.tape
            .push(out.into_dyn(), Op::LogSoftmax(self.id), self.requires_grad())
    }

    /// `out[r] = x[r, idx[r]]` for an `N x K` matrix.
    pub fn pick_per_row(self, idx: &[usize]) -> Var<'t, T> {
        let v = self.value();
        let m = as2(&v);
        assert_eq!(idx.len(), m.nrows());
        let out: Vec<T> = idx.iter().enumerate().map(|(r, &c)| m[[r, c]]).collect();
        let value = ArrayD::from_shape_vec(IxDyn(&[idx.len()]), out).unwrap();
        self.tape
            .push(value, Op::PickPerRow { a: self.id, idx: idx.to_vec() }, self.requires_grad())
    }
}
