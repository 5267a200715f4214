//! Reverse-mode automatic differentiation over dynamic-shape arrays.
//!
//! A [`Graph`] is a tape of operations built per training step (or per
//! image). Values live as `ArrayD<F>`; [`Var`] handles index into the tape.
//! Calling [`Graph::backward`] on a 0-d loss node fills gradients for every
//! node that needs them. The op set is exactly what the segmentation models
//! and losses require; every op is verified against central finite
//! differences in the test suite.
//!
//! Everything here is sequential and allocation-per-op, which keeps results
//! bit-reproducible regardless of how callers schedule steps.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Owns the trainable tensors of a model pair. Graphs borrow values from it
/// when a parameter leaf is created and report gradients back by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    tensors: Vec<ArrayD<F>>,
    names: Vec<String>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        self.tensors.push(value);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.tensors[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ArrayD<F>)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradient accumulator, aligned with a [`ParamStore`].
#[derive(Debug)]
pub struct GradStore<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn zeros(n: usize) -> Self {
        GradStore {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn add_scaled(&mut self, id: ParamId, grad: &ArrayD<F>, scale: F) {
        match &mut self.grads[id.0] {
            Some(g) => g.zip_mut_with(grad, |a, b| *a += *b * scale),
            slot => *slot = Some(grad.mapv(|v| v * scale)),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<F>> {
        self.grads[id.0].as_ref()
    }
}

enum Op<F: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    Clamp(usize, F, F),
    MulScalar(usize, F),
    AddScalar(usize, F),
    /// s - x
    RsubScalar(F, usize),
    /// x + sign * s where s is 0-d
    AddBroadcastScalar(usize, usize, F),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
    },
    AvgPool2(usize),
    UpsampleNearest2(usize),
    ConcatC(usize, usize),
    SliceChannel(usize, usize),
    MeanAxis0(usize),
    GlobalAvgPool(usize),
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    MeanAll(usize),
    SumAll(usize),
    Detach,
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    grad: Option<ArrayD<F>>,
    op: Op<F>,
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().expect("scalar node non-empty")
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Constant input: no gradient is tracked through it.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: F) -> Var {
        self.constant(ndarray::arr0(value).into_dyn())
    }

    /// Gradient-tracked input that is not a parameter (used by grad checks
    /// and by losses differentiating w.r.t. probability maps).
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf; gradients are retrievable by [`ParamId`].
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = binary_same_shape(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = binary_same_shape(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = binary_same_shape(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = binary_same_shape(self.value(a), self.value(b), |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a.0, b.0), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        let ng = self.needs(a);
        self.push(v, Op::Neg(a.0), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(F::exp);
        let ng = self.needs(a);
        self.push(v, Op::Exp(a.0), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(F::ln);
        let ng = self.needs(a);
        self.push(v, Op::Ln(a.0), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(<F as num_traits::Float>::abs);
        let ng = self.needs(a);
        self.push(v, Op::Abs(a.0), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        let ng = self.needs(a);
        self.push(v, Op::Relu(a.0), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid_scalar);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a.0), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        let v = self.value(a).mapv(|x| x.max(lo).min(hi));
        let ng = self.needs(a);
        self.push(v, Op::Clamp(a.0, lo, hi), ng)
    }

    pub fn mul_scalar(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).mapv(|x| x * s);
        let ng = self.needs(a);
        self.push(v, Op::MulScalar(a.0, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).mapv(|x| x + s);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a.0, s), ng)
    }

    /// s - x
    pub fn rsub_scalar(&mut self, s: F, a: Var) -> Var {
        let v = self.value(a).mapv(|x| s - x);
        let ng = self.needs(a);
        self.push(v, Op::RsubScalar(s, a.0), ng)
    }

    /// x + sign * s, broadcasting the 0-d node s over x.
    pub fn add_broadcast_scalar(&mut self, x: Var, s: Var, sign: F) -> Var {
        let sv = self.scalar(s);
        let v = self.value(x).mapv(|e| e + sign * sv);
        let ng = self.needs(x) || self.needs(s);
        self.push(v, Op::AddBroadcastScalar(x.0, s.0, sign), ng)
    }

    /// Stops gradient flow; the value passes through unchanged.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach, false)
    }

    // ---- structured ----

    /// Same-padding stride-1 convolution. `w` is (Cout, Cin, k, k) with
    /// k in {1, 3}; `x` is (Cin, H, W); `b` is (Cout).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = as3(self.value(x));
        let wv = self.value(w);
        let bv = as1(self.value(b));
        let v = conv2d_forward(&xv, wv, &bv);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            v.into_dyn(),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            ng,
        )
    }

    /// 2x2 average pooling with stride 2; H and W must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let x = as3(self.value(a));
        let (c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let quarter = F::of_f64(0.25);
        let mut out = Array3::<F>::zeros((c, h / 2, w / 2));
        for ci in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let s = x[[ci, 2 * y, 2 * xx]]
                        + x[[ci, 2 * y, 2 * xx + 1]]
                        + x[[ci, 2 * y + 1, 2 * xx]]
                        + x[[ci, 2 * y + 1, 2 * xx + 1]];
                    out[[ci, y, xx]] = s * quarter;
                }
            }
        }
        let ng = self.needs(a);
        self.push(out.into_dyn(), Op::AvgPool2(a.0), ng)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let x = as3(self.value(a));
        let (c, h, w) = x.dim();
        let mut out = Array3::<F>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[[ci, y, xx]];
                    out[[ci, 2 * y, 2 * xx]] = v;
                    out[[ci, 2 * y, 2 * xx + 1]] = v;
                    out[[ci, 2 * y + 1, 2 * xx]] = v;
                    out[[ci, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
        let ng = self.needs(a);
        self.push(out.into_dyn(), Op::UpsampleNearest2(a.0), ng)
    }

    /// Concatenate two (C,H,W) tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let xa = as3(self.value(a));
        let xb = as3(self.value(b));
        let v = ndarray::concatenate(Axis(0), &[xa.view(), xb.view()])
            .expect("concat shapes compatible");
        let ng = self.needs(a) || self.needs(b);
        self.push(v.into_dyn(), Op::ConcatC(a.0, b.0), ng)
    }

    /// Select channel c of a (C,H,W) tensor as (H,W).
    pub fn slice_channel(&mut self, a: Var, c: usize) -> Var {
        let x = as3(self.value(a));
        let v = x.index_axis(Axis(0), c).to_owned();
        let ng = self.needs(a);
        self.push(v.into_dyn(), Op::SliceChannel(a.0, c), ng)
    }

    /// Mean over the channel axis: (C,H,W) -> (H,W).
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let x = as3(self.value(a));
        let v = x.mean_axis(Axis(0)).expect("non-empty channel axis");
        let ng = self.needs(a);
        self.push(v.into_dyn(), Op::MeanAxis0(a.0), ng)
    }

    /// Spatial mean: (C,H,W) -> (C).
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let x = as3(self.value(a));
        let (c, h, w) = x.dim();
        let inv = F::one() / F::of_usize(h * w);
        let mut out = Array1::<F>::zeros(c);
        for ci in 0..c {
            out[ci] = x.index_axis(Axis(0), ci).sum() * inv;
        }
        let ng = self.needs(a);
        self.push(out.into_dyn(), Op::GlobalAvgPool(a.0), ng)
    }

    /// Dense layer: w (Out,In) . x (In) + b (Out).
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = as1(self.value(x));
        let wv = as2(self.value(w));
        let bv = as1(self.value(b));
        let v = wv.dot(&xv) + &bv;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            v.into_dyn(),
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            ng,
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a).mean().expect("non-empty tensor");
        let ng = self.needs(a);
        self.push(ndarray::arr0(m).into_dyn(), Op::MeanAll(a.0), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(ndarray::arr0(s).into_dyn(), Op::SumAll(a.0), ng)
    }

    // ---- backward ----

    /// Backpropagate from a 0-d loss node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        self.nodes[loss.0].grad = Some(ndarray::arr0(F::one()).into_dyn());

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backward_node(i, &g);
        }
    }

    fn accumulate(&mut self, idx: usize, contribution: ArrayD<F>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut self.nodes[idx].grad {
            Some(g) => g.zip_mut_with(&contribution, |a, b| *a += *b),
            slot => *slot = Some(contribution),
        }
    }

    fn backward_node(&mut self, i: usize, g: &ArrayD<F>) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = binary_same_shape(g, &self.nodes[b].value, |x, y| x * y);
                let gb = binary_same_shape(g, &self.nodes[a].value, |x, y| x * y);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let ga = binary_same_shape(g, &self.nodes[b].value, |x, y| x / y);
                let av = self.nodes[a].value.clone();
                let bv = self.nodes[b].value.clone();
                let mut gb = binary_same_shape(&av, &bv, |x, y| -x / (y * y));
                gb.zip_mut_with(g, |x, y| *x *= *y);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Neg(a) => {
                let a = *a;
                self.accumulate(a, g.mapv(|x| -x));
            }
            Op::Exp(a) => {
                let a = *a;
                let ga = binary_same_shape(g, &self.nodes[i].value, |x, y| x * y);
                self.accumulate(a, ga);
            }
            Op::Ln(a) => {
                let a = *a;
                let ga = binary_same_shape(g, &self.nodes[a].value, |x, y| x / y);
                self.accumulate(a, ga);
            }
            Op::Abs(a) => {
                let a = *a;
                let ga = binary_same_shape(g, &self.nodes[a].value, |x, y| {
                    if y > F::zero() {
                        x
                    } else if y < F::zero() {
                        -x
                    } else {
                        F::zero()
                    }
                });
                self.accumulate(a, ga);
            }
            Op::Relu(a) => {
                let a = *a;
                let ga = binary_same_shape(g, &self.nodes[a].value, |x, y| {
                    if y > F::zero() {
                        x
                    } else {
                        F::zero()
                    }
                });
                self.accumulate(a, ga);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let ga = binary_same_shape(g, &self.nodes[i].value, |x, s| {
                    x * s * (F::one() - s)
                });
                self.accumulate(a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let ga = binary_same_shape(g, &self.nodes[a].value, |x, y| {
                    if y >= lo && y <= hi {
                        x
                    } else {
                        F::zero()
                    }
                });
                self.accumulate(a, ga);
            }
            Op::MulScalar(a, s) => {
                let (a, s) = (*a, *s);
                self.accumulate(a, g.mapv(|x| x * s));
            }
            Op::AddScalar(a, _) => {
                let a = *a;
                self.accumulate(a, g.clone());
            }
            Op::RsubScalar(_, a) => {
                let a = *a;
                self.accumulate(a, g.mapv(|x| -x));
            }
            Op::AddBroadcastScalar(x, s, sign) => {
                let (x, s, sign) = (*x, *s, *sign);
                self.accumulate(x, g.clone());
                let gs = ndarray::arr0(g.sum() * sign).into_dyn();
                self.accumulate(s, gs);
            }
            Op::Conv2d { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xv = as3(&self.nodes[x].value);
                let wv = self.nodes[w].value.clone();
                let gv = as3(g);
                let (gx, gw, gb) = conv2d_backward(&xv, &wv, &gv);
                self.accumulate(x, gx.into_dyn());
                self.accumulate(w, gw);
                self.accumulate(b, gb.into_dyn());
            }
            Op::AvgPool2(a) => {
                let a = *a;
                let gv = as3(g);
                let (c, h, w) = gv.dim();
                let quarter = F::of_f64(0.25);
                let mut gx = Array3::<F>::zeros((c, 2 * h, 2 * w));
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let v = gv[[ci, y, xx]] * quarter;
                            gx[[ci, 2 * y, 2 * xx]] = v;
                            gx[[ci, 2 * y, 2 * xx + 1]] = v;
                            gx[[ci, 2 * y + 1, 2 * xx]] = v;
                            gx[[ci, 2 * y + 1, 2 * xx + 1]] = v;
                        }
                    }
                }
                self.accumulate(a, gx.into_dyn());
            }
            Op::UpsampleNearest2(a) => {
                let a = *a;
                let gv = as3(g);
                let (c, h2, w2) = gv.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut gx = Array3::<F>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[[ci, y, xx]] = gv[[ci, 2 * y, 2 * xx]]
                                + gv[[ci, 2 * y, 2 * xx + 1]]
                                + gv[[ci, 2 * y + 1, 2 * xx]]
                                + gv[[ci, 2 * y + 1, 2 * xx + 1]];
                        }
                    }
                }
                self.accumulate(a, gx.into_dyn());
            }
            Op::ConcatC(a, b) => {
                let (a, b) = (*a, *b);
                let ca = as3(&self.nodes[a].value).dim().0;
                let gv = as3(g);
                let ga = gv.slice(ndarray::s![..ca, .., ..]).to_owned();
                let gb = gv.slice(ndarray::s![ca.., .., ..]).to_owned();
                self.accumulate(a, ga.into_dyn());
                self.accumulate(b, gb.into_dyn());
            }
            Op::SliceChannel(a, c) => {
                let (a, c) = (*a, *c);
                let shape = as3(&self.nodes[a].value).dim();
                let mut gx = Array3::<F>::zeros(shape);
                let gv = g
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("slice grad is 2-d");
                gx.index_axis_mut(Axis(0), c).assign(&gv);
                self.accumulate(a, gx.into_dyn());
            }
            Op::MeanAxis0(a) => {
                let a = *a;
                let shape = as3(&self.nodes[a].value).dim();
                let inv = F::one() / F::of_usize(shape.0);
                let gv = g
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("mean_axis0 grad is 2-d");
                let mut gx = Array3::<F>::zeros(shape);
                for ci in 0..shape.0 {
                    gx.index_axis_mut(Axis(0), ci).assign(&gv.mapv(|x| x * inv));
                }
                self.accumulate(a, gx.into_dyn());
            }
            Op::GlobalAvgPool(a) => {
                let a = *a;
                let shape = as3(&self.nodes[a].value).dim();
                let inv = F::one() / F::of_usize(shape.1 * shape.2);
                let gv = as1(g);
                let mut gx = Array3::<F>::zeros(shape);
                for ci in 0..shape.0 {
                    gx.index_axis_mut(Axis(0), ci).fill(gv[ci] * inv);
                }
                self.accumulate(a, gx.into_dyn());
            }
            Op::Affine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xv = as1(&self.nodes[x].value);
                let wv = as2(&self.nodes[w].value);
                let gv = as1(g);
                let gx = wv.t().dot(&gv);
                let gw = outer(&gv, &xv);
                self.accumulate(x, gx.into_dyn());
                self.accumulate(w, gw.into_dyn());
                self.accumulate(b, gv.to_owned().into_dyn());
            }
            Op::MeanAll(a) => {
                let a = *a;
                let n = self.nodes[a].value.len();
                let gs = first(g) / F::of_usize(n);
                let shape = self.nodes[a].value.raw_dim();
                self.accumulate(a, ArrayD::from_elem(shape, gs));
            }
            Op::SumAll(a) => {
                let a = *a;
                let gs = first(g);
                let shape = self.nodes[a].value.raw_dim();
                self.accumulate(a, ArrayD::from_elem(shape, gs));
            }
        }
    }

    /// Fold this graph's parameter gradients into `grads`, scaled.
    pub fn accumulate_param_grads(&self, grads: &mut GradStore<F>, scale: F) {
        for node in &self.nodes {
            if let (Some(id), Some(g)) = (node.param, node.grad.as_ref()) {
                grads.add_scaled(id, g, scale);
            }
        }
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    // Computed from the non-positive branch for stability at large |x|.
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn first<F: Scalar>(a: &ArrayD<F>) -> F {
    *a.iter().next().expect("non-empty array")
}

fn binary_same_shape<F: Scalar>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    f: impl Fn(F, F) -> F,
) -> ArrayD<F> {
    debug_assert_eq!(a.shape(), b.shape(), "elementwise op shape mismatch");
    let mut out = a.clone();
    out.zip_mut_with(b, |x, y| *x = f(*x, *y));
    out
}

fn as1<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView1<'_, F> {
    a.view().into_dimensionality::<Ix1>().expect("1-d tensor")
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

fn as3<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView3<'_, F> {
    a.view().into_dimensionality::<Ix3>().expect("3-d tensor")
}

fn outer<F: Scalar>(a: &ndarray::ArrayView1<F>, b: &ndarray::ArrayView1<F>) -> Array2<F> {
    let mut out = Array2::<F>::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[[i, j]] = a[i] * b[j];
        }
    }
    out
}

/// Unpack a (Cin,H,W) image into the (Cin*k*k, H*W) patch matrix for a
/// same-padded stride-1 k x k convolution.
fn im2col<F: Scalar>(x: &ndarray::ArrayView3<F>, k: usize) -> Array2<F> {
    let (c, h, w) = x.dim();
    let pad = k / 2;
    let mut col = Array2::<F>::zeros((c * k * k, h * w));
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let row = (ci * k + di) * k + dj;
                for y in 0..h {
                    let sy = y + di;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let sy = sy - pad;
                    for xx in 0..w {
                        let sx = xx + dj;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        col[[row, y * w + xx]] = x[[ci, sy, sx - pad]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of the patch-matrix gradient back onto the input image.
fn col2im<F: Scalar>(gcol: &Array2<F>, c: usize, h: usize, w: usize, k: usize) -> Array3<F> {
    let pad = k / 2;
    let mut gx = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let row = (ci * k + di) * k + dj;
                for y in 0..h {
                    let sy = y + di;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let sy = sy - pad;
                    for xx in 0..w {
                        let sx = xx + dj;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        gx[[ci, sy, sx - pad]] += gcol[[row, y * w + xx]];
                    }
                }
            }
        }
    }
    gx
}

fn conv2d_forward<F: Scalar>(
    x: &ndarray::ArrayView3<F>,
    w: &ArrayD<F>,
    b: &ndarray::ArrayView1<F>,
) -> Array3<F> {
    let (_, h, width) = x.dim();
    let wshape = w.shape();
    let (cout, cin, k) = (wshape[0], wshape[1], wshape[2]);
    debug_assert_eq!(wshape[3], k);
    debug_assert_eq!(cin, x.dim().0, "conv2d channel mismatch");
    let col = im2col(x, k);
    let wmat = w
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("contiguous weights");
    let mut out = wmat.dot(&col);
    for (mut row, bias) in out.axis_iter_mut(Axis(0)).zip(b.iter()) {
        row.mapv_inplace(|v| v + *bias);
    }
    out.into_shape_with_order((cout, h, width))
        .expect("conv output reshape")
}

fn conv2d_backward<F: Scalar>(
    x: &ndarray::ArrayView3<F>,
    w: &ArrayD<F>,
    g: &ndarray::ArrayView3<F>,
) -> (Array3<F>, ArrayD<F>, Array1<F>) {
    let (c, h, width) = x.dim();
    let wshape = w.shape();
    let (cout, cin, k) = (wshape[0], wshape[1], wshape[2]);
    let col = im2col(x, k);
    let gmat = g
        .to_owned()
        .into_shape_with_order((cout, h * width))
        .expect("grad reshape");
    let gw = gmat.dot(&col.t()); // (Cout, Cin*k*k)
    let gb = gmat.sum_axis(Axis(1));
    let wmat = w
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("contiguous weights");
    let gcol = wmat.t().dot(&gmat);
    let gx = col2im(&gcol, c, h, width, k);
    let gw = gw
        .into_shape_with_order(ndarray::IxDyn(&[cout, cin, k, k]))
        .expect("weight grad reshape");
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    /// Central finite-difference gradient of a scalar-valued graph function
    /// with respect to one leaf input, evaluated elementwise.
    fn numeric_grad(
        build: &dyn Fn(&mut Graph<f64>, Var) -> Var,
        input: &ArrayD<f64>,
        h: f64,
    ) -> ArrayD<f64> {
        let mut out = ArrayD::<f64>::zeros(input.raw_dim());
        for idx in 0..input.len() {
            let mut plus = input.clone();
            let mut minus = input.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fp = {
                let mut g = Graph::new();
                let v = g.leaf(plus);
                let loss = build(&mut g, v);
                g.scalar(loss)
            };
            let fm = {
                let mut g = Graph::new();
                let v = g.leaf(minus);
                let loss = build(&mut g, v);
                g.scalar(loss)
            };
            out.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn check_grad(build: &dyn Fn(&mut Graph<f64>, Var) -> Var, input: ArrayD<f64>, tol: f64) {
        let mut g = Graph::new();
        let v = g.leaf(input.clone());
        let loss = build(&mut g, v);
        g.backward(loss);
        let analytic = g.grad(v).expect("input grad").clone();
        let numeric = numeric_grad(build, &input, 1e-6);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!(
                (a - n).abs() / denom < tol,
                "grad mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn(ndarray::IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let input = rand_arr(&[3, 4], 1);
        check_grad(
            &|g, v| {
                let e = g.exp(v);
                let s = g.sigmoid(e);
                let m = g.mul(s, v);
                g.mean_all(m)
            },
            input,
            1e-5,
        );
    }

    #[test]
    fn div_and_ln_grads() {
        let mut base = rand_arr(&[5], 2);
        base.mapv_inplace(|x| x.abs() + 0.5);
        check_grad(
            &|g, v| {
                let l = g.ln(v);
                let c = g.constant(ArrayD::from_elem(ndarray::IxDyn(&[5]), 2.0));
                let d = g.div(l, c);
                let a = g.abs(d);
                g.sum_all(a)
            },
            base,
            1e-5,
        );
    }

    #[test]
    fn conv2d_grads_match_finite_differences() {
        let x = rand_arr(&[2, 6, 6], 3);
        let w = rand_arr(&[3, 2, 3, 3], 4);
        let b = rand_arr(&[3], 5);
        // d loss / d input
        let wc = w.clone();
        let bc = b.clone();
        check_grad(
            &move |g, v| {
                let wv = g.constant(wc.clone());
                let bv = g.constant(bc.clone());
                let y = g.conv2d(v, wv, bv);
                let r = g.relu(y);
                g.mean_all(r)
            },
            x.clone(),
            1e-5,
        );
        // d loss / d weight
        let xc = x.clone();
        let bc = b.clone();
        check_grad(
            &move |g, v| {
                let xv = g.constant(xc.clone());
                let bv = g.constant(bc.clone());
                let y = g.conv2d(xv, v, bv);
                g.mean_all(y)
            },
            w,
            1e-5,
        );
        // d loss / d bias
        let xc = x.clone();
        let wc2 = rand_arr(&[3, 2, 1, 1], 6);
        check_grad(
            &move |g, v| {
                let xv = g.constant(xc.clone());
                let wv = g.constant(wc2.clone());
                let y = g.conv2d(xv, wv, v);
                g.mean_all(y)
            },
            b,
            1e-5,
        );
    }

    #[test]
    fn pooling_and_upsampling_grads() {
        let x = rand_arr(&[2, 4, 4], 7);
        check_grad(
            &|g, v| {
                let p = g.avg_pool2(v);
                let u = g.upsample_nearest2(p);
                let m = g.mul(u, u);
                g.sum_all(m)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn structural_op_grads() {
        let x = rand_arr(&[3, 4, 4], 8);
        check_grad(
            &|g, v| {
                let c0 = g.slice_channel(v, 1);
                let m = g.mean_axis0(v);
                let s = g.mul(c0, m);
                let gap = g.global_avg_pool(v);
                let gs = g.sum_all(gap);
                let ss = g.mean_all(s);
                let t = g.add(gs, ss);
                let cat = g.concat_channels(v, v);
                let catl = g.mean_all(cat);
                g.add(t, catl)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn affine_grads() {
        let x = rand_arr(&[4], 9);
        let w = rand_arr(&[3, 4], 10);
        let wc = w.clone();
        check_grad(
            &move |g, v| {
                let wv = g.constant(wc.clone());
                let bv = g.constant(ArrayD::zeros(ndarray::IxDyn(&[3])));
                let y = g.affine(v, wv, bv);
                let s = g.sigmoid(y);
                g.sum_all(s)
            },
            x.clone(),
            1e-5,
        );
        let xc = x.clone();
        check_grad(
            &move |g, v| {
                let xv = g.constant(xc.clone());
                let bv = g.constant(ArrayD::from_elem(ndarray::IxDyn(&[3]), 0.1));
                let y = g.affine(xv, v, bv);
                g.mean_all(y)
            },
            w,
            1e-5,
        );
    }

    #[test]
    fn detach_blocks_gradients() {
        let x = rand_arr(&[4], 11);
        let mut g = Graph::new();
        let v = g.leaf(x);
        let d = g.detach(v);
        let m = g.mul(d, d);
        let loss = g.sum_all(m);
        g.backward(loss);
        assert!(g.grad(v).is_none());
    }

    #[test]
    fn broadcast_scalar_grads() {
        let x = rand_arr(&[6], 12);
        check_grad(
            &|g, v| {
                let s = g.mean_all(v);
                let y = g.add_broadcast_scalar(v, s, -1.0);
                let m = g.mul(y, y);
                g.sum_all(m)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let x = rand_arr(&[2, 5, 5], 13);
        let w = rand_arr(&[3, 2, 3, 3], 14);
        let b = rand_arr(&[3], 15);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let bv = g.constant(b.clone());
        let y = g.conv2d(xv, wv, bv);
        let out = as3(g.value(y));
        // direct nested-loop oracle
        for co in 0..3 {
            for yy in 0..5i64 {
                for xx in 0..5i64 {
                    let mut acc = b[[co]];
                    for ci in 0..2 {
                        for di in -1..=1i64 {
                            for dj in -1..=1i64 {
                                let sy = yy + di;
                                let sx = xx + dj;
                                if sy < 0 || sy >= 5 || sx < 0 || sx >= 5 {
                                    continue;
                                }
                                acc += x[[ci, sy as usize, sx as usize]]
                                    * w[[co, ci, (di + 1) as usize, (dj + 1) as usize]];
                            }
                        }
                    }
                    let got = out[[co, yy as usize, xx as usize]];
                    assert!((got - acc).abs() < 1e-12, "conv mismatch {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn param_grads_are_collected() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let x = g.constant(arr1(&[1.0, 1.0]).into_dyn());
        let b = g.constant(arr1(&[0.0, 0.0]).into_dyn());
        let y = g.affine(x, p, b);
        let loss = g.sum_all(y);
        g.backward(loss);
        let mut grads = GradStore::zeros(store.len());
        g.accumulate_param_grads(&mut grads, 1.0);
        let gw = grads.get(id).expect("weight grad");
        assert_eq!(gw.shape(), &[2, 2]);
        for v in gw.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
