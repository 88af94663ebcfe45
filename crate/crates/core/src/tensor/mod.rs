//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes; each
//! op computes its value eagerly and [`Tape::backward`] walks the list in
//! reverse, accumulating vector-Jacobian products. The op set is exactly
//! what the networks and losses need — nothing speculative.
//!
//! The straight-through node is the one unusual op: its forward value is
//! supplied externally (the quantized feature map) while its backward passes
//! gradients to the pre-quantization input unchanged.

mod kernels;

pub use kernels::{conv2d_out_dim, matmul, matmul_t};

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};

/// Element type of the numeric core. Training uses `f32` (which makes the
/// float32 checkpoint format lossless); verification code instantiates `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn cast_from(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn cast_from(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn cast_from(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to one tape node.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Abs(usize),
    Scale(usize, T),
    AddScalar(usize, T),
    AddChannelBias(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    TemporalConv {
        input: usize,
        kernel: usize,
    },
    Upsample2x(usize),
    LeakyRelu(usize, T),
    Sigmoid(usize),
    Clamp(usize, T, T),
    Ln(usize),
    MeanAll(usize),
    SumAll(usize),
    MeanPositions(usize),
    MeanPerFrame(usize),
    AddTemporalPos {
        input: usize,
        table: usize,
    },
    StraightThrough(usize),
    Detach,
    SliceFrame {
        input: usize,
        frame: usize,
    },
    SlicePatchTube {
        input: usize,
        y0: usize,
        x0: usize,
        ph: usize,
        pw: usize,
    },
    /// Scalar-valued op with externally computed gradients per parent.
    CustomScalar {
        parents: Vec<usize>,
        grads: Vec<ArrayD<T>>,
    },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    grad: Option<ArrayD<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    pub parallel: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new(parallel: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            parallel,
        }
    }

    fn push(&mut self, value: ArrayD<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().expect("scalar node")
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- constructors -------------------------------------------------

    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Mul(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let rg = self.rg(a);
        self.push(v, rg, Op::Neg(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.abs());
        let rg = self.rg(a);
        self.push(v, rg, Op::Abs(a.0))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(v, rg, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(v, rg, Op::AddScalar(a.0, c))
    }

    /// Broadcast-add a bias of shape (C,) over the last axis.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Var {
        let c = *self.nodes[a.0].value.shape().last().expect("shape");
        assert_eq!(self.nodes[bias.0].value.len(), c, "bias length mismatch");
        let mut v = self.nodes[a.0].value.clone();
        let b = &self.nodes[bias.0].value;
        let len = v.len();
        {
            let flat = v.as_slice_mut().expect("layout");
            let bs = b.as_slice().expect("layout");
            for i in 0..len {
                flat[i] += bs[i % c];
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(v, rg, Op::AddChannelBias(a.0, bias.0))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Var {
        let v = kernels::conv2d(
            &self.nodes[input.0].value.view().into_dimensionality().expect("NHWC input"),
            &self.nodes[kernel.0].value.view().into_dimensionality().expect("4-d kernel"),
            stride,
            pad,
            self.parallel,
        );
        let rg = self.rg(input) || self.rg(kernel);
        self.push(
            v.into_dyn(),
            rg,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                stride,
                pad,
            },
        )
    }

    pub fn temporal_conv(&mut self, input: Var, kernel: Var) -> Var {
        let v = kernels::temporal_conv(
            &self.nodes[input.0].value.view().into_dimensionality().expect("NHWC input"),
            &self.nodes[kernel.0].value.view().into_dimensionality().expect("3-d kernel"),
            self.parallel,
        );
        let rg = self.rg(input) || self.rg(kernel);
        self.push(
            v.into_dyn(),
            rg,
            Op::TemporalConv {
                input: input.0,
                kernel: kernel.0,
            },
        )
    }

    pub fn upsample2x(&mut self, input: Var) -> Var {
        let v = kernels::upsample2x(
            &self.nodes[input.0].value.view().into_dimensionality().expect("NHWC input"),
            self.parallel,
        );
        let rg = self.rg(input);
        self.push(v.into_dyn(), rg, Op::Upsample2x(input.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(v, rg, Op::LeakyRelu(a.0, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(v, rg, Op::Sigmoid(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(v, rg, Op::Clamp(a.0, lo, hi))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.ln());
        let rg = self.rg(a);
        self.push(v, rg, Op::Ln(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let sum = self.nodes[a.0].value.iter().fold(T::zero(), |acc, &x| acc + x);
        let v = ArrayD::from_elem(IxDyn(&[]), sum / T::from_usize(n).expect("count"));
        let rg = self.rg(a);
        self.push(v, rg, Op::MeanAll(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let sum = self.nodes[a.0].value.iter().fold(T::zero(), |acc, &x| acc + x);
        let v = ArrayD::from_elem(IxDyn(&[]), sum);
        let rg = self.rg(a);
        self.push(v, rg, Op::SumAll(a.0))
    }

    /// Mean over the leading (N, h, w) axes of an (N, h, w, d) map → (d,).
    pub fn mean_positions(&mut self, a: Var) -> Var {
        let val = &self.nodes[a.0].value;
        let d = *val.shape().last().expect("shape");
        let rows = val.len() / d;
        let flat = val.to_shape((rows, d)).expect("reshape");
        let mut out = ndarray::Array1::<T>::zeros(d);
        for row in flat.rows() {
            out += &row;
        }
        let scale = T::one() / T::from_usize(rows).expect("count");
        out.mapv_inplace(|x| x * scale);
        let rg = self.rg(a);
        self.push(out.into_dyn(), rg, Op::MeanPositions(a.0))
    }

    /// Mean over the trailing (h, w, c) axes of an (N, h, w, c) stack -> (N,).
    pub fn mean_per_frame(&mut self, a: Var) -> Var {
        let val = &self.nodes[a.0].value;
        let n = val.shape()[0];
        let per = val.len() / n;
        let flat = val.as_slice().expect("layout");
        let scale = T::one() / T::from_usize(per).expect("count");
        let mut out = ndarray::Array1::<T>::zeros(n);
        for fi in 0..n {
            let mut acc = T::zero();
            for v in &flat[fi * per..(fi + 1) * per] {
                acc += *v;
            }
            out[fi] = acc * scale;
        }
        let rg = self.rg(a);
        self.push(out.into_dyn(), rg, Op::MeanPerFrame(a.0))
    }

    /// Add row n of the positional table to every (h, w) site of frame n.
    pub fn add_temporal_pos(&mut self, input: Var, table: Var) -> Var {
        let val = &self.nodes[input.0].value;
        let tab = &self.nodes[table.0].value;
        let (n, d) = (val.shape()[0], *val.shape().last().expect("shape"));
        assert!(
            n <= tab.shape()[0],
            "temporal index {} beyond positional table {}",
            n,
            tab.shape()[0]
        );
        assert_eq!(d, tab.shape()[1], "positional dim mismatch");
        let mut v = val.clone();
        let sites = val.len() / (n * d);
        {
            let flat = v.as_slice_mut().expect("layout");
            let t = tab.as_slice().expect("layout");
            for fi in 0..n {
                for s in 0..sites {
                    let base = (fi * sites + s) * d;
                    for k in 0..d {
                        flat[base + k] += t[fi * d + k];
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(table);
        self.push(
            v,
            rg,
            Op::AddTemporalPos {
                input: input.0,
                table: table.0,
            },
        )
    }

    /// Node whose forward value is supplied externally and whose backward
    /// passes the incoming gradient to `input` unchanged.
    pub fn straight_through(&mut self, input: Var, value: ArrayD<T>) -> Var {
        assert_eq!(value.shape(), self.nodes[input.0].value.shape());
        let rg = self.rg(input);
        self.push(value, rg, Op::StraightThrough(input.0))
    }

    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        self.push(v, false, Op::Detach)
    }

    /// (N, H, W, C) → (H, W, C) for one frame.
    pub fn slice_frame(&mut self, input: Var, frame: usize) -> Var {
        let v = self.nodes[input.0]
            .value
            .index_axis(Axis(0), frame)
            .to_owned();
        let rg = self.rg(input);
        self.push(
            v,
            rg,
            Op::SliceFrame {
                input: input.0,
                frame,
            },
        )
    }

    /// (N, H, W, C) → (N, ph, pw, C) spatial tile across all frames.
    pub fn slice_patch_tube(&mut self, input: Var, y0: usize, x0: usize, ph: usize, pw: usize) -> Var {
        let v = self.nodes[input.0]
            .value
            .slice(ndarray::s![.., y0..y0 + ph, x0..x0 + pw, ..])
            .to_owned();
        let rg = self.rg(input);
        self.push(
            v.into_dyn(),
            rg,
            Op::SlicePatchTube {
                input: input.0,
                y0,
                x0,
                ph,
                pw,
            },
        )
    }

    /// Scalar node with precomputed parent gradients (used where the forward
    /// path runs outside the tape, e.g. the transport matching).
    pub fn custom_scalar(&mut self, value: T, parents: Vec<Var>, grads: Vec<ArrayD<T>>) -> Var {
        assert_eq!(parents.len(), grads.len());
        let rg = parents.iter().any(|&p| self.rg(p));
        let parents = parents.into_iter().map(|p| p.0).collect();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            rg,
            Op::CustomScalar { parents, grads },
        )
    }

    // ---- backward ------------------------------------------------------

    fn accum(&mut self, id: usize, contribution: ArrayViewD<T>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match self.nodes[id].grad.as_mut() {
            Some(g) => *g += &contribution,
            None => self.nodes[id].grad = Some(contribution.to_owned()),
        }
    }

    fn accum_owned(&mut self, id: usize, contribution: ArrayD<T>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match self.nodes[id].grad.as_mut() {
            Some(g) => *g += &contribution,
            None => self.nodes[id].grad = Some(contribution),
        }
    }

    /// Reverse pass from a scalar root. Gradients accumulate on every node
    /// with `requires_grad`; query them with [`Tape::grad`].
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let shape = self.nodes[root.0].value.raw_dim();
        self.nodes[root.0].grad = Some(ArrayD::from_elem(shape, T::one()));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            self.dispatch(id, &g);
            self.nodes[id].grad = Some(g);
        }
    }

    fn dispatch(&mut self, id: usize, g: &ArrayD<T>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.view());
                self.accum(b, g.view());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.view());
                let neg = g.mapv(|x| -x);
                self.accum_owned(b, neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let ga = g * &self.nodes[b].value;
                    self.accum_owned(a, ga);
                }
                if self.nodes[b].requires_grad {
                    let gb = g * &self.nodes[a].value;
                    self.accum_owned(b, gb);
                }
            }
            Op::Neg(a) => {
                let a = *a;
                let ga = g.mapv(|x| -x);
                self.accum_owned(a, ga);
            }
            Op::Abs(a) => {
                let a = *a;
                let mut ga = g.clone();
                ndarray::Zip::from(&mut ga)
                    .and(&self.nodes[a].value)
                    .for_each(|gv, &x| {
                        *gv = if x > T::zero() {
                            *gv
                        } else if x < T::zero() {
                            -*gv
                        } else {
                            T::zero()
                        }
                    });
                self.accum_owned(a, ga);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let ga = g.mapv(|x| x * c);
                self.accum_owned(a, ga);
            }
            Op::AddScalar(a, _) => {
                let a = *a;
                self.accum(a, g.view());
            }
            Op::AddChannelBias(a, bias) => {
                let (a, bias) = (*a, *bias);
                self.accum(a, g.view());
                if self.nodes[bias].requires_grad {
                    let gb = kernels::bias_grad(&g.view());
                    self.accum_owned(bias, gb.into_dyn());
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (input, kernel, stride, pad) = (*input, *kernel, *stride, *pad);
                let g4 = g.view().into_dimensionality().expect("conv grad");
                if self.nodes[input].requires_grad {
                    let k4 = self.nodes[kernel]
                        .value
                        .view()
                        .into_dimensionality()
                        .expect("kernel");
                    let dim = {
                        let s = self.nodes[input].value.shape();
                        (s[0], s[1], s[2], s[3])
                    };
                    let gi =
                        kernels::conv2d_grad_input(&g4, &k4, dim, stride, pad, self.parallel);
                    self.accum_owned(input, gi.into_dyn());
                }
                if self.nodes[kernel].requires_grad {
                    let i4 = self.nodes[input]
                        .value
                        .view()
                        .into_dimensionality()
                        .expect("input");
                    let ks = self.nodes[kernel].value.shape();
                    let gk = kernels::conv2d_grad_kernel(
                        &i4,
                        &g4,
                        ks[0],
                        ks[1],
                        stride,
                        pad,
                        self.parallel,
                    );
                    self.accum_owned(kernel, gk.into_dyn());
                }
            }
            Op::TemporalConv { input, kernel } => {
                let (input, kernel) = (*input, *kernel);
                let g4 = g.view().into_dimensionality().expect("temporal grad");
                let i4 = self.nodes[input]
                    .value
                    .view()
                    .into_dimensionality()
                    .expect("input");
                let k3 = self.nodes[kernel]
                    .value
                    .view()
                    .into_dimensionality()
                    .expect("kernel");
                let (gi, gk) = kernels::temporal_conv_grad(
                    &i4,
                    &k3,
                    &g4,
                    self.nodes[input].requires_grad,
                    self.nodes[kernel].requires_grad,
                    self.parallel,
                );
                if let Some(gi) = gi {
                    self.accum_owned(input, gi.into_dyn());
                }
                if let Some(gk) = gk {
                    self.accum_owned(kernel, gk.into_dyn());
                }
            }
            Op::Upsample2x(a) => {
                let a = *a;
                let g4 = g.view().into_dimensionality().expect("upsample grad");
                let gi = kernels::upsample2x_grad(&g4, self.parallel);
                self.accum_owned(a, gi.into_dyn());
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                let mut ga = g.clone();
                ndarray::Zip::from(&mut ga)
                    .and(&self.nodes[a].value)
                    .for_each(|gv, &x| {
                        if x <= T::zero() {
                            *gv *= slope;
                        }
                    });
                self.accum_owned(a, ga);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let mut ga = g.clone();
                ndarray::Zip::from(&mut ga)
                    .and(&self.nodes[id].value)
                    .for_each(|gv, &y| *gv *= y * (T::one() - y));
                self.accum_owned(a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let mut ga = g.clone();
                ndarray::Zip::from(&mut ga)
                    .and(&self.nodes[a].value)
                    .for_each(|gv, &x| {
                        if !(x > lo && x < hi) {
                            *gv = T::zero();
                        }
                    });
                self.accum_owned(a, ga);
            }
            Op::Ln(a) => {
                let a = *a;
                let mut ga = g.clone();
                ndarray::Zip::from(&mut ga)
                    .and(&self.nodes[a].value)
                    .for_each(|gv, &x| *gv = *gv / x);
                self.accum_owned(a, ga);
            }
            Op::MeanAll(a) => {
                let a = *a;
                let n = self.nodes[a].value.len();
                let gv = *g.iter().next().expect("scalar") / T::from_usize(n).expect("count");
                let ga = ArrayD::from_elem(self.nodes[a].value.raw_dim(), gv);
                self.accum_owned(a, ga);
            }
            Op::SumAll(a) => {
                let a = *a;
                let gv = *g.iter().next().expect("scalar");
                let ga = ArrayD::from_elem(self.nodes[a].value.raw_dim(), gv);
                self.accum_owned(a, ga);
            }
            Op::MeanPerFrame(a) => {
                let a = *a;
                let shape = self.nodes[a].value.raw_dim();
                let n = self.nodes[a].value.shape()[0];
                let per = self.nodes[a].value.len() / n;
                let scale = T::one() / T::from_usize(per).expect("count");
                let gs = g.as_slice().expect("layout");
                let mut ga = ArrayD::<T>::zeros(shape);
                {
                    let flat = ga.as_slice_mut().expect("layout");
                    for fi in 0..n {
                        let gv = gs[fi] * scale;
                        for v in &mut flat[fi * per..(fi + 1) * per] {
                            *v = gv;
                        }
                    }
                }
                self.accum_owned(a, ga);
            }
            Op::MeanPositions(a) => {
                let a = *a;
                let shape = self.nodes[a].value.raw_dim();
                let d = *self.nodes[a].value.shape().last().expect("shape");
                let rows = self.nodes[a].value.len() / d;
                let scale = T::one() / T::from_usize(rows).expect("count");
                let gs = g.as_slice().expect("layout");
                let mut ga = ArrayD::<T>::zeros(shape);
                {
                    let flat = ga.as_slice_mut().expect("layout");
                    for r in 0..rows {
                        for k in 0..d {
                            flat[r * d + k] = gs[k] * scale;
                        }
                    }
                }
                self.accum_owned(a, ga);
            }
            Op::AddTemporalPos { input, table } => {
                let (input, table) = (*input, *table);
                self.accum(input, g.view());
                if self.nodes[table].requires_grad {
                    let shape = self.nodes[input].value.shape().to_vec();
                    let (n, d) = (shape[0], *shape.last().expect("shape"));
                    let sites = g.len() / (n * d);
                    let tshape = self.nodes[table].value.raw_dim();
                    let mut gt = ArrayD::<T>::zeros(tshape);
                    {
                        let flat = gt.as_slice_mut().expect("layout");
                        let gs = g.as_slice().expect("layout");
                        for fi in 0..n {
                            for s in 0..sites {
                                let base = (fi * sites + s) * d;
                                for k in 0..d {
                                    flat[fi * d + k] += gs[base + k];
                                }
                            }
                        }
                    }
                    self.accum_owned(table, gt);
                }
            }
            Op::StraightThrough(a) => {
                let a = *a;
                self.accum(a, g.view());
            }
            Op::Detach => {}
            Op::SliceFrame { input, frame } => {
                let (input, frame) = (*input, *frame);
                if self.nodes[input].requires_grad {
                    if self.nodes[input].grad.is_none() {
                        let shape = self.nodes[input].value.raw_dim();
                        self.nodes[input].grad = Some(ArrayD::zeros(shape));
                    }
                    let mut gi = self.nodes[input].grad.take().expect("grad");
                    {
                        let mut region = gi.index_axis_mut(Axis(0), frame);
                        region += g;
                    }
                    self.nodes[input].grad = Some(gi);
                }
            }
            Op::SlicePatchTube { input, y0, x0, ph, pw } => {
                let (input, y0, x0, ph, pw) = (*input, *y0, *x0, *ph, *pw);
                if self.nodes[input].requires_grad {
                    if self.nodes[input].grad.is_none() {
                        let shape = self.nodes[input].value.raw_dim();
                        self.nodes[input].grad = Some(ArrayD::zeros(shape));
                    }
                    let mut gi = self.nodes[input].grad.take().expect("grad");
                    {
                        let mut region =
                            gi.slice_mut(ndarray::s![.., y0..y0 + ph, x0..x0 + pw, ..]);
                        region += &g.view().into_dimensionality::<ndarray::Ix4>().expect("tube");
                    }
                    self.nodes[input].grad = Some(gi);
                }
            }
            Op::CustomScalar { parents, grads } => {
                let gv = *g.iter().next().expect("scalar");
                let pairs: Vec<(usize, ArrayD<T>)> = parents
                    .iter()
                    .zip(grads.iter())
                    .map(|(&p, gr)| (p, gr.mapv(|x| x * gv)))
                    .collect();
                for (p, contrib) in pairs {
                    self.accum_owned(p, contrib);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD, IxDyn};

    fn scalar_of(t: &Tape<f64>, v: Var) -> f64 {
        t.scalar_value(v)
    }

    #[test]
    fn chain_of_elementwise_ops_backprops() {
        let mut t = Tape::<f64>::new(false);
        let x = t.leaf(arr1(&[1.0, -2.0, 3.0]).into_dyn(), true);
        let y = t.scale(x, 2.0);
        let z = t.abs(y);
        let l = t.sum_all(z);
        t.backward(l);
        assert_eq!(scalar_of(&t, l), 12.0);
        let g = t.grad(x).unwrap();
        assert_eq!(g.as_slice().unwrap(), &[2.0, -2.0, 2.0]);
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut t = Tape::<f64>::new(false);
        let x = t.leaf(arr1(&[0.3, 0.7]).into_dyn(), true);
        let q = t.straight_through(x, arr1(&[1.0, 0.0]).into_dyn());
        let w = t.constant(arr1(&[2.0, 5.0]).into_dyn());
        let p = t.mul(q, w);
        let l = t.sum_all(p);
        t.backward(l);
        // value uses the quantized payload, gradient flows as if q == x
        assert_eq!(scalar_of(&t, l), 2.0);
        assert_eq!(t.grad(x).unwrap().as_slice().unwrap(), &[2.0, 5.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::<f64>::new(false);
        let x = t.leaf(arr1(&[2.0]).into_dyn(), true);
        let d = t.detach(x);
        let p = t.mul(x, d);
        let l = t.sum_all(p);
        t.backward(l);
        // d(x * const)/dx = const = 2
        assert_eq!(t.grad(x).unwrap().as_slice().unwrap(), &[2.0]);
    }

    #[test]
    fn mean_positions_and_temporal_pos() {
        let mut t = Tape::<f64>::new(false);
        let f = t.leaf(ArrayD::from_elem(IxDyn(&[2, 1, 2, 3]), 1.0), true);
        let table = t.leaf(ArrayD::zeros(IxDyn(&[4, 3])), true);
        let g = t.add_temporal_pos(f, table);
        let pooled = t.mean_positions(g);
        assert_eq!(t.value(pooled).shape(), &[3]);
        let l = t.sum_all(pooled);
        t.backward(l);
        let gt = t.grad(table).unwrap();
        // frames 0 and 1 each get 2 sites * (1/4 weight); rows 2,3 untouched
        assert!((gt[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((gt[[2, 0]]).abs() < 1e-12);
    }

    #[test]
    fn clamp_gates_gradient_at_boundaries() {
        let mut t = Tape::<f64>::new(false);
        let x = t.leaf(arr1(&[0.5, 2.0, -1.0]).into_dyn(), true);
        let c = t.clamp(x, 0.0, 1.0);
        let l = t.sum_all(c);
        t.backward(l);
        assert_eq!(t.grad(x).unwrap().as_slice().unwrap(), &[1.0, 0.0, 0.0]);
    }
}
