use super::gemm::{gemm, MatRef};
use crate::error::{CatrError, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a user-supplied op:
/// `(grad_out, inputs, output) -> one gradient per input`.
pub type CustomVjp = Box<dyn Fn(&[f64], &[&[f64]], &[f64]) -> Vec<Vec<f64>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Sigmoid,
    Relu,
    Ln,
    LogSigmoid,
    Exp,
    Square,
}

/// Outer/axis/inner split of a shape around one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisSplit {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisSplit {
    pub fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: numel(&shape[..axis]),
            len: shape[axis],
            inner: numel(&shape[axis + 1..]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
    fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }
}

pub(crate) enum Op {
    Leaf,
    Binary { a: Var, b: Var, kind: BinKind },
    Scale { x: Var, s: f64 },
    Shift { x: Var },
    Unary { x: Var, kind: UnaryKind },
    MatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Softmax { x: Var, split: AxisSplit },
    LogSoftmax { x: Var, split: AxisSplit },
    LayerNorm { x: Var, split: AxisSplit, rstd: Vec<f64> },
    Reduce { x: Var, split: AxisSplit, mean: bool },
    Concat { xs: Vec<Var>, outer: usize, lens: Vec<usize>, inner: usize },
    Slice { x: Var, split: AxisSplit, start: usize, len: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Expand { x: Var, outer: usize, n: usize, inner: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    Upsample2x { x: Var, dims: [usize; 4] },
    AvgPool { x: Var, k: usize, dims: [usize; 4] },
    Custom { inputs: Vec<Var>, vjp: CustomVjp },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind: BinKind::Add, .. } => "add",
            Op::Binary { kind: BinKind::Sub, .. } => "sub",
            Op::Binary { kind: BinKind::Mul, .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Shift { .. } => "shift",
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Relu => "relu",
                UnaryKind::Ln => "ln",
                UnaryKind::LogSigmoid => "log_sigmoid",
                UnaryKind::Exp => "exp",
                UnaryKind::Square => "square",
            },
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reduce { mean: false, .. } => "sum",
            Op::Reduce { mean: true, .. } => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Expand { .. } => "expand",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x { .. } => "upsample2x",
            Op::AvgPool { .. } => "avg_pool",
            Op::Custom { .. } => "custom",
        }
    }
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Record of executed differentiable operations, in execution order.
///
/// Every op appends exactly one node whose inputs are already on the tape,
/// so the node order is a topological order and the backward pass is a
/// single reverse sweep.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// A view of one recorded softmax output.
pub struct SoftmaxRecord<'a> {
    pub shape: &'a [usize],
    pub axis_len: usize,
    pub inner: usize,
    pub data: &'a [f64],
}

impl SoftmaxRecord<'_> {
    /// Largest deviation of any softmax slice sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let outer = self.data.len() / (self.axis_len * self.inner);
        let mut worst = 0.0f64;
        for o in 0..outer {
            for i in 0..self.inner {
                let s: f64 = (0..self.axis_len)
                    .map(|l| self.data[(o * self.axis_len + l) * self.inner + i])
                    .sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Every softmax output recorded so far (attention probabilities included).
    pub fn softmax_records(&self) -> impl Iterator<Item = SoftmaxRecord<'_>> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Softmax { split, .. } => Some(SoftmaxRecord {
                shape: &n.shape,
                axis_len: split.len,
                inner: split.inner,
                data: &n.data,
            }),
            _ => None,
        })
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, data, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Places a tensor on the tape; its `requires_grad` flag is honored.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records an op with a caller-provided vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[Var], shape: &[usize], data: Vec<f64>, vjp: CustomVjp) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(CatrError::Dimension(format!(
                "custom op output shape {shape:?} vs {} values",
                data.len()
            )));
        }
        let rg = self.rg(inputs);
        Ok(self.push(shape.to_vec(), data, Op::Custom { inputs: inputs.to_vec(), vjp }, rg))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let n = self.nodes[root.0].data.len();
        if n != 1 {
            return Err(CatrError::Dimension(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        self.backward_seeded(root, vec![1.0])
    }

    /// Reverse sweep from `root` with an explicit output cotangent.
    pub fn backward_seeded(&self, root: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.nodes[root.0].data.len() {
            return Err(CatrError::shapes("backward seed", &[seed.len()], &self.nodes[root.0].shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = &node.data;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { a, b, kind } => {
                let (an, bn) = (self.nodes[a.0].data.len(), self.nodes[b.0].data.len());
                let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                match kind {
                    BinKind::Add | BinKind::Sub => {
                        let sign = if *kind == BinKind::Sub { -1.0 } else { 1.0 };
                        self.acc(grads, *a, |ga| fold_into(ga, g, an, 1.0));
                        self.acc(grads, *b, |gb| fold_into(gb, g, bn, sign));
                    }
                    BinKind::Mul => {
                        self.acc(grads, *a, |ga| {
                            for (i, gi) in g.iter().enumerate() {
                                ga[i % an] += gi * bv[i % bn];
                            }
                        });
                        self.acc(grads, *b, |gb| {
                            for (i, gi) in g.iter().enumerate() {
                                gb[i % bn] += gi * av[i % an];
                            }
                        });
                    }
                }
            }
            Op::Scale { x, s } => self.acc(grads, *x, |gx| add_scaled(gx, g, *s)),
            Op::Shift { x } => self.acc(grads, *x, |gx| add_scaled(gx, g, 1.0)),
            Op::Unary { x, kind } => {
                let xv = &self.nodes[x.0].data;
                self.acc(grads, *x, |gx| {
                    for i in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryKind::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Ln => 1.0 / xv[i],
                            UnaryKind::LogSigmoid => sigmoid(-xv[i]),
                            UnaryKind::Exp => y[i],
                            UnaryKind::Square => 2.0 * xv[i],
                        };
                        gx[i] += g[i] * d;
                    }
                });
            }
            Op::MatMul { a, b, ta, tb, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &self.nodes[a.0].data;
                let bv = &self.nodes[b.0].data;
                let mat_a = |s: usize| {
                    let d = &av[s * m * k..(s + 1) * m * k];
                    if *ta { MatRef::stored_transposed(d, m, k) } else { MatRef::new(d, m, k) }
                };
                let b_off = |s: usize| s * k * n;
                let mat_b = |s: usize| {
                    let d = &bv[b_off(s)..b_off(s) + k * n];
                    if *tb { MatRef::stored_transposed(d, k, n) } else { MatRef::new(d, k, n) }
                };
                if self.nodes[a.0].requires_grad {
                    self.acc(grads, *a, |ga| {
                        for s in 0..*batch {
                            let gc = MatRef::new(&g[s * m * n..(s + 1) * m * n], m, n);
                            let out = &mut ga[s * m * k..(s + 1) * m * k];
                            if *ta {
                                // stored k×m: op(B) · dCᵀ
                                gemm(mat_b(s), gc.t(), out, 1.0);
                            } else {
                                gemm(gc, mat_b(s).t(), out, 1.0);
                            }
                        }
                    });
                }
                if self.nodes[b.0].requires_grad {
                    self.acc(grads, *b, |gb| {
                        for s in 0..*batch {
                            let gc = MatRef::new(&g[s * m * n..(s + 1) * m * n], m, n);
                            let off = b_off(s);
                            let out = &mut gb[off..off + k * n];
                            if *tb {
                                // stored n×k: dCᵀ · op(A)
                                gemm(gc.t(), mat_a(s), out, 1.0);
                            } else {
                                gemm(mat_a(s).t(), gc, out, 1.0);
                            }
                        }
                    });
                }
            }
            Op::Softmax { x, split } => {
                let AxisSplit { outer, len, inner } = *split;
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, split } => {
                let AxisSplit { outer, len, inner } = *split;
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let total: f64 = (0..len).map(|l| g[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += g[at(l)] - y[at(l)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, split, rstd } => {
                let AxisSplit { outer, len, inner } = *split;
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let r = rstd[o * inner + i];
                            let mut mg = 0.0;
                            let mut mgy = 0.0;
                            for l in 0..len {
                                mg += g[at(l)];
                                mgy += g[at(l)] * y[at(l)];
                            }
                            mg /= len as f64;
                            mgy /= len as f64;
                            for l in 0..len {
                                gx[at(l)] += r * (g[at(l)] - mg - y[at(l)] * mgy);
                            }
                        }
                    }
                });
            }
            Op::Reduce { x, split, mean } => {
                let AxisSplit { outer, len, inner } = *split;
                let s = if *mean { 1.0 / len as f64 } else { 1.0 };
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] += s * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Concat { xs, outer, lens, inner } => {
                let total: usize = lens.iter().sum();
                let mut start = 0;
                for (x, &len) in xs.iter().zip(lens) {
                    self.acc(grads, *x, |gx| {
                        for o in 0..*outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                            add_scaled(&mut gx[o * len * inner..(o + 1) * len * inner], src, 1.0);
                        }
                    });
                    start += len;
                }
            }
            Op::Slice { x, split, start, len } => {
                let AxisSplit { outer, len: full, inner } = *split;
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                        add_scaled(dst, &g[o * len * inner..(o + 1) * len * inner], 1.0);
                    }
                });
            }
            Op::Reshape { x } => self.acc(grads, *x, |gx| add_scaled(gx, g, 1.0)),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_copy(g, &node.shape, &inv);
                self.acc(grads, *x, |gx| add_scaled(gx, &back, 1.0));
            }
            Op::Expand { x, outer, n, inner } => {
                self.acc(grads, *x, |gx| {
                    for o in 0..*outer {
                        for r in 0..*n {
                            let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                            add_scaled(&mut gx[o * inner..(o + 1) * inner], src, 1.0);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, geom, cols } => {
                let gy = MatRef::new(g, geom.rows(), geom.cout);
                if self.nodes[w.0].requires_grad {
                    self.acc(grads, *w, |gw| {
                        gemm(MatRef::new(cols, geom.rows(), geom.patch()).t(), gy, gw, 1.0);
                    });
                }
                if self.nodes[x.0].requires_grad {
                    let wv = &self.nodes[w.0].data;
                    let mut gcols = vec![0.0; geom.rows() * geom.patch()];
                    gemm(gy, MatRef::new(wv, geom.patch(), geom.cout).t(), &mut gcols, 0.0);
                    self.acc(grads, *x, |gx| col2im(&gcols, geom, gx));
                }
            }
            Op::Upsample2x { x, dims } => {
                let [b, h, w, c] = *dims;
                self.acc(grads, *x, |gx| {
                    for bi in 0..b {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                let src = ((bi * 2 * h + yy) * 2 * w + xx) * c;
                                let dst = ((bi * h + yy / 2) * w + xx / 2) * c;
                                add_scaled(&mut gx[dst..dst + c], &g[src..src + c], 1.0);
                            }
                        }
                    }
                });
            }
            Op::AvgPool { x, k, dims } => {
                let [b, h, w, c] = *dims;
                let (ho, wo) = (h / k, w / k);
                let s = 1.0 / (k * k) as f64;
                self.acc(grads, *x, |gx| {
                    for bi in 0..b {
                        for yy in 0..h {
                            for xx in 0..w {
                                let src = ((bi * ho + yy / k) * wo + xx / k) * c;
                                let dst = ((bi * h + yy) * w + xx) * c;
                                add_scaled(&mut gx[dst..dst + c], &g[src..src + c], s);
                            }
                        }
                    }
                });
            }
            Op::Custom { inputs, vjp } => {
                let vals: Vec<&[f64]> = inputs.iter().map(|v| self.nodes[v.0].data.as_slice()).collect();
                let parts = vjp(g, &vals, y);
                for (v, part) in inputs.iter().zip(parts) {
                    self.acc(grads, *v, |gv| add_scaled(gv, &part, 1.0));
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.data.len()]);
        f(buf);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(sigmoid(x))`.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

/// Sums `g` into a buffer of length `n` by wrapping indices (`i % n`).
fn fold_into(dst: &mut [f64], g: &[f64], n: usize, s: f64) {
    if n == g.len() {
        add_scaled(dst, g, s);
    } else {
        for chunk in g.chunks_exact(n) {
            add_scaled(dst, chunk, s);
        }
    }
}

/// Copies `src` (shape `shape`) into the layout of `shape` permuted by `perm`
/// (`out.shape[i] = shape[perm[i]]`).
pub(crate) fn permute_copy(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    if rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    // Innermost output axis copied in a tight loop.
    let last = rank - 1;
    let (n_last, s_last) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..n_last {
            out.push(src[base + j * s_last]);
        }
        // advance the multi-index over all but the last axis
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom { batch, h, w, cin, kh, kw, stride, pad, ho, wo, .. } = *geom;
    let patch = geom.patch();
    let mut cols = vec![0.0; geom.rows() * patch];
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((b * h + iy as usize) * w + ix as usize) * cin;
                        let dst = row + (ky * kw + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(gcols: &[f64], geom: &ConvGeom, gx: &mut [f64]) {
    let ConvGeom { batch, h, w, cin, kh, kw, stride, pad, ho, wo, .. } = *geom;
    let patch = geom.patch();
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + iy as usize) * w + ix as usize) * cin;
                        let src = row + (ky * kw + kx) * cin;
                        add_scaled(&mut gx[dst..dst + cin], &gcols[src..src + cin], 1.0);
                    }
                }
            }
        }
    }
}
