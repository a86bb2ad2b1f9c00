//! Forward definitions of the differentiable op set.
//!
//! Broadcasting is limited to two cases: one operand is a scalar, or one
//! operand's shape is a trailing suffix of the other's. Anything else is a
//! dimension error; use [`Tape::expand`] to broadcast along other axes.

use super::gemm::{gemm, MatRef};
use super::tape::{
    im2col, log_sigmoid, permute_copy, sigmoid, AxisSplit, BinKind, ConvGeom, Op, Tape, UnaryKind, Var,
};
use crate::error::{CatrError, Result};
use crate::tensor::numel;

const LN_EPS: f64 = 1e-5;

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Tape {
    fn check_axis(&self, op: &str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(CatrError::Dimension(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (numel(&sa), numel(&sb));
        let out_shape = if sa == sb || nb == 1 || is_suffix(&sb, &sa) {
            sa.clone()
        } else if na == 1 || is_suffix(&sa, &sb) {
            sb.clone()
        } else {
            let name = match kind {
                BinKind::Add => "add",
                BinKind::Sub => "sub",
                BinKind::Mul => "mul",
            };
            return Err(CatrError::shapes(name, &sa, &sb));
        };
        let n = numel(&out_shape);
        let (av, bv) = (self.value(a), self.value(b));
        let f = match kind {
            BinKind::Add => |x: f64, y: f64| x + y,
            BinKind::Sub => |x: f64, y: f64| x - y,
            BinKind::Mul => |x: f64, y: f64| x * y,
        };
        let data: Vec<f64> = if na == n && nb == n {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(av[i % na], bv[i % nb])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out_shape, data, Op::Binary { a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), data, Op::Scale { x, s }, rg)
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).iter().map(|v| v + c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), data, Op::Shift { x }, rg)
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Relu => |v| v.max(0.0),
            UnaryKind::Ln => f64::ln,
            UnaryKind::LogSigmoid => log_sigmoid,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Square => |v| v * v,
        };
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), data, Op::Unary { x, kind }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Ln)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::LogSigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Square)
    }

    /// Matrix product over the last two axes.
    ///
    /// With a rank-2 `b` (and no transpose on `a`) the leading axes of `a`
    /// are flattened into rows, which is how every linear layer runs.
    /// Otherwise both operands must have identical leading (batch) axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// [`Tape::matmul`] with optional transposes of either operand's last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || CatrError::shapes("matmul", &sa, &sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (b_rows, b_cols) = (sb[rb - 2], sb[rb - 1]);
        let (k_b, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
        let (batch, m, k, out_shape) = if rb == 2 && ra > 2 && !ta {
            let k = sa[ra - 1];
            let mut out = sa[..ra - 1].to_vec();
            out.push(n);
            (1, numel(&sa) / k, k, out)
        } else {
            if ra != rb || sa[..ra - 2] != sb[..rb - 2] {
                return Err(err());
            }
            let (m, k) = if ta { (sa[ra - 1], sa[ra - 2]) } else { (sa[ra - 2], sa[ra - 1]) };
            let mut out = sa[..ra - 2].to_vec();
            out.extend([m, n]);
            (numel(&sa[..ra - 2]), m, k, out)
        };
        if k != k_b {
            return Err(err());
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = vec![0.0; batch * m * n];
        for s in 0..batch {
            let ad = &av[s * m * k..(s + 1) * m * k];
            let bd = &bv[s * k * n..(s + 1) * k * n];
            let am = if ta { MatRef::stored_transposed(ad, m, k) } else { MatRef::new(ad, m, k) };
            let bm = if tb { MatRef::stored_transposed(bd, k, n) } else { MatRef::new(bd, k, n) };
            gemm(am, bm, &mut data[s * m * n..(s + 1) * m * n], 0.0);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out_shape, data, Op::MatMul { a, b, ta, tb, batch, m, k, n }, rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let split = AxisSplit::new(self.shape(x), axis);
        let data = normalize_exp(self.value(x), split, false)?;
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), data, Op::Softmax { x, split }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let split = AxisSplit::new(self.shape(x), axis);
        let data = normalize_exp(self.value(x), split, true)?;
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), data, Op::LogSoftmax { x, split }, rg))
    }

    /// Zero-mean, unit-variance normalization along `axis` (no affine part).
    pub fn layer_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("layer_norm", x, axis)?;
        let split = AxisSplit::new(self.shape(x), axis);
        let AxisSplit { outer, len, inner } = split;
        let xv = self.value(x);
        let mut data = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| xv[at(l)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|l| (xv[at(l)] - mean).powi(2)).sum::<f64>() / len as f64;
                let r = 1.0 / (var + LN_EPS).sqrt();
                rstd[o * inner + i] = r;
                for l in 0..len {
                    data[at(l)] = (xv[at(l)] - mean) * r;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), data, Op::LayerNorm { x, split, rstd }, rg))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(if mean { "mean" } else { "sum" }, x, axis)?;
        let shape = self.shape(x).to_vec();
        let split = AxisSplit::new(&shape, axis);
        let AxisSplit { outer, len, inner } = split;
        let xv = self.value(x);
        let s = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        data.iter_mut().for_each(|d| *d *= s);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, data, Op::Reduce { x, split, mean }, rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n]).expect("same element count");
        self.reduce(flat, 0, false).expect("axis 0 exists")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n]).expect("same element count");
        self.reduce(flat, 0, true).expect("axis 0 exists")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| CatrError::Dimension("concat of nothing".into()))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let same_rank = s.len() == base.len();
            if !same_rank || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(CatrError::shapes("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &len) in xs.iter().zip(&lens) {
                data.extend_from_slice(&self.value(x)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(shape, data, Op::Concat { xs: xs.to_vec(), outer, lens, inner }, rg))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(CatrError::Dimension(format!(
                "slice {start}..{} out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let split = AxisSplit::new(&shape, axis);
        let xv = self.value(x);
        let mut data = Vec::with_capacity(split.outer * len * split.inner);
        for o in 0..split.outer {
            let from = (o * split.len + start) * split.inner;
            data.extend_from_slice(&xv[from..from + len * split.inner]);
        }
        let mut out = shape;
        out[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(out, data, Op::Slice { x, split, start, len }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(CatrError::shapes("reshape", self.shape(x), shape));
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }, rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(CatrError::Dimension(format!("permute: {perm:?} is not a permutation of {shape:?}")));
        }
        let data = permute_copy(self.value(x), &shape, perm);
        let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(out, data, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Inserts a new axis of size `n` at position `axis`, repeating `x` along it.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() || n == 0 {
            return Err(CatrError::Dimension(format!("expand: axis {axis} (n={n}) invalid for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis..]);
        let xv = self.value(x);
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let row = &xv[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(row);
            }
        }
        let mut out = shape;
        out.insert(axis, n);
        let rg = self.rg(&[x]);
        Ok(self.push(out, data, Op::Expand { x, outer, n, inner }, rg))
    }

    /// Cross-correlation over channels-last input `[B, H, W, Cin]` with kernel
    /// `[kh, kw, Cin, Cout]`; zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] || stride == 0 {
            return Err(CatrError::shapes("conv2d", &sx, &sw));
        }
        let (batch, h, wd, cin) = (sx[0], sx[1], sx[2], sx[3]);
        let (kh, kw, cout) = (sw[0], sw[1], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(CatrError::shapes("conv2d", &sx, &sw));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { batch, h, w: wd, cin, cout, kh, kw, stride, pad, ho, wo };
        let cols = im2col(self.value(x), &geom);
        let patch = kh * kw * cin;
        let mut data = vec![0.0; batch * ho * wo * cout];
        gemm(
            MatRef::new(&cols, batch * ho * wo, patch),
            MatRef::new(self.value(w), patch, cout),
            &mut data,
            0.0,
        );
        let rg = self.rg(&[x, w]);
        Ok(self.push(vec![batch, ho, wo, cout], data, Op::Conv2d { x, w, geom, cols }, rg))
    }

    /// Nearest-neighbour ×2 upsampling of `[B, H, W, C]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(CatrError::Dimension(format!("upsample2x expects [B,H,W,C], got {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x);
        let mut data = Vec::with_capacity(4 * xv.len());
        for bi in 0..b {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    let src = ((bi * h + yy / 2) * w + xx / 2) * c;
                    data.extend_from_slice(&xv[src..src + c]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![b, 2 * h, 2 * w, c], data, Op::Upsample2x { x, dims: [b, h, w, c] }, rg))
    }

    /// Non-overlapping `k×k` average pooling of `[B, H, W, C]`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || !s[1].is_multiple_of(k) || !s[2].is_multiple_of(k) {
            return Err(CatrError::Dimension(format!("avg_pool k={k} on {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let xv = self.value(x);
        let mut data = vec![0.0; b * ho * wo * c];
        let scale = 1.0 / (k * k) as f64;
        for bi in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    let src = ((bi * h + yy) * w + xx) * c;
                    let dst = ((bi * ho + yy / k) * wo + xx / k) * c;
                    for ch in 0..c {
                        data[dst + ch] += scale * xv[src + ch];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![b, ho, wo, c], data, Op::AvgPool { x, k, dims: [b, h, w, c] }, rg))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}

fn normalize_exp(xv: &[f64], split: AxisSplit, log: bool) -> Result<Vec<f64>> {
    if xv.iter().any(|v| !v.is_finite()) {
        return Err(CatrError::Numeric("softmax input contains non-finite values".into()));
    }
    let AxisSplit { outer, len, inner } = split;
    let mut out = vec![0.0; xv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| xv[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (xv[at(l)] - max).exp();
                out[at(l)] = e;
                total += e;
            }
            if log {
                let lse = total.ln();
                for l in 0..len {
                    out[at(l)] = xv[at(l)] - max - lse;
                }
            } else {
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
    }
    Ok(out)
}
