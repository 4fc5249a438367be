//! Reverse-mode differentiation over dense tensors.
//!
//! A `Tape` records every operation applied to its tensors (the computation
//! record); `backward` replays it in reverse, accumulating gradients into the
//! leaves registered with `requires_grad`. All kernels are plain loops over
//! row-major buffers; shapes are validated up front and every op checks its
//! output for non-finite values.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Selects which energy index Eq-style lookback places in the numerator.
/// `SlotJ` normalizes each candidate entry by its own energy and conserves
/// the alignment mass exactly; `StopK` is the printed variant that reuses
/// the stop entry's energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LookbackNumerator {
    #[default]
    SlotJ,
    StopK,
}

/// Per-output-cell blend of up to four input positions; built by the
/// geometry module for polar-to-rectilinear resampling.
#[derive(Debug, Clone)]
pub struct BlendTable {
    /// (flat index into the trailing plane, weight). Unused taps carry
    /// weight 0 and index 0.
    pub taps: Vec<[(u32, f64); 4]>,
    /// Trailing-plane element count the flat indices address.
    pub plane: usize,
    /// Output plane shape (rows, cols).
    pub out_shape: (usize, usize),
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Linear { x: TensorId, w: TensorId, b: Option<TensorId> },
    BatMul { a: TensorId, b: TensorId },
    BatMulNt { a: TensorId, b: TensorId },
    Softmax { x: TensorId, axis: usize },
    Sigmoid { x: TensorId },
    Exp { x: TensorId },
    Relu { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Scale { x: TensorId, k: T },
    AddScalar { x: TensorId, k: T },
    Clamp { x: TensorId, lo: T, hi: T },
    Sum { x: TensorId },
    Index0 { x: TensorId, i: usize },
    Reshape { x: TensorId },
    Permute { x: TensorId, perm: Vec<usize> },
    Concat { xs: Vec<TensorId>, axis: usize },
    Repeat0 { x: TensorId, n: usize },
    Flip { x: TensorId, axis: usize },
    Conv2d { x: TensorId, w: TensorId, b: Option<TensorId>, stride: usize, pad: usize },
    Upsample2 { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId },
    MonotonicAlpha { p: TensorId },
    MailBeta { alpha: TensorId, energy: TensorId, variant: LookbackNumerator },
    GatherBlend { x: TensorId, table: Arc<BlendTable> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    /// Accumulated gradient; populated for requires-grad leaves by backward.
    grad_accum: Option<Vec<T>>,
}

/// The computation record: nodes in application order.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Gradient flows to it iff `requires_grad`
    /// is set on the tensor.
    pub fn leaf(&mut self, t: &Tensor<T>) -> TensorId {
        let needs = t.requires_grad;
        self.push_unchecked(t.clone(), Op::Leaf, needs)
    }

    /// Register a constant (never receives gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> TensorId {
        self.push_unchecked(t, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a requires-grad leaf after `backward`.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad_accum.as_deref()
    }

    /// Add the accumulated gradient of `id` into `target.grad`.
    pub fn absorb_grad_into(&self, id: TensorId, target: &mut Tensor<T>) {
        if let Some(g) = self.grad(id) {
            target.accumulate_grad(g);
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, opname: &'static str) -> Result<TensorId> {
        // NaN/Inf anywhere in an output is an operation error; a single
        // summed pass detects both since they propagate through addition.
        let mut acc = T::ZERO;
        for &v in value.data() {
            acc += v;
        }
        if !acc.is_finite() && value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: opname });
        }
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad_accum: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    // ---- forward ops -----------------------------------------------------

    /// out[..., j] = sum_k x[..., k] * w[k, j] (+ b[j])
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::DimMismatch { op: "linear", lhs: xs, rhs: ws });
        }
        let (c_in, c_out) = (ws[0], ws[1]);
        if let Some(bid) = b {
            let bs = self.shape(bid);
            if bs != [c_out] {
                return Err(Error::DimMismatch { op: "linear", lhs: bs.to_vec(), rhs: vec![c_out] });
            }
        }
        let rows = self.value(x).numel() / c_in;
        let mut out = vec![T::ZERO; rows * c_out];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for r in 0..rows {
                let orow = &mut out[r * c_out..(r + 1) * c_out];
                if let Some(bid) = b {
                    orow.copy_from_slice(self.nodes[bid.0].value.data());
                }
                let xrow = &xd[r * c_in..(r + 1) * c_in];
                for (p, &xv) in xrow.iter().enumerate() {
                    let wrow = &wd[p * c_out..(p + 1) * c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = c_out;
        let needs = self.needs(&[x, w]) || b.map_or(false, |bid| self.needs(&[bid]));
        self.push(Tensor::new(oshape, out)?, Op::Linear { x, w, b }, needs, "linear")
    }

    /// Batched matmul: a [B,m,k] x b [B,k,n] -> [B,m,n].
    pub fn batmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::DimMismatch { op: "batmul", lhs: sa, rhs: sb });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::ZERO; bs * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..bs {
                let abase = bi * m * k;
                let bbase = bi * k * n;
                let obase = bi * m * n;
                for i in 0..m {
                    let orow = &mut out[obase + i * n..obase + (i + 1) * n];
                    for p in 0..k {
                        let av = ad[abase + i * k + p];
                        let brow = &bd[bbase + p * n..bbase + (p + 1) * n];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatMul { a, b }, needs, "batmul")
    }

    /// Batched matmul against transposed right operand:
    /// a [B,m,k] x b [B,n,k] -> [B,m,n].
    pub fn batmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::DimMismatch { op: "batmul_nt", lhs: sa, rhs: sb });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![T::ZERO; bs * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..bs {
                let abase = bi * m * k;
                let bbase = bi * n * k;
                for i in 0..m {
                    let arow = &ad[abase + i * k..abase + (i + 1) * k];
                    let orow = &mut out[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                    for (j, o) in orow.iter_mut().enumerate() {
                        let brow = &bd[bbase + j * k..bbase + (j + 1) * k];
                        let mut acc = T::ZERO;
                        for (&av, &bv) in arow.iter().zip(brow) {
                            acc += av * bv;
                        }
                        *o = acc;
                    }
                }
            }
        }
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatMulNt { a, b }, needs, "batmul_nt")
    }

    /// 2D matmul convenience: [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::DimMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let a3 = self.reshape(a, vec![1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, vec![1, sb[0], sb[1]])?;
        let o = self.batmul(a3, b3)?;
        let os = self.shape(o).to_vec();
        self.reshape(o, vec![os[1], os[2]])
    }

    /// 2D transposed matmul convenience: [m,k] x [n,k] -> [m,n].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::DimMismatch { op: "matmul_nt", lhs: sa, rhs: sb });
        }
        let a3 = self.reshape(a, vec![1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, vec![1, sb[0], sb[1]])?;
        let o = self.batmul_nt(a3, b3)?;
        let os = self.shape(o).to_vec();
        self.reshape(o, vec![os[1], os[2]])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::domain("softmax", format!("axis {} out of rank {}", axis, shape.len())));
        }
        if shape[axis] == 0 {
            return Err(Error::domain("softmax", "empty axis extent"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = xd[base];
                for a in 1..len {
                    let v = xd[base + a * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = T::ZERO;
                for a in 0..len {
                    let e = (xd[base + a * inner] - mx).exp();
                    out[base + a * inner] = e;
                    denom += e;
                }
                for a in 0..len {
                    out[base + a * inner] = out[base + a * inner] / denom;
                }
            }
        }
        let needs = self.needs(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, needs, "softmax")
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.value(x).map(|e| T::ONE / (T::ONE + (-e).exp()));
        let needs = self.needs(&[x]);
        self.push(v, Op::Sigmoid { x }, needs, "sigmoid")
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.value(x).map(|e| e.exp());
        let needs = self.needs(&[x]);
        self.push(v, Op::Exp { x }, needs, "exp")
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.value(x).map(|e| e.max_val(T::ZERO));
        let needs = self.needs(&[x]);
        self.push(v, Op::Relu { x }, needs, "relu")
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div { a, b })
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<TensorId> {
        let plan = BroadcastPlan::resolve(self.shape(a), self.shape(b))
            .ok_or_else(|| Error::DimMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            })?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let out: Vec<T> = match plan.kind {
            BroadcastKind::Elementwise => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            BroadcastKind::RightSmall => {
                let blk = bd.len();
                ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % blk])).collect()
            }
            BroadcastKind::LeftSmall => {
                let blk = ad.len();
                bd.iter().enumerate().map(|(i, &y)| f(ad[i % blk], y)).collect()
            }
        };
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new(plan.out_shape, out)?, op, needs, name)
    }

    pub fn scale(&mut self, x: TensorId, k: T) -> Result<TensorId> {
        let v = self.value(x).map(|e| e * k);
        let needs = self.needs(&[x]);
        self.push(v, Op::Scale { x, k }, needs, "scale")
    }

    pub fn add_scalar(&mut self, x: TensorId, k: T) -> Result<TensorId> {
        let v = self.value(x).map(|e| e + k);
        let needs = self.needs(&[x]);
        self.push(v, Op::AddScalar { x, k }, needs, "add_scalar")
    }

    /// Clamp to [lo, hi]; gradient is zero outside the open interval.
    pub fn clamp(&mut self, x: TensorId, lo: T, hi: T) -> Result<TensorId> {
        let v = self.value(x).map(|e| e.max_val(lo).min_val(hi));
        let needs = self.needs(&[x]);
        self.push(v, Op::Clamp { x, lo, hi }, needs, "clamp")
    }

    /// Sum of all elements, as a [1] tensor.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let needs = self.needs(&[x]);
        self.push(Tensor::new(vec![1], vec![acc])?, Op::Sum { x }, needs, "sum")
    }

    /// Select subtensor `i` along axis 0.
    pub fn index0(&mut self, x: TensorId, i: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || i >= shape[0] {
            return Err(Error::domain("index0", format!("index {} out of shape {:?}", i, shape)));
        }
        let rest: usize = shape[1..].iter().product();
        let data = self.value(x).data()[i * rest..(i + 1) * rest].to_vec();
        let oshape = if shape.len() == 1 { vec![1] } else { shape[1..].to_vec() };
        let needs = self.needs(&[x]);
        self.push(Tensor::new(oshape, data)?, Op::Index0 { x, i }, needs, "index0")
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::DimMismatch { op: "reshape", lhs: self.shape(x).to_vec(), rhs: shape });
        }
        let data = self.value(x).data().to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::new(shape, data)?, Op::Reshape { x }, needs, "reshape")
    }

    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if !is_permutation(perm, shape.len()) {
            return Err(Error::domain("permute", format!("{:?} is not a permutation of rank {}", perm, shape.len())));
        }
        let out = permute_data(self.value(x), perm);
        let needs = self.needs(&[x]);
        self.push(out, Op::Permute { x, perm: perm.to_vec() }, needs, "permute")
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::domain("concat", "no inputs"));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::domain("concat", format!("axis {} out of rank {}", axis, first.len())));
        }
        let mut total = 0;
        for &id in xs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (&a, &b))| d != axis && a != b)
            {
                return Err(Error::DimMismatch { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut oshape = first.clone();
        oshape[axis] = total;
        let (outer, _, inner) = axis_split(&oshape, axis);
        let mut out = vec![T::ZERO; oshape.iter().product()];
        for o in 0..outer {
            let mut off = 0;
            for &id in xs {
                let part = self.value(id);
                let plen = part.shape()[axis];
                let src = &part.data()[o * plen * inner..(o + 1) * plen * inner];
                let dst_base = o * total * inner + off * inner;
                out[dst_base..dst_base + plen * inner].copy_from_slice(src);
                off += plen;
            }
        }
        let needs = self.needs(xs);
        self.push(Tensor::new(oshape, out)?, Op::Concat { xs: xs.to_vec(), axis }, needs, "concat")
    }

    /// Tile `x` n times along a fresh leading axis: [d...] -> [n, d...].
    pub fn repeat0(&mut self, x: TensorId, n: usize) -> Result<TensorId> {
        if n == 0 {
            return Err(Error::domain("repeat0", "zero repeats"));
        }
        let shape = self.shape(x).to_vec();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len() * n);
        for _ in 0..n {
            out.extend_from_slice(xd);
        }
        let mut oshape = vec![n];
        oshape.extend_from_slice(&shape);
        let needs = self.needs(&[x]);
        self.push(Tensor::new(oshape, out)?, Op::Repeat0 { x, n }, needs, "repeat0")
    }

    /// Reverse entry order along `axis`.
    pub fn flip(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::domain("flip", format!("axis {} out of rank {}", axis, shape.len())));
        }
        let out = flip_data(self.value(x), axis);
        let needs = self.needs(&[x]);
        self.push(out, Op::Flip { x, axis }, needs, "flip")
    }

    /// 2D convolution: x [Cin,H,W], w [Cout,Cin,kh,kw] -> [Cout,H',W'].
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
            return Err(Error::DimMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        let (c_in, h, wdt) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wdt + 2 * pad < kw {
            return Err(Error::domain("conv2d", format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, h + 2 * pad, wdt + 2 * pad)));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wdt + 2 * pad - kw) / stride + 1;
        let n = oh * ow;
        let kdim = c_in * kh * kw;
        let mut out = vec![T::ZERO; c_out * n];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            if let Some(bid) = b {
                let bdta = self.nodes[bid.0].value.data();
                if bdta.len() != c_out {
                    return Err(Error::DimMismatch { op: "conv2d", lhs: vec![bdta.len()], rhs: vec![c_out] });
                }
                for co in 0..c_out {
                    out[co * n..(co + 1) * n].fill(bdta[co]);
                }
            }
            // unfold patches so each weight scalar streams over the whole
            // output plane
            let col = im2col(xd, c_in, h, wdt, kh, kw, stride, pad, oh, ow);
            for co in 0..c_out {
                let orow = &mut out[co * n..(co + 1) * n];
                for p in 0..kdim {
                    let wv = wd[co * kdim + p];
                    let crow = &col[p * n..(p + 1) * n];
                    for (o, &cv) in orow.iter_mut().zip(crow) {
                        *o += wv * cv;
                    }
                }
            }
        }
        let needs = self.needs(&[x, w]) || b.map_or(false, |bid| self.needs(&[bid]));
        self.push(
            Tensor::new(vec![c_out, oh, ow], out)?,
            Op::Conv2d { x, w, b, stride, pad },
            needs,
            "conv2d",
        )
    }

    /// Nearest-neighbour 2x upsampling of [C,H,W].
    pub fn upsample2(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::domain("upsample2", format!("expected rank 3, got {:?}", xs)));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; c * 4 * h * w];
        for ci in 0..c {
            for y in 0..h {
                let src = &xd[(ci * h + y) * w..(ci * h + y + 1) * w];
                for dy in 0..2 {
                    let orow = &mut out[(ci * 2 * h + 2 * y + dy) * 2 * w..(ci * 2 * h + 2 * y + dy + 1) * 2 * w];
                    for x_ in 0..w {
                        orow[2 * x_] = src[x_];
                        orow[2 * x_ + 1] = src[x_];
                    }
                }
            }
        }
        let needs = self.needs(&[x]);
        self.push(Tensor::new(vec![c, 2 * h, 2 * w], out)?, Op::Upsample2 { x }, needs, "upsample2")
    }

    /// Layer normalization over the trailing axis with affine parameters.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::domain("layer_norm", "rank 0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::DimMismatch { op: "layer_norm", lhs: xs, rhs: self.shape(gamma).to_vec() });
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_d = T::from_f64(1.0 / d as f64);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let rows = xd.len() / d;
        let mut out = vec![T::ZERO; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = T::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let inv_std = T::ONE / (var + eps).sqrt();
            let orow = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                orow[j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        self.push(Tensor::new(xs, out)?, Op::LayerNorm { x, gamma, beta }, needs, "layer_norm")
    }

    /// Expected monotonic alignment from selection probabilities.
    ///
    /// p and the result are [B, r, H]; row 0 starts from a virtual alignment
    /// concentrated on the first memory entry, and each row advances
    /// left-to-right:
    ///   alpha[i,j] = p[i,j] * ((1-p[i,j-1]) * alpha[i,j-1] / p[i,j-1] + alpha[i-1,j])
    pub fn monotonic_alpha(&mut self, p: TensorId) -> Result<TensorId> {
        let ps = self.shape(p).to_vec();
        if ps.len() != 3 {
            return Err(Error::domain("monotonic_alpha", format!("expected [B,r,H], got {:?}", ps)));
        }
        let (bs, r, h) = (ps[0], ps[1], ps[2]);
        let pd = self.value(p).data();
        let mut alpha = vec![T::ZERO; pd.len()];
        for b in 0..bs {
            let base = b * r * h;
            for i in 0..r {
                for j in 0..h {
                    let pij = pd[base + i * h + j];
                    let carry = if j > 0 {
                        let pprev = pd[base + i * h + j - 1];
                        (T::ONE - pprev) * alpha[base + i * h + j - 1] / pprev
                    } else {
                        T::ZERO
                    };
                    let above = if i > 0 {
                        alpha[base + (i - 1) * h + j]
                    } else if j == 0 {
                        T::ONE
                    } else {
                        T::ZERO
                    };
                    alpha[base + i * h + j] = pij * (carry + above);
                }
            }
        }
        let needs = self.needs(&[p]);
        self.push(Tensor::new(ps, alpha)?, Op::MonotonicAlpha { p }, needs, "monotonic_alpha")
    }

    /// Lookback distribution over memory entries at or before the monotonic
    /// stop. alpha and energy are [B, r, H].
    pub fn mail_beta(
        &mut self,
        alpha: TensorId,
        energy: TensorId,
        variant: LookbackNumerator,
    ) -> Result<TensorId> {
        let ash = self.shape(alpha).to_vec();
        if ash.len() != 3 || self.shape(energy) != ash.as_slice() {
            return Err(Error::DimMismatch {
                op: "mail_beta",
                lhs: ash,
                rhs: self.shape(energy).to_vec(),
            });
        }
        let (bs, r, h) = (ash[0], ash[1], ash[2]);
        let ad = self.value(alpha).data();
        let ed = self.value(energy).data();
        let mut beta = vec![T::ZERO; ad.len()];
        let mut s = vec![T::ZERO; h];
        let mut cum = vec![T::ZERO; h];
        for b in 0..bs {
            for i in 0..r {
                let base = (b * r + i) * h;
                shifted_exp_cumsum(&ed[base..base + h], &mut s, &mut cum);
                match variant {
                    LookbackNumerator::SlotJ => {
                        // beta_j = s_j * sum_{k>=j} alpha_k / cum_k
                        let mut suffix = T::ZERO;
                        for j in (0..h).rev() {
                            suffix += ad[base + j] / cum[j];
                            beta[base + j] = s[j] * suffix;
                        }
                    }
                    LookbackNumerator::StopK => {
                        // beta_j = sum_{k>=j} alpha_k * s_k / cum_k
                        let mut suffix = T::ZERO;
                        for j in (0..h).rev() {
                            suffix += ad[base + j] * s[j] / cum[j];
                            beta[base + j] = suffix;
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[alpha, energy]);
        self.push(
            Tensor::new(ash, beta)?,
            Op::MailBeta { alpha, energy, variant },
            needs,
            "mail_beta",
        )
    }

    /// Weighted gather of plane positions: x [C, A, B] with a table whose
    /// flat indices address the A*B plane -> [C, rows, cols].
    pub fn gather_blend(&mut self, x: TensorId, table: Arc<BlendTable>) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] * xs[2] != table.plane {
            return Err(Error::domain(
                "gather_blend",
                format!("input {:?} does not match table plane {}", xs, table.plane),
            ));
        }
        let c = xs[0];
        let (rows, cols) = table.out_shape;
        if table.taps.len() != rows * cols {
            return Err(Error::domain("gather_blend", "table size mismatch"));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; c * rows * cols];
        for ci in 0..c {
            let plane = &xd[ci * table.plane..(ci + 1) * table.plane];
            let obase = ci * rows * cols;
            for (cell, taps) in table.taps.iter().enumerate() {
                let mut acc = T::ZERO;
                for &(idx, wgt) in taps {
                    acc += T::from_f64(wgt) * plane[idx as usize];
                }
                out[obase + cell] = acc;
            }
        }
        let needs = self.needs(&[x]);
        self.push(
            Tensor::new(vec![c, rows, cols], out)?,
            Op::GatherBlend { x, table },
            needs,
            "gather_blend",
        )
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse-mode accumulation from a scalar output. Gradients of
    /// requires-grad leaves accumulate across repeated calls.
    pub fn backward(&mut self, output: TensorId) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("output must be scalar, shape is {:?}", self.shape(output)),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[output.0] = Some(vec![T::ONE]);

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            self.backprop_op(idx, &op, &g, &mut grads);
            if matches!(op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                let acc = node
                    .grad_accum
                    .get_or_insert_with(|| vec![T::ZERO; node.value.numel()]);
                for (a, &d) in acc.iter_mut().zip(&g) {
                    *a += d;
                }
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], id: TensorId, delta: &[T]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![T::ZERO; self.nodes[id.0].value.numel()]);
        for (s, &d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    fn backprop_op(&self, idx: usize, op: &Op<T>, g: &[T], grads: &mut Vec<Option<Vec<T>>>) {
        match op {
            Op::Leaf => {}

            Op::Linear { x, w, b } => {
                let (c_in, c_out) = {
                    let ws = self.shape(*w);
                    (ws[0], ws[1])
                };
                let rows = self.value(*x).numel() / c_in;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::ZERO; xd.len()];
                    for r in 0..rows {
                        let grow = &g[r * c_out..(r + 1) * c_out];
                        let dxrow = &mut dx[r * c_in..(r + 1) * c_in];
                        for (p, dxe) in dxrow.iter_mut().enumerate() {
                            let wrow = &wd[p * c_out..(p + 1) * c_out];
                            let mut acc = T::ZERO;
                            for (&gv, &wv) in grow.iter().zip(wrow) {
                                acc += gv * wv;
                            }
                            *dxe = acc;
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![T::ZERO; wd.len()];
                    for r in 0..rows {
                        let grow = &g[r * c_out..(r + 1) * c_out];
                        let xrow = &xd[r * c_in..(r + 1) * c_in];
                        for (p, &xv) in xrow.iter().enumerate() {
                            let dwrow = &mut dw[p * c_out..(p + 1) * c_out];
                            for (dwe, &gv) in dwrow.iter_mut().zip(grow) {
                                *dwe += xv * gv;
                            }
                        }
                    }
                    self.accum(grads, *w, &dw);
                }
                if let Some(bid) = b {
                    if self.nodes[bid.0].needs_grad {
                        let mut db = vec![T::ZERO; c_out];
                        for r in 0..rows {
                            for (dbe, &gv) in db.iter_mut().zip(&g[r * c_out..(r + 1) * c_out]) {
                                *dbe += gv;
                            }
                        }
                        self.accum(grads, *bid, &db);
                    }
                }
            }

            Op::BatMul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.nodes[a.0].needs_grad {
                    // dA[i,p] = sum_j g[i,j] * B[p,j]
                    let mut da = vec![T::ZERO; ad.len()];
                    for bi in 0..bs {
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[(bi * k + p) * n..(bi * k + p + 1) * n];
                                let mut acc = T::ZERO;
                                for (&gv, &bv) in grow.iter().zip(brow) {
                                    acc += gv * bv;
                                }
                                da[(bi * m + i) * k + p] = acc;
                            }
                        }
                    }
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB[p,j] = sum_i A[i,p] * g[i,j]
                    let mut db = vec![T::ZERO; bd.len()];
                    for bi in 0..bs {
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for p in 0..k {
                                let av = ad[(bi * m + i) * k + p];
                                let dbrow = &mut db[(bi * k + p) * n..(bi * k + p + 1) * n];
                                for (dbe, &gv) in dbrow.iter_mut().zip(grow) {
                                    *dbe += av * gv;
                                }
                            }
                        }
                    }
                    self.accum(grads, *b, &db);
                }
            }

            Op::BatMulNt { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.nodes[a.0].needs_grad {
                    // dA[i,:] = sum_j g[i,j] * B[j,:]
                    let mut da = vec![T::ZERO; ad.len()];
                    for bi in 0..bs {
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            let darow = &mut da[(bi * m + i) * k..(bi * m + i + 1) * k];
                            for (j, &gv) in grow.iter().enumerate() {
                                let brow = &bd[(bi * n + j) * k..(bi * n + j + 1) * k];
                                for (de, &bv) in darow.iter_mut().zip(brow) {
                                    *de += gv * bv;
                                }
                            }
                        }
                    }
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB[j,:] = sum_i g[i,j] * A[i,:]
                    let mut db = vec![T::ZERO; bd.len()];
                    for bi in 0..bs {
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            let arow = &ad[(bi * m + i) * k..(bi * m + i + 1) * k];
                            for (j, &gv) in grow.iter().enumerate() {
                                let dbrow = &mut db[(bi * n + j) * k..(bi * n + j + 1) * k];
                                for (de, &av) in dbrow.iter_mut().zip(arow) {
                                    *de += gv * av;
                                }
                            }
                        }
                    }
                    self.accum(grads, *b, &db);
                }
            }

            Op::Softmax { x, axis } => {
                let y = self.value(TensorId(idx)).data();
                let shape = self.shape(TensorId(idx)).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let mut dx = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::ZERO;
                        for a in 0..len {
                            dot += g[base + a * inner] * y[base + a * inner];
                        }
                        for a in 0..len {
                            let p = base + a * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                self.accum(grads, *x, &dx);
            }

            Op::Sigmoid { x } => {
                let y = self.value(TensorId(idx)).data();
                let dx: Vec<T> = g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::ONE - s)).collect();
                self.accum(grads, *x, &dx);
            }

            Op::Exp { x } => {
                let y = self.value(TensorId(idx)).data();
                let dx: Vec<T> = g.iter().zip(y).map(|(&gv, &e)| gv * e).collect();
                self.accum(grads, *x, &dx);
            }

            Op::Relu { x } => {
                // subgradient at 0 is 0
                let xd = self.value(*x).data();
                let dx: Vec<T> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| if v > T::ZERO { gv } else { T::ZERO })
                    .collect();
                self.accum(grads, *x, &dx);
            }

            Op::Add { a, b } => {
                self.binary_backward(*a, *b, g, grads, |_, _, gv| (gv, gv));
            }
            Op::Sub { a, b } => {
                self.binary_backward(*a, *b, g, grads, |_, _, gv| (gv, -gv));
            }
            Op::Mul { a, b } => {
                self.binary_backward(*a, *b, g, grads, |av, bv, gv| (gv * bv, gv * av));
            }
            Op::Div { a, b } => {
                self.binary_backward(*a, *b, g, grads, |av, bv, gv| (gv / bv, -gv * av / (bv * bv)));
            }

            Op::Scale { x, k } => {
                let dx: Vec<T> = g.iter().map(|&gv| gv * *k).collect();
                self.accum(grads, *x, &dx);
            }

            Op::AddScalar { x, .. } => {
                self.accum(grads, *x, g);
            }

            Op::Clamp { x, lo, hi } => {
                let xd = self.value(*x).data();
                let dx: Vec<T> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| if v > *lo && v < *hi { gv } else { T::ZERO })
                    .collect();
                self.accum(grads, *x, &dx);
            }

            Op::Sum { x } => {
                let n = self.value(*x).numel();
                let dx = vec![g[0]; n];
                self.accum(grads, *x, &dx);
            }

            Op::Index0 { x, i } => {
                let mut dx = vec![T::ZERO; self.value(*x).numel()];
                let rest = g.len();
                dx[i * rest..(i + 1) * rest].copy_from_slice(g);
                self.accum(grads, *x, &dx);
            }

            Op::Reshape { x } => {
                self.accum(grads, *x, g);
            }

            Op::Permute { x, perm } => {
                let oshape = self.shape(TensorId(idx)).to_vec();
                let gt = Tensor::new(oshape, g.to_vec()).expect("grad shape");
                let inv = invert_permutation(perm);
                let back = permute_data(&gt, &inv);
                self.accum(grads, *x, back.data());
            }

            Op::Concat { xs, axis } => {
                let oshape = self.shape(TensorId(idx)).to_vec();
                let (outer, _, inner) = axis_split(&oshape, *axis);
                let total = oshape[*axis];
                let mut off = 0;
                for &xid in xs {
                    let pshape = self.shape(xid).to_vec();
                    let plen = pshape[*axis];
                    if self.nodes[xid.0].needs_grad {
                        let mut dx = vec![T::ZERO; self.value(xid).numel()];
                        for o in 0..outer {
                            let src = &g[o * total * inner + off * inner..o * total * inner + (off + plen) * inner];
                            dx[o * plen * inner..(o + 1) * plen * inner].copy_from_slice(src);
                        }
                        self.accum(grads, xid, &dx);
                    }
                    off += plen;
                }
            }

            Op::Repeat0 { x, n } => {
                let m = self.value(*x).numel();
                let mut dx = vec![T::ZERO; m];
                for rep in 0..*n {
                    for (d, &gv) in dx.iter_mut().zip(&g[rep * m..(rep + 1) * m]) {
                        *d += gv;
                    }
                }
                self.accum(grads, *x, &dx);
            }

            Op::Flip { x, axis } => {
                let oshape = self.shape(TensorId(idx)).to_vec();
                let gt = Tensor::new(oshape, g.to_vec()).expect("grad shape");
                let back = flip_data(&gt, *axis);
                self.accum(grads, *x, back.data());
            }

            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (c_in, h, wdt) = (xs[0], xs[1], xs[2]);
                let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
                let os = self.shape(TensorId(idx)).to_vec();
                let (oh, ow) = (os[1], os[2]);
                let n = oh * ow;
                let kdim = c_in * kh * kw;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let want_dx = self.nodes[x.0].needs_grad;
                let want_dw = self.nodes[w.0].needs_grad;
                let (stride, pad) = (*stride, *pad);
                if want_dw {
                    // dW[co, p] = <g[co, :], col[p, :]>
                    let col = im2col(xd, c_in, h, wdt, kh, kw, stride, pad, oh, ow);
                    let mut dw = vec![T::ZERO; wd.len()];
                    for co in 0..c_out {
                        let grow = &g[co * n..(co + 1) * n];
                        for p in 0..kdim {
                            let crow = &col[p * n..(p + 1) * n];
                            let mut acc = T::ZERO;
                            for (&gv, &cv) in grow.iter().zip(crow) {
                                acc += gv * cv;
                            }
                            dw[co * kdim + p] = acc;
                        }
                    }
                    self.accum(grads, *w, &dw);
                }
                if want_dx {
                    // d_col[p, :] = sum_co W[co, p] * g[co, :], folded back
                    let mut dcol = vec![T::ZERO; kdim * n];
                    for co in 0..c_out {
                        let grow = &g[co * n..(co + 1) * n];
                        for p in 0..kdim {
                            let wv = wd[co * kdim + p];
                            let drow = &mut dcol[p * n..(p + 1) * n];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    let dx = col2im(&dcol, c_in, h, wdt, kh, kw, stride, pad, oh, ow);
                    self.accum(grads, *x, &dx);
                }
                if let Some(bid) = b {
                    if self.nodes[bid.0].needs_grad {
                        let mut db = vec![T::ZERO; c_out];
                        for co in 0..c_out {
                            let mut acc = T::ZERO;
                            for &gv in &g[co * n..(co + 1) * n] {
                                acc += gv;
                            }
                            db[co] = acc;
                        }
                        self.accum(grads, *bid, &db);
                    }
                }
            }

            Op::Upsample2 { x } => {
                let xs = self.shape(*x).to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![T::ZERO; c * h * w];
                for ci in 0..c {
                    for y in 0..h {
                        for dy in 0..2 {
                            let grow = &g[(ci * 2 * h + 2 * y + dy) * 2 * w..(ci * 2 * h + 2 * y + dy + 1) * 2 * w];
                            let drow = &mut dx[(ci * h + y) * w..(ci * h + y + 1) * w];
                            for x_ in 0..w {
                                drow[x_] += grow[2 * x_] + grow[2 * x_ + 1];
                            }
                        }
                    }
                }
                self.accum(grads, *x, &dx);
            }

            Op::LayerNorm { x, gamma, beta } => {
                let xs = self.shape(*x).to_vec();
                let d = *xs.last().unwrap();
                let rows = self.value(*x).numel() / d;
                let eps = T::from_f64(LAYER_NORM_EPS);
                let inv_d = T::from_f64(1.0 / d as f64);
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let mut dx = vec![T::ZERO; xd.len()];
                let mut dgamma = vec![T::ZERO; d];
                let mut dbeta = vec![T::ZERO; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mut mean = T::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean = mean * inv_d;
                    let mut var = T::ZERO;
                    for &v in row {
                        let c = v - mean;
                        var += c * c;
                    }
                    var = var * inv_d;
                    let inv_std = T::ONE / (var + eps).sqrt();
                    let mut mean_gh = T::ZERO;
                    let mut mean_ghx = T::ZERO;
                    for j in 0..d {
                        let xh = (row[j] - mean) * inv_std;
                        let gh = grow[j] * gd[j];
                        mean_gh += gh;
                        mean_ghx += gh * xh;
                        dgamma[j] += grow[j] * xh;
                        dbeta[j] += grow[j];
                    }
                    mean_gh = mean_gh * inv_d;
                    mean_ghx = mean_ghx * inv_d;
                    let drow = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xh = (row[j] - mean) * inv_std;
                        let gh = grow[j] * gd[j];
                        drow[j] = (gh - mean_gh - xh * mean_ghx) * inv_std;
                    }
                }
                self.accum(grads, *x, &dx);
                self.accum(grads, *gamma, &dgamma);
                self.accum(grads, *beta, &dbeta);
            }

            Op::MonotonicAlpha { p } => {
                let ps = self.shape(*p).to_vec();
                let (bs, r, h) = (ps[0], ps[1], ps[2]);
                let pd = self.value(*p).data();
                let alpha = self.value(TensorId(idx)).data();
                let mut dp = vec![T::ZERO; pd.len()];
                let mut galpha = g.to_vec();
                for b in 0..bs {
                    let base = b * r * h;
                    for i in (0..r).rev() {
                        for j in (0..h).rev() {
                            let at = base + i * h + j;
                            let ga = galpha[at];
                            if ga == T::ZERO {
                                continue;
                            }
                            let pij = pd[at];
                            // alpha[i,j] = p[i,j] * q ; q = carry + above
                            dp[at] += ga * (alpha[at] / pij);
                            if j > 0 {
                                let prev = base + i * h + j - 1;
                                let pprev = pd[prev];
                                galpha[prev] += ga * pij * (T::ONE - pprev) / pprev;
                                dp[prev] -= ga * pij * alpha[prev] / (pprev * pprev);
                            }
                            if i > 0 {
                                galpha[base + (i - 1) * h + j] += ga * pij;
                            }
                        }
                    }
                }
                self.accum(grads, *p, &dp);
            }

            Op::MailBeta { alpha, energy, variant } => {
                let ash = self.shape(*alpha).to_vec();
                let (bs, r, h) = (ash[0], ash[1], ash[2]);
                let ad = self.value(*alpha).data();
                let ed = self.value(*energy).data();
                let want_da = self.nodes[alpha.0].needs_grad;
                let want_de = self.nodes[energy.0].needs_grad;
                let mut da = vec![T::ZERO; if want_da { ad.len() } else { 0 }];
                let mut de = vec![T::ZERO; if want_de { ed.len() } else { 0 }];
                let mut s = vec![T::ZERO; h];
                let mut cum = vec![T::ZERO; h];
                for b in 0..bs {
                    for i in 0..r {
                        let base = (b * r + i) * h;
                        shifted_exp_cumsum(&ed[base..base + h], &mut s, &mut cum);
                        let grow = &g[base..base + h];
                        let arow = &ad[base..base + h];
                        match variant {
                            LookbackNumerator::SlotJ => {
                                // prefix P_k = sum_{j<=k} g_j s_j
                                // suffix U_j = sum_{k>=j} alpha_k / cum_k^2
                                // suffix V_m = sum_{j>m} g_j s_j U_j
                                let mut prefix = vec![T::ZERO; h];
                                let mut acc = T::ZERO;
                                for k in 0..h {
                                    acc += grow[k] * s[k];
                                    prefix[k] = acc;
                                }
                                if want_da {
                                    for k in 0..h {
                                        da[base + k] += prefix[k] / cum[k];
                                    }
                                }
                                if want_de {
                                    let mut u = vec![T::ZERO; h];
                                    let mut uacc = T::ZERO;
                                    for j in (0..h).rev() {
                                        uacc += arow[j] / (cum[j] * cum[j]);
                                        u[j] = uacc;
                                    }
                                    let mut t = vec![T::ZERO; h];
                                    let mut tacc = T::ZERO;
                                    for j in (0..h).rev() {
                                        tacc += arow[j] / cum[j];
                                        t[j] = tacc;
                                    }
                                    let mut v_excl = T::ZERO;
                                    for m in (0..h).rev() {
                                        let ds = grow[m] * t[m] - prefix[m] * u[m] - v_excl;
                                        de[base + m] += s[m] * ds;
                                        v_excl += grow[m] * s[m] * u[m];
                                    }
                                }
                            }
                            LookbackNumerator::StopK => {
                                let mut gpre = vec![T::ZERO; h];
                                let mut acc = T::ZERO;
                                for k in 0..h {
                                    acc += grow[k];
                                    gpre[k] = acc;
                                }
                                if want_da {
                                    for k in 0..h {
                                        da[base + k] += gpre[k] * s[k] / cum[k];
                                    }
                                }
                                if want_de {
                                    let mut w = vec![T::ZERO; h];
                                    let mut wacc = T::ZERO;
                                    for j in (0..h).rev() {
                                        wacc += arow[j] * s[j] / (cum[j] * cum[j]);
                                        w[j] = wacc;
                                    }
                                    let mut v_excl = T::ZERO;
                                    for m in (0..h).rev() {
                                        let ds = gpre[m] * arow[m] / cum[m] - gpre[m] * w[m] - v_excl;
                                        de[base + m] += s[m] * ds;
                                        v_excl += grow[m] * w[m];
                                    }
                                }
                            }
                        }
                    }
                }
                if want_da {
                    self.accum(grads, *alpha, &da);
                }
                if want_de {
                    self.accum(grads, *energy, &de);
                }
            }

            Op::GatherBlend { x, table } => {
                let xs = self.shape(*x).to_vec();
                let c = xs[0];
                let (rows, cols) = table.out_shape;
                let mut dx = vec![T::ZERO; self.value(*x).numel()];
                for ci in 0..c {
                    let dplane = &mut dx[ci * table.plane..(ci + 1) * table.plane];
                    let gbase = ci * rows * cols;
                    for (cell, taps) in table.taps.iter().enumerate() {
                        let gv = g[gbase + cell];
                        for &(idxp, wgt) in taps {
                            dplane[idxp as usize] += T::from_f64(wgt) * gv;
                        }
                    }
                }
                self.accum(grads, *x, &dx);
            }
        }
    }

    fn binary_backward(
        &self,
        a: TensorId,
        b: TensorId,
        g: &[T],
        grads: &mut Vec<Option<Vec<T>>>,
        df: impl Fn(T, T, T) -> (T, T),
    ) {
        let plan = BroadcastPlan::resolve(self.shape(a), self.shape(b)).expect("validated in forward");
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let want_a = self.nodes[a.0].needs_grad;
        let want_b = self.nodes[b.0].needs_grad;
        let mut da = vec![T::ZERO; if want_a { ad.len() } else { 0 }];
        let mut db = vec![T::ZERO; if want_b { bd.len() } else { 0 }];
        match plan.kind {
            BroadcastKind::Elementwise => {
                for i in 0..g.len() {
                    let (ga, gb) = df(ad[i], bd[i], g[i]);
                    if want_a {
                        da[i] = ga;
                    }
                    if want_b {
                        db[i] = gb;
                    }
                }
            }
            BroadcastKind::RightSmall => {
                let blk = bd.len();
                for i in 0..g.len() {
                    let (ga, gb) = df(ad[i], bd[i % blk], g[i]);
                    if want_a {
                        da[i] = ga;
                    }
                    if want_b {
                        db[i % blk] += gb;
                    }
                }
            }
            BroadcastKind::LeftSmall => {
                let blk = ad.len();
                for i in 0..g.len() {
                    let (ga, gb) = df(ad[i % blk], bd[i], g[i]);
                    if want_a {
                        da[i % blk] += ga;
                    }
                    if want_b {
                        db[i] = gb;
                    }
                }
            }
        }
        if want_a {
            self.accum(grads, a, &da);
        }
        if want_b {
            self.accum(grads, b, &db);
        }
    }

    /// Recompute all recorded values from the leaves; returns true when the
    /// replay reproduces every stored value bit-identically.
    pub fn replay_forward(&mut self) -> Result<bool> {
        let mut scratch = Tape::new();
        let mut map: Vec<TensorId> = Vec::with_capacity(self.nodes.len());
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            let id = match op {
                Op::Leaf => scratch.push_unchecked(self.nodes[i].value.clone(), Op::Leaf, self.nodes[i].needs_grad),
                Op::Linear { x, w, b } => scratch.linear(map[x.0], map[w.0], b.map(|v| map[v.0]))?,
                Op::BatMul { a, b } => scratch.batmul(map[a.0], map[b.0])?,
                Op::BatMulNt { a, b } => scratch.batmul_nt(map[a.0], map[b.0])?,
                Op::Softmax { x, axis } => scratch.softmax(map[x.0], axis)?,
                Op::Sigmoid { x } => scratch.sigmoid(map[x.0])?,
                Op::Exp { x } => scratch.exp(map[x.0])?,
                Op::Relu { x } => scratch.relu(map[x.0])?,
                Op::Add { a, b } => scratch.add(map[a.0], map[b.0])?,
                Op::Sub { a, b } => scratch.sub(map[a.0], map[b.0])?,
                Op::Mul { a, b } => scratch.mul(map[a.0], map[b.0])?,
                Op::Div { a, b } => scratch.div(map[a.0], map[b.0])?,
                Op::Scale { x, k } => scratch.scale(map[x.0], k)?,
                Op::AddScalar { x, k } => scratch.add_scalar(map[x.0], k)?,
                Op::Clamp { x, lo, hi } => scratch.clamp(map[x.0], lo, hi)?,
                Op::Sum { x } => scratch.sum(map[x.0])?,
                Op::Index0 { x, i } => scratch.index0(map[x.0], i)?,
                Op::Reshape { x } => scratch.reshape(map[x.0], self.nodes[i].value.shape().to_vec())?,
                Op::Permute { x, ref perm } => scratch.permute(map[x.0], perm)?,
                Op::Concat { ref xs, axis } => {
                    let mapped: Vec<TensorId> = xs.iter().map(|v| map[v.0]).collect();
                    scratch.concat(&mapped, axis)?
                }
                Op::Repeat0 { x, n } => scratch.repeat0(map[x.0], n)?,
                Op::Flip { x, axis } => scratch.flip(map[x.0], axis)?,
                Op::Conv2d { x, w, b, stride, pad } => {
                    scratch.conv2d(map[x.0], map[w.0], b.map(|v| map[v.0]), stride, pad)?
                }
                Op::Upsample2 { x } => scratch.upsample2(map[x.0])?,
                Op::LayerNorm { x, gamma, beta } => scratch.layer_norm(map[x.0], map[gamma.0], map[beta.0])?,
                Op::MonotonicAlpha { p } => scratch.monotonic_alpha(map[p.0])?,
                Op::MailBeta { alpha, energy, variant } => scratch.mail_beta(map[alpha.0], map[energy.0], variant)?,
                Op::GatherBlend { x, ref table } => scratch.gather_blend(map[x.0], table.clone())?,
            };
            map.push(id);
        }
        let identical = (0..self.nodes.len()).all(|i| {
            let a = self.nodes[i].value.data();
            let b = scratch.nodes[map[i].0].value.data();
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_f64().to_bits() == y.to_f64().to_bits())
        });
        Ok(identical)
    }
}

// ---- shared helpers -------------------------------------------------------

/// Output positions whose receptive input `o*stride + k - pad` stays inside
/// [0, dim); returns an inclusive range, possibly empty (lo > hi).
fn conv_valid_range(k: usize, pad: usize, stride: usize, dim: usize, odim: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k + stride - 1) / stride };
    if dim + pad < k + 1 {
        return (1, 0);
    }
    let hi = ((dim - 1 + pad - k) / stride).min(odim.saturating_sub(1));
    (lo, hi)
}

/// Unfold [c_in, h, w] into patch rows [c_in*kh*kw, oh*ow]; out-of-image
/// taps are zero.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    xd: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let n = oh * ow;
    let mut col = vec![T::ZERO; c_in * kh * kw * n];
    let mut p = 0;
    for ci in 0..c_in {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = conv_valid_range(ky, pad, stride, h, oh);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = conv_valid_range(kx, pad, stride, w, ow);
                if ox_lo <= ox_hi {
                    let crow = &mut col[p * n..(p + 1) * n];
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * stride + ky - pad;
                        let xrow = &xd[(ci * h + iy) * w..(ci * h + iy + 1) * w];
                        let seg = &mut crow[oy * ow + ox_lo..oy * ow + ox_hi + 1];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            seg.copy_from_slice(&xrow[ix0..ix0 + seg.len()]);
                        } else {
                            for (i, s) in seg.iter_mut().enumerate() {
                                *s = xrow[(ox_lo + i) * stride + kx - pad];
                            }
                        }
                    }
                }
                p += 1;
            }
        }
    }
    col
}

/// Scatter patch-row gradients [c_in*kh*kw, oh*ow] back into [c_in, h, w].
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    dcol: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let n = oh * ow;
    let mut dx = vec![T::ZERO; c_in * h * w];
    let mut p = 0;
    for ci in 0..c_in {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = conv_valid_range(ky, pad, stride, h, oh);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = conv_valid_range(kx, pad, stride, w, ow);
                if ox_lo <= ox_hi {
                    let crow = &dcol[p * n..(p + 1) * n];
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * stride + ky - pad;
                        let drow = &mut dx[(ci * h + iy) * w..(ci * h + iy + 1) * w];
                        let seg = &crow[oy * ow + ox_lo..oy * ow + ox_hi + 1];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            for (d, &g) in drow[ix0..ix0 + seg.len()].iter_mut().zip(seg) {
                                *d += g;
                            }
                        } else {
                            for (i, &g) in seg.iter().enumerate() {
                                drow[(ox_lo + i) * stride + kx - pad] += g;
                            }
                        }
                    }
                }
                p += 1;
            }
        }
    }
    dx
}

/// Split a shape into (product before axis, axis extent, product after).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// exp of max-shifted values and their inclusive prefix sums.
fn shifted_exp_cumsum<T: Scalar>(e: &[T], s: &mut [T], cum: &mut [T]) {
    let mut mx = e[0];
    for &v in &e[1..] {
        if v > mx {
            mx = v;
        }
    }
    let mut acc = T::ZERO;
    for (k, &v) in e.iter().enumerate() {
        let sv = (v - mx).exp();
        s[k] = sv;
        acc += sv;
        cum[k] = acc;
    }
}

enum BroadcastKind {
    Elementwise,
    /// b is a scalar or a trailing-suffix of a's shape
    RightSmall,
    /// a is a scalar or a trailing-suffix of b's shape
    LeftSmall,
}

struct BroadcastPlan {
    out_shape: Vec<usize>,
    kind: BroadcastKind,
}

impl BroadcastPlan {
    /// Trailing-dimension and scalar broadcasting only.
    fn resolve(a: &[usize], b: &[usize]) -> Option<BroadcastPlan> {
        if a == b {
            return Some(BroadcastPlan { out_shape: a.to_vec(), kind: BroadcastKind::Elementwise });
        }
        let numel = |s: &[usize]| s.iter().product::<usize>();
        let suffix_of = |small: &[usize], big: &[usize]| {
            small.len() <= big.len() && &big[big.len() - small.len()..] == small
        };
        if numel(b) == 1 || suffix_of(b, a) {
            return Some(BroadcastPlan { out_shape: a.to_vec(), kind: BroadcastKind::RightSmall });
        }
        if numel(a) == 1 || suffix_of(a, b) {
            return Some(BroadcastPlan { out_shape: b.to_vec(), kind: BroadcastKind::LeftSmall });
        }
        None
    }
}

fn is_permutation(perm: &[usize], rank: usize) -> bool {
    if perm.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_data<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut ostrides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        ostrides[i] = ostrides[i + 1] * oshape[i + 1];
    }
    // stride of input axis p in the output layout
    let mut out_stride_for_in_axis = vec![0usize; rank];
    for (o_axis, &p) in perm.iter().enumerate() {
        out_stride_for_in_axis[p] = ostrides[o_axis];
    }
    let mut out = vec![T::ZERO; x.numel()];
    let mut idx = vec![0usize; rank];
    let xd = x.data();
    let mut opos = 0usize;
    for &v in xd {
        out[opos] = v;
        // advance the row-major input index and the output position
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            opos += out_stride_for_in_axis[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            opos -= out_stride_for_in_axis[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(oshape, out).expect("permute preserves numel")
}

fn flip_data<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = x.shape().to_vec();
    let (outer, len, inner) = axis_split(&shape, axis);
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    for o in 0..outer {
        for a in 0..len {
            let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
            let dst = &mut out[(o * len + (len - 1 - a)) * inner..(o * len + (len - a)) * inner];
            dst.copy_from_slice(src);
        }
    }
    Tensor::new(shape, out).expect("flip preserves shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), vals).unwrap()
    }

    #[test]
    fn linear_identity_matrix() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[2], &[1.0, 2.0]));
        let w = tape.leaf(&t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_scalar_hand_evaluation() {
        // [1,1] x [[2],[3]] + [1] = 1*2 + 1*3 + 1 = 6
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[2], &[1.0, 1.0]));
        let w = tape.leaf(&t64(&[2, 1], &[2.0, 3.0]));
        let b = tape.leaf(&t64(&[1], &[1.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn linear_zero_input_no_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::zeros(vec![3, 4]));
        let w = tape.leaf(&t64(&[4, 2], &[1.0; 8]));
        let y = tape.linear(x, w, None).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(vec![3]));
        let w = tape.leaf(&Tensor::zeros(vec![4, 2]));
        let err = tape.linear(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[4], &[0.0; 4]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_hand_evaluation() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[2], &[2.0f64.ln(), 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d, &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_symmetry_and_hand_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[2], &[0.0, 3.0f64.ln()]));
        let y = tape.sigmoid(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert!((d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn exp_at_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[1], &[0.0]));
        let y = tape.exp(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn backward_of_plain_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[3], &[1.0, -2.0, 0.5]).with_grad());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[1], &[3.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn disconnected_tensor_gets_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[2], &[1.0, 2.0]).with_grad());
        let unused = tape.leaf(&t64(&[2], &[5.0, 5.0]).with_grad());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[2], &[1.0, 1.0]).with_grad());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[2], &[1.0, 2.0]).with_grad());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_finite_output_is_an_operation_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t64(&[1], &[1.0]));
        let b = tape.leaf(&t64(&[1], &[0.0]));
        assert!(matches!(tape.div(a, b), Err(crate::error::Error::NonFinite { .. })));
    }

    #[test]
    fn trailing_broadcast_add() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t64(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let b = tape.leaf(&t64(&[3], &[10.0, 20.0, 30.0]));
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![2]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let f = tape.flip(x, 0).unwrap();
        assert_eq!(tape.value(f).data(), &[4.0, 5.0, 2.0, 3.0, 0.0, 1.0]);
        let ff = tape.flip(f, 0).unwrap();
        assert_eq!(tape.value(ff).data(), tape.value(x).data());
    }

    #[test]
    fn flip_single_entry_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[1, 3], &[1.0, 2.0, 3.0]));
        let f = tape.flip(x, 0).unwrap();
        assert_eq!(tape.value(f).data(), tape.value(x).data());
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let p = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(p), &[3, 2]);
        assert_eq!(tape.value(p).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let back = tape.permute(p, &[1, 0]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn concat_along_middle_axis() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t64(&[2, 1, 2], &[0.0, 1.0, 2.0, 3.0]));
        let b = tape.leaf(&t64(&[2, 2, 2], &[4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(
            tape.value(c).data(),
            &[0.0, 1.0, 4.0, 5.0, 6.0, 7.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]
        );
    }

    #[test]
    fn replay_reproduces_recorded_values_bit_identically() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[2, 3], &[0.3, -1.2, 0.7, 2.2, -0.4, 0.9]).with_grad());
        let w = tape.leaf(&t64(&[3, 3], &[0.1, 0.2, -0.3, 0.5, -0.5, 0.25, 0.7, 0.1, -0.9]));
        let h = tape.linear(x, w, None).unwrap();
        let a = tape.softmax(h, 1).unwrap();
        let s = tape.sigmoid(a).unwrap();
        let _ = tape.sum(s).unwrap();
        assert!(tape.replay_forward().unwrap());
    }

    #[test]
    fn matmul_agrees_with_hand_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let d = tape.matmul_nt(a, b).unwrap();
        // rows of a dotted with rows of b
        assert_eq!(tape.value(d).data(), &[17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        // 1x3x3 input, 1x1x2x2 kernel, stride 1, no padding
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let w = tape.leaf(&t64(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn upsample2_nearest() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[1, 1, 2], &[1.0, 2.0]));
        let y = tape.upsample2(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 4]);
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
