use super::{Node, OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, strides, Element, MatView, Tensor};

/// Reductions used by the attention blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// `[C,H,W] -> [C]`, mean over H and W.
    SpatialAvg,
    /// `[C,H,W] -> [C]`, max over H and W.
    SpatialMax,
    /// `[C,H,W] -> [1,H,W]`, mean over C.
    ChannelAvg,
    /// `[C,H,W] -> [1,H,W]`, max over C.
    ChannelMax,
    /// Same reduction as `SpatialAvg`.
    GlobalAvg,
}

pub(super) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Gelu {
        x: Var,
        /// `tanh(u(x))` per element, reused by the backward pass.
        t: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Pool {
        x: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
    Bce {
        p: Var,
        target: T,
        eps: T,
    },
}

impl<T> Op<T> {
    pub(super) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Pool { .. } => OpKind::Pool,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::SumSquares { .. } => OpKind::SumSquares,
            Op::Bce { .. } => OpKind::Bce,
        }
    }

    pub(super) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::BatchMatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Scale { x, .. }
            | Op::Sigmoid { x }
            | Op::Tanh { x }
            | Op::Gelu { x, .. }
            | Op::Softmax { x, .. }
            | Op::Pool { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SumSquares { x } => vec![*x],
            Op::LayerNorm { x, gain, shift, .. } => vec![*x, *gain, *shift],
            Op::Conv2d { input, weight, bias } => vec![*input, *weight, *bias],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Bce { p, .. } => vec![*p],
        }
    }
}

/// How the right operand of a broadcasting binary op maps onto the left.
enum Broadcast {
    Same,
    /// `b` repeats with period `b.numel()` (matches a suffix of `a`'s shape).
    Suffix(usize),
    /// Each `b` element covers a run of `inner` consecutive `a` elements.
    Prefix(usize),
    /// Arbitrary pattern: explicit index per `a` element.
    General(Vec<usize>),
}

impl Broadcast {
    fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        if b.len() > a.len() {
            return Err(Error::shape(op, a, b));
        }
        let mut padded = vec![1; a.len() - b.len()];
        padded.extend_from_slice(b);
        for (&da, &db) in a.iter().zip(&padded) {
            if db != 1 && db != da {
                return Err(Error::shape(op, a, b));
            }
        }
        let bn: usize = padded.iter().product();
        let an: usize = a.iter().product();
        // Suffix: leading broadcast dims, then dims equal to `a`.
        let first_full = padded.iter().position(|&d| d != 1).unwrap_or(a.len());
        if padded[first_full..] == a[first_full..] {
            return Ok(Broadcast::Suffix(bn));
        }
        // Prefix: dims equal to `a`, then trailing broadcast dims.
        let last_full = padded.iter().rposition(|&d| d != 1).map_or(0, |i| i + 1);
        if padded[..last_full] == a[..last_full] && padded[last_full..].iter().all(|&d| d == 1) {
            return Ok(Broadcast::Prefix(an / bn));
        }
        let b_strides = strides(&padded);
        let mut map = Vec::with_capacity(an);
        let mut idx = vec![0usize; a.len()];
        for _ in 0..an {
            let off = idx
                .iter()
                .zip(&padded)
                .zip(&b_strides)
                .map(|((&i, &d), &s)| if d == 1 { 0 } else { i * s })
                .sum();
            map.push(off);
            for k in (0..a.len()).rev() {
                idx[k] += 1;
                if idx[k] < a[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(Broadcast::General(map))
    }

    /// Visit every `(a index, b index)` pair for an `a` of `n` elements.
    #[inline]
    fn for_each(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            Broadcast::Same => (0..n).for_each(|i| f(i, i)),
            Broadcast::Suffix(m) => {
                for base in (0..n).step_by(*m) {
                    for j in 0..*m {
                        f(base + j, j);
                    }
                }
            }
            Broadcast::Prefix(inner) => {
                for j in 0..n / inner {
                    for k in 0..*inner {
                        f(j * inner + k, j);
                    }
                }
            }
            Broadcast::General(map) => map.iter().enumerate().for_each(|(i, &j)| f(i, j)),
        }
    }
}

/// Source offset of every contiguous output block of a permutation, and the
/// block length. Trailing axes left in place form one block.
fn permute_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, usize) {
    let mut keep = shape.len();
    while keep > 0 && axes[keep - 1] == keep - 1 {
        keep -= 1;
    }
    let block: usize = shape[keep..].iter().product();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes[..keep].iter().map(|&a| shape[a]).collect();
    let perm_strides: Vec<usize> = axes[..keep].iter().map(|&a| in_strides[a]).collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; keep];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for k in (0..keep).rev() {
            idx[k] += 1;
            off += perm_strides[k];
            if idx[k] < out_shape[k] {
                break;
            }
            off -= perm_strides[k] * out_shape[k];
            idx[k] = 0;
        }
    }
    (map, block)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; noticeably cheaper than the libm routine.
fn fast_tanh<T: Element>(u: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_tanh<T: Element>(x: T) -> T {
    fast_tanh(T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x))
}

fn gelu_grad<T: Element>(x: T, t: T) -> T {
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn grad_slot<'g, T: Element>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

impl<T: Element> Tape<T> {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatView::new(self.value(a).data(), m, k),
            MatView::new(self.value(b).data(), k, n),
            T::zero(),
            &mut out,
        );
        self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b })
    }

    /// Batched `[B,m,k] x [B,k,n] -> [B,m,n]`; with `trans_b`, `b` is
    /// `[B,n,k]` and is used transposed.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if !ok || sa[2] != bk {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let av = MatView::new(&ad[i * m * k..(i + 1) * m * k], m, k);
            let bs = &bd[i * k * n..(i + 1) * k * n];
            let bv = if trans_b {
                MatView::new(bs, n, k).t()
            } else {
                MatView::new(bs, k, n)
            };
            gemm(av, bv, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        self.push(Tensor::new([batch, m, n], out)?, Op::BatchMatMul { a, b, trans_b })
    }

    /// `a + b` with `b` broadcast (numpy rules) onto `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = Broadcast::plan("add", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let (ad, bd) = (av.data(), bv.data());
        let mut data = Vec::with_capacity(ad.len());
        plan.for_each(ad.len(), |i, j| data.push(ad[i] + bd[j]));
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, Op::Add { a, b })
    }

    /// `a * b` elementwise with `b` broadcast (numpy rules) onto `a`'s shape.
    /// A channel vector `[C]` against `[C,H,W]` must first be reshaped to
    /// `[C,1,1]`; see [`Tape::broadcast_mul`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = Broadcast::plan("mul", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let (ad, bd) = (av.data(), bv.data());
        let mut data = Vec::with_capacity(ad.len());
        plan.for_each(ad.len(), |i, j| data.push(ad[i] * bd[j]));
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, Op::Mul { a, b })
    }

    /// Attention-map multiply: `weights` is either a channel vector `[C]`
    /// (scales each channel of `x: [C,H,W]`) or a spatial map `[1,H,W]`
    /// (scales every channel at each position).
    pub fn broadcast_mul(&mut self, weights: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(weights).to_vec(), self.shape(x).to_vec());
        if sx.len() != 3 {
            return Err(Error::shape("broadcast_mul", &sw, &sx));
        }
        let w = match sw.as_slice() {
            [c] if *c == sx[0] => self.reshape(weights, [sx[0], 1, 1])?,
            [1, h, w] if *h == sx[1] && *w == sx[2] => weights,
            _ => return Err(Error::shape("broadcast_mul", &sw, &sx)),
        };
        self.mul(x, w)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let t: Vec<T> = xv.data().iter().map(|&v| gelu_tanh(v)).collect();
        let data = xv
            .data()
            .iter()
            .zip(&t)
            .map(|(&v, &th)| T::lit(0.5) * v * (T::one() + th))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::Gelu { x, t })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(src[at(j)]));
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis })
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let src = self.value(x).data();
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let dn = T::from_usize(d).expect("dim");
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + s[j];
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            },
        )
    }

    /// Same-padded cross-correlation: `[C_in,H,W] * [C_out,C_in,k,k] + [C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 3 || sw.len() != 4 {
            return Err(Error::shape("conv2d", si, sw));
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, k) = (sw[0], sw[2]);
        if sw[1] != c_in {
            return Err(Error::shape("conv2d", si, sw));
        }
        if sw[3] != k || k % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be square and odd, got {sw:?}"),
            ));
        }
        if sb != [c_out] {
            return Err(Error::shape("conv2d", sw, sb));
        }
        let (xd, wd, bd) = (
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let hw = h * w;
        let mut out = vec![T::zero(); c_out * hw];
        for co in 0..c_out {
            out[co * hw..(co + 1) * hw].fill(bd[co]);
        }
        if k == 1 {
            gemm(
                MatView::new(wd, c_out, c_in),
                MatView::new(xd, c_in, hw),
                T::one(),
                &mut out,
            );
        } else {
            let p = (k / 2) as isize;
            for co in 0..c_out {
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wd[((co * c_in + ci) * k + ky) * k + kx];
                            let (dy, dx) = (ky as isize - p, kx as isize - p);
                            for y in 0..h {
                                let sy = y as isize + dy;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for x in 0..w {
                                    let sx = x as isize + dx;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    out[co * hw + y * w + x] += wv * xd[ci * hw + sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(Tensor::new([c_out, h, w], out)?, Op::Conv2d { input, weight, bias })
    }

    /// Spatial or channel pooling of a `[C,H,W]` map. Max pooling routes its
    /// gradient to the first maximal element.
    pub fn pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid("pool", format!("expected [C,H,W], got {shape:?}")));
        }
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let src = self.value(x).data();
        let mut argmax = Vec::new();
        let value = match mode {
            PoolMode::SpatialAvg | PoolMode::GlobalAvg => {
                let n = T::from_usize(hw).expect("size");
                let data = (0..c)
                    .map(|ch| src[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() / n)
                    .collect();
                Tensor::new([c], data)?
            }
            PoolMode::SpatialMax => {
                let mut data = Vec::with_capacity(c);
                for ch in 0..c {
                    let mut best = ch * hw;
                    for i in ch * hw + 1..(ch + 1) * hw {
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    data.push(src[best]);
                }
                Tensor::new([c], data)?
            }
            PoolMode::ChannelAvg => {
                let n = T::from_usize(c).expect("size");
                let data = (0..hw)
                    .map(|p| (0..c).map(|ch| src[ch * hw + p]).sum::<T>() / n)
                    .collect();
                Tensor::new([1, shape[1], shape[2]], data)?
            }
            PoolMode::ChannelMax => {
                let mut data = Vec::with_capacity(hw);
                for p in 0..hw {
                    let mut best = p;
                    for ch in 1..c {
                        if src[ch * hw + p] > src[best] {
                            best = ch * hw + p;
                        }
                    }
                    argmax.push(best);
                    data.push(src[best]);
                }
                Tensor::new([1, shape[1], shape[2]], data)?
            }
        };
        self.push(value, Op::Pool { x, mode, argmax })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape { x })
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("axes {axes:?} are not a permutation for shape {shape:?}"),
            ));
        }
        let (map, block) = permute_map(&shape, axes);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len());
        for &i in &map {
            data.extend_from_slice(&src[i..i + block]);
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        self.push(Tensor::new(out_shape, data)?, Op::Permute { x, axes: axes.to_vec() })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(Tensor::new(out_shape, data)?, Op::Narrow { x, axis, start })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).expect("size");
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { x })
    }

    /// Binary cross-entropy of a scalar probability against a 0/1 target,
    /// with `p` clamped to `[eps, 1-eps]`.
    pub fn bce(&mut self, p: Var, target: T, eps: T) -> Result<Var> {
        if self.value(p).numel() != 1 {
            return Err(Error::invalid("bce", "probability must be a scalar"));
        }
        let pc = self.value(p).item().max(eps).min(T::one() - eps);
        let loss = -(target * pc.ln() + (T::one() - target) * (T::one() - pc).ln());
        self.push(Tensor::scalar(loss), Op::Bce { p, target, eps })
    }

    pub(super) fn backprop(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let dyv = MatView::new(dy, m, n);
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    gemm(dyv, MatView::new(bv.data(), k, n).t(), T::one(), ga);
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    gemm(MatView::new(av.data(), m, k).t(), dyv, T::one(), gb);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                for i in 0..batch {
                    let dyv = MatView::new(&dy[i * m * n..(i + 1) * m * n], m, n);
                    let a_i = MatView::new(&av.data()[i * m * k..(i + 1) * m * k], m, k);
                    let b_s = &bv.data()[i * k * n..(i + 1) * k * n];
                    if let Some(ga) = grad_slot(grads, nodes, *a) {
                        // y = a·b  -> da = dy·bᵀ ;  y = a·bᵀ -> da = dy·b
                        let bt = if *trans_b {
                            MatView::new(b_s, n, k)
                        } else {
                            MatView::new(b_s, k, n).t()
                        };
                        gemm(dyv, bt, T::one(), &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                    if let Some(gb) = grad_slot(grads, nodes, *b) {
                        let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(dyv.t(), a_i, T::one(), gb_i);
                        } else {
                            gemm(a_i.t(), dyv, T::one(), gb_i);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    ga.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                let plan = Broadcast::plan("add", nodes[a.0].value.shape(), nodes[b.0].value.shape())
                    .expect("checked in forward");
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    plan.for_each(dy.len(), |i, j| gb[j] += dy[i]);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let plan = Broadcast::plan("mul", av.shape(), bv.shape()).expect("checked in forward");
                let (ad, bd) = (av.data(), bv.data());
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    plan.for_each(dy.len(), |i, j| ga[i] += dy[i] * bd[j]);
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    plan.for_each(dy.len(), |i, j| gb[j] += dy[i] * ad[i]);
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    gx.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * *c);
                }
            }
            Op::Sigmoid { x } => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for ((g, &d), &y) in gx.iter_mut().zip(dy).zip(out.data()) {
                        *g += d * y * (T::one() - y);
                    }
                }
            }
            Op::Tanh { x } => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for ((g, &d), &y) in gx.iter_mut().zip(dy).zip(out.data()) {
                        *g += d * (T::one() - y * y);
                    }
                }
            }
            Op::Gelu { x, t } => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for (((g, &d), &v), &th) in gx.iter_mut().zip(dy).zip(xv).zip(t) {
                        *g += d * gelu_grad(v, th);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (dy[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            } => {
                let g = nodes[gain.0].value.data();
                let d = g.len();
                let rows = dy.len() / d;
                let dn = T::from_usize(d).expect("dim");
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    let mut gh = vec![T::zero(); d];
                    for r in 0..rows {
                        let (dyr, hr) = (&dy[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        for j in 0..d {
                            gh[j] = dyr[j] * g[j];
                        }
                        let mean_g = gh.iter().copied().sum::<T>() / dn;
                        let mean_gh = gh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (gh[j] - mean_g - hr[j] * mean_gh);
                        }
                    }
                }
                if let Some(gg) = grad_slot(grads, nodes, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += dy[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gs) = grad_slot(grads, nodes, *shift) {
                    for r in 0..rows {
                        for j in 0..d {
                            gs[j] += dy[r * d + j];
                        }
                    }
                }
            }
            Op::Conv2d { input, weight, bias } => {
                let (xv, wv) = (&nodes[input.0].value, &nodes[weight.0].value);
                let (c_in, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
                let hw = h * w;
                if let Some(gb) = grad_slot(grads, nodes, *bias) {
                    for co in 0..c_out {
                        gb[co] += dy[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
                    }
                }
                if k == 1 {
                    let dyv = MatView::new(dy, c_out, hw);
                    if let Some(gw) = grad_slot(grads, nodes, *weight) {
                        gemm(dyv, MatView::new(xv.data(), c_in, hw).t(), T::one(), gw);
                    }
                    if let Some(gx) = grad_slot(grads, nodes, *input) {
                        gemm(MatView::new(wv.data(), c_out, c_in).t(), dyv, T::one(), gx);
                    }
                    return;
                }
                let p = (k / 2) as isize;
                let (xd, wd) = (xv.data(), wv.data());
                let needs_w = nodes[weight.0].needs_grad;
                let needs_x = nodes[input.0].needs_grad;
                let mut gw = needs_w.then(|| vec![T::zero(); wd.len()]);
                let mut gx = needs_x.then(|| vec![T::zero(); xd.len()]);
                for co in 0..c_out {
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let widx = ((co * c_in + ci) * k + ky) * k + kx;
                                let (oy, ox) = (ky as isize - p, kx as isize - p);
                                let mut acc_w = T::zero();
                                for y in 0..h {
                                    let sy = y as isize + oy;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for x in 0..w {
                                        let sx = x as isize + ox;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        let d = dy[co * hw + y * w + x];
                                        let src = ci * hw + sy as usize * w + sx as usize;
                                        acc_w += d * xd[src];
                                        if let Some(gx) = gx.as_mut() {
                                            gx[src] += d * wd[widx];
                                        }
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[widx] += acc_w;
                                }
                            }
                        }
                    }
                }
                if let (Some(local), Some(slot)) = (gw, grad_slot(grads, nodes, *weight)) {
                    slot.iter_mut().zip(local).for_each(|(g, v)| *g += v);
                }
                if let (Some(local), Some(slot)) = (gx, grad_slot(grads, nodes, *input)) {
                    slot.iter_mut().zip(local).for_each(|(g, v)| *g += v);
                }
            }
            Op::Pool { x, mode, argmax } => {
                let shape = nodes[x.0].value.shape();
                let (c, hw) = (shape[0], shape[1] * shape[2]);
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    match mode {
                        PoolMode::SpatialAvg | PoolMode::GlobalAvg => {
                            let n = T::from_usize(hw).expect("size");
                            for ch in 0..c {
                                let d = dy[ch] / n;
                                gx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|g| *g += d);
                            }
                        }
                        PoolMode::ChannelAvg => {
                            let n = T::from_usize(c).expect("size");
                            for ch in 0..c {
                                for p in 0..hw {
                                    gx[ch * hw + p] += dy[p] / n;
                                }
                            }
                        }
                        PoolMode::SpatialMax | PoolMode::ChannelMax => {
                            for (&src, &d) in argmax.iter().zip(dy) {
                                gx[src] += d;
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    gx.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::Permute { x, axes } => {
                let (map, block) = permute_map(nodes[x.0].value.shape(), axes);
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for (&src, d) in map.iter().zip(dy.chunks_exact(block)) {
                        gx[src..src + block].iter_mut().zip(d).for_each(|(g, &v)| *g += v);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    if let Some(gv) = grad_slot(grads, nodes, v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for (g, &d) in gv[dst..dst + len * inner].iter_mut().zip(&dy[src..src + len * inner]) {
                                *g += d;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let len = out.shape()[*axis];
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for (g, &d) in gx[dst..dst + len * inner].iter_mut().zip(&dy[src..src + len * inner]) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    gx.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::Mean { x } => {
                let n = T::from_usize(nodes[x.0].value.numel()).expect("size");
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    gx.iter_mut().for_each(|g| *g += dy[0] / n);
                }
            }
            Op::SumSquares { x } => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for (g, &v) in gx.iter_mut().zip(xv) {
                        *g += dy[0] * (v + v);
                    }
                }
            }
            Op::Bce { p, target, eps } => {
                let pv = nodes[p.0].value.item();
                if let Some(gp) = grad_slot(grads, nodes, *p) {
                    // Clamped region has zero slope.
                    if pv > *eps && pv < T::one() - *eps {
                        gp[0] += dy[0] * (pv - *target) / (pv * (T::one() - pv));
                    }
                }
            }
        }
    }
}
