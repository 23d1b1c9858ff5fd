use std::rc::Rc;

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::{numel, Tensor};

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// `0.5 · (1 + tanh(c·(x + a·x³)))`, evaluated as a logistic of twice the
/// argument.
#[inline]
pub(crate) fn gelu_gate<T: Scalar>(x: T) -> T {
    let u = T::from_f64_lossy(GELU_C) * (x + T::from_f64_lossy(GELU_A) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

/// Splits a shape into (outer, axis length, inner) around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Whether `small` is a trailing suffix of `big` (leading-batch broadcast).
fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

pub(crate) fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut counter = vec![0usize; rank];
    let inner_len = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|i| src[base + i * inner_stride]));
        }
        // advance all but the innermost axis
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            counter[d] += 1;
            base += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Matrix product over the last two axes.
    ///
    /// `a` is `[batch.., m, k]`; `b` is either `[batch.., k, n]` with the same
    /// batch axes or a plain `[k, n]` matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand's last
    /// two axes (read through strides, no copy).
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let plan = MatmulPlan::new(&ash, &bsh, ta, tb).ok_or_else(|| Error::dim("matmul", &ash, &bsh))?;
        let mut out = vec![T::zero(); plan.batch * plan.m * plan.n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            plan.run(ad, bd, &mut out);
        }
        self.matmul_macs += (plan.batch * plan.m * plan.n * plan.k) as u64;
        let mut shape = ash[..ash.len() - 2].to_vec();
        shape.push(plan.m);
        shape.push(plan.n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Element-wise sum; `b` may omit leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if !is_suffix(ash, bsh) {
            return Err(Error::dim("add", ash, bsh));
        }
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for chunk in out.data_mut().chunks_exact_mut(bd.len()) {
            for (o, &y) in chunk.iter_mut().zip(bd) {
                *o += y;
            }
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Element-wise product; `b` may omit leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if !is_suffix(ash, bsh) {
            return Err(Error::dim("mul", ash, bsh));
        }
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for chunk in out.data_mut().chunks_exact_mut(bd.len()) {
            for (o, &y) in chunk.iter_mut().zip(bd) {
                *o *= y;
            }
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.needs_grad(&[a]);
        self.push(out, Op::Scale { a, s }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * gelu_gate(x));
        let rg = self.needs_grad(&[a]);
        self.push(out, Op::Gelu { a }, rg)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.value(a).clone();
        let d = out.data_mut();
        if inner == 1 {
            for row in d.chunks_exact_mut(len) {
                softmax_row(row);
            }
        } else {
            let mut buf = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    for (j, b) in buf.iter_mut().enumerate() {
                        *b = d[base + j * inner];
                    }
                    softmax_row(&mut buf);
                    for (j, &b) in buf.iter().enumerate() {
                        d[base + j * inner] = b;
                    }
                }
            }
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(out, Op::Softmax { a, axis }, rg))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("rank >= 1");
        for v in [gain, bias] {
            if self.shape(v) != [n] {
                return Err(Error::dim("layernorm", &shape, self.shape(v)));
            }
        }
        let nt = T::from_usize_lossy(n);
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let rows = xd.len() / n;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..n {
                let h = (row[i] - mean) * rs;
                xhat[r * n + i] = h;
                out[r * n + i] = h * gd[i] + bd[i];
            }
        }
        let rg = self.needs_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    /// Axis permutation; materializes a copy.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", &shape, perm));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.needs_grad(&[a]);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.numel() / outer;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("narrow", &shape, &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Narrow { a, axis, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.needs_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize_lossy(v.numel());
        let rg = self.needs_grad(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll { a }, rg)
    }

    /// Mean cross-entropy of `logits [B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_smoothed(logits, labels, T::zero())
    }

    /// Cross-entropy against `(1 - smoothing)·onehot + smoothing/C` targets.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, labels: &[usize], smoothing: T) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim("cross_entropy", &shape, &[labels.len()]));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Index {
                op: "cross_entropy",
                batch: i,
                index: l,
                bound: c,
            });
        }
        let ld = self.value(logits).data();
        let ct = T::from_usize_lossy(c);
        let mut probs = ld.to_vec();
        let mut total = T::zero();
        for (r, row) in probs.chunks_exact_mut(c).enumerate() {
            let src = &ld[r * c..(r + 1) * c];
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + src.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            let target_lp = src[labels[r]] - lse;
            let mean_lp = src.iter().map(|&v| v - lse).sum::<T>() / ct;
            total += -((T::one() - smoothing) * target_lp + smoothing * mean_lp);
            for (p, &v) in row.iter_mut().zip(src) {
                *p = (v - lse).exp();
            }
        }
        let loss = total / T::from_usize_lossy(b);
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                smoothing,
            },
            rg,
        ))
    }

    /// Dense per-image row gather: `x [B, P, L]`, `indices[b]` of equal
    /// length `k` → `[B, k, L]`. Gradients flow only to gathered rows.
    pub fn gather_rows(&mut self, x: Var, indices: &[Vec<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || indices.len() != shape[0] {
            return Err(Error::dim("gather_rows", &shape, &[indices.len()]));
        }
        let (b, p, l) = (shape[0], shape[1], shape[2]);
        let k = indices.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(Error::Contract("gather_rows with empty index list".into()));
        }
        let mut flat = Vec::with_capacity(b * k);
        let mut seen = vec![usize::MAX; p];
        for (bi, row) in indices.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Contract(format!(
                    "gather_rows: image {bi} has {} indices, expected {k}",
                    row.len()
                )));
            }
            for &i in row {
                if i >= p {
                    return Err(Error::Index {
                        op: "gather_rows",
                        batch: bi,
                        index: i,
                        bound: p,
                    });
                }
                if seen[i] == bi {
                    return Err(Error::Contract(format!(
                        "gather_rows: index {i} repeated within image {bi}"
                    )));
                }
                seen[i] = bi;
                flat.push(bi * p + i);
            }
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * k * l);
        for &row in &flat {
            out.extend_from_slice(&src[row * l..(row + 1) * l]);
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Tensor::new(&[b, k, l], out)?,
            Op::GatherRows {
                x,
                flat_index: flat,
            },
            rg,
        ))
    }

    /// Repeats `a` along a new leading axis of size `batch`.
    pub fn broadcast_batch(&mut self, a: Var, batch: usize) -> Result<Var> {
        if batch == 0 {
            return Err(Error::Contract("broadcast_batch to zero".into()));
        }
        let v = self.value(a);
        let mut shape = vec![batch];
        shape.extend_from_slice(v.shape());
        let mut out = Vec::with_capacity(v.numel() * batch);
        for _ in 0..batch {
            out.extend_from_slice(v.data());
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::BroadcastBatch { a }, rg))
    }

    /// Adds a gathered relative-bias term to attention logits.
    ///
    /// `logits` is `[B, H, k, k]`, `table` is `[R, H]`, and `rows` holds the
    /// table row for each `(b, i, j)` in row-major order (`B·k·k` entries).
    pub fn add_rel_bias(&mut self, logits: Var, table: Var, rows: Rc<Vec<u32>>) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let ts = self.shape(table).to_vec();
        if ls.len() != 4 || ts.len() != 2 || ts[1] != ls[1] || ls[2] != ls[3] {
            return Err(Error::dim("add_rel_bias", &ls, &ts));
        }
        let (b, h, k) = (ls[0], ls[1], ls[2]);
        if rows.len() != b * k * k {
            return Err(Error::dim("add_rel_bias", &ls, &[rows.len()]));
        }
        if let Some(&r) = rows.iter().find(|&&r| r as usize >= ts[0]) {
            return Err(Error::Index {
                op: "add_rel_bias",
                batch: 0,
                index: r as usize,
                bound: ts[0],
            });
        }
        let mut out = self.value(logits).clone();
        let td = self.value(table).data();
        let od = out.data_mut();
        let kk = k * k;
        for bi in 0..b {
            let r = &rows[bi * kk..(bi + 1) * kk];
            for hi in 0..h {
                let o = &mut od[(bi * h + hi) * kk..(bi * h + hi + 1) * kk];
                for (v, &row) in o.iter_mut().zip(r) {
                    *v += td[row as usize * h + hi];
                }
            }
        }
        let rg = self.needs_grad(&[logits, table]);
        Ok(self.push(out, Op::RelBias { logits, table, rows }, rg))
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Resolved batched-gemm layout for [`Tape::matmul_t`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_view: MatView,
    pub b_view: MatView,
    pub b_shared: bool,
}

impl MatmulPlan {
    pub fn new(ash: &[usize], bsh: &[usize], ta: bool, tb: bool) -> Option<Self> {
        if ash.len() < 2 || bsh.len() < 2 {
            return None;
        }
        let (ar, ac) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (br, bc) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let a_view = MatView {
            rows: ar,
            cols: ac,
            transposed: ta,
        };
        let b_view = MatView {
            rows: br,
            cols: bc,
            transposed: tb,
        };
        let (m, k) = a_view.logical();
        let (k2, n) = b_view.logical();
        if k != k2 {
            return None;
        }
        let a_batch = &ash[..ash.len() - 2];
        let b_batch = &bsh[..bsh.len() - 2];
        let b_shared = b_batch.is_empty();
        if !b_shared && a_batch != b_batch {
            return None;
        }
        Some(MatmulPlan {
            batch: numel(a_batch),
            m,
            k,
            n,
            a_view,
            b_view,
            b_shared,
        })
    }

    pub fn run<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.b_shared && !self.a_view.transposed {
            // fold the batch into the row dimension
            let av = MatView {
                rows: self.batch * m,
                cols: k,
                transposed: false,
            };
            gemm(a, av, b, self.b_view, out, T::zero());
            return;
        }
        for i in 0..self.batch {
            let bs = if self.b_shared { b } else { &b[i * k * n..(i + 1) * k * n] };
            gemm(
                &a[i * m * k..(i + 1) * m * k],
                self.a_view,
                bs,
                self.b_view,
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
    }
}
