//! Vector-Jacobian products for every recorded operation.

use super::ops::{gelu_gate, permute_data, split_axis, MatmulPlan, GELU_A, GELU_C};
use super::{Op, Tape, Var};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;

fn accumulate<T: Scalar>(tape: &Tape<T>, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
    if !tape.node(v.0).requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => {
            let shape = tape.shape(v).to_vec();
            *slot = Some(Tensor::new(&shape, g).expect("gradient shape"));
        }
    }
}

fn wants<T: Scalar>(tape: &Tape<T>, v: Var) -> bool {
    tape.node(v.0).requires_grad
}

pub(super) fn propagate<T: Scalar>(tape: &Tape<T>, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let node = tape.node(idx);
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => matmul_backward(tape, *a, *b, *ta, *tb, gd, grads),
        Op::Add { a, b } => {
            if wants(tape, *b) {
                let n = tape.value(*b).numel();
                let mut gb = vec![T::zero(); n];
                for chunk in gd.chunks_exact(n) {
                    for (o, &v) in gb.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                accumulate(tape, grads, *b, gb);
            }
            accumulate(tape, grads, *a, gd.to_vec());
        }
        Op::Mul { a, b } => {
            let av = tape.value(*a).data();
            let bv = tape.value(*b).data();
            let n = bv.len();
            if wants(tape, *a) {
                let ga: Vec<T> = gd
                    .chunks_exact(n)
                    .flat_map(|c| c.iter().zip(bv).map(|(&g, &y)| g * y))
                    .collect();
                accumulate(tape, grads, *a, ga);
            }
            if wants(tape, *b) {
                let mut gb = vec![T::zero(); n];
                for (gc, ac) in gd.chunks_exact(n).zip(av.chunks_exact(n)) {
                    for ((o, &g), &x) in gb.iter_mut().zip(gc).zip(ac) {
                        *o += g * x;
                    }
                }
                accumulate(tape, grads, *b, gb);
            }
        }
        Op::Scale { a, s } => accumulate(tape, grads, *a, gd.iter().map(|&v| v * *s).collect()),
        Op::Gelu { a } => {
            let c = T::from_f64_lossy(GELU_C);
            let k3 = T::from_f64_lossy(3.0 * GELU_A);
            let two = T::from_f64_lossy(2.0);
            let ga = tape
                .value(*a)
                .data()
                .iter()
                .zip(gd)
                .map(|(&x, &g)| {
                    let s = gelu_gate(x);
                    // d/dx [x·s] with s' = 2·s·(1−s)·c·(1 + 3a·x²)
                    g * (s + x * two * s * (T::one() - s) * c * (T::one() + k3 * x * x))
                })
                .collect();
            accumulate(tape, grads, *a, ga);
        }
        Op::Softmax { a, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            let mut ga = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: T = (0..len).map(|j| gd[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..len {
                        let p = base + j * inner;
                        ga[p] = y[p] * (gd[p] - dot);
                    }
                }
            }
            accumulate(tape, grads, *a, ga);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gn = tape.value(*gain).data();
            let n = gn.len();
            let nt = T::from_usize_lossy(n);
            if wants(tape, *gain) || wants(tape, *bias) {
                let mut gg = vec![T::zero(); n];
                let mut gb = vec![T::zero(); n];
                for (gr, hr) in gd.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for i in 0..n {
                        gg[i] += gr[i] * hr[i];
                        gb[i] += gr[i];
                    }
                }
                accumulate(tape, grads, *gain, gg);
                accumulate(tape, grads, *bias, gb);
            }
            if wants(tape, *x) {
                let mut gx = vec![T::zero(); gd.len()];
                let mut scaled = vec![T::zero(); n];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &gd[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in 0..n {
                        scaled[i] = gr[i] * gn[i];
                        m1 += scaled[i];
                        m2 += scaled[i] * hr[i];
                    }
                    m1 /= nt;
                    m2 /= nt;
                    for i in 0..n {
                        gx[r * n + i] = rs * (scaled[i] - m1 - hr[i] * m2);
                    }
                }
                accumulate(tape, grads, *x, gx);
            }
        }
        Op::Reshape { a } => accumulate(tape, grads, *a, gd.to_vec()),
        Op::Permute { a, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (ga, _) = permute_data(gd, g.shape(), &inv);
            accumulate(tape, grads, *a, ga);
        }
        Op::Concat { parts, axis } => {
            let outer = split_axis(g.shape(), *axis).0;
            let mut offset = 0;
            let total_chunk = g.numel() / outer;
            for &p in parts {
                let chunk = tape.value(p).numel() / outer;
                if wants(tape, p) {
                    let mut gp = Vec::with_capacity(chunk * outer);
                    for o in 0..outer {
                        let base = o * total_chunk + offset;
                        gp.extend_from_slice(&gd[base..base + chunk]);
                    }
                    accumulate(tape, grads, p, gp);
                }
                offset += chunk;
            }
        }
        Op::Narrow { a, axis, start } => {
            if !wants(tape, *a) {
                return;
            }
            let src_shape = tape.shape(*a);
            let (outer, full, inner) = split_axis(src_shape, *axis);
            let len = g.shape()[*axis];
            let slot = grads[a.0].get_or_insert_with(|| Tensor::zeros(src_shape));
            let ga = slot.data_mut();
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                for (d, &v) in ga[dst..dst + len * inner].iter_mut().zip(&gd[o * len * inner..(o + 1) * len * inner]) {
                    *d += v;
                }
            }
        }
        Op::SumAll { a } => {
            let n = tape.value(*a).numel();
            accumulate(tape, grads, *a, vec![gd[0]; n]);
        }
        Op::MeanAll { a } => {
            let n = tape.value(*a).numel();
            accumulate(tape, grads, *a, vec![gd[0] / T::from_usize_lossy(n); n]);
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            smoothing,
        } => {
            let c = tape.shape(*logits)[1];
            let ct = T::from_usize_lossy(c);
            let scale = gd[0] / T::from_usize_lossy(labels.len());
            let mut gl = probs.clone();
            for (row, &label) in gl.chunks_exact_mut(c).zip(labels) {
                for (j, v) in row.iter_mut().enumerate() {
                    let mut target = *smoothing / ct;
                    if j == label {
                        target += T::one() - *smoothing;
                    }
                    *v = (*v - target) * scale;
                }
            }
            accumulate(tape, grads, *logits, gl);
        }
        Op::GatherRows { x, flat_index, .. } => {
            let l = *g.shape().last().expect("rank 3");
            let mut gx = vec![T::zero(); tape.value(*x).numel()];
            for (j, &row) in flat_index.iter().enumerate() {
                let dst = &mut gx[row * l..(row + 1) * l];
                for (o, &v) in dst.iter_mut().zip(&gd[j * l..(j + 1) * l]) {
                    *o += v;
                }
            }
            accumulate(tape, grads, *x, gx);
        }
        Op::BroadcastBatch { a } => {
            let n = tape.value(*a).numel();
            let mut ga = vec![T::zero(); n];
            for chunk in gd.chunks_exact(n) {
                for (o, &v) in ga.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            accumulate(tape, grads, *a, ga);
        }
        Op::RelBias { logits, table, rows } => {
            if wants(tape, *table) {
                let ls = g.shape();
                let (b, h, k) = (ls[0], ls[1], ls[2]);
                let kk = k * k;
                let mut gt = vec![T::zero(); tape.value(*table).numel()];
                for bi in 0..b {
                    let r = &rows[bi * kk..(bi + 1) * kk];
                    for hi in 0..h {
                        let gs = &gd[(bi * h + hi) * kk..(bi * h + hi + 1) * kk];
                        for (&v, &row) in gs.iter().zip(r) {
                            gt[row as usize * h + hi] += v;
                        }
                    }
                }
                accumulate(tape, grads, *table, gt);
            }
            accumulate(tape, grads, *logits, gd.to_vec());
        }
    }
}

fn matmul_backward<T: Scalar>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    gd: &[T],
    grads: &mut [Option<Tensor<T>>],
) {
    let plan = MatmulPlan::new(tape.shape(a), tape.shape(b), ta, tb).expect("validated in forward");
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let ad = tape.value(a).data();
    let bd = tape.value(b).data();
    let g_view = |transposed| MatView {
        rows: m,
        cols: n,
        transposed,
    };
    let a_as = |transposed| MatView {
        rows: plan.a_view.rows,
        cols: plan.a_view.cols,
        transposed,
    };
    let b_as = |transposed| MatView {
        rows: plan.b_view.rows,
        cols: plan.b_view.cols,
        transposed,
    };

    if wants(tape, a) {
        let mut ga = vec![T::zero(); ad.len()];
        if plan.b_shared && !ta {
            // dA = dC · op(B)^T over the folded batch
            let gv = MatView {
                rows: plan.batch * m,
                cols: n,
                transposed: false,
            };
            gemm(gd, gv, bd, b_as(!tb), &mut ga, T::zero());
        } else {
            for i in 0..plan.batch {
                let bs = if plan.b_shared { bd } else { &bd[i * k * n..(i + 1) * k * n] };
                let gs = &gd[i * m * n..(i + 1) * m * n];
                let out = &mut ga[i * m * k..(i + 1) * m * k];
                if ta {
                    // stored A is k×m: dA = op(B) · dC^T
                    gemm(bs, b_as(tb), gs, g_view(true), out, T::zero());
                } else {
                    gemm(gs, g_view(false), bs, b_as(!tb), out, T::zero());
                }
            }
        }
        accumulate(tape, grads, a, ga);
    }

    if wants(tape, b) {
        let mut gb = vec![T::zero(); bd.len()];
        if plan.b_shared && !ta {
            let av = MatView {
                rows: plan.batch * m,
                cols: k,
                transposed: false,
            };
            let gv = MatView {
                rows: plan.batch * m,
                cols: n,
                transposed: false,
            };
            if tb {
                gemm(gd, MatView { transposed: true, ..gv }, ad, av, &mut gb, T::zero());
            } else {
                gemm(ad, MatView { transposed: true, ..av }, gd, gv, &mut gb, T::zero());
            }
        } else {
            for i in 0..plan.batch {
                let as_ = &ad[i * m * k..(i + 1) * m * k];
                let gs = &gd[i * m * n..(i + 1) * m * n];
                let (out, beta) = if plan.b_shared {
                    (&mut gb[..], if i == 0 { T::zero() } else { T::one() })
                } else {
                    (&mut gb[i * k * n..(i + 1) * k * n], T::zero())
                };
                if tb {
                    // stored B is n×k: dB = dC^T · op(A)
                    gemm(gs, g_view(true), as_, a_as(ta), out, beta);
                } else {
                    gemm(as_, a_as(!ta), gs, g_view(false), out, beta);
                }
            }
        }
        accumulate(tape, grads, b, gb);
    }
}
