//! Finite-difference gradient checks: analytic f32 gradients against central
//! differences of the same graph evaluated in f64.

use std::rc::Rc;

use pss_core::sampling::{self, SortSpec};
use pss_core::vit::{RelBiasIndex, ViT, ViTConfig};
use pss_core::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;

trait Case {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: &[Var]) -> Var;
}

macro_rules! case {
    (|$t:ident, $x:ident| $body:expr) => {{
        struct C;
        impl Case for C {
            #[allow(unused_variables)]
            fn apply<T: Scalar>(&self, $t: &mut Tape<T>, $x: &[Var]) -> Var {
                $body
            }
        }
        C
    }};
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `sum(f(x) ⊙ w)` for a fixed random `w`, so every output entry matters.
fn loss<T: Scalar>(case: &impl Case, inputs: &[Tensor<f64>], w_seed: u64) -> (Tape<T>, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.cast())).collect();
    let out = case.apply(&mut tape, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(w_seed);
    let w = rand_tensor(&mut rng, tape.shape(out));
    let w = tape.constant(w.cast());
    let prod = tape.mul(out, w).unwrap();
    let l = tape.sum(prod);
    (tape, vars, l)
}

fn loss_value(case: &impl Case, inputs: &[Tensor<f64>], w_seed: u64) -> f64 {
    let (tape, _, l) = loss::<f64>(case, inputs, w_seed);
    tape.value(l).data()[0]
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(TOL)
}

/// Checks up to `samples` coordinates of every input listed in `wrt`.
fn check(name: &str, case: impl Case, inputs: Vec<Tensor<f64>>, wrt: &[usize], samples: usize) -> Result<(), String> {
    let w_seed = 99;
    let (tape, vars, l) = loss::<f32>(&case, &inputs, w_seed);
    let grads = tape.backward(l).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &i in wrt {
        let g = grads.wrt(vars[i]).expect("input gradient").cast::<f64>();
        let n = inputs[i].numel();
        let coords: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.gen_range(0..n)).collect()
        };
        for c in coords {
            let mut plus = inputs.clone();
            plus[i].data_mut()[c] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[c] -= H;
            let fd = (loss_value(&case, &plus, w_seed) - loss_value(&case, &minus, w_seed)) / (2.0 * H);
            let an = g.data()[c];
            if rel_err(an, fd) > TOL {
                return Err(format!("{name}: input {i} coord {c}: analytic {an} vs numeric {fd}"));
            }
        }
    }
    Ok(())
}

pub fn matmul_plain_and_transposed() -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    check("matmul", case!(|t, x| t.matmul(x[0], x[1]).unwrap()), vec![rand_tensor(&mut r, &[4, 5]), rand_tensor(&mut r, &[5, 3])], &[0, 1], 64)?;
    check(
        "matmul batched",
        case!(|t, x| t.matmul(x[0], x[1]).unwrap()),
        vec![rand_tensor(&mut r, &[2, 3, 4, 5]), rand_tensor(&mut r, &[2, 3, 5, 2])],
        &[0, 1],
        64,
    )?;
    check(
        "matmul shared rhs",
        case!(|t, x| t.matmul(x[0], x[1]).unwrap()),
        vec![rand_tensor(&mut r, &[3, 4, 5]), rand_tensor(&mut r, &[5, 2])],
        &[0, 1],
        64,
    )?;
    check(
        "matmul a·bᵀ",
        case!(|t, x| t.matmul_t(x[0], x[1], false, true).unwrap()),
        vec![rand_tensor(&mut r, &[2, 4, 5]), rand_tensor(&mut r, &[2, 3, 5])],
        &[0, 1],
        64,
    )?;
    check(
        "matmul aᵀ·b",
        case!(|t, x| t.matmul_t(x[0], x[1], true, false).unwrap()),
        vec![rand_tensor(&mut r, &[5, 4]), rand_tensor(&mut r, &[5, 3])],
        &[0, 1],
        64,
    )
}

pub fn elementwise_ops() -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut r, &[3, 4]);
    let b = rand_tensor(&mut r, &[3, 4]);
    let row = rand_tensor(&mut r, &[4]);
    check("add", case!(|t, x| t.add(x[0], x[1]).unwrap()), vec![a.clone(), b.clone()], &[0, 1], 64)?;
    check("add broadcast", case!(|t, x| t.add(x[0], x[1]).unwrap()), vec![a.clone(), row.clone()], &[0, 1], 64)?;
    check("mul", case!(|t, x| t.mul(x[0], x[1]).unwrap()), vec![a.clone(), b.clone()], &[0, 1], 64)?;
    check("mul broadcast", case!(|t, x| t.mul(x[0], x[1]).unwrap()), vec![a.clone(), row], &[0, 1], 64)?;
    check("scale", case!(|t, x| t.scale(x[0], T::from_f64_lossy(-1.7))), vec![a.clone()], &[0], 64)?;
    let wide = Tensor::from_fn(&[2, 20], |i| i as f64 * 0.3 - 3.0);
    check("gelu", case!(|t, x| t.gelu(x[0])), vec![wide, a], &[0], 64)
}

pub fn softmax_and_layernorm() -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    check("softmax last", case!(|t, x| t.softmax(x[0], 1).unwrap()), vec![rand_tensor(&mut r, &[3, 7])], &[0], 64)?;
    check("softmax inner", case!(|t, x| t.softmax(x[0], 0).unwrap()), vec![rand_tensor(&mut r, &[3, 7])], &[0], 64)?;
    check(
        "softmax 4d",
        case!(|t, x| t.softmax(x[0], 3).unwrap()),
        vec![rand_tensor(&mut r, &[2, 2, 3, 5])],
        &[0],
        64,
    )?;
    let x = rand_tensor(&mut r, &[4, 6]);
    let g = Tensor::from_fn(&[6], |i| 0.5 + 0.1 * i as f64);
    let b = rand_tensor(&mut r, &[6]);
    check(
        "layernorm",
        case!(|t, x| t.layernorm(x[0], x[1], x[2], T::from_f64_lossy(1e-5)).unwrap()),
        vec![x, g, b],
        &[0, 1, 2],
        64,
    )
}

pub fn shape_ops() -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut r, &[2, 3, 4]);
    check("reshape", case!(|t, x| t.reshape(x[0], &[6, 4]).unwrap()), vec![x.clone()], &[0], 64)?;
    check("transpose", case!(|t, x| t.transpose(x[0]).unwrap()), vec![x.clone()], &[0], 64)?;
    check("permute", case!(|t, x| t.permute(x[0], &[2, 0, 1]).unwrap()), vec![x.clone()], &[0], 64)?;
    check(
        "concat",
        case!(|t, x| t.concat(&[x[0], x[1]], 1).unwrap()),
        vec![x.clone(), rand_tensor(&mut r, &[2, 2, 4])],
        &[0, 1],
        64,
    )?;
    check("narrow", case!(|t, x| t.narrow(x[0], 2, 1, 2).unwrap()), vec![x.clone()], &[0], 64)?;
    check("sum", case!(|t, x| t.sum(x[0])), vec![x.clone()], &[0], 64)?;
    check("mean", case!(|t, x| t.mean(x[0])), vec![x.clone()], &[0], 64)?;
    check("broadcast_batch", case!(|t, x| t.broadcast_batch(x[0], 3).unwrap()), vec![rand_tensor(&mut r, &[2, 4])], &[0], 64)
}

pub fn cross_entropy_plain_and_smoothed() -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let logits = rand_tensor(&mut r, &[4, 5]);
    check("cross_entropy", case!(|t, x| t.cross_entropy(x[0], &[0, 3, 4, 1]).unwrap()), vec![logits.clone()], &[0], 64)?;
    check(
        "cross_entropy smoothed",
        case!(|t, x| t.cross_entropy_smoothed(x[0], &[2, 2, 0, 1], T::from_f64_lossy(0.1)).unwrap()),
        vec![logits],
        &[0],
        64,
    )
}

pub fn gather_rows_kept_match_and_dropped_are_zero() -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut r, &[3, 6, 4]);
    check(
        "gather_rows",
        case!(|t, x| t.gather_rows(x[0], &[vec![0, 5, 2], vec![0, 1, 3], vec![4, 0, 2]]).unwrap()),
        vec![x.clone()],
        &[0],
        128,
    )?;
    let mut tape = Tape::<f32>::new();
    let v = tape.leaf(x.cast());
    let kept = vec![vec![0, 5, 2], vec![0, 1, 3], vec![4, 0, 2]];
    let y = tape.gather_rows(v, &kept).unwrap();
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    let g = g.wrt(v).unwrap();
    for (b, k) in kept.iter().enumerate() {
        for p in 0..6 {
            let row = &g.data()[(b * 6 + p) * 4..(b * 6 + p + 1) * 4];
            if k.contains(&p) {
                if !row.iter().all(|&v| v == 1.0) {
                    return Err(format!("kept row {b},{p} has gradient {row:?}"));
                }
            } else if !row.iter().all(|&v| v.to_bits() == 0) {
                return Err(format!("dropped row {b},{p} not bitwise zero"));
            }
        }
    }
    Ok(())
}

pub fn relative_bias_gather() -> Result<(), String> {
    let idx = RelBiasIndex::new(3);
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let kept = vec![vec![0, 4, 7, 2], vec![0, 9, 1, 3]];
    let rows = idx.gather(&kept);
    struct C(Rc<Vec<u32>>);
    impl Case for C {
        fn apply<T: Scalar>(&self, t: &mut Tape<T>, x: &[Var]) -> Var {
            t.add_rel_bias(x[0], x[1], self.0.clone()).unwrap()
        }
    }
    check(
        "add_rel_bias",
        C(rows),
        vec![rand_tensor(&mut r, &[2, 2, 4, 4]), rand_tensor(&mut r, &[idx.table_rows(), 2])],
        &[0, 1],
        256,
    )
}

fn toy_config() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        channels: 3,
        embed_dim: 64,
        depth: 2,
        heads: 4,
        mlp_ratio: 4.0,
        num_classes: 4,
        use_rel_bias: true,
        use_abs_pos: true,
    }
}

fn vit_loss<T: Scalar>(model: &ViT<T>, images: &Tensor<f64>, labels: &[usize], rho: f64) -> (Tape<T>, Var) {
    let mut tape = Tape::new();
    let tokens = model.embed(&mut tape, &images.cast()).unwrap();
    let batch = sampling::sample(&mut tape, tokens, rho, SortSpec::random(11), 0).unwrap();
    let logits = model.forward(&mut tape, &batch).unwrap();
    let l = tape.cross_entropy(logits, labels).unwrap();
    (tape, l)
}

/// Full toy model, 20 sampled coordinates of every parameter.
pub fn full_vit(rho: f64) -> Result<(), String> {
    let cfg = toy_config();
    let mut model = ViT::<f32>::new(cfg.clone(), 3).unwrap();
    // larger weights than the default init so gradients are not vanishingly small
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for p in model.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2f32..0.2));
    }
    let mut model64 = ViT::<f64>::new(cfg.clone(), 3).unwrap();
    for (d, s) in model64.params.iter_mut().zip(model.params.iter()) {
        d.value = s.value.cast();
    }
    let images = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.gen_range(0.0..1.0));
    let labels = [1, 3];

    let (tape, l) = vit_loss(&model, &images, &labels, rho);
    tape.backward_into(l, &mut model.params).unwrap();

    let ids: Vec<_> = (0..model.params.len()).collect();
    for i in ids {
        let name = model.params.iter().nth(i).unwrap().name.clone();
        let n = model.params.iter().nth(i).unwrap().value.numel();
        let grad = model.params.iter().nth(i).unwrap().grad.cast::<f64>();
        let gmax = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for _ in 0..20 {
            let c = rng.gen_range(0..n);
            let orig = model64.params.iter().nth(i).unwrap().value.data()[c];
            let mut eval_at = |v: f64| {
                model64.params.iter_mut().nth(i).unwrap().value.data_mut()[c] = v;
                let (t, l) = vit_loss(&model64, &images, &labels, rho);
                t.value(l).data()[0]
            };
            let fd = (eval_at(orig + H) - eval_at(orig - H)) / (2.0 * H);
            eval_at(orig);
            let an = grad.data()[c];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-2 * gmax).max(1e-6);
            if err > 2e-2 {
                return Err(format!("{name}[{c}] (rho {rho}): analytic {an} vs numeric {fd}"));
            }
        }
    }
    Ok(())
}

pub type Suite = fn() -> Result<(), String>;

pub const OP_SUITES: &[(&str, Suite)] = &[
    ("matmul", matmul_plain_and_transposed),
    ("elementwise", elementwise_ops),
    ("softmax/layernorm", softmax_and_layernorm),
    ("shape", shape_ops),
    ("cross entropy", cross_entropy_plain_and_smoothed),
    ("gather rows", gather_rows_kept_match_and_dropped_are_zero),
    ("relative bias", relative_bias_gather),
];
