use super::fdcheck;
use super::{Tape, Var};
use crate::error::Error;
use crate::rng::stream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const OP_REL: f64 = 1e-4;
const OP_ABS: f64 = 1e-6;

fn randv(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Reduce an arbitrary output to a scalar with random weights so every
/// output element contributes a distinct gradient signal.
fn weighted_scalar(tape: &mut Tape, out: Var, rng: &mut ChaCha8Rng) -> Var {
    if tape.numel(out) == 1 {
        return out;
    }
    let shape = tape.shape(out).to_vec();
    let w = tape.leaf(randv(rng, tape.numel(out), -1.0, 1.0), &shape).unwrap();
    let prod = tape.mul(out, w).unwrap();
    tape.mean_all(prod).unwrap()
}

fn check_all(tape: &Tape, loss: Var, leaves: &[Var], rel: f64, abs: f64) {
    for leaf in leaves {
        fdcheck::check_leaf(tape, loss, *leaf, &[], H, rel, abs)
            .unwrap_or_else(|e| panic!("gradient check failed: {e}"));
    }
}

/// Run an op-level gradient check across several seeds. `build` returns the
/// op output and the differentiable leaves to verify.
fn grad_check_op(name: &str, build: impl Fn(&mut Tape, &mut ChaCha8Rng) -> (Var, Vec<Var>)) {
    for seed in 0..3u64 {
        let mut rng = stream(seed, name, 0);
        let mut tape = Tape::new();
        let (out, leaves) = build(&mut tape, &mut rng);
        let loss = weighted_scalar(&mut tape, out, &mut rng);
        tape.backward(loss).unwrap();
        check_all(&tape, loss, &leaves, OP_REL, OP_ABS);
    }
}

#[test]
fn matmul_known_values() {
    let mut t = Tape::new();
    let a = t.leaf(vec![1., 2., 3., 4., 5., 6.], &[2, 3]).unwrap();
    let b = t.leaf(vec![7., 8., 9., 10., 11., 12.], &[3, 2]).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.values(c), &[58., 64., 139., 154.]);
    assert_eq!(t.shape(c), &[2, 2]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut t = Tape::new();
    let x = t.leaf(vec![0.5, -1.0, 3.0, 2.0, 2.0, 2.0], &[2, 3]).unwrap();
    let s = t.softmax_rows(x).unwrap();
    let v = t.values(s);
    for r in 0..2 {
        let sum: f32 = v[r * 3..(r + 1) * 3].iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
    // Equal logits give the uniform row.
    assert!((v[3] - 1.0 / 3.0).abs() < 1e-6);
}

#[test]
fn conv_identity_kernel_reproduces_input() {
    let mut t = Tape::new();
    let mut rng = stream(1, "conv-ident", 0);
    let xv = randv(&mut rng, 2 * 1 * 4 * 4, -1.0, 1.0);
    let x = t.leaf(xv.clone(), &[2, 1, 4, 4]).unwrap();
    let k = t.leaf(vec![1.0], &[1, 1, 1, 1]).unwrap();
    let y = t.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(t.values(y), &xv[..]);
}

#[test]
fn conv_zero_kernel_gives_zeros() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1.0; 3 * 2 * 3 * 3], &[3, 2, 3, 3]).unwrap();
    let k = t.leaf(vec![0.0; 4 * 2 * 9], &[4, 2, 3, 3]).unwrap();
    let y = t.conv2d(x, k, 1, 1).unwrap();
    assert!(t.values(y).iter().all(|v| *v == 0.0));
    assert_eq!(t.shape(y), &[3, 4, 3, 3]);
}

#[test]
fn conv_matches_naive_reference() {
    // im2col+gemm against the f64 nested-loop replay, values only.
    for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
        let mut rng = stream(7, "conv-ref", (stride * 10 + pad) as u64);
        let mut t = Tape::new();
        let x = t.leaf(randv(&mut rng, 2 * 3 * 5 * 6, -1.0, 1.0), &[2, 3, 5, 6]).unwrap();
        let k = t.leaf(randv(&mut rng, 4 * 3 * 9, -1.0, 1.0), &[4, 3, 3, 3]).unwrap();
        let y = t.conv2d(x, k, stride, pad).unwrap();
        let re = fdcheck::eval_f64(&t, y, &Default::default());
        for (a, b) in t.values(y).iter().zip(&re) {
            assert!((*a as f64 - b).abs() < 1e-4, "conv s{stride} p{pad}: {a} vs {b}");
        }
    }
}

#[test]
fn upsample_backward_sums_four_children() {
    let mut t = Tape::new();
    let x = t.leaf_grad(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
    let y = t.upsample_2x(x).unwrap();
    let s = t.sum_all(y).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[4.0, 4.0, 4.0, 4.0]);
}

#[test]
fn sum_all_backward_is_ones() {
    let mut t = Tape::new();
    let x = t.leaf_grad(vec![0.3, -0.7, 2.0], &[3]).unwrap();
    let s = t.sum_all(x).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn mse_of_identical_inputs_is_zero_with_zero_grad() {
    let mut t = Tape::new();
    let x = t.leaf_grad(vec![0.5, -1.5, 2.5], &[3]).unwrap();
    let y = t.leaf(vec![0.5, -1.5, 2.5], &[3]).unwrap();
    let l = t.mse(x, y).unwrap();
    assert_eq!(t.scalar(l).unwrap(), 0.0);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let mut t = Tape::new();
    let x = t.leaf_grad(vec![1.0], &[1]).unwrap();
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    match t.backward(y) {
        Err(Error::Tensor { op, .. }) => assert_eq!(op, "backward"),
        other => panic!("expected tensor error, got {other:?}"),
    }
}

#[test]
fn backward_requires_scalar_output() {
    let mut t = Tape::new();
    let x = t.leaf_grad(vec![1.0, 2.0], &[2]).unwrap();
    assert!(t.backward(x).is_err());
}

#[test]
fn backward_without_differentiable_leaf_is_an_error() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1.0], &[1]).unwrap();
    let y = t.mul(x, x).unwrap();
    assert!(t.backward(y).is_err());
}

#[test]
fn non_finite_forward_is_reported_with_op_name() {
    let mut t = Tape::new();
    let a = t.leaf(vec![1.0], &[1]).unwrap();
    let b = t.leaf(vec![0.0], &[1]).unwrap();
    match t.div(a, b) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "div"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
    let neg = t.leaf(vec![-1.0], &[1]).unwrap();
    assert!(matches!(t.log(neg), Err(Error::NonFinite { op: "log" })));
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut t = Tape::new();
    let a = t.leaf(vec![1.0, 2.0], &[2]).unwrap();
    let b = t.leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    assert!(t.add(a, b).is_err());
    let m = t.leaf(vec![0.0; 6], &[2, 3]).unwrap();
    assert!(t.matmul(m, m).is_err());
}

#[test]
fn embed_gathers_and_scatters() {
    let mut t = Tape::new();
    let table = t.leaf_grad(vec![0., 1., 10., 11., 20., 21.], &[3, 2]).unwrap();
    let e = t.embed(table, &[2, 0, 2]).unwrap();
    assert_eq!(t.values(e), &[20., 21., 0., 1., 20., 21.]);
    let s = t.sum_all(e).unwrap();
    t.backward(s).unwrap();
    // Row 2 was gathered twice, row 1 never.
    assert_eq!(t.grad(table).unwrap(), &[1., 1., 0., 0., 2., 2.]);
    assert!(t.embed(table, &[3]).is_err());
}

#[test]
fn grads_are_bitwise_deterministic() {
    let run = || {
        let mut rng = stream(5, "det", 0);
        let mut t = Tape::new();
        let x = t.leaf_grad(randv(&mut rng, 2 * 3 * 4 * 4, -1.0, 1.0), &[2, 3, 4, 4]).unwrap();
        let k = t.leaf_grad(randv(&mut rng, 4 * 3 * 9, -0.5, 0.5), &[4, 3, 3, 3]).unwrap();
        let y = t.conv2d(x, k, 1, 1).unwrap();
        let g = t.leaf(vec![1.0; 4], &[4]).unwrap();
        let o = t.leaf(vec![0.0; 4], &[4]).unwrap();
        let n = t.group_norm(y, g, o, 2).unwrap();
        let a = t.silu(n).unwrap();
        let l = t.mean_all(a).unwrap();
        t.backward(l).unwrap();
        (t.grad(x).unwrap().to_vec(), t.grad(k).unwrap().to_vec())
    };
    let (x1, k1) = run();
    let (x2, k2) = run();
    assert!(x1.iter().zip(&x2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(k1.iter().zip(&k2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn grad_elementwise_binary() {
    grad_check_op("add", |t, r| {
        let a = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        let b = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        (t.add(a, b).unwrap(), vec![a, b])
    });
    grad_check_op("sub", |t, r| {
        let a = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        let b = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        (t.sub(a, b).unwrap(), vec![a, b])
    });
    grad_check_op("mul", |t, r| {
        let a = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        let b = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        (t.mul(a, b).unwrap(), vec![a, b])
    });
    grad_check_op("div", |t, r| {
        let a = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        let mut den = randv(r, 12, 0.5, 1.5);
        for (i, d) in den.iter_mut().enumerate() {
            if i % 2 == 0 {
                *d = -*d;
            }
        }
        let b = t.leaf_grad(den, &[3, 4]).unwrap();
        (t.div(a, b).unwrap(), vec![a, b])
    });
}

#[test]
fn grad_elementwise_unary() {
    grad_check_op("scale", |t, r| {
        let x = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        (t.scale(x, 1.7).unwrap(), vec![x])
    });
    grad_check_op("add_scalar", |t, r| {
        let x = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        (t.add_scalar(x, 0.3).unwrap(), vec![x])
    });
    grad_check_op("silu", |t, r| {
        let x = t.leaf_grad(randv(r, 12, -2.0, 2.0), &[3, 4]).unwrap();
        (t.silu(x).unwrap(), vec![x])
    });
    grad_check_op("sigmoid", |t, r| {
        let x = t.leaf_grad(randv(r, 12, -2.0, 2.0), &[3, 4]).unwrap();
        (t.sigmoid(x).unwrap(), vec![x])
    });
    grad_check_op("log", |t, r| {
        let x = t.leaf_grad(randv(r, 12, 0.2, 2.0), &[3, 4]).unwrap();
        (t.log(x).unwrap(), vec![x])
    });
}

#[test]
fn grad_bias_and_shape_ops() {
    grad_check_op("bias_add_channel", |t, r| {
        let x = t.leaf_grad(randv(r, 2 * 3 * 4, -1.0, 1.0), &[2, 3, 2, 2]).unwrap();
        let b = t.leaf_grad(randv(r, 3, -1.0, 1.0), &[3]).unwrap();
        (t.bias_add_channel(x, b).unwrap(), vec![x, b])
    });
    grad_check_op("bias_add_row", |t, r| {
        let x = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        let b = t.leaf_grad(randv(r, 4, -1.0, 1.0), &[4]).unwrap();
        (t.bias_add_row(x, b).unwrap(), vec![x, b])
    });
    grad_check_op("transpose", |t, r| {
        let x = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        (t.transpose(x).unwrap(), vec![x])
    });
    grad_check_op("reshape", |t, r| {
        let x = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        (t.reshape(x, &[2, 6]).unwrap(), vec![x])
    });
    grad_check_op("concat_channels", |t, r| {
        let a = t.leaf_grad(randv(r, 2 * 2 * 4, -1.0, 1.0), &[2, 2, 2, 2]).unwrap();
        let b = t.leaf_grad(randv(r, 2 * 3 * 4, -1.0, 1.0), &[2, 3, 2, 2]).unwrap();
        (t.concat_channels(a, b).unwrap(), vec![a, b])
    });
    grad_check_op("slice_channels", |t, r| {
        let x = t.leaf_grad(randv(r, 2 * 5 * 4, -1.0, 1.0), &[2, 5, 2, 2]).unwrap();
        (t.slice_channels(x, 1, 4).unwrap(), vec![x])
    });
}

#[test]
fn grad_matmul_softmax_embed() {
    grad_check_op("matmul", |t, r| {
        let a = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        let b = t.leaf_grad(randv(r, 8, -1.0, 1.0), &[4, 2]).unwrap();
        (t.matmul(a, b).unwrap(), vec![a, b])
    });
    grad_check_op("softmax_rows", |t, r| {
        let x = t.leaf_grad(randv(r, 15, -2.0, 2.0), &[3, 5]).unwrap();
        (t.softmax_rows(x).unwrap(), vec![x])
    });
    grad_check_op("embed", |t, r| {
        let table = t.leaf_grad(randv(r, 24, -1.0, 1.0), &[6, 4]).unwrap();
        (t.embed(table, &[0, 3, 3, 5]).unwrap(), vec![table])
    });
    grad_check_op("group_mean_rows", |t, r| {
        let x = t.leaf_grad(randv(r, 18, -1.0, 1.0), &[6, 3]).unwrap();
        (t.group_mean_rows(x, 3).unwrap(), vec![x])
    });
}

#[test]
fn grad_reductions_and_losses() {
    grad_check_op("sum_all", |t, r| {
        let x = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        (t.sum_all(x).unwrap(), vec![x])
    });
    grad_check_op("mean_all", |t, r| {
        let x = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        (t.mean_all(x).unwrap(), vec![x])
    });
    grad_check_op("sum_rows", |t, r| {
        let x = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        (t.sum_rows(x).unwrap(), vec![x])
    });
    grad_check_op("mse", |t, r| {
        let a = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        let b = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        (t.mse(a, b).unwrap(), vec![a, b])
    });
    grad_check_op("bce_with_logits", |t, r| {
        let x = t.leaf_grad(randv(r, 12, -2.0, 2.0), &[3, 4]).unwrap();
        let tv: Vec<f32> = (0..12).map(|_| [0.0, 0.3, 1.0][r.gen_range(0..3)]).collect();
        let tgt = t.leaf(tv, &[3, 4]).unwrap();
        (t.bce_with_logits(x, tgt).unwrap(), vec![x])
    });
}

#[test]
fn grad_conv_variants() {
    grad_check_op("conv-s1p1", |t, r| {
        let x = t.leaf_grad(randv(r, 2 * 3 * 25, -1.0, 1.0), &[2, 3, 5, 5]).unwrap();
        let k = t.leaf_grad(randv(r, 4 * 3 * 9, -0.5, 0.5), &[4, 3, 3, 3]).unwrap();
        (t.conv2d(x, k, 1, 1).unwrap(), vec![x, k])
    });
    grad_check_op("conv-s2p0", |t, r| {
        let x = t.leaf_grad(randv(r, 1 * 2 * 36, -1.0, 1.0), &[1, 2, 6, 6]).unwrap();
        let k = t.leaf_grad(randv(r, 3 * 2 * 9, -0.5, 0.5), &[3, 2, 3, 3]).unwrap();
        (t.conv2d(x, k, 2, 0).unwrap(), vec![x, k])
    });
    grad_check_op("conv-1x1", |t, r| {
        let x = t.leaf_grad(randv(r, 2 * 3 * 16, -1.0, 1.0), &[2, 3, 4, 4]).unwrap();
        let k = t.leaf_grad(randv(r, 5 * 3, -0.5, 0.5), &[5, 3, 1, 1]).unwrap();
        (t.conv2d(x, k, 1, 0).unwrap(), vec![x, k])
    });
}

#[test]
fn grad_norm_upsample_attention() {
    grad_check_op("group_norm", |t, r| {
        let x = t.leaf_grad(randv(r, 2 * 4 * 9, -1.0, 1.0), &[2, 4, 3, 3]).unwrap();
        let g = t.leaf_grad(randv(r, 4, 0.5, 1.5), &[4]).unwrap();
        let b = t.leaf_grad(randv(r, 4, -0.5, 0.5), &[4]).unwrap();
        (t.group_norm(x, g, b, 2).unwrap(), vec![x, g, b])
    });
    grad_check_op("upsample_2x", |t, r| {
        let x = t.leaf_grad(randv(r, 2 * 2 * 9, -1.0, 1.0), &[2, 2, 3, 3]).unwrap();
        (t.upsample_2x(x).unwrap(), vec![x])
    });
    grad_check_op("attention", |t, r| {
        let q = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        let k = t.leaf_grad(randv(r, 20, -1.0, 1.0), &[5, 4]).unwrap();
        let v = t.leaf_grad(randv(r, 20, -1.0, 1.0), &[5, 4]).unwrap();
        let mut mv = vec![0.0; 15];
        mv[4] = -1e9;
        mv[9] = -1e9;
        let m = t.leaf(mv, &[3, 5]).unwrap();
        (t.attention(q, k, v, Some(m)).unwrap(), vec![q, k, v])
    });
    grad_check_op("cross_attention", |t, r| {
        let q = t.leaf_grad(randv(r, 12, -1.0, 1.0), &[3, 4]).unwrap();
        let kv = t.leaf_grad(randv(r, 20, -1.0, 1.0), &[5, 4]).unwrap();
        (t.cross_attention(q, kv, None).unwrap(), vec![q, kv])
    });
}

#[test]
fn grad_composed_block() {
    // conv -> group_norm -> silu -> downsample conv -> tokens -> attention
    // against an embedded table -> loss; checks cross-op interaction.
    for seed in 0..2u64 {
        let mut rng = stream(seed, "composed", 0);
        let mut t = Tape::new();
        let x = t.leaf_grad(randv(&mut rng, 3 * 16, -1.0, 1.0), &[1, 3, 4, 4]).unwrap();
        let k1 = t.leaf_grad(randv(&mut rng, 4 * 3 * 9, -0.4, 0.4), &[4, 3, 3, 3]).unwrap();
        let g = t.leaf_grad(vec![1.0; 4], &[4]).unwrap();
        let b = t.leaf_grad(vec![0.0; 4], &[4]).unwrap();
        let k2 = t.leaf_grad(randv(&mut rng, 4 * 4 * 9, -0.4, 0.4), &[4, 4, 3, 3]).unwrap();
        let table = t.leaf_grad(randv(&mut rng, 6 * 4, -1.0, 1.0), &[6, 4]).unwrap();

        let c1 = t.conv2d(x, k1, 1, 1).unwrap();
        let n1 = t.group_norm(c1, g, b, 2).unwrap();
        let a1 = t.silu(n1).unwrap();
        let c2 = t.conv2d(a1, k2, 2, 1).unwrap();
        let flat = t.reshape(c2, &[4, 4]).unwrap();
        let toks = t.transpose(flat).unwrap();
        let kv = t.embed(table, &[1, 4, 2]).unwrap();
        let attended = t.cross_attention(toks, kv, None).unwrap();
        let target = t.leaf(randv(&mut rng, 16, -1.0, 1.0), &[4, 4]).unwrap();
        let loss = t.mse(attended, target).unwrap();
        t.backward(loss).unwrap();
        check_all(&t, loss, &[x, k1, g, b, k2, table], 1e-3, 1e-5);
    }
}
