use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn t(shape: Shape, data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

/// Evaluates a single forward op on constant inputs.
fn forward1(x: Tensor<f64>, f: impl FnOnce(&mut Tape<'_, f64>, Var) -> Var) -> Tensor<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let xv = tape.constant(x);
    let y = f(&mut tape, xv);
    tape.value(y).clone()
}

/// Scalar head with random targets and weights, used to probe gradients.
fn bce_head(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = (0..shape.len()).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
    let w = rand_vec(&mut rng, shape.len(), 0.5, 2.0);
    let yv = tape.constant(t(shape, y));
    let wv = tape.constant(t(shape, w));
    tape.weighted_bce(out, yv, wv)
}

fn store_with(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    for (name, dims, data) in entries {
        store.insert(*name, dims.clone(), data.clone(), true).unwrap();
    }
    store
}

// ---------------------------------------------------------------- conv2d

#[test]
fn conv_ones_counts_taps() {
    let store = store_with(&[("k", vec![1, 1, 3, 3], vec![1.0; 9]), ("b", vec![1], vec![0.5])]);
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let x = tape.constant(Tensor::full(s(1, 1, 4, 4), 1.0));
    let k = tape.param_by_name("k").unwrap();
    let b = tape.param_by_name("b").unwrap();
    let y = tape.conv2d(x, k, Some(b), 1, 1, 1).unwrap();
    let expected = [4.0, 6.0, 6.0, 4.0, 6.0, 9.0, 9.0, 6.0, 6.0, 9.0, 9.0, 6.0, 4.0, 6.0, 6.0, 4.0];
    let got: Vec<f64> = tape.value(y).data().iter().map(|v| v - 0.5).collect();
    assert_eq!(got, expected);
}

#[test]
fn pointwise_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = t(s(2, 3, 5, 4), rand_vec(&mut rng, 120, -1.0, 1.0));
    let mut eye = vec![0.0; 9];
    for c in 0..3 {
        eye[c * 3 + c] = 1.0;
    }
    let store = store_with(&[("k", vec![3, 3, 1, 1], eye), ("b", vec![3], vec![0.0; 3])]);
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let xv = tape.constant(x.clone());
    let k = tape.param_by_name("k").unwrap();
    let b = tape.param_by_name("b").unwrap();
    let y = tape.conv2d(xv, k, Some(b), 1, 0, 1).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn dilated_kernel_shape() {
    let store = store_with(&[("k", vec![1, 1, 3, 3], vec![1.0; 9])]);
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let x = tape.constant(Tensor::full(s(1, 1, 5, 5), 1.0));
    let k = tape.param_by_name("k").unwrap();
    let y = tape.conv2d(x, k, None, 1, 0, 2).unwrap();
    assert_eq!(tape.shape(y), s(1, 1, 1, 1));
    assert_eq!(tape.value(y).data()[0], 9.0);
}

#[test]
fn conv_channel_mismatch_names_operand_and_axis() {
    let store = store_with(&[("k", vec![2, 3, 3, 3], vec![0.0; 54])]);
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let x = tape.constant(Tensor::zeros(s(1, 2, 4, 4)));
    let k = tape.param_by_name("k").unwrap();
    match tape.conv2d(x, k, None, 1, 1, 1) {
        Err(Error::Shape { operand, axis, .. }) => {
            assert_eq!(operand, "x");
            assert_eq!(axis, "C");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn oversized_effective_kernel_is_rejected() {
    let store = store_with(&[("k", vec![1, 1, 3, 3], vec![0.0; 9])]);
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let x = tape.constant(Tensor::zeros(s(1, 1, 4, 4)));
    let k = tape.param_by_name("k").unwrap();
    assert!(tape.conv2d(x, k, None, 1, 0, 2).is_err());
}

/// Scatters a dense kernel into the zero-inflated kernel of extent
/// `d·(K−1)+1` that a dilation-1 convolution would need.
fn inflate(k: &[f32], cout: usize, cin: usize, kk: usize, d: usize) -> (Vec<f32>, usize) {
    let e = d * (kk - 1) + 1;
    let mut out = vec![0.0; cout * cin * e * e];
    for o in 0..cout * cin {
        for y in 0..kk {
            for x in 0..kk {
                out[o * e * e + y * d * e + x * d] = k[o * kk * kk + y * kk + x];
            }
        }
    }
    (out, e)
}

#[test]
fn dilation_equals_inflated_kernel_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for d in [1usize, 2, 4] {
        let (cout, cin) = (3, 2);
        let k: Vec<f32> = (0..cout * cin * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f32> = (0..2 * cin * 13 * 13).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (big, e) = inflate(&k, cout, cin, 3, d);
        let mut store = ParamStore::<f32>::new();
        store.insert("k", vec![cout, cin, 3, 3], k, true).unwrap();
        store.insert("big", vec![cout, cin, e, e], big, true).unwrap();
        let mut tape = Tape::new(&store, Mode::Infer, 0);
        let xv = tape.constant(Tensor::from_vec(s(2, cin, 13, 13), x).unwrap());
        let kv = tape.param_by_name("k").unwrap();
        let bv = tape.param_by_name("big").unwrap();
        let a = tape.conv2d(xv, kv, None, 1, d, d).unwrap();
        let b = tape.conv2d(xv, bv, None, 1, d, 1).unwrap();
        let (a, b) = (tape.value(a).data(), tape.value(b).data());
        assert_eq!(a.len(), b.len());
        for (i, (p, q)) in a.iter().zip(b).enumerate() {
            // the inflated kernel adds exact zeros between the same taps
            assert_eq!(p.to_bits(), q.to_bits(), "d={d} i={i}: {p} vs {q}");
        }
    }
}

// ------------------------------------------------------ transposed conv

#[test]
fn tconv_single_tap_expansion() {
    let w = vec![1.0, -2.0, 3.0, 0.5];
    let store = store_with(&[("k", vec![1, 1, 2, 2], w.clone()), ("b", vec![1], vec![0.25])]);
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let x = tape.constant(t(s(1, 1, 1, 1), vec![3.0]));
    let k = tape.param_by_name("k").unwrap();
    let b = tape.param_by_name("b").unwrap();
    let y = tape.conv_transpose2d(x, k, Some(b), 2).unwrap();
    let expected: Vec<f64> = w.iter().map(|v| 3.0 * v + 0.25).collect();
    assert_eq!(tape.value(y).data(), &expected[..]);
}

#[test]
fn tconv_ones_tile_without_overlap() {
    let y = {
        let store = store_with(&[("k", vec![1, 1, 2, 2], vec![1.0; 4])]);
        let mut tape = Tape::new(&store, Mode::Infer, 0);
        let x = tape.constant(Tensor::full(s(1, 1, 2, 2), 1.0));
        let k = tape.param_by_name("k").unwrap();
        let y = tape.conv_transpose2d(x, k, None, 2).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(y.shape(), s(1, 1, 4, 4));
    assert!(y.data().iter().all(|&v| v == 1.0));
}

fn adjoint_gap(cin: usize, cout: usize, kk: usize, stride: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rand_vec(&mut rng, cout * cin * kk * kk, -1.0, 1.0);
    let store = store_with(&[("k", vec![cout, cin, kk, kk], k)]);
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let x = t(s(1, cin, 4, 4), rand_vec(&mut rng, cin * 16, -1.0, 1.0));
    let xv = tape.constant(x.clone());
    let kv = tape.param_by_name("k").unwrap();
    let cx = tape.conv2d(xv, kv, None, stride, 0, 1).unwrap();
    let ys = tape.shape(cx);
    let y = t(ys, rand_vec(&mut rng, ys.len(), -1.0, 1.0));
    let yv = tape.constant(y.clone());
    // the same memory read as (Cin_t = cout, Cout_t = cin) transposed kernel
    let ty = tape.conv_transpose2d(yv, kv, None, stride).unwrap();
    assert_eq!(tape.shape(ty), x.shape());
    (tape.value(cx).dot(&y) - x.dot(tape.value(ty))).abs()
}

#[test]
fn conv_and_tconv_are_adjoint() {
    for seed in 0..20 {
        assert!(adjoint_gap(2, 3, 2, 2, seed) < 1e-5);
        assert!(adjoint_gap(3, 2, 3, 1, seed) < 1e-5);
    }
}

// ------------------------------------------------------------- upsample

#[test]
fn upsample_constant() {
    let y = forward1(Tensor::full(s(1, 2, 3, 5), 4.5), |tp, x| tp.upsample_bilinear2x(x).unwrap());
    assert_eq!(y.shape(), s(1, 2, 6, 10));
    assert!(y.data().iter().all(|&v| v == 4.5));
}

#[test]
fn upsample_hand_weights() {
    let y = forward1(t(s(1, 1, 1, 2), vec![0.0, 1.0]), |tp, x| tp.upsample_bilinear2x(x).unwrap());
    assert_eq!(y.shape(), s(1, 1, 2, 4));
    assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn upsample_sum_gradient_is_weight_mass() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let x = tape.leaf(Tensor::zeros(s(1, 1, 5, 5)), true);
    let y = tape.upsample_bilinear2x(x).unwrap();
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    let gx = g.input(x).unwrap();
    // every one of the 100 output cells distributes unit mass
    assert!((gx.iter().sum::<f64>() - 100.0).abs() < 1e-12);
    for y in 1..4 {
        for x in 1..4 {
            assert!((gx[y * 5 + x] - 4.0).abs() < 1e-12);
        }
    }
}

// ----------------------------------------------------------------- pool

#[test]
fn pool_hand_values() {
    let x = t(s(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
    let m = forward1(x.clone(), |tp, v| tp.pool2d(v, PoolKind::Max, 2, 2).unwrap());
    let a = forward1(x, |tp, v| tp.pool2d(v, PoolKind::Avg, 2, 2).unwrap());
    assert_eq!(m.data(), &[4.0]);
    assert_eq!(a.data(), &[2.5]);
}

#[test]
fn pool_constant() {
    for kind in [PoolKind::Max, PoolKind::Avg] {
        let y = forward1(Tensor::full(s(2, 3, 4, 6), -1.5), |tp, v| tp.pool2d(v, kind, 2, 2).unwrap());
        assert_eq!(y.shape(), s(2, 3, 2, 3));
        assert!(y.data().iter().all(|&v| v == -1.5));
    }
}

#[test]
fn max_pool_tie_routes_to_first_cell() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let x = tape.leaf(Tensor::full(s(1, 1, 2, 2), 7.0), true);
    let y = tape.pool2d(x, PoolKind::Max, 2, 2).unwrap();
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.input(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn pool_odd_extent_is_rejected() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let x = tape.constant(Tensor::zeros(s(1, 1, 5, 4)));
    assert!(matches!(tape.pool2d(x, PoolKind::Max, 2, 2), Err(Error::Shape { .. })));
}

// ----------------------------------------------------------- batch norm

fn bn_store(c: usize, gamma: f64, beta: f64) -> ParamStore<f64> {
    let mut st = ParamStore::new();
    st.insert("g", vec![c], vec![gamma; c], true).unwrap();
    st.insert("b", vec![c], vec![beta; c], true).unwrap();
    st.insert("rm", vec![c], vec![0.0; c], false).unwrap();
    st.insert("rv", vec![c], vec![1.0; c], false).unwrap();
    st
}

fn bn_forward(store: &ParamStore<f64>, mode: Mode, x: Tensor<f64>) -> (Tensor<f64>, Gradients<f64>) {
    let mut tape = Tape::new(store, mode, 0);
    let xv = tape.constant(x);
    let g = tape.param_by_name("g").unwrap();
    let b = tape.param_by_name("b").unwrap();
    let state = BnState {
        running_mean: store.require("rm").unwrap(),
        running_var: store.require("rv").unwrap(),
    };
    let y = tape.batch_norm(xv, g, b, state).unwrap();
    let out = tape.value(y).clone();
    (out, tape.finish())
}

#[test]
fn bn_zero_variance_gives_zero() {
    let store = bn_store(2, 1.0, 0.0);
    let (y, _) = bn_forward(&store, Mode::Train, Tensor::full(s(3, 2, 2, 2), 5.0));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn bn_affine_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let store = bn_store(3, 2.0, 3.0);
    let shape = s(4, 3, 5, 5);
    let (y, _) = bn_forward(&store, Mode::Train, t(shape, rand_vec(&mut rng, shape.len(), -3.0, 7.0)));
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.sample(n)[c * 25..(c + 1) * 25].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((m - 3.0).abs() < 1e-5);
        assert!((sd - 2.0).abs() < 1e-5 * 2.0 + 1e-5);
    }
}

#[test]
fn bn_train_and_infer_agree_at_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = bn_store(2, 1.5, -0.5);
    let shape = s(4, 2, 3, 3);
    let x = t(shape, rand_vec(&mut rng, shape.len(), -2.0, 4.0));
    for _ in 0..200 {
        let (_, g) = bn_forward(&store, Mode::Train, x.clone());
        store.apply_running_stats(&g);
    }
    let (train, _) = bn_forward(&store, Mode::Train, x.clone());
    let (infer, _) = bn_forward(&store, Mode::Infer, x);
    for (a, b) in train.data().iter().zip(infer.data()) {
        assert!((a - b).abs() < 1e-3);
    }
}

// ------------------------------------------------- pointwise and friends

#[test]
fn leaky_relu_values_and_zero_convention() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let x = tape.leaf(t(s(1, 1, 1, 3), vec![-1.0, 5.0, 0.0]), true);
    let y = tape.leaky_relu(x, 0.1).unwrap();
    assert_eq!(tape.value(y).data(), &[-0.1, 5.0, 0.0]);
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.input(x).unwrap(), &[0.1, 1.0, 0.1]);
}

#[test]
fn sigmoid_at_zero_and_extremes() {
    let y = forward1(t(s(1, 1, 1, 3), vec![0.0, 800.0, -800.0]), |tp, x| tp.sigmoid(x));
    assert_eq!(y.data(), &[0.5, 1.0, 0.0]);
}

#[test]
fn dropout_infer_is_identity() {
    let x = t(s(1, 2, 3, 3), (0..18).map(|v| v as f64).collect());
    let y = forward1(x.clone(), |tp, v| tp.dropout(v, 0.3).unwrap());
    assert_eq!(y, x);
}

#[test]
fn dropout_preserves_expectation() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store, Mode::Train, 99);
    let x = tape.constant(Tensor::full(s(1, 1, 1, 100_000), 1.0));
    let y = tape.dropout(x, 0.1).unwrap();
    let mean = tape.value(y).data().iter().sum::<f64>() / 1e5;
    assert!((mean - 1.0).abs() < 1e-2);
    assert!(tape.dropout(x, 1.0).is_err());
}

#[test]
fn concat_stacks_channels() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let a = tape.constant(Tensor::full(s(2, 2, 3, 3), 1.0));
    let b = tape.constant(Tensor::full(s(2, 3, 3, 3), 2.0));
    let c = tape.concat_channels(&[a, b]).unwrap();
    let v = tape.value(c);
    assert_eq!(v.shape(), s(2, 5, 3, 3));
    assert_eq!(v.at(1, 1, 2, 2), 1.0);
    assert_eq!(v.at(1, 2, 0, 0), 2.0);
    let d = tape.constant(Tensor::zeros(s(2, 1, 4, 3)));
    assert!(tape.concat_channels(&[a, d]).is_err());
}

#[test]
fn add_requires_equal_shapes() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let a = tape.constant(Tensor::zeros(s(1, 2, 3, 3)));
    let b = tape.constant(Tensor::zeros(s(1, 3, 3, 3)));
    assert!(tape.add(a, b).is_err());
}

// --------------------------------------------------------- grad checks

/// Runs a grad check where the op input `x` is itself a parameter.
fn check_op(
    extra: &[(&str, Vec<usize>, Vec<f64>)],
    x_shape: Shape,
    mode: Mode,
    f: impl Fn(&mut Tape<'_, f64>, Var) -> Result<Var>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(x_shape.len() as u64);
    let mut entries = vec![(
        "x",
        vec![x_shape.n, x_shape.c, x_shape.h, x_shape.w],
        rand_vec(&mut rng, x_shape.len(), -1.5, 1.5),
    )];
    entries.extend(extra.iter().cloned());
    let store = store_with(&entries);
    let build = |tape: &mut Tape<'_, f64>| {
        let x = tape.param_by_name("x")?;
        let y = f(tape, x)?;
        bce_head(tape, y, 5)
    };
    let r = grad_check(&store, mode, build, 1e-6, 40, 3).unwrap();
    r.max_rel_error
}

fn rnd(n: usize, seed: u64) -> Vec<f64> {
    rand_vec(&mut ChaCha8Rng::seed_from_u64(seed), n, -0.8, 0.8)
}

#[test]
fn grad_conv_variants() {
    for (stride, pad, dil) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 4, 4), (2, 0, 1)] {
        let extra = [("k", vec![3, 2, 3, 3], rnd(54, 1)), ("b", vec![3], rnd(3, 2))];
        let e = check_op(&extra, s(2, 2, 8, 8), Mode::Infer, |tp, x| {
            let k = tp.param_by_name("k")?;
            let b = tp.param_by_name("b")?;
            tp.conv2d(x, k, Some(b), stride, pad, dil)
        });
        assert!(e < 1e-4, "stride {stride} pad {pad} dil {dil}: {e}");
    }
}

#[test]
fn grad_asymmetric_pad_and_pointwise() {
    let extra = [("k", vec![2, 3, 2, 2], rnd(24, 3)), ("p", vec![4, 3, 1, 1], rnd(12, 4))];
    let e = check_op(&extra, s(2, 3, 4, 4), Mode::Infer, |tp, x| {
        let k = tp.param_by_name("k")?;
        let p = tp.param_by_name("p")?;
        let a = tp.conv2d_padded(x, k, None, 1, Padding { top: 0, left: 0, bottom: 1, right: 1 }, 1)?;
        let b = tp.conv2d(x, p, None, 1, 0, 1)?;
        tp.concat_channels(&[a, b])
    });
    assert!(e < 1e-4, "{e}");
}

#[test]
fn grad_tconv() {
    let extra = [("k", vec![3, 2, 2, 2], rnd(24, 5)), ("b", vec![2], rnd(2, 6))];
    let e = check_op(&extra, s(2, 3, 3, 3), Mode::Infer, |tp, x| {
        let k = tp.param_by_name("k")?;
        let b = tp.param_by_name("b")?;
        tp.conv_transpose2d(x, k, Some(b), 2)
    });
    assert!(e < 1e-4, "{e}");
}

#[test]
fn grad_upsample_pool_activations() {
    let e = check_op(&[], s(2, 2, 3, 5), Mode::Infer, |tp, x| tp.upsample_bilinear2x(x));
    assert!(e < 1e-4, "upsample {e}");
    for kind in [PoolKind::Max, PoolKind::Avg] {
        let e = check_op(&[], s(2, 2, 4, 6), Mode::Infer, |tp, x| tp.pool2d(x, kind, 2, 2));
        assert!(e < 1e-4, "{kind:?} {e}");
    }
    let e = check_op(&[], s(1, 2, 4, 4), Mode::Infer, |tp, x| tp.leaky_relu(x, 0.1));
    assert!(e < 1e-4, "leaky {e}");
    let e = check_op(&[], s(1, 2, 4, 4), Mode::Infer, |tp, x| Ok(tp.sigmoid(x)));
    assert!(e < 1e-4, "sigmoid {e}");
    let e = check_op(&[], s(1, 3, 4, 4), Mode::Train, |tp, x| tp.dropout(x, 0.3));
    assert!(e < 1e-4, "dropout {e}");
    let e = check_op(&[("y", vec![1, 2, 4, 4], rnd(32, 7))], s(1, 2, 4, 4), Mode::Infer, |tp, x| {
        let y = tp.param_by_name("y")?;
        let z = tp.add(x, y)?;
        tp.add(z, x)
    });
    assert!(e < 1e-4, "add {e}");
}

#[test]
fn grad_batch_norm_both_modes() {
    for mode in [Mode::Train, Mode::Infer] {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = store_with(&[
            ("x", vec![3, 2, 3, 3], rand_vec(&mut rng, 54, -2.0, 2.0)),
            ("g", vec![2], vec![1.3, 0.7]),
            ("b", vec![2], vec![0.1, -0.2]),
        ]);
        store.insert("rm", vec![2], vec![0.2, -0.1], false).unwrap();
        store.insert("rv", vec![2], vec![1.4, 0.6], false).unwrap();
        let state = BnState {
            running_mean: store.require("rm").unwrap(),
            running_var: store.require("rv").unwrap(),
        };
        let build = |tape: &mut Tape<'_, f64>| {
            let x = tape.param_by_name("x")?;
            let g = tape.param_by_name("g")?;
            let b = tape.param_by_name("b")?;
            let y = tape.batch_norm(x, g, b, state)?;
            bce_head(tape, y, 8)
        };
        let r = grad_check(&store, mode, build, 1e-6, 60, 1).unwrap();
        assert!(r.max_rel_error < 1e-4, "{mode:?}: {r:?}");
    }
}

#[test]
fn grad_losses() {
    let e = check_op(&[], s(2, 1, 4, 4), Mode::Infer, |tp, x| {
        let shape = tp.shape(x);
        let y: Vec<f64> = (0..shape.len()).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        let yv = tp.constant(t(shape, y));
        // the shared head then wraps the dice scalar in a BCE term
        tp.dice(x, yv)
    });
    assert!(e < 1e-4, "{e}");
}

#[test]
fn micro_net_conv_plus_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let store = store_with(&[("k", vec![1, 2, 3, 3], rand_vec(&mut rng, 18, -0.5, 0.5)), ("b", vec![1], vec![0.1])]);
    let x = t(s(2, 2, 6, 6), rand_vec(&mut rng, 144, -1.0, 1.0));
    let build = |tape: &mut Tape<'_, f64>| {
        let xv = tape.constant(x.clone());
        let k = tape.param_by_name("k")?;
        let b = tape.param_by_name("b")?;
        let y = tape.conv2d(xv, k, Some(b), 1, 1, 1)?;
        bce_head(tape, y, 4)
    };
    let r = grad_check(&store, Mode::Infer, build, 1e-6, 100, 2).unwrap();
    assert_eq!(r.checked, 19);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn frozen_parameter_gets_zero_gradient() {
    let mut store = store_with(&[("k", vec![1, 1, 1, 1], vec![0.5])]);
    let unused = store.insert("unused", vec![3], vec![1.0; 3], true).unwrap();
    let build = |tape: &mut Tape<'_, f64>| {
        let x = tape.constant(Tensor::full(s(1, 1, 2, 2), 1.0));
        let k = tape.param_by_name("k")?;
        let y = tape.conv2d(x, k, None, 1, 0, 1)?;
        bce_head(tape, y, 1)
    };
    let r = grad_check(&store, Mode::Infer, build, 1e-6, 10, 0).unwrap();
    assert!(r.max_rel_error < 1e-6);
    let mut tape = Tape::new(&store, Mode::Infer, 0);
    let l = build(&mut tape).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.param(unused).is_none_or(|v| v.iter().all(|&x| x == 0.0)));
}

#[test]
fn non_scalar_head_is_a_contract_violation() {
    let store = store_with(&[("k", vec![1, 1, 1, 1], vec![0.5])]);
    let build = |tape: &mut Tape<'_, f64>| {
        let x = tape.constant(Tensor::full(s(1, 1, 2, 2), 1.0));
        let k = tape.param_by_name("k")?;
        tape.conv2d(x, k, None, 1, 0, 1)
    };
    assert!(matches!(
        grad_check(&store, Mode::Infer, build, 1e-6, 10, 0),
        Err(Error::Contract { .. })
    ));
}

// ------------------------------------------------------------ properties

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_shape_law(h in 1usize..20, w in 1usize..20, k in 1usize..5, stride in 1usize..4,
                      pad in 0usize..3, dil in 1usize..4) {
        let eff = dil * (k - 1) + 1;
        prop_assume!(eff <= h + 2 * pad && eff <= w + 2 * pad);
        let store = store_with(&[("k", vec![2, 1, k, k], vec![0.1; 2 * k * k])]);
        let mut tape = Tape::new(&store, Mode::Infer, 0);
        let x = tape.constant(Tensor::zeros(s(1, 1, h, w)));
        let kv = tape.param_by_name("k").unwrap();
        let y = tape.conv2d(x, kv, None, stride, pad, dil).unwrap();
        let oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
        let ow = (w + 2 * pad - dil * (k - 1) - 1) / stride + 1;
        prop_assert_eq!(tape.shape(y), s(1, 2, oh, ow));
    }

    #[test]
    fn tconv_pool_upsample_shape_laws(h in 1usize..12, w in 1usize..12, k in 1usize..4, stride in 1usize..4) {
        let store = store_with(&[("k", vec![1, 3, k, k], vec![0.1; 3 * k * k])]);
        let mut tape = Tape::new(&store, Mode::Infer, 0);
        let x = tape.constant(Tensor::zeros(s(2, 1, h, w)));
        let kv = tape.param_by_name("k").unwrap();
        let y = tape.conv_transpose2d(x, kv, None, stride).unwrap();
        prop_assert_eq!(tape.shape(y), s(2, 3, (h - 1) * stride + k, (w - 1) * stride + k));
        let u = tape.upsample_bilinear2x(x).unwrap();
        prop_assert_eq!(tape.shape(u), s(2, 1, 2 * h, 2 * w));
        let e = tape.constant(Tensor::zeros(s(1, 1, 2 * h, 2 * w)));
        let p = tape.pool2d(e, PoolKind::Avg, 2, 2).unwrap();
        prop_assert_eq!(tape.shape(p), s(1, 1, h, w));
    }

    #[test]
    fn adjointness_random(seed in 0u64..1000) {
        prop_assert!(adjoint_gap(2, 2, 2, 2, seed) < 1e-5);
    }
}
