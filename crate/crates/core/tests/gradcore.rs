use equirecon::gradcore::{check_gradients, GradError, Tape, Tensor, REL_TOLERANCE};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::from_vec(shape.to_vec(), data.to_vec())
}

fn brute_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::<f32>::new();
    let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
    let ia = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.value(ia).data(), &[1., 2., 3., 4.]);
    let ab = tape.matmul(a, b).unwrap();
    let oracle = brute_matmul(&[1., 2., 3., 4.], &[5., 6., 7., 8.], 2, 2, 2);
    assert_eq!(oracle, vec![19., 22., 43., 50.]);
    let got: Vec<f64> = tape.value(ab).data().iter().map(|&x| x as f64).collect();
    assert_eq!(got, oracle);
}

#[test]
fn matmul_batched_matches_brute_force() {
    let a: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin()).collect();
    let b: Vec<f32> = (0..12).map(|i| (i as f32 * 0.91).cos()).collect();
    let mut tape = Tape::<f32>::new();
    let av = tape.constant(t(&[2, 3, 4], &a));
    let bv = tape.constant(t(&[4, 3], &b));
    let c = tape.matmul(av, bv).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 3]);
    let bd: Vec<f64> = b.iter().map(|&x| x as f64).collect();
    for batch in 0..2 {
        let ad: Vec<f64> = a[batch * 12..(batch + 1) * 12].iter().map(|&x| x as f64).collect();
        let oracle = brute_matmul(&ad, &bd, 3, 4, 3);
        for (g, o) in tape.value(c).data()[batch * 9..(batch + 1) * 9].iter().zip(&oracle) {
            assert!((*g as f64 - o).abs() < 1e-5);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![4, 5]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, GradError::Shape(_)));
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_sum_gradient_is_broadcast_column_sum() {
    let a = Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64 * 0.5 - 1.0);
    let b = Tensor::<f64>::from_fn(vec![3, 2], |i| (i as f64).sin());
    let mut tape = Tape::<f64>::new();
    let av = tape.param(a.clone());
    let bv = tape.constant(b.clone());
    let c = tape.matmul(av, bv).unwrap();
    let loss = tape.sum(c);
    tape.backward(loss).unwrap();
    let g = tape.grad(av).unwrap();
    for i in 0..2 {
        for k in 0..3 {
            let row_sum: f64 = b.data()[k * 2..k * 2 + 2].iter().sum();
            assert!((g[i * 3 + k] - row_sum).abs() < 1e-12);
        }
    }
    let (err, _) = check_gradients(&[a, b], &|t, v| {
        let c = t.matmul(v[0], v[1])?;
        Ok(t.sum(c))
    }, None)
    .unwrap();
    assert!(err < REL_TOLERANCE);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[2], &[0., 0.]));
    let s = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[2], &[0., 2f32.ln()]));
    let s = tape.softmax(x, 0).unwrap();
    let d = tape.value(s).data();
    assert!((d[0] - 1. / 3.).abs() < 1e-6 && (d[1] - 2. / 3.).abs() < 1e-6);

    let x = tape.constant(t(&[2], &[1000., 1000.]));
    let s = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn layernorm_examples() {
    let mut tape = Tape::<f32>::new();
    let g = tape.constant(Tensor::full(vec![3], 1.0));
    let b = tape.constant(Tensor::zeros(vec![3]));
    let x = tape.constant(t(&[1, 3], &[2., 2., 2.]));
    let y = tape.layernorm(x, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0., 0., 0.]);

    let mut tape = Tape::<f64>::new();
    let g = tape.constant(Tensor::full(vec![2], 1.0));
    let b = tape.constant(Tensor::zeros(vec![2]));
    let x = tape.constant(Tensor::from_vec(vec![1, 2], vec![1., 3.]));
    let y = tape.layernorm(x, g, b, 1e-12).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);
}

#[test]
fn layernorm_gradcheck() {
    let x = Tensor::<f64>::from_fn(vec![3, 5], |i| ((i * 7) as f64 * 0.3).sin());
    let g = Tensor::<f64>::from_fn(vec![5], |i| 0.8 + 0.1 * i as f64);
    let b = Tensor::<f64>::from_fn(vec![5], |i| 0.05 * i as f64);
    let (err, _) = check_gradients(&[x, g, b], &|t, v| t.layernorm(v[0], v[1], v[2], 1e-5), None).unwrap();
    assert!(err < REL_TOLERANCE, "{err}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(t(&[2, 2], &[1., -2., 3., 0.5]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1., 1.]);
}

#[test]
fn backward_of_mse_against_zero() {
    let xs = [0.5f32, -1.0, 2.0, 0.25];
    let mut tape = Tape::<f32>::new();
    let x = tape.param(t(&[4], &xs));
    let z = tape.constant(Tensor::zeros(vec![4]));
    let l = tape.mse(x, z).unwrap();
    tape.backward(l).unwrap();
    for (g, x) in tape.grad(x).unwrap().iter().zip(xs) {
        assert!((g - 2.0 * x / 4.0).abs() < 1e-7);
    }
}

#[test]
fn repeated_backward_accumulates_until_reset() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(t(&[3], &[1., 2., 3.]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2., 2., 2.]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(t(&[3], &[1., 2., 3.]));
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(GradError::Contract(_))));
}

#[test]
fn composite_net_matches_finite_differences() {
    // 2 linear layers + softmax + mse, 4*5 + 5 + 5*3 + 3 = 43 params.
    let mk = |shape: &[usize], s: f64| Tensor::<f64>::from_fn(shape.to_vec(), |i| ((i as f64 + s) * 1.3).sin() * 0.8);
    let inputs = vec![mk(&[4, 5], 0.1), mk(&[5], 0.2), mk(&[5, 3], 0.3), mk(&[3], 0.4)];
    let x = mk(&[6, 4], 0.5);
    let target = Tensor::<f64>::from_fn(vec![6, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let (err, n) = check_gradients(
        &inputs,
        &move |t, v| {
            let xv = t.constant(x.clone());
            let h = t.matmul(xv, v[0])?;
            let h = t.add(h, v[1])?;
            let h = t.gelu(h);
            let o = t.matmul(h, v[2])?;
            let o = t.add(o, v[3])?;
            let p = t.softmax(o, 1)?;
            let tv = t.constant(target.clone());
            t.mse(p, tv)
        },
        None,
    )
    .unwrap();
    assert_eq!(n, 43);
    assert!(err < REL_TOLERANCE, "{err}");
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_fn(vec![8, 16], |i| (i as f32 * 0.77).sin()));
        let b = tape.constant(Tensor::from_fn(vec![16, 8], |i| (i as f32 * 0.31).cos()));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax(c, 1).unwrap();
        tape.value(s).data().to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, data in prop::collection::vec(-1e4f32..1e4, 1..40)) {
        let cols = data.len();
        let x = Tensor::from_fn(vec![rows, cols], |i| data[i % cols] * ((i / cols) as f32 + 1.0).recip());
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x);
        let s = tape.softmax(xv, 1).unwrap();
        for row in tape.value(s).data().chunks(cols) {
            let total: f32 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn elementwise_chain_gradients_match(data in prop::collection::vec(-2.0f64..2.0, 2..30)) {
        let n = data.len();
        let x = Tensor::from_vec(vec![n], data);
        let (err, _) = check_gradients(&[x], &|t, v| {
            let a = t.gelu(v[0]);
            let b = t.square(a);
            let c = t.add_scalar(b, 1.0);
            let d = t.sqrt(c);
            Ok(t.mean(d))
        }, None).unwrap();
        prop_assert!(err < REL_TOLERANCE, "{}", err);
    }
}
