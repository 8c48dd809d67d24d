use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values kept away from the kinks of relu and abs.
fn random_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|x| if x.abs() < 0.05 { x + 0.1 * x.signum() + 0.05 } else { x })
}

#[test]
fn relu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn add_values() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let c = tape.elementwise(Elementwise::Add, a, Some(b)).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let x = tape.param("x", Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get("x").unwrap().item(), 6.0);
}

#[test]
fn binary_shape_mismatch() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
    assert!(matches!(
        tape.elementwise(Elementwise::Mul, a, None),
        Err(Error::Contract(_))
    ));
}

#[test]
fn scalar_broadcast_both_sides() {
    let mut tape = Tape::new();
    let s = tape.param("s", Tensor::scalar(2.0));
    let v = tape.param("v", Tensor::vector(vec![1.0, 3.0]));
    let a = tape.sub(s, v).unwrap();
    assert_eq!(tape.value(a).data(), &[1.0, -1.0]);
    let loss = tape.sum(a).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get("s").unwrap().data(), &[2.0]);
    assert_eq!(g.get("v").unwrap().data(), &[-1.0, -1.0]);
}

#[test]
fn dense_identity() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.5, -2.0, 0.25]));
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let w = tape.constant(eye);
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.5, -2.0, 0.25]);
}

#[test]
fn dense_hand_product() {
    // [1 2] · [[1 0 2], [0 1 3]] + [0.5 0 -1] = [1.5, 2, 7]
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[1.0, 2.0]));
    let w = tape.constant(t(&[2, 3], &[1.0, 0.0, 2.0, 0.0, 1.0, 3.0]));
    let b = tape.constant(t(&[3], &[0.5, 0.0, -1.0]));
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.5, 2.0, 7.0]);

    // The batched form applies the same map to every row.
    let xb = tape.constant(t(&[2, 2], &[1.0, 2.0, 0.0, 1.0]));
    let yb = tape.dense(xb, w, b).unwrap();
    assert_eq!(tape.value(yb).shape(), &[2, 3]);
    assert_eq!(tape.value(yb).data(), &[1.5, 2.0, 7.0, 0.5, 1.0, 2.0]);
}

#[test]
fn dense_dimension_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[3]));
    let w = tape.constant(Tensor::zeros(&[2, 4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    assert!(matches!(tape.dense(x, w, b), Err(Error::Shape(_))));
}

#[test]
fn conv_hand_example() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
    let k = tape.constant(t(&[1, 1, 2], &[1.0, 1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = tape.conv_rowwise(x, k, b).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2]);
    assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
}

#[test]
fn conv_unit_kernel_copies_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random(&mut rng, &[4, 5]);
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let k = tape.constant(t(&[2, 1, 1], &[1.0, 1.0]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.conv_rowwise(x, k, b).unwrap();
    let out = tape.value(y).data();
    assert_eq!(&out[..20], input.data());
    assert_eq!(&out[20..], input.data());
}

#[test]
fn conv_kernel_wider_than_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 4]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv_rowwise(x, k, b), Err(Error::Shape(_))));
}

fn conv_rows(input: &Tensor<f64>, kernels: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let k = tape.constant(kernels.clone());
    let b = tape.constant(Tensor::filled(&[kernels.shape()[0]], 0.1));
    let y = tape.conv_rowwise(x, k, b).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_row_independence() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = random(&mut rng, &[3, 7]);
    let kernels = random(&mut rng, &[4, 1, 3]);
    let base = conv_rows(&input, &kernels);
    for zeroed in 0..3 {
        let mut altered = input.clone();
        altered.data_mut()[zeroed * 7..(zeroed + 1) * 7].fill(0.0);
        let out = conv_rows(&altered, &kernels);
        let width = 5;
        for f in 0..4 {
            for r in 0..3 {
                let span = (f * 3 + r) * width..(f * 3 + r + 1) * width;
                if r == zeroed {
                    assert_ne!(out.data()[span.clone()], base.data()[span]);
                } else {
                    assert_eq!(out.data()[span.clone()], base.data()[span]);
                }
            }
        }
    }
}

#[test]
fn softmax_uniform_and_shift_invariant() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25; 4]);

    let base: Vec<f64> = vec![0.3, -1.2, 2.5];
    let a = tape.constant(Tensor::vector(base.clone()));
    let b = tape.constant(Tensor::vector(base.iter().map(|v| v + 40.0).collect()));
    let (ya, yb) = (tape.softmax(a).unwrap(), tape.softmax(b).unwrap());
    for (p, q) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
        assert!((p - q).abs() < 1e-15);
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, f64::NAN]));
    assert!(matches!(tape.softmax(x), Err(Error::Numeric(_))));
}

#[test]
fn scaled_sigmoid_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 800.0, -800.0, 3.0, 4.0]));
    let y = tape.scaled_sigmoid(x, 3.0).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[0], 1.5);
    assert!(v[1] <= 3.0 && v[1] > 2.999);
    assert!(v[2] >= 0.0 && v[2] < 1e-300);
    assert!(v[3] < v[4]);
    assert!(matches!(tape.scaled_sigmoid(x, 0.0), Err(Error::Config(_))));
    assert!(matches!(tape.scaled_sigmoid(x, -1.0), Err(Error::Config(_))));
}

#[test]
fn reductions_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let m = tape.reduce(Reduction::Mean, x).unwrap();
    assert_eq!(tape.value(m).item(), 2.0);
    let ones = tape.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
    let s = tape.std_dev(ones).unwrap();
    assert_eq!(tape.value(s).item(), 0.0);
    let pair = tape.constant(Tensor::vector(vec![0.0, 2.0]));
    let s = tape.std_dev(pair).unwrap();
    assert_eq!(tape.value(s).item(), 1.0);
    let lo = tape.reduce(Reduction::Min, x).unwrap();
    let hi = tape.reduce(Reduction::Max, x).unwrap();
    let p = tape.reduce(Reduction::Product, x).unwrap();
    assert_eq!(
        (tape.value(lo).item(), tape.value(hi).item(), tape.value(p).item()),
        (1.0, 3.0, 6.0)
    );
}

#[test]
fn reductions_domain_errors() {
    let mut tape = Tape::<f64>::new();
    let one = tape.constant(Tensor::vector(vec![1.0]));
    assert!(matches!(tape.std_dev(one), Err(Error::Domain(_))));
    let empty = tape.constant(Tensor::vector(vec![]));
    assert!(matches!(tape.mean(empty), Err(Error::Domain(_))));
}

#[test]
fn min_max_route_to_first_attaining_index() {
    let mut tape = Tape::new();
    let x = tape.param("x", Tensor::vector(vec![2.0, 5.0, 1.0, 5.0, 1.0]));
    let hi = tape.reduce(Reduction::Max, x).unwrap();
    let lo = tape.reduce(Reduction::Min, x).unwrap();
    let both = tape.add(hi, lo).unwrap();
    let g = tape.backward(both).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn sum_of_params_has_unit_gradient() {
    let mut tape = Tape::new();
    let p = tape.param("p", Tensor::vector(vec![0.3, -2.0, 7.0]));
    let q = tape.param("q", Tensor::scalar(4.0));
    let joined = tape.concat_cols(p, q).unwrap();
    let loss = tape.sum(joined).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get("p").unwrap().data(), &[1.0, 1.0, 1.0]);
    assert_eq!(g.get("q").unwrap().data(), &[1.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let p = tape.param("p", Tensor::vector(vec![3.0, 4.0]));
    let prod = tape.mul(c, p).unwrap();
    let loss = tape.sum(prod).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(tape.grad(c).data(), &[0.0, 0.0]);
    assert_eq!(g.get("p").unwrap().data(), &[1.0, 2.0]);
    assert_eq!(g.len(), 1);
}

#[test]
fn backward_contract() {
    let mut tape = Tape::new();
    let p = tape.param("p", Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    tape.zero_grad();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get("p").unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn grad_shapes_track_values() {
    let mut tape = Tape::new();
    let x = tape.param("x", Tensor::zeros(&[6, 4]));
    let k = tape.param("k", Tensor::filled(&[2, 1, 2], 0.5));
    let b = tape.param("b", Tensor::zeros(&[2]));
    let y = tape.conv_rowwise(x, k, b).unwrap();
    let z = tape.flatten_samples(y, 3).unwrap();
    for id in [x, k, b, y, z] {
        assert_eq!(tape.value(id).shape(), tape.grad(id).shape());
    }
    assert_eq!(tape.value(z).shape(), &[3, 2 * 2 * 3]);
}

#[test]
fn flatten_samples_matches_per_sample_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (batch, rows, cols) = (3, 2, 5);
    let stacked = random(&mut rng, &[batch * rows, cols]);
    let kernels = random(&mut rng, &[2, 1, 3]);
    let mut tape = Tape::new();
    let x = tape.constant(stacked.clone());
    let k = tape.constant(kernels.clone());
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.conv_rowwise(x, k, b).unwrap();
    let flat = tape.flatten_samples(y, batch).unwrap();
    for s in 0..batch {
        let single = Tensor::from_vec(
            &[rows, cols],
            stacked.data()[s * rows * cols..(s + 1) * rows * cols].to_vec(),
        )
        .unwrap();
        let expected = conv_rows(&single, &kernels).map(|v| v - 0.1);
        for (a, b) in tape.value(flat).row(s).iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn shift_and_select() {
    let mut tape = Tape::new();
    let x = tape.param("x", t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let s = tape.shift_rows(x, 1).unwrap();
    assert_eq!(tape.value(s).data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    let picked = tape.select(s, vec![2, 5, 5]).unwrap();
    assert_eq!(tape.value(picked).data(), &[1.0, 4.0, 4.0]);
    let loss = tape.sum(picked).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
}

#[test]
fn square_grad_check_is_tight() {
    let err = grad_check(
        |tape, x| {
            let y = tape.mul(x[0], x[0])?;
            tape.sum(y)
        },
        &[Tensor::scalar(2.0)],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_rejects_bad_step() {
    let f = |tape: &mut Tape<f64>, x: &[NodeId]| tape.sum(x[0]);
    assert!(grad_check(f, &[Tensor::scalar(1.0)], 0.0).is_err());
    assert!(grad_check(f, &[Tensor::scalar(1.0)], 0.1).is_err());
}

#[test]
fn grad_check_reports_non_finite() {
    let err = grad_check(
        |tape, x| {
            let y = tape.div(x[0], x[1])?;
            tape.sum(y)
        },
        &[Tensor::scalar(1.0), Tensor::scalar(0.0)],
        1e-5,
    );
    assert!(matches!(err, Err(Error::Numeric(_))));
}

#[test]
fn every_op_passes_grad_check_over_twenty_seeds() {
    for op in crate::checks::OP_CHECKS {
        let worst = (0..20)
            .map(|s| crate::checks::op_check(op, s, None).unwrap())
            .fold(0.0, f64::max);
        assert!(worst < 1e-5, "{op}: worst relative error {worst}");
    }
}

/// A 50-parameter network: dense 4→6 (30), relu, dense 6→2 (14), softmax,
/// plus a 6-entry quadratic term.
#[test]
fn toy_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let params = vec![
        random(&mut rng, &[4, 6]),
        random(&mut rng, &[6]),
        random(&mut rng, &[6, 2]),
        random(&mut rng, &[2]),
        random(&mut rng, &[6]),
    ];
    assert_eq!(params.iter().map(Tensor::len).sum::<usize>(), 50);
    let input = random(&mut rng, &[5, 4]);
    let err = grad_check(
        move |tape, p| {
            let x = tape.constant(input.clone());
            let h = tape.dense(x, p[0], p[1])?;
            let h = tape.relu(h)?;
            let logits = tape.dense(h, p[2], p[3])?;
            let w = tape.softmax(logits)?;
            let first = tape.select(w, vec![0, 2, 4, 6, 8])?;
            let scores = tape.sum_rows(h)?;
            let mix = tape.mul(first, scores)?;
            let extra = tape.mul(p[4], p[4])?;
            let extra = tape.sum(extra)?;
            let m = tape.mean(mix)?;
            tape.add(m, extra)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn injected_fault_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let point = [random_off_kink(&mut rng, &[6])];
    let f = |tape: &mut Tape<f64>, x: &[NodeId]| {
        let y = tape.relu(x[0])?;
        let y = tape.mul(y, y)?;
        tape.sum(y)
    };
    let clean = grad_check(f, &point, 1e-5).unwrap();
    let broken = grad_check_on(
        || {
            let mut t = Tape::new();
            t.inject_fault(OpTag::Relu);
            t
        },
        f,
        &point,
        1e-5,
    )
    .unwrap();
    assert!(clean < 1e-8);
    assert!(broken > 1.0);
}

#[test]
fn forward_replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, &[4, 6]));
        let k = tape.param("k", random(&mut rng, &[3, 1, 2]));
        let b = tape.param("b", random(&mut rng, &[3]));
        let y = tape.conv_rowwise(x, k, b).unwrap();
        let z = tape.flatten_samples(y, 2).unwrap();
        let s = tape.softmax(z).unwrap();
        let loss = tape.std_dev(s).unwrap();
        let g = tape.backward(loss).unwrap();
        (tape.value(s).clone(), g.get("k").unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn works_in_single_precision() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param("x", Tensor::vector(vec![0.5f32, -1.0, 2.0]));
    let y = tape.softmax(x).unwrap();
    let total: f32 = tape.value(y).data().iter().sum();
    assert!((total - 1.0).abs() < 1e-6);
    let s = tape.std_dev(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get("x").unwrap().is_finite());
}

#[test]
fn op_tag_names_round_trip() {
    for tag in [OpTag::Relu, OpTag::ConvRowwise, OpTag::StdDev, OpTag::Select] {
        assert_eq!(OpTag::from_name(tag.name()), Some(tag));
    }
    assert_eq!(OpTag::from_name("nope"), None);
}

proptest! {
    #[test]
    fn softmax_is_a_probability_vector(x in prop::collection::vec(-1e3f64..1e3, 1..12)) {
        let mut tape = Tape::new();
        let id = tape.constant(Tensor::vector(x));
        let y = tape.softmax(id).unwrap();
        let v = tape.value(y).data();
        prop_assert!(v.iter().all(|&p| p >= 0.0));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn std_dev_is_translation_invariant(
        x in prop::collection::vec(-1.0f64..1.0, 2..20),
        shift in -5.0f64..5.0,
    ) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(x.clone()));
        let b = tape.constant(Tensor::vector(x.iter().map(|v| v + shift).collect()));
        let (sa, sb) = (tape.std_dev(a).unwrap(), tape.std_dev(b).unwrap());
        prop_assert!((tape.value(sa).item() - tape.value(sb).item()).abs() < 1e-9);
    }
}
