use super::*;
use crate::test_support::gradcheck::{max_rel_error, random_tensor};
use crate::test_support::primitives;

fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

#[test]
fn matmul_identity_and_scalar() {
    let mut tape = Tape::new();
    let i = tape.constant(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
    let b = tape.constant(t(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0])).unwrap();
    let y = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.leaf(t(vec![1, 1], vec![2.0]), false).unwrap();
    let c = tape.constant(t(vec![1, 1], vec![3.0])).unwrap();
    let y = tape.matmul(a, c).unwrap();
    assert_eq!(tape.value(y).data(), &[6.0]);
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_random_3x4_by_4x2_matches_finite_differences() {
    let err = max_rel_error(
        |tape, v| {
            let y = tape.matmul(v[0], v[1])?;
            let y = tape.mul(y, y)?;
            tape.sum(y)
        },
        &[random_tensor(vec![3, 4], 7, 1.0), random_tensor(vec![4, 2], 8, 1.0)],
    )
    .unwrap();
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn grad_reverse_forward_is_bitwise_identity() {
    let mut tape = Tape::new();
    let x = tape.leaf(random_tensor(vec![3, 4], 1, 5.0), true).unwrap();
    let y = tape.grad_reverse(x, GradScale::new(0.3).unwrap()).unwrap();
    let xb: Vec<u64> = tape.value(x).data().iter().map(|v| v.to_bits()).collect();
    let yb: Vec<u64> = tape.value(y).data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(xb, yb);
}

fn reversed_grad(alpha: f64, upstream: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let n = upstream.len();
    let x = tape.leaf(Tensor::zeros(vec![1, n]), true).unwrap();
    let w = tape.constant(t(vec![1, n], upstream.to_vec())).unwrap();
    let y = tape.grad_reverse(x, GradScale::new(alpha).unwrap()).unwrap();
    let p = tape.mul(y, w).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    tape.grad(x).unwrap().to_vec()
}

#[test]
fn grad_reverse_flips_and_scales_upstream() {
    assert_eq!(reversed_grad(1.0, &[1.5, -2.0, 0.25]), vec![-1.5, 2.0, -0.25]);
    assert_eq!(reversed_grad(0.5, &[2.0, -4.0]), vec![-1.0, 2.0]);
}

#[test]
fn grad_scale_rejects_negative_and_nan() {
    assert!(GradScale::new(-0.1).is_err());
    assert!(GradScale::new(f64::NAN).is_err());
    assert!(GradScale::new(0.0).is_ok());
}

#[test]
fn cross_entropy_saturated_and_uniform() {
    let mut tape = Tape::new();
    let mut logits = vec![0.0; 10];
    logits[3] = 30.0;
    let l = tape.constant(t(vec![1, 10], logits)).unwrap();
    let ce = tape.cross_entropy(l, &[3], &[true]).unwrap();
    assert!(tape.item(ce).abs() < 1e-9);

    let u = tape.constant(Tensor::zeros(vec![2, 10])).unwrap();
    let ce = tape.cross_entropy(u, &[7, 0], &[true, true]).unwrap();
    assert!((tape.item(ce) - 10f64.ln()).abs() < 1e-9);
    assert!((tape.item(ce) - std::f64::consts::LN_10).abs() < 1e-6);
}

#[test]
fn cross_entropy_matches_scalar_log_sum_exp() {
    let logits = random_tensor(vec![4, 7], 99, 3.0);
    let targets = [2, 6, 0, 4];
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone()).unwrap();
    let ce = tape.cross_entropy(l, &targets, &[true; 4]).unwrap();

    // independent scalar evaluation, no max shift
    let mut expected = 0.0;
    for (r, &tg) in targets.iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expected += z.ln() - row[tg];
    }
    expected /= 4.0;
    assert!((tape.item(ce) - expected).abs() < 1e-12);
}

#[test]
fn cross_entropy_error_paths() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(vec![2, 5])).unwrap();
    assert!(matches!(
        tape.cross_entropy(l, &[0, 1], &[false, false]),
        Err(Error::EmptyLoss(_))
    ));
    assert!(matches!(
        tape.cross_entropy(l, &[0, 5], &[true, true]),
        Err(Error::Index { index: 5, bound: 5, .. })
    ));
    // masked rows may carry any target
    assert!(tape.cross_entropy(l, &[0, 99], &[true, false]).is_ok());
}

#[test]
fn kl_of_identical_logits_is_zero() {
    let logits = random_tensor(vec![5, 9], 3, 4.0);
    let mut tape = Tape::new();
    let a = tape.constant(logits.clone()).unwrap();
    let b = tape.leaf(logits, true).unwrap();
    let kl = tape.kl_divergence(a, b, &[true; 5]).unwrap();
    assert!(tape.item(kl).abs() < 1e-10);
}

#[test]
fn kl_two_class_closed_form() {
    let mut tape = Tape::new();
    let r = tape.constant(t(vec![1, 2], vec![0.0, 0.0])).unwrap();
    let m = tape.constant(t(vec![1, 2], vec![3f64.ln(), 0.0])).unwrap();
    let kl = tape.kl_divergence(r, m, &[true]).unwrap();
    // p_ref = (1/2, 1/2), p_model = (3/4, 1/4)
    let expected = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
    assert!((tape.item(kl) - expected).abs() < 1e-14);
    assert!((expected - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-14);
}

#[test]
fn kl_never_sends_gradient_to_reference() {
    let mut tape = Tape::new();
    let r = tape.leaf(random_tensor(vec![2, 4], 4, 1.0), true).unwrap();
    let m = tape.leaf(random_tensor(vec![2, 4], 5, 1.0), true).unwrap();
    let kl = tape.kl_divergence(r, m, &[true, true]).unwrap();
    tape.backward(kl).unwrap();
    assert!(tape.grad(r).is_none());
    assert!(tape.grad(m).is_some());
}

#[test]
fn kl_shape_mismatch() {
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::zeros(vec![2, 4])).unwrap();
    let m = tape.constant(Tensor::zeros(vec![2, 5])).unwrap();
    assert!(matches!(
        tape.kl_divergence(r, m, &[true, true]),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(random_tensor(vec![3, 2], 11, 1.0), true).unwrap();
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(vec![2, 2]), true).unwrap();
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(vec![1, 2], vec![1.0, 2.0]), true).unwrap();
    let y = tape.mul(x, x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn non_finite_values_abort() {
    let mut tape = Tape::new();
    assert!(matches!(
        tape.leaf(t(vec![1], vec![f64::NAN]), true),
        Err(Error::NonFinite(_))
    ));
    let x = tape.constant(t(vec![1, 1], vec![1e300])).unwrap();
    assert!(matches!(tape.mul(x, x), Err(Error::NonFinite(_))));
}

#[test]
fn composite_ce_through_matmul_softmax_matches_finite_differences() {
    let err = max_rel_error(
        |tape, v| {
            let h = tape.matmul(v[0], v[1])?;
            let p = tape.softmax(h)?;
            let q = tape.matmul(p, v[2])?;
            tape.cross_entropy(q, &[0, 2, 1], &[true, true, true])
        },
        &[
            random_tensor(vec![3, 4], 21, 1.0),
            random_tensor(vec![4, 5], 22, 1.0),
            random_tensor(vec![5, 3], 23, 2.0),
        ],
    )
    .unwrap();
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn gradient_through_grl_is_minus_alpha_times_plain_gradient() {
    let x0 = random_tensor(vec![2, 3], 5, 1.0);
    let w0 = random_tensor(vec![3, 4], 6, 1.0);
    let run = |alpha: Option<f64>| {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true).unwrap();
        let w = tape.leaf(w0.clone(), true).unwrap();
        let h = match alpha {
            Some(a) => tape.grad_reverse(x, GradScale::new(a).unwrap()).unwrap(),
            None => x,
        };
        let y = tape.matmul(h, w).unwrap();
        let l = tape.cross_entropy(y, &[1, 3], &[true, true]).unwrap();
        tape.backward(l).unwrap();
        (tape.grad_or_zeros(x), tape.grad_or_zeros(w))
    };
    let (gx, gw) = run(None);
    for alpha in [0.0, 0.5, 1.0] {
        let (rx, rw) = run(Some(alpha));
        for (a, b) in rx.iter().zip(&gx) {
            assert_eq!(*a, -alpha * b);
        }
        // parameters above the GRL are untouched
        assert_eq!(rw, gw);
    }
}

#[test]
fn every_primitive_matches_finite_differences_on_twenty_seeds() {
    for seed in 0..20 {
        for case in primitives::cases(seed) {
            let err = max_rel_error(&case.build, &case.inputs).unwrap();
            assert!(err < 1e-4, "{} seed {seed}: rel err {err}", case.name);
        }
    }
}

#[test]
fn primitive_identities() {
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(vec![3, 4], 2, 1.0)).unwrap();
    let zero_row = tape.constant(Tensor::zeros(vec![4])).unwrap();
    let one_row = tape.constant(t(vec![4], vec![1.0; 4])).unwrap();

    let a = tape.add_row(x, zero_row).unwrap();
    assert_eq!(tape.value(a), tape.value(x));
    let m = tape.mul_row(x, one_row).unwrap();
    assert_eq!(tape.value(m), tape.value(x));

    let y = tape.constant(random_tensor(vec![3, 4], 3, 1.0)).unwrap();
    let xy = tape.add(x, y).unwrap();
    let yx = tape.add(y, x).unwrap();
    assert_eq!(tape.value(xy), tape.value(yx));
    let xy = tape.mul(x, y).unwrap();
    let yx = tape.mul(y, x).unwrap();
    assert_eq!(tape.value(xy), tape.value(yx));

    let tt = tape.transpose(x).unwrap();
    let tt = tape.transpose(tt).unwrap();
    assert_eq!(tape.value(tt), tape.value(x));

    let sm = tape.softmax(x).unwrap();
    for r in 0..3 {
        let s: f64 = tape.value(sm).row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let ls = tape.log_softmax(x).unwrap();
    for (a, b) in tape.value(ls).data().iter().zip(tape.value(sm).data()) {
        assert!((a.exp() - b).abs() < 1e-12);
    }

    let g = tape.gelu(zero_row).unwrap();
    assert_eq!(tape.value(g).data(), &[0.0; 4]);

    let n = tape.rms_norm(x, one_row, 0.0).unwrap();
    for r in 0..3 {
        let ms: f64 = tape.value(n).row(r).iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((ms - 1.0).abs() < 1e-12);
    }

    let emb = tape.gather_rows(x, &[2, 0]).unwrap();
    assert_eq!(tape.value(emb).row(0), tape.value(x).row(2));

    let sq = tape.constant(random_tensor(vec![3, 3], 4, 1.0)).unwrap();
    let cm = tape.causal_mask(sq).unwrap();
    let p = tape.softmax(cm).unwrap();
    assert_eq!(tape.value(p).get2(0, 0), 1.0);
    assert_eq!(tape.value(p).get2(0, 1), 0.0);
    assert_eq!(tape.value(p).get2(1, 2), 0.0);

    let left = tape.slice_cols(x, 0, 2).unwrap();
    let right = tape.slice_cols(x, 2, 2).unwrap();
    let back = tape.concat_cols(&[left, right]).unwrap();
    assert_eq!(tape.value(back), tape.value(x));
    let top = tape.slice_rows(x, 0, 1).unwrap();
    let rest = tape.slice_rows(x, 1, 2).unwrap();
    let back = tape.concat_rows(&[top, rest]).unwrap();
    assert_eq!(tape.value(back), tape.value(x));
}

#[test]
fn embedding_backward_scatter_adds_repeated_rows() {
    let mut tape = Tape::new();
    let table = tape.leaf(Tensor::zeros(vec![4, 2]), true).unwrap();
    let e = tape.gather_rows(table, &[1, 3, 1]).unwrap();
    let s = tape.sum(e).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let case = primitives::cases(3).into_iter().find(|c| c.name == "rms_norm").unwrap();
        crate::test_support::gradcheck::analytic(&case.build, &case.inputs).unwrap()
    };
    let a: Vec<u64> = run().concat().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = run().concat().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn kl_is_non_negative_and_zero_on_self(seed in 0u64..10_000, rows in 1usize..5, cols in 2usize..9) {
            let r = random_tensor(vec![rows, cols], seed, 6.0);
            let m = random_tensor(vec![rows, cols], seed + 1, 6.0);
            let mut tape = Tape::new();
            let rv = tape.constant(r.clone()).unwrap();
            let mv = tape.constant(m).unwrap();
            let mask = vec![true; rows];
            let kl = tape.kl_divergence(rv, mv, &mask).unwrap();
            prop_assert!(tape.item(kl) >= -1e-12);
            let rv2 = tape.constant(r).unwrap();
            let same = tape.kl_divergence(rv, rv2, &mask).unwrap();
            prop_assert!(tape.item(same).abs() < 1e-10);
        }
    }
}
