mod support;

use support::gradcheck::{check_op, OPS, TOLERANCE};

#[test]
fn every_op_matches_central_differences() {
    for op in OPS {
        let worst = check_op(op, 100, 17);
        assert!(worst <= TOLERANCE, "{op}: relative error {worst}");
    }
}

#[test]
fn a_mismatched_gradient_is_reported() {
    // Scale 1 at the probe point, scale 2 anywhere else: the recorded gradient
    // disagrees with the finite-difference slope by a factor of two.
    let mut r = tve_core::rng::stream(3, &[]);
    let x = tve_core::Tensor::randn(&[3, 4], 1.0, &mut r).into_param();
    let t = tve_core::Tensor::randn(&[3, 4], 1.0, &mut r);
    let origin = x.data().to_vec();
    let err = support::gradcheck::relative_error(std::slice::from_ref(&x), Some(&t), &move |tape, v| {
        let f = if tape.value(v[0]).data() == origin.as_slice() { 1.0 } else { 2.0 };
        tape.scale(v[0], f)
    });
    assert!(err > 0.1, "{err}");
}
