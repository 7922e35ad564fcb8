use compass_core::gradcheck::{check_all, check_op, OPS, TOL};
use compass_core::{Prng, Tape, Tensor};

const CASES: u64 = 100;

#[test]
fn every_op_matches_finite_differences() {
    let reports = check_all(CASES).unwrap();
    assert_eq!(reports.len(), OPS.len());
    for r in &reports {
        assert!(
            r.max_fwd_err <= 1e-4,
            "{}: forward error {:.3e}",
            r.op,
            r.max_fwd_err
        );
        assert!(
            r.max_rel_err <= TOL,
            "{}: relative gradient error {:.3e}",
            r.op,
            r.max_rel_err
        );
    }
}

#[test]
fn unknown_op_is_none() {
    assert!(check_op("no_such_op", 1).unwrap().is_none());
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut rng = Prng::new(1);
    let mut t = Tape::new();
    let x = t.leaf(Tensor::randn(&[2, 3], 1.0, &mut rng).with_grad());
    let y = t.stop_gradient(x);
    let z = t.mul(x, y).unwrap();
    let l = t.sum_all(z).unwrap();
    t.backward(l).unwrap();
    // d/dx Σ x·sg(x) = sg(x) = x
    assert_eq!(t.grad(x).unwrap(), t.data(x));
}
