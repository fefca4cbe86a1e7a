use fsban_core::gradcheck::{loss_catalogue, max_relative_error, model_catalogue, op_catalogue, CaseGen};
use fsban_core::rng;
use fsban_core::{Tape, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

const CASES: u32 = 128;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check(entries: Vec<(&'static str, CaseGen)>) {
    for (name, gen) in entries {
        let mut runner = TestRunner::new(Config {
            cases: CASES,
            failure_persistence: None,
            ..Config::default()
        });
        runner
            .run(&any::<u64>(), |seed| {
                let case = gen(&mut rng::stream(seed, name));
                let err = max_relative_error(&case, H).map_err(|e| TestCaseError::fail(format!("{e}")))?;
                prop_assert!(err <= TOL, "{name}: relative error {err}");
                Ok(())
            })
            .unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn tape_ops_match_finite_differences() {
    check(op_catalogue());
}

#[test]
fn losses_match_finite_differences() {
    check(loss_catalogue());
}

#[test]
fn model_heads_match_finite_differences() {
    check(model_catalogue());
}

proptest! {
    #[test]
    fn scaling_a_loss_scales_its_gradient(xs in prop::collection::vec(-2.0f64..2.0, 1..8), c in -3.0f64..3.0) {
        let grad = |scale: Option<f64>| {
            let mut t = Tape::new();
            let x = t.param(Tensor::vector(xs.clone()));
            let e = t.exp(x).unwrap();
            let sq = t.mul(e, x).unwrap();
            let mut l = t.sum(sq).unwrap();
            if let Some(c) = scale {
                l = t.scale(l, c).unwrap();
            }
            t.backward(l).unwrap().get(x).unwrap().clone()
        };
        let base = grad(None);
        let scaled = grad(Some(c));
        for (a, b) in base.data().iter().zip(scaled.data()) {
            prop_assert!((c * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn forward_is_deterministic(xs in prop::collection::vec(-2.0f64..2.0, 4..5)) {
        let run = || {
            let mut t = Tape::new();
            let a = t.constant(Tensor::new(vec![2, 2], xs.clone()).unwrap());
            let d = t.pairwise_sq_dist(a, a).unwrap();
            let s = t.softmax_rows(d, 0.7).unwrap();
            t.value(s).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
