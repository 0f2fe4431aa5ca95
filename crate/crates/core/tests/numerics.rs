use std::cell::Cell;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segvggt::numerics::{grad_check, softmax_lastdim, NumericsError, Tape, Tensor, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    t(
        shape,
        &(0..n)
            .map(|_| rng.random_range(-scale..scale))
            .collect::<Vec<_>>(),
    )
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let id = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let r = tape.matmul(id, m).unwrap();
    assert_eq!(tape.data(r), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let b = tape.leaf(t(&[2, 1], &[0.0, 5.0]));
    let r = tape.matmul(a, b).unwrap();
    assert_eq!(tape.data(r), &[0.0, 0.0]);

    let b = tape.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let r = tape.matmul(m, b).unwrap();
    // 1*5+2*7, 1*6+2*8, 3*5+4*7, 3*6+4*8
    assert_eq!(tape.data(r), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        NumericsError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, 3, 4], 0.7).with_requires_grad(true));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_of_sigmoid_at_zero() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::scalar(0.0).with_requires_grad(true));
    let s = tape.sigmoid(w);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[0.25]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3]).with_requires_grad(true));
    let y = tape.exp(x);
    assert_eq!(tape.backward(y), Err(NumericsError::NonScalarLoss(vec![3])));
}

#[test]
fn grad_check_quadratic() {
    let report = grad_check(
        |tape, p| {
            let sq = tape.mul(p[0], p[0])?;
            Ok(tape.sum(sq))
        },
        &[Tensor::scalar(3.0)],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_detects_nondeterminism() {
    let calls = Cell::new(0u32);
    let err = grad_check(
        |tape, p| {
            calls.set(calls.get() + 1);
            let s = tape.sum(p[0]);
            Ok(tape.add_scalar(s, calls.get() as f64))
        },
        &[Tensor::scalar(1.0)],
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(err, NumericsError::NonDeterministic { .. }));
    assert!(grad_check(|tape, p| Ok(tape.sum(p[0])), &[Tensor::scalar(1.0)], 0.0).is_err());
}

/// Two stacked single-view attention layers reduced to a scalar.
fn attention_toy(tape: &mut Tape, p: &[Var]) -> Result<Var, NumericsError> {
    let mut x = p[0];
    for layer in 0..2 {
        let w = &p[1 + layer * 4..5 + layer * 4];
        let q = tape.matmul(x, w[0])?;
        let k = tape.matmul(x, w[1])?;
        let v = tape.matmul(x, w[2])?;
        let s = tape.head_scores(q, k, 2, 0.5)?;
        let a = tape.softmax_lastdim(s);
        let o = tape.head_mix(a, v, 2)?;
        let o = tape.matmul(o, w[3])?;
        x = tape.add(x, o)?;
    }
    let g = tape.gelu(x);
    let sq = tape.mul(g, g)?;
    Ok(tape.mean(sq))
}

#[test]
fn composite_attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = vec![random(&mut rng, &[5, 4], 1.0)];
    for _ in 0..8 {
        params.push(random(&mut rng, &[4, 4], 0.8));
    }
    let report = grad_check(attention_toy, &params, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = vec![random(&mut rng, &[5, 4], 1.0)];
    for _ in 0..8 {
        params.push(random(&mut rng, &[4, 4], 0.8));
    }
    let run = || {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = attention_toy(&mut tape, &vars).unwrap();
        tape.backward(loss).unwrap();
        vars.iter()
            .flat_map(|&v| tape.grad(v).unwrap().to_vec())
            .map(f64::to_bits)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

/// Each primitive followed by a random linear read-out, so every output
/// entry carries a distinct upstream gradient.
fn check_primitive(
    inputs: Vec<Tensor>,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = op(&mut tape, &vars).unwrap();
        tape.value(out).numel()
    };
    let weights: Vec<f64> = (0..probe_len)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let report = grad_check(
        |tape, p| {
            let out = op(tape, p)?;
            let shape = tape.shape(out).to_vec();
            let w = tape.constant(shape, weights.clone())?;
            let prod = tape.mul(out, w)?;
            Ok(tape.sum(prod))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut r = |shape: &[usize]| random(&mut rng, shape, 1.0);
    check_primitive(vec![r(&[3, 4]), r(&[4, 2])], |t, p| t.matmul(p[0], p[1]));
    check_primitive(vec![r(&[3, 4]), r(&[2, 4])], |t, p| t.matmul_nt(p[0], p[1]));
    check_primitive(vec![r(&[3, 4]), r(&[3, 4])], |t, p| t.add(p[0], p[1]));
    check_primitive(vec![r(&[3, 4]), r(&[3, 4])], |t, p| t.sub(p[0], p[1]));
    check_primitive(vec![r(&[3, 4]), r(&[3, 4])], |t, p| t.mul(p[0], p[1]));
    let positive = t(
        &[3, 4],
        &[0.5, 1.2, 2.0, 0.8, 1.1, 0.6, 3.0, 0.9, 1.4, 2.2, 0.7, 1.0],
    );
    check_primitive(vec![r(&[3, 4]), positive], |t, p| t.div(p[0], p[1]));
    check_primitive(vec![r(&[3, 4]), r(&[4])], |t, p| t.add_row(p[0], p[1]));
    check_primitive(vec![r(&[3, 4])], |t, p| Ok(t.scale(p[0], -1.7)));
    check_primitive(vec![r(&[2, 3, 4])], |t, p| Ok(t.softmax_lastdim(p[0])));
    check_primitive(vec![r(&[3, 4])], |t, p| Ok(t.sigmoid(p[0])));
    check_primitive(vec![r(&[3, 4])], |t, p| Ok(t.exp(p[0])));
    check_primitive(vec![r(&[3, 4])], |t, p| {
        let e = t.exp(p[0]);
        Ok(t.log(e))
    });
    check_primitive(vec![r(&[3, 4])], |t, p| Ok(t.gelu(p[0])));
    check_primitive(vec![t(&[4], &[-0.7, 0.3, 1.2, -0.05])], |t, p| {
        Ok(t.abs(p[0]))
    });
    check_primitive(vec![t(&[4], &[-0.7, 0.03, 1.2, -0.05])], |t, p| {
        Ok(t.huber(p[0], 0.1))
    });
    check_primitive(vec![r(&[3, 5]), r(&[5]), r(&[5])], |t, p| {
        t.layer_norm(p[0], p[1], p[2], 1e-5)
    });
    check_primitive(vec![r(&[5, 2])], |t, p| t.slice_rows(p[0], 1, 3));
    check_primitive(vec![r(&[2, 3]), r(&[1, 3])], |t, p| {
        t.concat_rows(&[p[0], p[1], p[0]])
    });
    check_primitive(vec![r(&[2, 3])], |t, p| {
        t.gather(p[0], vec![5, 0, 0, 3], vec![2, 2])
    });
    check_primitive(vec![r(&[2, 3])], |t, p| Ok(t.sum_lastdim(p[0])));
    check_primitive(vec![r(&[3, 4]), r(&[5, 4])], |t, p| {
        t.head_scores(p[0], p[1], 2, 0.7)
    });
    check_primitive(vec![r(&[2, 3, 5]), r(&[5, 4])], |t, p| {
        t.head_mix(p[0], p[1], 2)
    });
    check_primitive(vec![r(&[2, 3, 5])], |t, p| t.head_mean(p[0]));
    check_primitive(vec![r(&[2, 6])], |t, p| t.segment_sum(p[0], &[0, 2, 3, 6]));
    check_primitive(vec![r(&[3, 4])], |t, p| Ok(t.normalize_rows(p[0])));
    check_primitive(vec![r(&[2, 3])], |t, p| {
        t.bce_logits(p[0], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0])
    });
    check_primitive(vec![r(&[3, 4])], |t, p| {
        t.cross_entropy(p[0], vec![0, 3, 1], vec![1.0, 0.1, 1.0])
    });
    check_primitive(vec![r(&[2, 3])], |t, p| {
        let q = t.softmax_lastdim(p[0]);
        t.js_rows(q, vec![0.5, 0.5, 0.0, 0.0, 0.25, 0.75])
    });
}

#[test]
fn requires_grad_tensors_receive_gradients() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::full(&[2, 2], 1.0).with_requires_grad(true));
    let unused = tape.leaf(Tensor::full(&[3], 1.0).with_requires_grad(true));
    let c = tape.leaf(Tensor::full(&[2, 2], 2.0));
    let m = tape.mul(a, c).unwrap();
    let s = tape.sum(m);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[2.0; 4]);
    assert_eq!(tape.grad(unused).unwrap(), &[0.0; 3]);
    assert!(tape.grad(c).is_none());
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(data in proptest::collection::vec(-50.0f64..50.0, 1..40), n in 1usize..6) {
        let rows = data.len() / n;
        prop_assume!(rows > 0);
        let x = t(&[rows, n], &data[..rows * n]);
        let s = softmax_lastdim(&x);
        for row in s.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(s.is_finite());
    }

    #[test]
    fn softmax_is_shift_invariant(data in proptest::collection::vec(-20.0f64..20.0, 1..12), c in -100.0f64..100.0) {
        let x = t(&[data.len()], &data);
        let shifted = t(&[data.len()], &data.iter().map(|v| v + c).collect::<Vec<_>>());
        let a = softmax_lastdim(&x);
        let b = softmax_lastdim(&shifted);
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }
}
