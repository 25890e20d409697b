mod common;

use common::{check_grads, check_vq_split, failing_grad_cases, randn, weighted_sum};
use iclm::tensor::shared_batch_norm;
use iclm::{Error, Tensor};

fn t(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::new(data.to_vec(), shape).unwrap()
}

fn assert_grads<F: Fn(&[Tensor]) -> Tensor>(inputs: &[(Vec<f64>, Vec<usize>)], f: F) {
    if let Err(m) = check_grads(inputs, f) {
        panic!("gradient mismatch: {m:?}");
    }
}

#[test]
fn matmul_identity_and_shape_error() {
    let id = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let v = t(&[3.0, 4.0], &[2, 1]);
    assert_eq!(id.matmul(&v).unwrap().data(), &[3.0, 4.0]);
    let err = Tensor::zeros(&[2, 3])
        .matmul(&Tensor::zeros(&[4, 1]))
        .unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 1]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let s = t(&[0.0, 0.0], &[2]).softmax(0).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = t(&[1f64.ln(), 3f64.ln()], &[2]).softmax(0).unwrap();
    assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
    let s = t(&[1000.0, 0.0], &[2]).softmax(0).unwrap();
    assert_eq!(s.data(), &[1.0, 0.0]);
    assert!(matches!(
        t(&[1.0], &[1]).softmax(1),
        Err(Error::Axis { axis: 1, rank: 1 })
    ));
}

#[test]
fn softmax_rows_sum_to_one() {
    let (d, s) = randn(3, &[4, 7]);
    let y = t(&d, &s).softmax(1).unwrap();
    for row in y.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|p| *p >= 0.0));
    }
}

#[test]
fn cross_entropy_examples() {
    let mut logits = vec![0.0; 2 * 4];
    logits[1] = 100.0;
    logits[4 + 3] = 100.0;
    let l = t(&logits, &[1, 2, 4])
        .cross_entropy(&[1, 3], &[1.0, 1.0])
        .unwrap();
    assert!(l.item() < 1e-6);
    let u = t(&[0.0; 4], &[1, 1, 4])
        .cross_entropy(&[2], &[1.0])
        .unwrap();
    assert!((u.item() - 4f64.ln()).abs() < 1e-12);
    let x = Tensor::param(vec![0.3; 8], &[1, 2, 4]).unwrap();
    let z = x.cross_entropy(&[0, 1], &[0.0, 0.0]).unwrap();
    assert_eq!(z.item(), 0.0);
    z.backward().unwrap();
    assert!(x.grad_or_zeros().iter().all(|g| *g == 0.0));
    assert!(matches!(
        t(&[0.0; 4], &[1, 1, 4]).cross_entropy(&[4], &[1.0]),
        Err(Error::Index {
            index: 4,
            bound: 4,
            ..
        })
    ));
}

#[test]
fn stop_gradient_examples() {
    let x = Tensor::param(vec![2.0, 3.0], &[2]).unwrap();
    let sg = x.stop_gradient();
    assert_eq!(sg.data(), x.data());
    sg.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 3.0]);

    let y = Tensor::param(vec![2.0, 3.0], &[2]).unwrap();
    let loss = y.stop_gradient().sum();
    loss.backward().unwrap();
    assert!(y.grad_or_zeros().iter().all(|g| *g == 0.0));
}

#[test]
fn stop_gradient_split_matches_finite_differences() {
    // d/dx sum(sg(x) * x) = x: check against differences of the detached
    // composition, where sg(x) is the constant value of x.
    let x0 = vec![0.7, -1.3, 2.0];
    let x = Tensor::param(x0.clone(), &[3]).unwrap();
    x.stop_gradient().mul(&x).unwrap().sum().backward().unwrap();
    let c = t(&x0, &[3]);
    assert_grads(&[(x0.clone(), vec![3])], |v| c.mul(&v[0]).unwrap().sum());
    for (g, v) in x.grad().unwrap().iter().zip(&x0) {
        assert_eq!(g, v);
    }
}

#[test]
fn backward_examples() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let unused = Tensor::param(vec![5.0], &[1]).unwrap();
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    assert_eq!(unused.grad_or_zeros(), vec![0.0]);
    assert!(matches!(x.backward(), Err(Error::Shape(_))));
}

#[test]
fn backward_is_repeatable() {
    let (d, s) = randn(9, &[3, 4]);
    let x = Tensor::param(d, &s).unwrap();
    let loss = weighted_sum(&x.gelu().softmax(1).unwrap(), 1);
    loss.backward().unwrap();
    let g1 = x.grad().unwrap();
    loss.backward().unwrap();
    assert_eq!(g1, x.grad().unwrap());
}

#[test]
fn shared_batch_norm_examples() {
    let a = t(&[1.0, 3.0], &[2, 1]);
    let b = t(&[1.0, 3.0], &[2, 1]);
    let g = t(&[1.0], &[1]);
    let z = t(&[0.0], &[1]);
    let (out, stats) = shared_batch_norm(&[a, b], &g, &z, None, 1e-5).unwrap();
    let all: Vec<f64> = out.iter().flat_map(|o| o.to_vec()).collect();
    let mean = all.iter().sum::<f64>() / 4.0;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-4);
    assert_eq!(stats.mean, vec![2.0]);

    // Standardized input is a fixed point (up to the epsilon).
    let x = t(&[-1.0, 1.0, -1.0, 1.0], &[4, 1]);
    let (out, _) = shared_batch_norm(std::slice::from_ref(&x), &g, &z, None, 1e-5).unwrap();
    for (o, i) in out[0].data().iter().zip(x.data()) {
        assert!((o - i).abs() < 1e-5);
    }
    let one = t(&[2.0], &[1, 1]);
    assert!(matches!(
        shared_batch_norm(&[one], &g, &z, None, 1e-5),
        Err(Error::DegenerateVariance(_))
    ));
}

#[test]
fn shared_batch_norm_moments_over_random_states() {
    let (d1, s1) = randn(1, &[3, 4, 5]);
    let (d2, _) = randn(2, &[3, 4, 5]);
    let g = Tensor::full(&[5], 1.0);
    let z = Tensor::zeros(&[5]);
    let (out, _) = shared_batch_norm(&[t(&d1, &s1), t(&d2, &s1)], &g, &z, None, 1e-5).unwrap();
    for f in 0..5 {
        let col: Vec<f64> = out
            .iter()
            .flat_map(|o| {
                o.data()
                    .iter()
                    .skip(f)
                    .step_by(5)
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect();
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn every_op_matches_finite_differences() {
    let failing = failing_grad_cases();
    assert!(failing.is_empty(), "{failing:#?}");
}

#[test]
fn routing_loss_split_matches_detached_differences() {
    for seed in [1, 2, 3] {
        if let Err(m) = check_vq_split(seed) {
            panic!("seed {seed}: {m:?}");
        }
    }
}

#[test]
fn stop_gradient_keeps_forward_values() {
    let (d, s) = randn(21, &[3, 4]);
    let x = Tensor::param(d, &s).unwrap();
    let a = x.gelu().softmax(1).unwrap();
    let b = x.stop_gradient().gelu().softmax(1).unwrap();
    assert_eq!(a.data(), b.data());
}
