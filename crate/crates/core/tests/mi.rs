use iclm::mi::{conditional_distribution, mi_estimate, mi_tensor, rows};
use iclm::rng::{normal_vec, stream};
use iclm::Tensor;
use proptest::prelude::*;

/// Brute-force KL between the batch joint and the product of marginals.
fn brute_mi(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let b = p.len() as f64;
    let mut total = 0.0;
    for i in 0..p[0].len() {
        for j in 0..q[0].len() {
            let joint: f64 = p.iter().zip(q).map(|(a, c)| a[i] * c[j]).sum::<f64>() / b;
            let mi: f64 = p.iter().map(|a| a[i]).sum::<f64>() / b;
            let mj: f64 = q.iter().map(|c| c[j]).sum::<f64>() / b;
            if joint > 0.0 {
                total += joint * (joint / (mi * mj)).ln();
            }
        }
    }
    total
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn random_batch(seed: u64, b: usize, k: usize, scale: f64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, "mi-batch");
    (0..b)
        .map(|_| softmax(&normal_vec(&mut rng, k, scale)))
        .collect()
}

#[test]
fn single_context_is_zero() {
    let p = random_batch(1, 1, 5, 2.0);
    let q = random_batch(2, 1, 3, 2.0);
    assert!(mi_estimate(&p, &q).unwrap().value.abs() < 1e-12);
}

#[test]
fn constant_batch_is_zero() {
    let p = vec![vec![0.1, 0.2, 0.7]; 6];
    let q = vec![vec![0.5, 0.25, 0.25]; 6];
    assert!(mi_estimate(&p, &q).unwrap().value.abs() < 1e-12);
    let t = mi_tensor(
        &Tensor::new(p.concat(), &[6, 3]).unwrap(),
        &Tensor::new(q.concat(), &[6, 3]).unwrap(),
    )
    .unwrap();
    assert!(t.item().abs() < 1e-12);
}

#[test]
fn paired_deltas_give_ln_2() {
    let p = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    // Four joint cells: two of mass 1/2 against marginal products 1/4.
    let oracle = 2.0 * 0.5 * (0.5f64 / 0.25).ln();
    assert!((oracle - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((mi_estimate(&p, &p).unwrap().value - oracle).abs() < 1e-9);
    let t = Tensor::new(p.concat(), &[2, 2]).unwrap();
    assert!((mi_tensor(&t, &t).unwrap().item() - oracle).abs() < 1e-9);
}

#[test]
fn zero_state_gives_uniform_and_spike_gives_delta() {
    let u = conditional_distribution(&Tensor::zeros(&[1, 4])).unwrap();
    assert_eq!(u.data(), &[0.25; 4]);
    let s =
        conditional_distribution(&Tensor::new(vec![0.0, 100.0, 0.0], &[1, 3]).unwrap()).unwrap();
    assert!(s.data()[1] > 1.0 - 1e-12);
}

#[test]
fn conditional_matches_softmax_oracle() {
    let x = normal_vec(&mut stream(3, "states"), 5 * 7, 1.5);
    let p = conditional_distribution(&Tensor::new(x.clone(), &[5, 7]).unwrap()).unwrap();
    for (row, raw) in rows(&p).iter().zip(x.chunks(7)) {
        for (a, b) in row.iter().zip(softmax(raw)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn tensor_and_reference_estimates_agree_with_brute_force() {
    for seed in 0..20 {
        let p = random_batch(seed, 8, 6, 2.0);
        let q = random_batch(seed + 100, 8, 4, 2.0);
        let oracle = brute_mi(&p, &q);
        let r = mi_estimate(&p, &q).unwrap().value;
        let t = mi_tensor(
            &Tensor::new(p.concat(), &[8, 6]).unwrap(),
            &Tensor::new(q.concat(), &[8, 4]).unwrap(),
        )
        .unwrap();
        assert!((r - oracle).abs() < 1e-12, "{r} vs {oracle}");
        assert!(
            (t.item() - oracle).abs() < 1e-12,
            "{} vs {oracle}",
            t.item()
        );
    }
}

#[test]
fn mismatched_batches_are_rejected() {
    assert!(mi_estimate(&random_batch(1, 3, 2, 1.0), &random_batch(2, 4, 2, 1.0)).is_err());
    assert!(mi_estimate(&[], &[]).is_err());
}

proptest! {
    #[test]
    fn symmetric_and_nonnegative(seed in 0u64..1_000_000, b in 1usize..12, k in 2usize..8, scale in 0.1f64..6.0) {
        let p = random_batch(seed, b, k, scale);
        let q = random_batch(seed ^ 0xabc, b, k + 1, scale);
        let pq = mi_estimate(&p, &q).unwrap().value;
        let qp = mi_estimate(&q, &p).unwrap().value;
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - qp).abs() < 1e-12);
    }
}
