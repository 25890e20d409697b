use iclm::rng::{normal_vec, stream};
use iclm::router::kmeans::{lloyd, nearest};
use iclm::router::smacof::euclidean;
use iclm::router::{kmeans_fit, kmeans_route, softmin_weights, vq_route, Codebook, Strategy};
use iclm::Tensor;

fn blobs(seed: u64, per: usize, d: usize, sep: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = stream(seed, "blobs");
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (label, center) in [0.0, sep].into_iter().enumerate() {
        for _ in 0..per {
            pts.push(
                normal_vec(&mut rng, d, 0.3)
                    .into_iter()
                    .map(|x| x + center)
                    .collect(),
            );
            labels.push(label);
        }
    }
    (pts, labels)
}

#[test]
fn vq_choice_matches_brute_force() {
    for seed in 0..25 {
        let h = normal_vec(&mut stream(seed, "vq-h"), 3 * 2, 1.0);
        let c = normal_vec(&mut stream(seed, "vq-c"), 2 * 2, 1.0);
        let book = Codebook::with_centroids(
            Strategy::Vq,
            c.chunks(2).map(<[f64]>::to_vec).collect(),
            0.25,
            1.0,
        )
        .unwrap();
        let r = vq_route(
            &Tensor::new(h.clone(), &[1, 3, 2]).unwrap(),
            &[1.0; 3],
            &book,
        )
        .unwrap();
        let summed: Vec<f64> = c
            .chunks(2)
            .map(|ck| h.chunks(2).map(|hk| euclidean(hk, ck)).sum())
            .collect();
        let best = if summed[1] < summed[0] { 1 } else { 0 };
        assert_eq!(r.chosen, vec![best], "seed {seed}");
    }
}

#[test]
fn vq_worked_loss() {
    // h = [1, 0] against c = [0, 0]: mse = 0.5 each way, L_R = 0.5 + 0.25 * 0.5.
    let book = Codebook::with_centroids(
        Strategy::Vq,
        vec![vec![0.0, 0.0], vec![5.0, 5.0]],
        0.25,
        1.0,
    )
    .unwrap();
    let r = vq_route(
        &Tensor::new(vec![1.0, 0.0], &[1, 1, 2]).unwrap(),
        &[1.0],
        &book,
    )
    .unwrap();
    assert_eq!(r.chosen, vec![0]);
    assert!((r.loss.item() - 0.625).abs() < 1e-15);
}

#[test]
fn kmeans_recovers_blob_labels() {
    let (pts, labels) = blobs(1, 40, 6, 5.0);
    let book = kmeans_fit(&pts, 2, 3, 7).unwrap();
    let r = kmeans_route(&pts, &book).unwrap();
    let agree = r.chosen.iter().zip(&labels).filter(|(a, b)| a == b).count();
    assert!(agree == pts.len() || agree == 0, "{agree} of {}", pts.len());
}

#[test]
fn lloyd_single_cluster_is_the_mean() {
    let (pts, _) = blobs(2, 10, 3, 4.0);
    let km = lloyd(&pts, 1, &mut stream(0, "km")).unwrap();
    for j in 0..3 {
        let mean = pts.iter().map(|p| p[j]).sum::<f64>() / pts.len() as f64;
        assert!((km.centroids[0][j] - mean).abs() < 1e-9);
    }
}

#[test]
fn kmeans_refit_is_deterministic() {
    let (pts, _) = blobs(3, 30, 5, 3.0);
    let a = kmeans_fit(&pts, 2, 2, 11).unwrap();
    let b = kmeans_fit(&pts, 2, 2, 11).unwrap();
    assert_eq!(a.centroids.data(), b.centroids.data());
    assert_eq!(a.basis_coords, b.basis_coords);
}

#[test]
fn kmeans_assignment_is_brute_force_nearest() {
    let (pts, _) = blobs(4, 20, 4, 2.0);
    let book = kmeans_fit(&pts, 3, 2, 5).unwrap();
    let probe: Vec<Vec<f64>> = (0..20)
        .map(|i| normal_vec(&mut stream(i, "probe"), 4, 1.5))
        .collect();
    let r = kmeans_route(&probe, &book).unwrap();
    let cents = book.centroid_rows();
    for (p, &got) in probe.iter().zip(&r.chosen) {
        let y = book.project(p);
        let d: Vec<f64> = cents.iter().map(|c| euclidean(c, &y)).collect();
        let best = (0..d.len()).fold(0, |b, k| if d[k] < d[b] { k } else { b });
        assert_eq!(got, best);
    }
}

#[test]
fn nearest_at_centroid_and_ties() {
    let cents = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
    assert_eq!(nearest(&cents, &[2.0, 0.0]), (1, 0.0));
    assert_eq!(nearest(&cents, &[1.0, 5.0]).0, 0);
}

fn softmin(dist_points: Vec<f64>, cents: Vec<Vec<f64>>, temperature: f64) -> Vec<f64> {
    let book = Codebook::with_centroids(Strategy::Softmin, cents, 0.25, temperature).unwrap();
    let d = dist_points.len();
    softmin_weights(&Tensor::new(dist_points, &[1, d]).unwrap(), &book)
        .unwrap()
        .weights[0]
        .clone()
}

#[test]
fn softmin_examples() {
    let w = softmin(
        vec![0.0, 0.0],
        vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
        1.0,
    );
    for x in &w {
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
    }
    let w = softmin(vec![0.0], vec![vec![0.0], vec![1e6]], 1.0);
    assert_eq!(w, vec![1.0, 0.0]);
    // Distances 1 and 2: softmax([-1, -2]).
    let w = softmin(vec![0.0], vec![vec![1.0], vec![-2.0]], 1.0);
    let e = 1.0 / (1.0 + (-1f64).exp());
    assert!((w[0] - e).abs() < 1e-12 && (w[1] - (1.0 - e)).abs() < 1e-12);
    assert!((w[0] - 0.731).abs() < 1e-3);
}
