use cmd_autograd::Tensor;
use cmd_core::data::ImagePatch;
use cmd_core::features::DenseFeatureMap;
use cmd_core::visualize::*;

/// Fraction of pixels on which `a` and `b` agree under the best relabelling of `b`.
fn best_permutation_agreement(a: &[u32], b: &[u32], k: usize) -> f64 {
    let mut perm: Vec<u32> = (0..k as u32).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |p| {
        let hits = a.iter().zip(b).filter(|(x, y)| **x == p[**y as usize]).count();
        best = best.max(hits);
    });
    best as f64 / a.len() as f64
}

fn permute(p: &mut Vec<u32>, i: usize, f: &mut dyn FnMut(&[u32])) {
    if i == p.len() {
        f(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, f);
        p.swap(i, j);
    }
}

fn map(h: usize, w: usize, c: usize, f: impl Fn(usize, usize) -> Vec<f32>) -> DenseFeatureMap {
    let data = (0..h * w).flat_map(|i| f(i / w, i % w)).collect::<Vec<_>>();
    assert_eq!(data.len(), h * w * c);
    DenseFeatureMap { values: Tensor::from_vec(&[h, w, c], data).unwrap(), blocks: vec![1] }
}

#[test]
fn separable_vectors_cluster_perfectly() {
    let protos = [[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.6, 0.0, 0.8]];
    let truth: Vec<u32> = (0..64).map(|i| ((i / 8) / 2) as u32).collect();
    let f = map(8, 8, 3, |y, _| protos[y / 2].to_vec());
    let mut first: Option<Vec<u32>> = None;
    for seed in 0..5 {
        let c = kmeans_cluster(&f, &KMeansConfig { k: 4, seed, ..Default::default() }).unwrap();
        assert!(c.inertia.abs() < 1e-12, "seed {seed}: {}", c.inertia);
        assert_eq!(best_permutation_agreement(&truth, &c.labels, 4), 1.0);
        if let Some(prev) = &first {
            assert_eq!(best_permutation_agreement(prev, &c.labels, 4), 1.0);
        }
        first = Some(c.labels);
    }
}

#[test]
fn two_blob_map_splits_along_blobs() {
    // a disc of one feature direction on a background of another, plus a small deterministic wobble
    let inside = |y: usize, x: usize| (y as f32 - 3.5).powi(2) + (x as f32 - 3.5).powi(2) <= 6.0;
    let f = map(8, 8, 2, |y, x| {
        let e = 0.05 * ((y * 8 + x) as f32 * 1.3).sin();
        if inside(y, x) { vec![1.0 + e, 0.2] } else { vec![0.2, 1.0 - e] }
    });
    let truth: Vec<u32> = (0..64).map(|i| inside(i / 8, i % 8) as u32).collect();
    let c = kmeans_cluster(&f, &KMeansConfig { k: 2, seed: 4, ..Default::default() }).unwrap();
    assert_eq!(best_permutation_agreement(&truth, &c.labels, 2), 1.0);
    assert!(c.labels.iter().all(|&l| l < 2));
}

#[test]
fn inertia_never_increases_and_runs_are_deterministic() {
    let f = map(12, 12, 5, |y, x| (0..5).map(|c| ((y * 31 + x * 17 + c * 7) as f32 * 0.37).sin()).collect());
    for normalize in [true, false] {
        let cfg = KMeansConfig { k: 5, seed: 9, max_iter: 50, normalize };
        let c = kmeans_cluster(&f, &cfg).unwrap();
        assert!(!c.history.is_empty() && c.history.len() <= 50);
        for w in c.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", c.history);
        }
        assert_eq!(c, kmeans_cluster(&f, &cfg).unwrap());
    }
}

#[test]
fn invalid_cluster_requests() {
    let f = map(2, 2, 2, |y, x| vec![y as f32, x as f32]);
    assert!(kmeans_cluster(&f, &KMeansConfig { k: 1, ..Default::default() }).is_err());
    assert!(kmeans_cluster(&f, &KMeansConfig { k: 5, ..Default::default() }).is_err());
    assert!(kmeans_cluster(&f, &KMeansConfig { k: 4, ..Default::default() }).is_ok());
}

#[test]
fn overlay_examples() {
    let img = ImagePatch::new(Tensor::from_fn(&[4, 4, 3], |i| (i % 7) as f32 / 7.0), "x").unwrap();
    let plain = render_overlay(&img, &[0; 16], 0.0, false).unwrap();
    assert_eq!(render_overlay(&img, &[0; 16], 0.7, true).unwrap(), plain);
    let full = render_overlay(&img, &[3; 16], 1.0, true).unwrap();
    assert!(full.chunks(3).all(|px| px == PALETTE[3]));
    assert_eq!(render_overlay(&img, &[1; 16], 0.4, false).unwrap(), render_overlay(&img, &[1; 16], 0.4, false).unwrap());
    assert!(render_overlay(&img, &[0; 15], 0.5, false).is_err());
    assert!(render_overlay(&img, &[0; 16], 1.5, false).is_err());
    assert_eq!(render_labels(&[0, 12]), [PALETTE[0], PALETTE[2]].concat());
}
