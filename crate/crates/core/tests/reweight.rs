use irkd_autograd::{batch_softmax_weights, Tape, Tensor};
use irkd_core::mask::Frame;
use irkd_core::reweight::{
    kmeans, nearest, prior_features, sample_weights, spectral_sharpness, texture, ClusterModel,
    PriorVector, SHARP_CUTOFF,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Direct O(N²) DFT power-ratio oracle.
fn sharpness_oracle(f: &Frame) -> f64 {
    let (h, w) = f.shape();
    let (mut high, mut total) = (0.0, 0.0);
    for u in 0..h {
        for v in 0..w {
            if u == 0 && v == 0 {
                continue;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let a = -2.0
                        * std::f64::consts::PI
                        * (u as f64 * r as f64 / h as f64 + v as f64 * c as f64 / w as f64);
                    re += f.get(r, c) * a.cos();
                    im += f.get(r, c) * a.sin();
                }
            }
            let p = re * re + im * im;
            let fy = u.min(h - u) as f64 / h as f64;
            let fx = v.min(w - v) as f64 / w as f64;
            total += p;
            if (fy * fy + fx * fx).sqrt() > SHARP_CUTOFF {
                high += p;
            }
        }
    }
    if total < 1e-18 {
        0.0
    } else {
        high / total
    }
}

fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
    Frame::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn spectral_sharpness_matches_direct_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (h, w) in [(8, 8), (6, 10), (12, 7)] {
        let f = random_frame(&mut rng, h, w);
        assert!((spectral_sharpness(&f) - sharpness_oracle(&f)).abs() < 1e-10);
    }
    // Checkerboard beats smooth and random images.
    let checker = Frame::new(
        8,
        8,
        (0..64).map(|i| ((i / 8 + i % 8) % 2) as f64).collect(),
    )
    .unwrap();
    let ramp = Frame::new(8, 8, (0..64).map(|i| (i % 8) as f64 / 7.0).collect()).unwrap();
    let noise = random_frame(&mut rng, 8, 8);
    let sc = spectral_sharpness(&checker);
    assert!(sc > spectral_sharpness(&ramp) && sc > spectral_sharpness(&noise));
}

#[test]
fn prior_examples() {
    let flat = prior_features(&Frame::filled(10, 12, 0.3), 1);
    assert_eq!((flat[1], flat[2], flat[3]), (0.0, 0.0, 0.0));
    let img = random_frame(&mut ChaCha8Rng::seed_from_u64(1), 9, 9);
    let (a, b) = (prior_features(&img, 1), prior_features(&img, 2));
    assert_eq!(a[..4], b[..4]);
    assert_eq!((a[4], b[4]), (1.0, 2.0));
    // Texture of a unit step along columns: one unit jump per row.
    let step = Frame::new(4, 4, (0..16).map(|i| f64::from(i % 4 >= 2)).collect()).unwrap();
    assert!((texture(&step) - 4.0 / 16.0).abs() < 1e-15);
}

fn two_blobs(seed: u64) -> (Vec<PriorVector>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 0.3).unwrap();
    let mut pts = Vec::new();
    let mut label = Vec::new();
    for i in 0..40 {
        let off = if i % 2 == 0 { -5.0 } else { 5.0 };
        pts.push(std::array::from_fn(|_| off + n.sample(&mut rng)));
        label.push(i % 2);
    }
    (pts, label)
}

#[test]
fn kmeans_recovers_separated_blobs() {
    for seed in 0..5 {
        let (pts, label) = two_blobs(seed);
        let (centers, assign) = kmeans(&pts, 2, seed, 50).unwrap();
        // Same partition up to relabelling.
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert_eq!(label[i] == label[j], assign[i] == assign[j]);
            }
        }
        // Brute-force nearest-center check.
        for (p, &a) in pts.iter().zip(&assign) {
            let d: Vec<f64> = centers
                .iter()
                .map(|c| c.iter().zip(p).map(|(x, y)| (x - y).powi(2)).sum())
                .collect();
            assert!(d[a] <= d[1 - a]);
            assert_eq!(nearest(&centers, p), a);
        }
        assert_eq!(kmeans(&pts, 2, seed, 50).unwrap(), (centers, assign));
    }
    assert!(kmeans(&two_blobs(0).0[..1], 2, 0, 50).is_err());
}

#[test]
fn cluster_model_fit_and_round_trip() {
    let (pts, _) = two_blobs(9);
    let train: Vec<(String, PriorVector)> = pts[..30]
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("t{i}"), *p))
        .collect();
    let val: Vec<(String, PriorVector)> = pts[30..]
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("v{i}"), *p))
        .collect();
    let one = ClusterModel::fit(&train, &val, 1, 0).unwrap();
    let ids: Vec<&str> = train
        .iter()
        .chain(&val)
        .map(|(id, _)| id.as_str())
        .collect();
    let c = one.clusters_of(&ids).unwrap();
    assert!(sample_weights(&one.alpha, &c)
        .unwrap()
        .iter()
        .all(|w| *w == 1.0));

    let m = ClusterModel::fit(&train, &val, 2, 0).unwrap();
    assert_eq!(m.alpha, vec![0.0, 0.0]);
    // Validation members join the cluster of a training member from the same blob.
    assert_eq!(m.cluster_of("v0").unwrap(), m.cluster_of("t0").unwrap());
    assert_eq!(m.cluster_of("v1").unwrap(), m.cluster_of("t1").unwrap());
    assert!(m.cluster_of("missing").is_err());
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.json");
    m.save(&path).unwrap();
    assert_eq!(ClusterModel::load(&path).unwrap(), m);
}

#[test]
fn weight_examples() {
    let w = sample_weights(&[2f64.ln(), 0.0], &[0, 0, 1, 1]).unwrap();
    for (a, b) in w.iter().zip([4.0 / 3.0, 4.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(
        sample_weights(&[0.0; 3], &[2, 0, 1, 1]).unwrap(),
        vec![1.0; 4]
    );
    assert!(sample_weights(&[0.0], &[]).is_err());
}

proptest! {
    #[test]
    fn weights_shift_invariant_and_match_tape(
        alpha in prop::collection::vec(-4.0f64..4.0, 1..6),
        raw in prop::collection::vec(0usize..32, 1..12),
        shift in -10.0f64..10.0,
    ) {
        let c: Vec<usize> = raw.iter().map(|v| v % alpha.len()).collect();
        let w = sample_weights(&alpha, &c).unwrap();
        let shifted: Vec<f64> = alpha.iter().map(|a| a + shift).collect();
        for (a, b) in w.iter().zip(sample_weights(&shifted, &c).unwrap()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(((w.iter().sum::<f64>() / w.len() as f64) - 1.0).abs() < 1e-6);

        // Differentiable path: same values, gradient of Σ_i i·w_i by FD.
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[alpha.len()], alpha.clone()));
        let wv = batch_softmax_weights(a, &c);
        for (x, y) in wv.value().data().iter().zip(&w) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let coef = Tensor::new(&[c.len()], (0..c.len()).map(|i| i as f64).collect());
        let obj = wv.mul(tape.constant(coef)).sum();
        let g = tape.backward(obj).get_or_zeros(a);
        let f = |al: &[f64]| sample_weights(al, &c).unwrap().iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>();
        for k in 0..alpha.len() {
            let mut up = alpha.clone();
            let mut dn = alpha.clone();
            up[k] += 1e-6;
            dn[k] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            prop_assert!((fd - g.data()[k]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
