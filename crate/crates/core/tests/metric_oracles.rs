use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tissueseg::metrics::{avd, evaluate_volume, hard_dsc, hausdorff, reconstruct_labels};
use tissueseg::volume::LabelVolume;
use tissueseg::Tensor;

const N: usize = 8;

fn random_labels(seed: u64, density: f64) -> LabelVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..N * N * N)
        .map(|_| if rng.random_bool(density) { rng.random_range(1..4u8) } else { 0 })
        .collect();
    LabelVolume::new([N; 3], [1.0; 3], labels).unwrap()
}

fn points(v: &LabelVolume, class: u8) -> Vec<[usize; 3]> {
    let [d, h, w] = v.dims();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if v.labels()[(z * h + y) * w + x] == class {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn brute_directed(a: &[[usize; 3]], b: &[[usize; 3]], s: [f64; 3]) -> f64 {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    (0..3)
                        .map(|i| ((p[i] as f64 - q[i] as f64) * s[i]).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

fn brute_hausdorff(a: &LabelVolume, b: &LabelVolume, class: u8, s: [f64; 3]) -> Option<f64> {
    let (pa, pb) = (points(a, class), points(b, class));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    Some(brute_directed(&pa, &pb, s).max(brute_directed(&pb, &pa, s)))
}

#[test]
fn hausdorff_matches_brute_force_on_seeded_pairs() {
    let spacings = [[1.0, 1.0, 1.0], [1.5, 1.0, 2.0]];
    for seed in 0..20 {
        let a = random_labels(2 * seed, 0.15);
        let b = random_labels(2 * seed + 1, 0.1);
        for s in spacings {
            for class in 1..4 {
                let got = hausdorff(&a, &b, class, s).unwrap();
                let want = brute_hausdorff(&a, &b, class, s);
                assert_eq!(got, want, "seed {seed} class {class} spacing {s:?}");
            }
        }
    }
}

#[test]
fn dsc_and_avd_match_naive_counts() {
    for seed in 0..20 {
        let a = random_labels(100 + seed, 0.4);
        let b = random_labels(200 + seed, 0.4);
        for class in 1..4 {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (&x, &y) in a.labels().iter().zip(b.labels()) {
                match (x == class, y == class) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
            let want = 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
            assert!((hard_dsc(&a, &b, class).unwrap() - want).abs() < 1e-12);
            let (na, nb) = (tp + fp, tp + fneg);
            let want_avd = (nb as f64 - na as f64).abs() / na as f64;
            assert!((avd(&a, &b, class).unwrap().unwrap() - want_avd).abs() < 1e-12);
        }
    }
}

#[test]
fn three_four_five() {
    let mut la = vec![0u8; N * N * N];
    let mut lb = la.clone();
    la[0] = 2;
    lb[3 * N + 4] = 2;
    let a = LabelVolume::new([N; 3], [1.0; 3], la).unwrap();
    let b = LabelVolume::new([N; 3], [1.0; 3], lb).unwrap();
    assert_eq!(hausdorff(&a, &b, 2, [1.0; 3]).unwrap(), Some(5.0));
}

#[test]
fn identical_masks() {
    let a = random_labels(7, 0.5);
    let r = evaluate_volume(&a, &a, [1.0; 3]).unwrap();
    assert_eq!(r.dsc, [1.0; 3]);
    assert_eq!(r.hd, [Some(0.0); 3]);
    assert_eq!(r.avd, [Some(0.0); 3]);
}

#[test]
fn argmax_matches_naive_with_lowest_index_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (n, k, h, w) = (2, 4, 5, 7);
        // coarse values make ties frequent
        let probs = Tensor::from_fn(&[n, k, h, w], |_| rng.random_range(0..4) as f64 / 4.0).unwrap();
        let got = reconstruct_labels(&probs).unwrap();
        let d = probs.data();
        for b in 0..n {
            for p in 0..h * w {
                let mut best = 0;
                for c in 1..k {
                    if d[(b * k + c) * h * w + p] > d[(b * k + best) * h * w + p] {
                        best = c;
                    }
                }
                assert_eq!(got[b * h * w + p] as usize, best);
            }
        }
    }
}
