//! Benchmark fixtures.

use tissueseg::autodiff::random_tensor;
use tissueseg::volume::LabelVolume;
use tissueseg::Tensor;

pub fn input_f32(shape: &[usize], seed: u64) -> Tensor<f32> {
    random_tensor(shape, seed).cast()
}

/// Two overlapping balls in a `n`-cube, label 1.
pub fn ball_pair(n: usize) -> (LabelVolume, LabelVolume) {
    let ball = |c: f64, r: f64| {
        let mut labels = vec![0u8; n * n * n];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let d = [z, y, x].iter().map(|&v| (v as f64 - c).powi(2)).sum::<f64>();
                    if d <= r * r {
                        labels[(z * n + y) * n + x] = 1;
                    }
                }
            }
        }
        LabelVolume::new([n; 3], [1.0; 3], labels).expect("valid labels")
    };
    let c = n as f64 / 2.0;
    (ball(c, n as f64 / 3.0), ball(c + 2.0, n as f64 / 3.5))
}
