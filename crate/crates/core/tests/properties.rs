use proptest::prelude::*;

use tissueseg::autodiff::{conv2d, maxpool2, maxpool2_backward, random_tensor, softmax_channels};
use tissueseg::loss::{dice_loss, one_hot, soft_dice};
use tissueseg::metrics::{hard_dsc, hausdorff};
use tissueseg::patch::{one_hot_patch, tile_patches, untile, PATCH};
use tissueseg::phantom::{phantom_labels, PhantomSpec};
use tissueseg::train::{adam_step, AdamConfig, AdamState, EarlyStopping};
use tissueseg::unet::{build, UNetConfig};
use tissueseg::volume::{LabelVolume, Volume};
use tissueseg::Tensor;

fn label_volume(dims: [usize; 3], labels: Vec<u8>) -> LabelVolume {
    LabelVolume::new(dims, [1.0; 3], labels).unwrap()
}

fn labels_strategy(len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_is_linear_in_input(seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let x = random_tensor(&[1, 2, 5, 4], seed);
        let w = random_tensor(&[3, 2, 3, 3], seed + 1);
        let zero = Tensor::zeros(&[3]).unwrap();
        let (a, _) = conv2d(&x.scale(alpha), &w, &zero).unwrap();
        let (b, _) = conv2d(&x, &w, &zero).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - alpha * v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn maxpool_adjoint_conserves_mass(seed in 0u64..1000) {
        let x = random_tensor(&[2, 3, 6, 4], seed);
        let (y, ctx) = maxpool2(&x).unwrap();
        let g = random_tensor(y.shape(), seed + 7);
        let gx = maxpool2_backward(&ctx, &g).unwrap();
        prop_assert!((gx.sum() - g.sum()).abs() < 1e-12);
    }

    #[test]
    fn softmax_channels_sum_to_one(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let p = softmax_channels(&random_tensor(&[2, 4, 3, 5], seed).scale(scale)).unwrap();
        for b in 0..2 {
            for px in 0..15 {
                let s: f64 = (0..4).map(|c| p.data()[(b * 4 + c) * 15 + px]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dsc_and_hausdorff_are_symmetric(a in labels_strategy(216), b in labels_strategy(216), class in 1u8..4) {
        let (a, b) = (label_volume([6; 3], a), label_volume([6; 3], b));
        prop_assert_eq!(hard_dsc(&a, &b, class).unwrap(), hard_dsc(&b, &a, class).unwrap());
        let s = [1.0, 2.0, 0.5];
        prop_assert_eq!(hausdorff(&a, &b, class, s).unwrap(), hausdorff(&b, &a, class, s).unwrap());
        let self_hd = hausdorff(&a, &a, class, s).unwrap();
        prop_assert!(self_hd.is_none() || self_hd == Some(0.0));
    }

    #[test]
    fn dice_loss_is_four_minus_soft_dice(seed in 0u64..1000, labels in labels_strategy(2 * 36), smooth in 0.0f64..2.0) {
        let p = softmax_channels(&random_tensor(&[2, 4, 6, 6], seed).scale(3.0)).unwrap();
        let t = one_hot::<f64>(&labels, 2, 4, 6, 6).unwrap();
        let smooth = smooth + 1e-9;
        let l = dice_loss(&p, &t, smooth).unwrap();
        let s: f64 = soft_dice(&p, &t, smooth).unwrap().iter().sum();
        prop_assert!((l - (4.0 - s)).abs() < 1e-12);
        prop_assert!((0.0..=4.0).contains(&l));
    }

    #[test]
    fn soft_dice_of_hard_prediction_tends_to_hard_dsc(pred in labels_strategy(64), truth in labels_strategy(64)) {
        let p = one_hot::<f64>(&pred, 1, 4, 8, 8).unwrap();
        let t = one_hot::<f64>(&truth, 1, 4, 8, 8).unwrap();
        let soft = soft_dice(&p, &t, 1e-9).unwrap();
        let (pv, tv) = (label_volume([1, 8, 8], pred.clone()), label_volume([1, 8, 8], truth.clone()));
        for c in 0..4u8 {
            if truth.contains(&c) {
                prop_assert!((soft[c as usize] - hard_dsc(&pv, &tv, c).unwrap()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tile_untile_identity(d in 1usize..3, h in 1usize..140, w in 1usize..140, axis in 0usize..3, seed in 0u64..100) {
        let dims = [d, h, w];
        let n = d * h * w;
        let labels: Vec<u8> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 4) as u8).collect();
        let lab = label_volume(dims, labels);
        let img = Volume::new(dims, [1.0; 3], vec![0.5; n]).unwrap();
        let ps = tile_patches("v", &img, &lab, axis).unwrap();
        let [r, c] = ps.geometry.plane_dims();
        prop_assert_eq!(ps.geometry.patches_per_slice(), r.div_ceil(PATCH) * c.div_ceil(PATCH));
        let probs: Vec<_> = ps.patches.iter().map(|p| one_hot_patch(p, 4).unwrap()).collect();
        prop_assert_eq!(untile(&ps.geometry, 4, &probs).unwrap(), lab);
    }

    #[test]
    fn phantom_labels_ignore_intensity_model(noise in 0.0f64..0.5, bias in 0.0f64..0.9, seed in 0u64..100) {
        let spec = PhantomSpec { dims: [4, 40, 40], wm_axes: [1.0, 8.0, 9.0], gm_axes: [1.5, 12.0, 13.0], csf_axes: [2.0, 16.0, 17.0], ..Default::default() };
        let noisy = PhantomSpec { noise_sigma: noise, bias_amplitude: bias, seed, ..spec.clone() };
        prop_assert_eq!(phantom_labels(&spec).unwrap(), phantom_labels(&noisy).unwrap());
    }

    #[test]
    fn adam_with_zero_lr_is_identity(seed in 0u64..1000) {
        let model = build::<f64>(&UNetConfig { base_channels: 1, depth: 1, seed, ..Default::default() }).unwrap();
        let mut params = model.params.clone();
        let mut state = AdamState::new(&params);
        let mut grads = params.clone();
        for (i, (_, g)) in grads.iter_mut().enumerate() {
            *g = random_tensor(g.shape(), seed + i as u64);
        }
        adam_step(&mut params, &grads, &mut state, &AdamConfig { learning_rate: 0.0, ..Default::default() }).unwrap();
        prop_assert_eq!(params, model.params);
        prop_assert_eq!(state.t, 1);
    }

    #[test]
    fn early_stop_fires_at_first_stale_window(metrics in prop::collection::vec(0.0f64..1.0, 1..60), patience in 1usize..8) {
        let mut es = EarlyStopping::new(patience, 1e-5);
        let mut fired = None;
        for (i, &m) in metrics.iter().enumerate() {
            if es.update(i + 1, m).stop {
                fired = Some(i + 1);
                break;
            }
        }
        // improvement at epoch e: beats everything before it by more than 1e-5
        let mut best = f64::NEG_INFINITY;
        let mut improved = Vec::new();
        for &m in &metrics {
            let imp = m > best + 1e-5;
            if imp {
                best = m;
            }
            improved.push(imp);
        }
        let want = (patience + 1..=metrics.len()).find(|&e| !improved[e - patience..e].iter().any(|&x| x));
        prop_assert_eq!(fired, want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn unet_outputs_are_distributions(k in 1usize..4, seed in 0u64..100) {
        let cfg = UNetConfig { base_channels: 2, depth: 2, seed, ..Default::default() };
        let model = build::<f32>(&cfg).unwrap();
        let side = 4 * k;
        let x = Tensor::from_fn(&[1, 1, side, 2 * side], |i| ((i * 13) % 7) as f32 / 7.0).unwrap();
        let p = model.forward(&x).unwrap();
        prop_assert_eq!(p.shape(), &[1, 4, side, 2 * side][..]);
        let hw = side * 2 * side;
        for px in 0..hw {
            let col: Vec<f32> = (0..4).map(|c| p.data()[c * hw + px]).collect();
            prop_assert!(col.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((col.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
