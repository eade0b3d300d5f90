use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokenmix::augment::{
    classmix_classes, classmix_mask, gen_token_mask, strong_augment, token_exchange, token_swap_back, CutBox,
    StrongConfig, TokenMask,
};
use tokenmix::data::{gen_scene, LabelMap};
use tokenmix::experiment::ExperimentConfig;
use tokenmix::metrics::confusion_matrix;
use tokenmix::tensor::{matmul_raw, softmax_rows, Tensor};
use tokenmix::trainer::pseudo_from_logits;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tensor(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| r.gen_range(-10.0..10.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn exchange_is_an_involution(rows in 1usize..40, cols in 1usize..12, ratio in 0.0f64..=1.0, seed: u64) {
        let mut r = rng(seed);
        let (a, b) = (tensor(rows, cols, &mut r), tensor(rows, cols, &mut r));
        let m = gen_token_mask(rows, ratio, &mut r).unwrap();
        let (x, y) = token_exchange(&a, &b, &m).unwrap();
        let (x2, y2) = token_exchange(&x, &y, &m).unwrap();
        prop_assert_eq!(x2, a);
        prop_assert_eq!(y2, b);
    }

    #[test]
    fn exchange_preserves_the_pair_sum(rows in 1usize..40, cols in 1usize..12, ratio in 0.0f64..=1.0, seed: u64) {
        let mut r = rng(seed);
        let (a, b) = (tensor(rows, cols, &mut r), tensor(rows, cols, &mut r));
        let m = gen_token_mask(rows, ratio, &mut r).unwrap();
        let (x, y) = token_exchange(&a, &b, &m).unwrap();
        for i in 0..a.numel() {
            prop_assert_eq!(x.data()[i] + y.data()[i], a.data()[i] + b.data()[i]);
        }
    }

    #[test]
    fn swap_back_restores_unlabeled_through_identity(rows in 1usize..40, cols in 1usize..8, ratio in 0.0f64..=1.0, seed: u64) {
        let mut r = rng(seed);
        let (a, b) = (tensor(rows, cols, &mut r), tensor(rows, cols, &mut r));
        let m = gen_token_mask(rows, ratio, &mut r).unwrap();
        let (x, y) = token_exchange(&a, &b, &m).unwrap();
        prop_assert_eq!(token_swap_back(&x, &y, &m).unwrap(), a);
    }

    #[test]
    fn mask_popcount_is_exact(n in 0usize..300, ratio in 0.0f64..=1.0, seed: u64) {
        let m = gen_token_mask(n, ratio, &mut rng(seed)).unwrap();
        prop_assert_eq!(m.count_ones(), (ratio * n as f64).round() as usize);
        let s = m.to_bit_string();
        prop_assert_eq!(s.parse::<TokenMask>().unwrap(), m);
    }

    #[test]
    fn cutmix_image_and_label_share_a_source(seed: u64) {
        let mut r = rng(seed);
        let a = gen_scene(&mut r, 32, 4).unwrap();
        let b = gen_scene(&mut r, 32, 4).unwrap();
        let mask = CutBox::sample(&mut r, 32).mask(32, 32);
        let img = mask.mix_image(&a.image, &b.image).unwrap();
        let lab = mask.mix_label(&a.label, &b.label).unwrap();
        for p in 0..32 * 32 {
            let src = if mask.from_b[p] { (&b.image, &b.label) } else { (&a.image, &a.label) };
            prop_assert_eq!(&img.data()[p * 3..p * 3 + 3], &src.0.data()[p * 3..p * 3 + 3]);
            prop_assert_eq!(lab.data[p], src.1.data[p]);
        }
    }

    #[test]
    fn classmix_image_and_label_share_a_source(seed: u64) {
        let mut r = rng(seed);
        let a = gen_scene(&mut r, 32, 4).unwrap();
        let b = gen_scene(&mut r, 32, 4).unwrap();
        let classes = classmix_classes(&b.label, &mut r);
        let mask = classmix_mask(&b.label, &classes);
        let img = mask.mix_image(&a.image, &b.image).unwrap();
        let lab = mask.mix_label(&a.label, &b.label).unwrap();
        for p in 0..32 * 32 {
            let from_b = classes.contains(&b.label.data[p]);
            prop_assert_eq!(mask.from_b[p], from_b);
            let src = if from_b { (&b.image, &b.label) } else { (&a.image, &a.label) };
            prop_assert_eq!(&img.data()[p * 3..p * 3 + 3], &src.0.data()[p * 3..p * 3 + 3]);
            prop_assert_eq!(lab.data[p], src.1.data[p]);
        }
    }

    #[test]
    fn strong_augment_stays_in_range(seed: u64) {
        let mut r = rng(seed);
        let scene = gen_scene(&mut r, 16, 3).unwrap();
        let out = strong_augment(&scene.image, StrongConfig::ALL, &mut r).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(out.shape(), scene.image.shape());
    }

    #[test]
    fn matmul_matches_naive_triple_loop(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed: u64) {
        let mut r = rng(seed);
        let a = tensor(m, k, &mut r);
        let b = tensor(k, n, &mut r);
        let c = matmul_raw(a.data(), b.data(), m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                prop_assert!((c[i * n + j] - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed: u64) {
        let mut r = rng(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| r.gen_range(-500.0..500.0));
        let p = softmax_rows(x.data(), cols);
        for row in p.chunks_exact(cols) {
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gate_fraction_is_monotone_in_rho(seed: u64, rhos in proptest::collection::vec(0.0f64..=1.0, 2..8)) {
        let mut r = rng(seed);
        let logits = Tensor::from_fn(&[64, 4], |_| r.gen_range(-4.0..4.0));
        let conf = pseudo_from_logits(&logits, 8, 8).unwrap().remove(0).conf;
        let frac = |rho: f64| conf.iter().filter(|&&c| c > rho).count();
        let mut sorted = rhos.clone();
        sorted.sort_by(f64::total_cmp);
        for w in sorted.windows(2) {
            prop_assert!(frac(w[1]) <= frac(w[0]));
        }
        prop_assert_eq!(frac(0.0), 64);
        prop_assert_eq!(frac(1.0), 0);
    }

    #[test]
    fn pseudo_labels_ignore_shift_and_positive_scale(seed: u64, scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let logits = Tensor::from_fn(&[16, 5], |_| r.gen_range(-4.0..4.0));
        let moved = Tensor::from_fn(&[16, 5], |i| scale * logits.data()[i] + shift);
        let a = pseudo_from_logits(&logits, 4, 4).unwrap();
        let b = pseudo_from_logits(&moved, 4, 4).unwrap();
        prop_assert_eq!(&a[0].label, &b[0].label);
    }

    #[test]
    fn confusion_mass_and_miou_bounds(seed: u64, c in 2usize..6, side in 1usize..9) {
        let mut r = rng(seed);
        let map = |r: &mut ChaCha8Rng| LabelMap {
            height: side,
            width: side,
            data: (0..side * side).map(|_| r.gen_range(0..c) as u8).collect(),
        };
        let (p, t) = (map(&mut r), map(&mut r));
        let m = confusion_matrix(&p, &t, c).unwrap();
        prop_assert_eq!(m.total(), (side * side) as u64);
        let miou = m.miou().unwrap();
        prop_assert!((0.0..=1.0).contains(&miou));
        prop_assert_eq!(confusion_matrix(&t, &t, c).unwrap().miou().unwrap(), 1.0);
    }

    #[test]
    fn config_round_trips(
        lr in 1e-4f64..2.0,
        rho in 0.0f64..=1.0,
        theta in 0.0f64..=1.0,
        ratio in 0.0f64..=1.0,
        dropout in 0.0f64..0.99,
        epochs in 1usize..100,
        seed: u64,
        design in 0usize..4,
        baseline in 0usize..5,
        weak: bool,
        blur: bool,
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.train.lr0 = lr;
        cfg.train.rho = rho;
        cfg.train.theta = theta;
        cfg.train.epochs = epochs;
        cfg.train.seed = seed;
        cfg.data.seed = seed.wrapping_mul(3);
        cfg.train.branch_design = tokenmix::trainer::BranchDesign::ALL[design];
        cfg.aug.baseline = tokenmix::augment::Mixing::ALL[baseline];
        cfg.aug.swap_ratio = ratio;
        cfg.aug.dropout_rate = dropout;
        cfg.aug.weak = weak;
        cfg.aug.strong.blur = blur;
        let back = ExperimentConfig::parse_str(&cfg.to_config_string(), Path::new("prop")).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn per_class_iou_matches_double_loop_oracle() {
    let mut r = rng(77);
    for _ in 0..100 {
        let c = r.gen_range(2..6);
        let map = |r: &mut ChaCha8Rng| LabelMap {
            height: 8,
            width: 8,
            data: (0..64).map(|_| r.gen_range(0..c) as u8).collect(),
        };
        let (p, t) = (map(&mut r), map(&mut r));
        let m = confusion_matrix(&p, &t, c).unwrap();
        for i in 0..c {
            for j in 0..c {
                let n = (0..64).filter(|&k| t.data[k] as usize == i && p.data[k] as usize == j).count();
                assert_eq!(m.get(i, j), n as u64);
            }
        }
        let mut ious = Vec::new();
        for k in 0..c as u8 {
            let inter = (0..64).filter(|&q| p.data[q] == k && t.data[q] == k).count();
            let union = (0..64).filter(|&q| p.data[q] == k || t.data[q] == k).count();
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let want = ious.iter().sum::<f64>() / ious.len() as f64;
        assert_eq!(m.miou().unwrap(), want);
    }
}
