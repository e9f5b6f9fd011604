use proptest::prelude::*;

use condseg::autodiff::ParamSet;
use condseg::cli::checkpoint;
use condseg::head::{
    aggregate_class_features, coarse_probabilities, conditional_head_forward, CenterDivisor, CoarseHeadParams,
    ConditionalOptions, KernelGenParams, ProbNorm,
};
use condseg::labels::{LabelMask, OneHotMask, IGNORE};
use condseg::loss::{bce_probmap, cross_entropy, soft_dice, DiceReduction, DEFAULT_DICE_EPS};
use condseg::metrics::ConfusionMatrix;
use condseg::numeric::{flip_horizontal, matmul, resize_bilinear, softmax_channels, Rng, Tensor};
use condseg::scene::{
    augment, generate_scene, quantize, read_pgm, read_ppm, write_pgm, write_ppm, AugmentConfig, GeneratorConfig,
};
use condseg::train::{poly_lr, tile_starts, tiles};

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

fn mask(h: usize, w: usize, classes: usize, seed: u64) -> LabelMask {
    let mut rng = Rng::new(seed);
    let data = (0..h * w)
        .map(|_| if rng.bernoulli(0.1) { IGNORE } else { rng.below(classes) as u8 })
        .collect();
    LabelMask::new(h, w, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution_per_pixel(c in 1usize..6, h in 1usize..6, w in 1usize..6, seed: u64) {
        let p = softmax_channels(&tensor(&[c, h, w], seed).scale(8.0).unwrap()).unwrap();
        let sums = p.sum_axis(0).unwrap();
        prop_assert!(sums.data().iter().all(|s| (s - 1.0).abs() < 1e-12));
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn matmul_is_associative(m in 1usize..5, k in 1usize..5, n in 1usize..5, q in 1usize..5, seed: u64) {
        let a = tensor(&[m, k], seed);
        let b = tensor(&[k, n], seed ^ 1);
        let c = tensor(&[n, q], seed ^ 2);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn class_centers_are_shrunk_means_under_class_mass(c in 2usize..5, d in 1usize..5, h in 1usize..6, w in 1usize..6, seed: u64) {
        // each row is a probability-weighted mean of pixel features, pulled
        // towards zero by the mass epsilon
        let f = tensor(&[d, h, w], seed);
        let p = softmax_channels(&tensor(&[c, h, w], seed ^ 7)).unwrap();
        let e = aggregate_class_features(&f, &p, CenterDivisor::ClassMass).unwrap().0;
        for ch in 0..d {
            let plane = &f.data()[ch * h * w..(ch + 1) * h * w];
            let lo = plane.iter().cloned().fold(0.0, f64::min);
            let hi = plane.iter().cloned().fold(0.0, f64::max);
            for k in 0..c {
                let v = e.at(&[k, ch]);
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn conditional_logits_are_pixelwise_linear_in_features(seed: u64) {
        // with a constant coarse head every class sees uniform probabilities;
        // the logits are then the generated kernels applied pixel by pixel
        let (c, d, h, w) = (3, 4, 3, 5);
        let f = tensor(&[d, h, w], seed);
        let coarse = CoarseHeadParams { weight: Tensor::zeros(&[c, d]), bias: Tensor::zeros(&[c]) };
        let gen = KernelGenParams { weight: tensor(&[c, d, d], seed ^ 3), bias: tensor(&[c, d], seed ^ 4) };
        let out = conditional_head_forward(&f, &coarse, &gen, ConditionalOptions::default()).unwrap();
        let probs = coarse_probabilities(&f, &coarse, ProbNorm::Softmax).unwrap();
        prop_assert!(probs.data().iter().all(|&v| (v - 1.0 / c as f64).abs() < 1e-15));
        let direct = matmul(&out.kernels.0, &f.reshape(&[d, h * w]).unwrap()).unwrap();
        prop_assert!(out.logits.reshape(&[c, h * w]).unwrap().max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn metrics_are_bounded(classes in 2usize..6, h in 1usize..10, w in 1usize..10, seed: u64) {
        let truth = mask(h, w, classes, seed);
        let pred = mask(h, w, classes, seed ^ 9);
        let pred = LabelMask::new(h, w, pred.data().iter().map(|&v| if v == IGNORE { 0 } else { v }).collect()).unwrap();
        let mut cm = ConfusionMatrix::new(classes);
        cm.update(&pred, &truth).unwrap();
        prop_assert_eq!(cm.total() as usize, truth.valid_count());
        if let (Ok(m), Ok(a)) = (cm.miou(), cm.pixacc()) {
            prop_assert!((0.0..=1.0).contains(&m) && (0.0..=1.0).contains(&a));
        }
        let mut self_cm = ConfusionMatrix::new(classes);
        self_cm.update(&LabelMask::new(h, w, truth.data().iter().map(|&v| if v == IGNORE { 0 } else { v }).collect()).unwrap(), &truth).unwrap();
        if truth.valid_count() > 0 {
            prop_assert_eq!(self_cm.miou().unwrap(), 1.0);
            prop_assert_eq!(self_cm.pixacc().unwrap(), 1.0);
        }
    }

    #[test]
    fn losses_are_finite_and_bounded(c in 2usize..5, h in 1usize..6, w in 1usize..6, seed: u64) {
        let logits = tensor(&[c, h, w], seed).scale(5.0).unwrap();
        let labels = mask(h, w, c, seed ^ 5);
        let q = OneHotMask::from_labels(&labels, c).unwrap();
        if labels.valid_count() > 0 {
            prop_assert!(cross_entropy(&logits, &labels).unwrap() >= 0.0);
            let sig = logits.sigmoid().unwrap();
            prop_assert!(bce_probmap(&sig, &q).unwrap() >= 0.0);
            let p = softmax_channels(&logits).unwrap();
            for r in [DiceReduction::PerClass, DiceReduction::Pooled] {
                let d = soft_dice(&p, &q, DEFAULT_DICE_EPS, r).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&d), "{d}");
            }
        } else {
            prop_assert!(cross_entropy(&logits, &labels).is_err());
        }
    }

    #[test]
    fn poly_schedule_decreases_from_base_to_zero(max in 1usize..5000, base in 1e-4f64..1.0) {
        let mut prev = f64::INFINITY;
        for it in (0..=max).step_by((max / 50).max(1)) {
            let lr = poly_lr(it, max, base).unwrap();
            prop_assert!(lr <= prev && lr >= 0.0 && lr <= base);
            prev = lr;
        }
        prop_assert!(poly_lr(max + 1, max, base).is_err());
    }

    #[test]
    fn tiles_cover_every_pixel(h in 1usize..100, w in 1usize..100, window in 1usize..70, stride_frac in 0.1f64..1.0) {
        let stride = ((window as f64 * stride_frac) as usize).max(1);
        let starts = tile_starts(h, window, stride);
        prop_assert_eq!(starts[0], 0);
        prop_assert!(starts.windows(2).all(|p| p[0] < p[1] && p[1] - p[0] <= stride));
        let mut covered = vec![false; h * w];
        for (y0, x0, th, tw) in tiles(h, w, window, stride) {
            prop_assert!(y0 + th <= h && x0 + tw <= w);
            for y in y0..y0 + th {
                for x in x0..x0 + tw {
                    covered[y * w + x] = true;
                }
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn flip_is_an_involution(c in 1usize..4, h in 1usize..8, w in 1usize..8, seed: u64) {
        let x = tensor(&[c, h, w], seed);
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&x).unwrap()).unwrap(), x.clone());
        let m = mask(h, w, 3, seed);
        prop_assert_eq!(m.flip_horizontal().flip_horizontal(), m);
    }

    #[test]
    fn bilinear_resize_preserves_constants_and_range(h in 1usize..12, w in 1usize..12, oh in 1usize..20, ow in 1usize..20, seed: u64) {
        let k = Tensor::<f64>::full(&[2, h, w], 0.375);
        let r = resize_bilinear(&k, oh, ow).unwrap();
        prop_assert!(r.data().iter().all(|&v| (v - 0.375).abs() < 1e-15));
        let x = Tensor::<f64>::uniform(&[1, h, w], -1.0, 1.0, &mut Rng::new(seed));
        let r = resize_bilinear(&x, oh, ow).unwrap();
        let lo = x.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(r.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        prop_assert_eq!(resize_bilinear(&x, h, w).unwrap(), x);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenes_honour_the_generator_contract(seed: u64, confusion in 0.0f64..=1.0, classes in 3usize..7) {
        let cfg = GeneratorConfig { confusion, class_count: classes, height: 24, width: 24, ..Default::default() };
        let s = generate_scene(seed, &cfg).unwrap();
        let hist = s.mask.histogram(classes);
        prop_assert!(hist[1] > 0 && hist[2] > 0, "pair classes present: {hist:?}");
        prop_assert_eq!(hist.iter().sum::<usize>(), 24 * 24);
        prop_assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (h1, h2) = (s.provenance.class_hues[1].unwrap(), s.provenance.class_hues[2].unwrap());
        prop_assert!(h2 >= h1 + cfg.margin - 1e-12 || s.provenance.fallback);
        let (lo1, hi1) = cfg.hue_interval(1);
        let (lo2, hi2) = cfg.hue_interval(2);
        prop_assert!(h1 >= lo1 - cfg.hue_jitter && h1 <= hi1 + cfg.hue_jitter);
        prop_assert!(h2 >= lo2 - cfg.hue_jitter && h2 <= hi2 + cfg.hue_jitter);
        prop_assert_eq!(generate_scene(seed, &cfg).unwrap(), s);
    }

    #[test]
    fn netpbm_round_trips(seed: u64, h in 1usize..20, w in 1usize..20) {
        let img = quantize(&Tensor::<f32>::uniform(&[3, h, w], 0.0, 1.0, &mut Rng::new(seed)));
        let bytes = write_ppm(&img).unwrap();
        prop_assert_eq!(read_ppm(&bytes).unwrap(), img);
        let m = mask(h, w, 7, seed);
        prop_assert_eq!(read_pgm(&write_pgm(&m)).unwrap(), m);
    }

    #[test]
    fn checkpoints_round_trip(seed: u64, tensors in 1usize..6) {
        let mut rng = Rng::new(seed);
        let mut p = ParamSet::<f32>::new();
        for i in 0..tensors {
            let rank = rng.below(5);
            let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.below(4)).collect();
            p.insert(format!("layer.{i}.w"), Tensor::randn(&shape, 3.0, &mut rng));
        }
        let bytes = checkpoint::encode(&p).unwrap();
        prop_assert_eq!(checkpoint::decode::<f32>(&bytes).unwrap(), p);
        let k = rng.below(bytes.len());
        let mut bad = bytes.clone();
        bad[k] ^= 1 << rng.below(8);
        prop_assert!(checkpoint::decode::<f32>(&bad).is_err());
    }

    #[test]
    fn augmentation_keeps_labels_in_range(seed: u64) {
        let s = generate_scene(seed, &GeneratorConfig::default()).unwrap();
        let cfg = AugmentConfig::default();
        let a = augment(&s, &mut Rng::new(seed), &cfg).unwrap();
        prop_assert_eq!((a.mask.height(), a.mask.width()), (cfg.crop, cfg.crop));
        prop_assert!(a.mask.data().iter().all(|&v| v == IGNORE || (v as usize) < 4));
        prop_assert_eq!(a.image.shape(), &[3, cfg.crop, cfg.crop][..]);
    }
}
