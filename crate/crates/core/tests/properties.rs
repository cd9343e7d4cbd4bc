use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cotrain_core::adversarial::{fgsm, input_gradient, vat_perturbation};
use cotrain_core::data::{augment, generate, AugmentSpec, SynthSpec};
use cotrain_core::losses::{
    jsd_agreement, kl_divergence, mean_entropy, soft_cross_entropy, sup_loss, LabelMap, LossBundle,
};
use cotrain_core::metrics::{disagreement_map, dsc, hd, soft_vote, SegMask};
use cotrain_core::schedule::{lr_at, RampConfig};
use cotrain_core::segnet::{SegModel, SegModelConfig};
use cotrain_core::tensor::{Graph, Tensor};
use cotrain_core::trainer::{select_confident, PairSampler};

/// Normalizes raw positive values into per-pixel distributions over `c` channels.
fn simplex(raw: Vec<f64>, n: usize, c: usize, hw: usize) -> Tensor<f64> {
    let mut d = raw;
    for b in 0..n {
        for p in 0..hw {
            let s: f64 = (0..c).map(|k| d[(b * c + k) * hw + p]).sum();
            (0..c).for_each(|k| d[(b * c + k) * hw + p] /= s);
        }
    }
    Tensor::new(vec![n, c, 1, hw], d).unwrap()
}

/// `k` random probability maps of a random shape.
fn prob_maps(k: usize) -> impl Strategy<Value = Vec<Tensor<f64>>> {
    (1usize..=2, 2usize..=4, 1usize..=6).prop_flat_map(move |(n, c, hw)| {
        prop::collection::vec(prop::collection::vec(1e-3f64..1.0, n * c * hw), k)
            .prop_map(move |maps| maps.into_iter().map(|m| simplex(m, n, c, hw)).collect())
    })
}

fn scalar_of(f: impl FnOnce(&mut Graph<f64>) -> cotrain_core::tensor::Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).item()
}

fn jsd(maps: &[Tensor<f64>]) -> f64 {
    scalar_of(|g| {
        let vs: Vec<_> = maps.iter().map(|m| g.constant(m.clone())).collect();
        jsd_agreement(g, &vs).unwrap()
    })
}

/// `KL(p || q)` straight from the data, averaged over pixels.
fn kl_oracle(p: &Tensor<f64>, q: &Tensor<f64>) -> f64 {
    let s = p.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut total = 0.0;
    for b in 0..n {
        for px in 0..hw {
            for k in 0..c {
                let i = (b * c + k) * hw + px;
                total += p.data()[i] * (p.data()[i] / q.data()[i]).ln();
            }
        }
    }
    total / (n * hw) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn jsd_is_bounded_and_symmetric(maps in (2usize..=4).prop_flat_map(prob_maps)) {
        let k = maps.len() as f64;
        let v = jsd(&maps);
        prop_assert!(v >= -1e-12 && v <= k.ln() + 1e-12, "jsd {v} outside [0, ln {k}]");
        let mut rev = maps.clone();
        rev.reverse();
        prop_assert!((jsd(&rev) - v).abs() < 1e-12);
        prop_assert!(v > 0.0 || maps.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn jsd_vanishes_on_identical_inputs(maps in prob_maps(1), k in 2usize..=4) {
        let copies = vec![maps[0].clone(); k];
        prop_assert!(jsd(&copies).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_splits_into_entropy_and_kl(maps in prob_maps(2)) {
        let (p, q) = (&maps[0], &maps[1]);
        let ce = scalar_of(|g| {
            let (a, b) = (g.constant(p.clone()), g.constant(q.clone()));
            soft_cross_entropy(g, a, b).unwrap()
        });
        let h = scalar_of(|g| {
            let a = g.constant(p.clone());
            mean_entropy(g, a).unwrap()
        });
        let kl = scalar_of(|g| {
            let (a, b) = (g.constant(p.clone()), g.constant(q.clone()));
            kl_divergence(g, a, b).unwrap()
        });
        let reference = kl_oracle(p, q);
        prop_assert!((ce - (h + reference)).abs() < 1e-10, "{ce} vs {h} + {reference}");
        prop_assert!((kl - reference).abs() < 1e-10);
        prop_assert!(kl >= -1e-12, "Gibbs inequality violated: {kl}");
    }

    #[test]
    fn loss_bundle_recomposes(
        parts in prop::array::uniform3(0.0f64..10.0),
        lambdas in prop::array::uniform2(0.0f64..1.0),
    ) {
        let b = LossBundle::new(parts[0], parts[1], parts[2], lambdas[0], lambdas[1]);
        let expected = parts[0] + lambdas[0] * parts[1] + lambdas[1] * parts[2];
        prop_assert!((b.total - expected).abs() < 1e-5);
        prop_assert!((b.recompose() - b.total).abs() < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sup_loss_is_nonnegative_and_zero_on_exact_match(
        (n, c, hw, classes) in (1usize..=2, 2usize..=4, 1usize..=6)
            .prop_flat_map(|(n, c, hw)| (Just(n), Just(c), Just(hw), prop::collection::vec(0..c as u8, n * hw))),
        raw in prop::collection::vec(1e-3f64..1.0, 48),
    ) {
        let y = LabelMap::<f64>::one_hot(&classes, n, c, 1, hw).unwrap();
        let p = simplex(raw[..n * c * hw].to_vec(), n, c, hw);
        let loss = scalar_of(|g| {
            let v = g.constant(p.reshape(vec![n, c, 1, hw]).unwrap());
            sup_loss(g, v, &y).unwrap()
        });
        prop_assert!(loss > 0.0);
        let exact = scalar_of(|g| {
            let v = g.constant(y.tensor().clone());
            sup_loss(g, v, &y).unwrap()
        });
        prop_assert_eq!(exact, 0.0);
    }

    #[test]
    fn softmax_is_a_distribution(
        (shape, raw) in (1usize..=2, 2usize..=5, 1usize..=4, 1usize..=4)
            .prop_flat_map(|(n, c, h, w)| (Just([n, c, h, w]), prop::collection::vec(-30.0f32..30.0, n * c * h * w))),
    ) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(shape.to_vec(), raw).unwrap());
        let s = g.softmax_channel(x).unwrap();
        let d = g.value(s).data();
        let [n, c, h, w] = shape;
        prop_assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for b in 0..n {
            for p in 0..h * w {
                let total: f32 = (0..c).map(|k| d[(b * c + k) * h * w + p]).sum();
                prop_assert!((total - 1.0).abs() < 1e-6, "pixel sum {total}");
            }
        }
    }

    #[test]
    fn ramp_is_monotone_bounded_and_pinned(lambda in 0.0f64..5.0, t_ini in 0u32..40, len in 1u32..60) {
        let t_end = t_ini + len;
        let r = RampConfig::new(lambda, t_ini, t_end).unwrap();
        let mut prev = 0.0;
        for t in 0..t_end + 5 {
            let v = r.ramp(t);
            prop_assert!(v >= prev && v <= lambda, "ramp({t}) = {v}");
            prev = v;
        }
        prop_assert_eq!(r.ramp(t_ini), lambda * (-5.0f64).exp());
        if t_ini > 0 {
            prop_assert_eq!(r.ramp(t_ini - 1), 0.0);
        }
    }

    #[test]
    fn learning_rate_never_increases(lr in 1e-5f64..1.0, every in 1u32..30, factor in 0.01f64..1.0) {
        for e in 0..200 {
            prop_assert!(lr_at(e + 1, lr, every, factor) <= lr_at(e, lr, every, factor));
        }
    }

    #[test]
    fn confident_selection_count(conf in prop::collection::vec(0.0f64..1.0, 1..300), alpha in 0.0f64..=100.0) {
        let mask = select_confident(&conf, alpha);
        let expected = ((alpha / 100.0 * conf.len() as f64).ceil() as usize).min(conf.len());
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), expected);
        let lowest_kept = conf.iter().zip(&mask).filter(|(_, &m)| m).map(|(&c, _)| c).fold(f64::INFINITY, f64::min);
        prop_assert!(conf.iter().zip(&mask).filter(|(_, &m)| !m).all(|(&c, _)| c <= lowest_kept));
    }
}

fn mask_strategy(classes: u8) -> impl Strategy<Value = SegMask> {
    (1usize..=8, 1usize..=8)
        .prop_flat_map(move |(h, w)| (Just(h), Just(w), prop::collection::vec(0..classes, h * w)))
        .prop_map(|(h, w, v)| SegMask::new(h, w, v).unwrap())
}

fn mask_pair() -> impl Strategy<Value = (SegMask, SegMask)> {
    (1usize..=8, 1usize..=8).prop_flat_map(|(h, w)| {
        (prop::collection::vec(0u8..3, h * w), prop::collection::vec(0u8..3, h * w))
            .prop_map(move |(a, b)| (SegMask::new(h, w, a).unwrap(), SegMask::new(h, w, b).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn dsc_and_hd_are_symmetric((s, g) in mask_pair(), class in 1u8..3) {
        let d = dsc(&s, &g, class).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dsc(&g, &s, class).unwrap());
        let h = hd(&s, &g, class, 1.0).unwrap();
        prop_assert_eq!(h, hd(&g, &s, class, 1.0).unwrap());
        let same_fg = s.classes().iter().zip(g.classes()).all(|(&a, &b)| (a == class) == (b == class));
        prop_assert_eq!(h == 0.0, same_fg);
    }

    #[test]
    fn metrics_of_a_mask_against_itself(m in mask_strategy(3), class in 1u8..3) {
        prop_assert_eq!(dsc(&m, &m, class).unwrap(), 1.0);
        prop_assert_eq!(hd(&m, &m, class, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn soft_vote_of_copies_is_identity(maps in prob_maps(1), k in 1usize..=4) {
        let copies: Vec<&Tensor<f64>> = (0..k).map(|_| &maps[0]).collect();
        let (mean, _) = soft_vote(&copies).unwrap();
        for (a, b) in mean.data().iter().zip(maps[0].data()) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn disagreement_is_bounded_and_vanishes_on_equality(maps in prob_maps(2)) {
        let d = disagreement_map(&maps[0], &maps[1]).unwrap();
        prop_assert!(d.data().iter().all(|&v| (0.0..=2.0 + 1e-12).contains(&v)));
        prop_assert!(disagreement_map(&maps[0], &maps[0]).unwrap().data().iter().all(|&v| v == 0.0));
        if maps[0] != maps[1] {
            prop_assert!(d.data().iter().any(|&v| v > 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pair_sampler_windows_cover_every_model(k in 2usize..=4, seed in any::<u64>()) {
        let mut s = PairSampler::new(k, seed).unwrap();
        let w = s.window();
        let pairs: Vec<(usize, usize)> = (0..1000 + w).map(|_| s.next_pair()).collect();
        for start in 0..1000 {
            let mut seen = vec![false; k];
            for &(a, b) in &pairs[start..start + w] {
                prop_assert!(a != b && a < k && b < k);
                seen[a] = true;
                seen[b] = true;
            }
            prop_assert!(seen.iter().all(|&x| x), "window at {start} misses a model");
        }
    }

    #[test]
    fn augmentation_keeps_class_ids_and_range(seed in any::<u64>(), rot in 0.0f64..180.0, crop in 0.5f64..1.0) {
        let spec = SynthSpec { num_images: 2, num_val: 1, seed, ..SynthSpec::default() };
        let data = generate(&spec).unwrap();
        let aug = AugmentSpec { max_rotation_deg: rot, flip_prob: 0.5, crop_min: crop, crop_max: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.image_size;
        for s in data.train.iter().chain(&data.val) {
            prop_assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(s.mask.iter().all(|&c| (c as usize) < spec.num_classes));
            let (img, mask) = augment(&s.image, Some(&s.mask), n, n, &aug, &mut rng).unwrap();
            let mask = mask.unwrap();
            prop_assert_eq!(img.len(), n * n);
            prop_assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(mask.iter().all(|c| s.mask.contains(c)));
        }
    }
}

fn toy_model(seed: u64) -> SegModel<f64> {
    let cfg = SegModelConfig { base_width: 2, depth: 2, num_classes: 3, dropout_rate: 0.3, ..Default::default() };
    SegModel::init(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn segnet_output_is_a_distribution_of_the_input_shape(seed in any::<u64>(), n in 1usize..=2, side in 1usize..=3) {
        let model = toy_model(seed);
        let s = 4 * side;
        let x = Tensor::from_fn(&[n, 1, s, s], |i| ((i as u64 ^ seed) % 97) as f64 / 97.0);
        let p = model.predict(&x).unwrap();
        prop_assert_eq!(p.shape(), &[n, 3, s, s][..]);
        for b in 0..n {
            for px in 0..s * s {
                let total: f64 = (0..3).map(|c| p.data()[(b * 3 + c) * s * s + px]).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adversarial_budgets_hold(seed in any::<u64>(), eps in 1e-3f64..0.5, eps_vat in 0.1f64..10.0) {
        let model = toy_model(seed);
        let before = model.checksum();
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i as u64).wrapping_mul(seed | 1) % 101) as f64 / 101.0);
        let classes: Vec<u8> = (0..128).map(|i| (i % 3) as u8).collect();
        let y = LabelMap::one_hot(&classes, 2, 3, 8, 8).unwrap();

        let (grad, _) = input_gradient(&model, &x, &y).unwrap();
        let adv = fgsm(&model, &x, Some(&y), eps).unwrap();
        for ((a, b), g) in adv.images.data().iter().zip(x.data()).zip(&grad) {
            let d = (a - b).abs();
            prop_assert!(d <= eps + 1e-12);
            if *g != 0.0 {
                prop_assert!((d - eps).abs() < 1e-12);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vat = vat_perturbation(&model, &x, eps_vat, 1e-6, 1, &mut rng).unwrap();
        for b in 0..2 {
            let norm: f64 = (0..64).map(|i| (vat.images.data()[b * 64 + i] - x.data()[b * 64 + i]).powi(2)).sum::<f64>().sqrt();
            prop_assert!((norm - eps_vat).abs() < 1e-4, "image {b}: {norm}");
        }
        prop_assert_eq!(model.checksum(), before);
    }
}
