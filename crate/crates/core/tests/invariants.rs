use proptest::prelude::*;

use gancompress::arch::GeneratorConfig;
use gancompress::autodiff::Tape;
use gancompress::checkpoint::{AnyTensor, Container};
use gancompress::export::{count_params, equivalence_check, strip_and_rewire};
use gancompress::objectives::distill_loss;
use gancompress::pruning::binarize_rule;
use gancompress::train::{lr_at_epoch, GenModel, TrainConfig};
use gancompress::Tensor;

fn loss(a: &[f64], b: &[f64], shape: &[usize]) -> f64 {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_f64(shape, a).unwrap());
    let b = t.constant(Tensor::from_f64(shape, b).unwrap());
    let l = distill_loss(&mut t, a, b).unwrap();
    t.value(l).item()
}

fn maps() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
    (1usize..20).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0..100.0f64, n),
            prop::collection::vec(0.0..100.0f64, n),
            1e-3..1e3f64,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn distill_bounded_symmetric_scale_free((a, b, c) in maps()) {
        let shape = [1, 1, a.len()];
        let l = loss(&a, &b, &shape);
        prop_assert!((0.0..=2.0).contains(&l));
        prop_assert!((l - loss(&b, &a, &shape)).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
        prop_assert!((l - loss(&scaled, &b, &shape)).abs() < 1e-9);
    }

    #[test]
    fn binarize_rule_matches_definition(
        v in prop::collection::vec(prop_oneof![0.0..0.01f64, Just(0.005)], 1..40),
        alpha in 0.0..1.0f64,
    ) {
        let below = v.iter().filter(|&&m| m <= 0.005).count();
        match binarize_rule(&v, 0.005, alpha) {
            Some(bits) => {
                prop_assert!(below as f64 / v.len() as f64 > alpha);
                prop_assert_eq!(bits, v.iter().map(|&m| m > 0.005).collect::<Vec<_>>());
            }
            None => prop_assert!(below as f64 / v.len() as f64 <= alpha),
        }
    }

    #[test]
    fn container_round_trips(
        a in prop::collection::vec(any::<f32>(), 0..30),
        b in prop::collection::vec(-1e6..1e6f64, 1..30),
        step in any::<u64>(),
    ) {
        let mut c = Container::new(&serde_json::json!({ "step": step })).unwrap();
        c.push("a", AnyTensor::from_tensor(&Tensor::<f32>::new(&[a.len()], a.clone()).unwrap())).unwrap();
        c.push("b", AnyTensor::from_tensor(&Tensor::<f64>::from_f64(&[b.len()], &b).unwrap())).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert!(back.bit_identical(&c));
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn lr_never_increases(base in 1e-5..1.0f64, factor in 1.0..100.0f64, epochs in 1usize..120) {
        let cfg = TrainConfig { base_lr: base, lr_drop_factor: factor, epochs, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..epochs).map(|e| lr_at_epoch(&cfg, e).unwrap()).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(lrs[0], base);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn export_preserves_outputs(seed in 0u64..1000, bits in prop::collection::vec(any::<bool>(), 80)) {
        let mut cfg = GeneratorConfig::toy(6, 3, 16, 16);
        cfg.seed = seed;
        let mut g = GenModel::<f64>::build(&cfg).unwrap();
        let masks: Vec<_> = g.arch.masks().cloned().collect();
        let mut k = 0;
        for m in &masks {
            let w: Vec<f64> = (0..m.n).map(|_| { k += 1; if bits[k % bits.len()] { 0.5 } else { -0.5 } }).collect();
            g.store.set(m.w, Tensor::from_f64([m.n], &w).unwrap());
        }
        for m in g.arch.masks_mut() {
            m.alpha = -1.0;
        }
        g.arch.binarize_check(&mut g.store);
        let mut p = strip_and_rewire(&g).unwrap();
        prop_assert_eq!(count_params(&p.arch).unwrap(), p.store.trainable_numel() as u64);
        let dev = equivalence_check(&mut g, &mut p, 6, seed).unwrap();
        prop_assert!(dev <= 1e-10, "deviation {}", dev);
    }
}
