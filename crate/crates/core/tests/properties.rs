//! Property tests for the structural invariants of tensors, graphs, losses,
//! data transforms, checkpoints and configuration.

use hgcn_core::checkpoint::Checkpoint;
use hgcn_core::config::RunConfig;
use hgcn_core::data::attacks::{apply_attack, full_grid, AttackSpec};
use hgcn_core::data::augment;
use hgcn_core::data::generate::{generate, GenParams};
use hgcn_core::graph::{gaussian_adjacency, normalize_adjacency};
use hgcn_core::loss::{dice_value, Confusion, DICE_SMOOTH, THRESHOLD};
use hgcn_core::nn::ParamStore;
use hgcn_core::tensor::{conv_output_size, Real, Tape, Tensor};
use proptest::prelude::*;

fn tensor_strategy(max_len: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_len).prop_flat_map(|n| {
        prop::collection::vec(-10.0f64..10.0, n)
            .prop_map(move |v| Tensor::new(&[n], v.into_iter().map(|x| x as Real).collect()).unwrap())
    })
}

fn mask_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0.0f64..1.0, h * w),
            prop::collection::vec(prop::bool::ANY, h * w),
        )
            .prop_map(move |(p, g)| {
                let pred = Tensor::new(&[1, 1, h, w], p.into_iter().map(|x| x as Real).collect()).unwrap();
                let gt = Tensor::new(&[1, 1, h, w], g.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
                (pred, gt)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reshape_keeps_length(t in tensor_strategy(24), split in 1usize..5) {
        let n = t.numel();
        if n % split == 0 {
            let r = t.clone().reshape(&[split, n / split]).unwrap();
            prop_assert_eq!(r.numel(), n);
            prop_assert_eq!(r.data(), t.data());
        } else {
            prop_assert!(t.reshape(&[split, n / split + 1]).is_err());
        }
    }

    #[test]
    fn backward_fills_every_leaf(a in tensor_strategy(12), scale in -3.0f64..3.0) {
        let tape = Tape::new();
        let x = tape.leaf(a.clone());
        let y = tape.leaf(a.clone());
        let c = tape.constant(a.clone());
        let loss = x.mul(y).unwrap().add(c).unwrap().scale(scale as Real).sigmoid().sum();
        tape.backward(loss).unwrap();
        for v in [x, y] {
            let g = v.grad().expect("leaf gradient");
            prop_assert_eq!(g.shape(), a.shape());
        }
        prop_assert!(c.grad().is_none());
    }

    #[test]
    fn conv_size_arithmetic(h in 1usize..64, k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3) {
        let pad = k / 2;
        let out = conv_output_size(h, k, stride, pad).unwrap();
        prop_assert_eq!(out, (h + 2 * pad - k) / stride + 1);
        if stride == 1 {
            prop_assert_eq!(out, h);
        }
    }

    #[test]
    fn normalized_adjacency_is_symmetric_and_nonnegative(h in 1usize..7, w in 1usize..7, sigma in 0.2f64..5.0) {
        let hat = normalize_adjacency(&gaussian_adjacency(h, w, sigma)).unwrap();
        let n = h * w;
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(hat.data()[i * n + j], hat.data()[j * n + i]);
                prop_assert!(hat.data()[i * n + j] >= 0.0);
            }
            // each diagonal entry is 1/d̃_i, in (0, 1]
            prop_assert!(hat.data()[i * n + i] > 0.0 && hat.data()[i * n + i] <= 1.0);
        }
    }

    #[test]
    fn metrics_stay_in_range((pred, gt) in mask_pair()) {
        let c = Confusion::from_prediction(&pred, &gt, THRESHOLD).unwrap();
        prop_assert_eq!(c.total() as usize, pred.numel());
        prop_assert!((0.0..=1.0).contains(&c.f1()));
        prop_assert!((-1.0..=1.0).contains(&c.mcc()));
        let d = dice_value(&pred, &gt, DICE_SMOOTH).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn confusion_merge_is_commutative_and_associative(
        (p1, g1) in mask_pair(), (p2, g2) in mask_pair(), (p3, g3) in mask_pair()
    ) {
        let a = Confusion::from_prediction(&p1, &g1, THRESHOLD).unwrap();
        let b = Confusion::from_prediction(&p2, &g2, THRESHOLD).unwrap();
        let c = Confusion::from_prediction(&p3, &g3, THRESHOLD).unwrap();
        prop_assert_eq!(a.merge(b), b.merge(a));
        prop_assert_eq!(a.merge(b).merge(c), a.merge(b.merge(c)));
    }

    #[test]
    fn lr_schedule_is_non_increasing(epoch in 0usize..200) {
        let cfg = RunConfig::default();
        prop_assert!(cfg.lr_at(epoch + 1) <= cfg.lr_at(epoch));
        prop_assert!(cfg.lr_at(epoch) > 0.0);
    }

    #[test]
    fn config_round_trips(
        alpha in prop::sample::select(vec![0.1, 0.3, 0.5, 0.7, 0.9]),
        epochs in 1usize..50,
        seed in any::<u64>(),
        add in prop::bool::ANY,
    ) {
        let cfg = RunConfig {
            alpha,
            epochs,
            seed,
            fusion: if add { "add".into() } else { "concat".into() },
            ..RunConfig::default()
        };
        prop_assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn checkpoint_bytes_round_trip(values in prop::collection::vec(-1e3f64..1e3, 1..20), epoch in 0u64..100) {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[values.len()], values.iter().map(|&v| v as Real).collect()).unwrap());
        store.add_norm("bn", 2);
        let ck = Checkpoint { config_toml: "seed = 1\n".into(), epoch, best_f1: 0.25, store: store.clone(), adam: None };
        let back = Checkpoint::from_bytes(&ck.to_bytes(), &store).unwrap();
        prop_assert_eq!(back, ck);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn augmentation_keeps_mask_binary_and_shape(seed in 0u64..500, aug in any::<u64>()) {
        let kinds = ["copy-move", "splice", "removal"];
        let s = generate(kinds[(seed % 3) as usize], seed, &GenParams { size: 32, ..GenParams::default() }).unwrap();
        let a = augment(&s, aug);
        prop_assert_eq!(a.image.shape(), s.image.shape());
        prop_assert_eq!(a.mask.shape(), s.mask.shape());
        prop_assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn attacks_keep_shape_and_range(seed in 0u64..500, pick in 0usize..29) {
        let s = generate("splice", seed, &GenParams { size: 32, ..GenParams::default() }).unwrap();
        let grid = full_grid();
        let spec = &grid[pick % grid.len()];
        let out = apply_attack(&s.image, spec, seed).unwrap();
        prop_assert_eq!(out.shape(), s.image.shape());
        prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        if spec.is_null() {
            prop_assert_eq!(out, s.image.clone());
        }
        prop_assert!(AttackSpec::new(&spec.kind, spec.strength + 0.123).is_err());
    }
}
