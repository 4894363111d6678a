//! Dice, F1 and MCC against brute-force confusion counting.

use hgcn_core::loss::{composite_loss, dice_loss, dice_value, evaluate, Confusion, LossWeights, DICE_SMOOTH, THRESHOLD};
use hgcn_core::tensor::{Real, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng) -> Tensor {
    let density: f64 = rng.random_range(0.0..1.0);
    Tensor::from_fn(&[1, 1, 8, 8], |_| if rng.random_bool(density) { 1.0 } else { 0.0 })
}

struct Counts {
    tp: f64,
    fp: f64,
    tn: f64,
    fn_: f64,
}

fn brute(pred: &Tensor, gt: &Tensor) -> Counts {
    let mut c = Counts { tp: 0.0, fp: 0.0, tn: 0.0, fn_: 0.0 };
    for r in 0..8 {
        for col in 0..8 {
            let p = pred.at(&[0, 0, r, col]) >= 0.5;
            let g = gt.at(&[0, 0, r, col]) >= 0.5;
            match (p, g) {
                (true, true) => c.tp += 1.0,
                (true, false) => c.fp += 1.0,
                (false, true) => c.fn_ += 1.0,
                (false, false) => c.tn += 1.0,
            }
        }
    }
    c
}

/// Harmonic mean of precision and recall; 0 when undefined.
fn f1_oracle(c: &Counts) -> f64 {
    if c.tp == 0.0 {
        return 0.0;
    }
    let p = c.tp / (c.tp + c.fp);
    let r = c.tp / (c.tp + c.fn_);
    2.0 * p * r / (p + r)
}

/// Pearson correlation of the two binary vectors; 0 when either is constant.
fn mcc_oracle(pred: &Tensor, gt: &Tensor) -> f64 {
    let n = pred.numel() as f64;
    let xs: Vec<f64> = pred.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    let ys: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

pub fn metrics_match_brute_force_on_200_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..200 {
        let pred = random_mask(&mut rng);
        let gt = random_mask(&mut rng);
        let c = brute(&pred, &gt);
        let conf = Confusion::from_prediction(&pred, &gt, THRESHOLD).unwrap();
        assert_eq!(
            (conf.tp as f64, conf.fp as f64, conf.tn as f64, conf.fn_ as f64),
            (c.tp, c.fp, c.tn, c.fn_),
            "pair {i}"
        );

        let report = evaluate(&pred, &gt, THRESHOLD).unwrap();
        let f1_exact = if c.tp + c.fp + c.fn_ == 0.0 { 0.0 } else { 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn_) };
        assert_eq!(report.f1, f1_exact, "pair {i}");
        assert!((report.f1 - f1_oracle(&c)).abs() < 1e-12, "pair {i}");
        assert!((report.mcc - mcc_oracle(&pred, &gt)).abs() < 1e-12, "pair {i}");
        assert!((-1.0..=1.0).contains(&report.mcc));

        // on binary predictions Σp + Σg = 2TP + FP + FN
        let dice_exact = 1.0 - (2.0 * c.tp + DICE_SMOOTH) / (2.0 * c.tp + c.fp + c.fn_ + DICE_SMOOTH);
        assert_eq!(dice_value(&pred, &gt, DICE_SMOOTH).unwrap(), dice_exact, "pair {i}");
        let tape = Tape::new();
        let l = dice_loss(tape.leaf(pred.clone()), &gt, DICE_SMOOTH).unwrap();
        assert_eq!(l.value().item(), dice_exact as Real, "pair {i}");
        assert!((0.0..=1.0).contains(&dice_exact));
    }
}

pub fn soft_dice_stays_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let pred = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.random::<f64>() as Real);
        let gt = Tensor::from_fn(&[2, 1, 8, 8], |_| if rng.random_bool(0.2) { 1.0 } else { 0.0 });
        let d = dice_value(&pred, &gt, DICE_SMOOTH).unwrap();
        assert!((0.0..=1.0).contains(&d), "{d}");
    }
}

pub fn composite_loss_is_affine_in_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let branch = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.random::<f64>() as Real);
        let fin = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.random::<f64>() as Real);
        let gt = Tensor::from_fn(&[2, 1, 8, 8], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let lc = dice_value(&branch, &gt, DICE_SMOOTH).unwrap();
        let lb = dice_value(&fin, &gt, DICE_SMOOTH).unwrap();
        for alpha in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let tape = Tape::new();
            let l = composite_loss(
                tape.leaf(branch.clone()),
                tape.leaf(fin.clone()),
                &gt,
                LossWeights::new(alpha).unwrap(),
            )
            .unwrap();
            let expected = alpha * lc + (1.0 - alpha) * lb;
            assert!((l.value().item() as f64 - expected).abs() < 1e-7, "alpha {alpha}");
        }
    }
}
