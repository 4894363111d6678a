//! Dice losses and pixel-level evaluation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Additive smoothing of the Dice ratio; keeps empty-mask batches finite.
pub const DICE_SMOOTH: f64 = 1.0;
/// Probability at or above which a pixel counts as manipulated.
pub const THRESHOLD: f64 = 0.5;

/// Weight `α` of the graph-branch loss in the composite objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    alpha: f64,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(LossWeights { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5 }
    }
}

/// Dice statistics `(Σpg, Σp + Σg)` accumulated in f64.
fn dice_sums(pred: &Tensor, gt: &Tensor) -> Result<(f64, f64)> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(
            "dice_loss",
            format!("prediction {:?} vs mask {:?}", pred.shape(), gt.shape()),
        ));
    }
    let (mut inter, mut total) = (0.0f64, 0.0f64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += p as f64 * g as f64;
        total += p as f64 + g as f64;
    }
    Ok((inter, total))
}

/// Value-only Dice loss, `1 − (2Σpg + ε) / (Σp + Σg + ε)`.
pub fn dice_value(pred: &Tensor, gt: &Tensor, smooth: f64) -> Result<f64> {
    let (inter, total) = dice_sums(pred, gt)?;
    Ok(1.0 - (2.0 * inter + smooth) / (total + smooth))
}

/// `weight · ∂L/∂p` for the Dice loss with the given sums.
fn dice_grad(gt: &Tensor, (inter, total): (f64, f64), smooth: f64, weight: f64) -> Tensor {
    // d/dp_j of −(2I+ε)/(S+ε) = −(2g_j(S+ε) − (2I+ε)) / (S+ε)²
    let (num, den) = (2.0 * inter + smooth, total + smooth);
    gt.map(|gj| (weight * -(2.0 * gj as f64 * den - num) / (den * den)) as Real)
}

/// Differentiable Dice loss of probabilities `pred` against a fixed mask.
pub fn dice_loss<'t>(pred: Var<'t>, gt: &Tensor, smooth: f64) -> Result<Var<'t>> {
    let sums = dice_sums(&pred.value(), gt)?;
    let loss = 1.0 - (2.0 * sums.0 + smooth) / (sums.1 + smooth);
    let gt = gt.clone();
    Ok(pred.tape().push(Tensor::scalar(loss as Real), &[pred], move |g| {
        vec![Some(dice_grad(&gt, sums, smooth, g.item() as f64))]
    }))
}

/// `α · L_C(branch) + (1 − α) · L_B(final)`, both Dice losses. The
/// combination is formed in f64 and rounded once.
pub fn composite_loss<'t>(branch: Var<'t>, final_pred: Var<'t>, gt: &Tensor, weights: LossWeights) -> Result<Var<'t>> {
    let a = weights.alpha();
    let (sc, sb) = (dice_sums(&branch.value(), gt)?, dice_sums(&final_pred.value(), gt)?);
    let dice = |(inter, total): (f64, f64)| 1.0 - (2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH);
    let loss = a * dice(sc) + (1.0 - a) * dice(sb);
    let gt = gt.clone();
    Ok(branch.tape().push(Tensor::scalar(loss as Real), &[branch, final_pred], move |g| {
        let g = g.item() as f64;
        vec![
            Some(dice_grad(&gt, sc, DICE_SMOOTH, g * a)),
            Some(dice_grad(&gt, sb, DICE_SMOOTH, g * (1.0 - a))),
        ]
    }))
}

/// Pixel confusion counts; adding counts is associative and commutative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_prediction(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::dim(
                "evaluate",
                format!("prediction {:?} vs mask {:?}", pred.shape(), gt.shape()),
            ));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p as f64 >= threshold, g >= 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(self, other: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `2TP / (2TP + FP + FN)`; zero when there is nothing to score.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// Matthews correlation; 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, tn, fn_) = (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64);
        let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if denom == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / denom.sqrt()
        }
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            f1: self.f1(),
            mcc: self.mcc(),
            confusion: *self,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub f1: f64,
    pub mcc: f64,
    pub confusion: Confusion,
}

impl EvalReport {
    /// One CSV record: config id, F1, MCC, TP, FP, TN, FN.
    pub fn csv_record(&self, config_id: &str) -> Vec<String> {
        let c = self.confusion;
        vec![
            config_id.to_string(),
            format!("{:.6}", self.f1),
            format!("{:.6}", self.mcc),
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
        ]
    }

    pub const CSV_HEADER: [&'static str; 7] = ["config", "f1", "mcc", "tp", "fp", "tn", "fn"];
}

pub fn evaluate(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<EvalReport> {
    Ok(Confusion::from_prediction(pred, gt, threshold)?.report())
}
