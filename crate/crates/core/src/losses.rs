//! Segmentation and classification losses, and the evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;
use crate::tensor::{Tape, Tensor, Var};

/// Loss mixing coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_dice: f64,
    pub lambda_cls: f64,
    pub lambda_seg: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_ce: 0.4,
            w_dice: 0.6,
            lambda_cls: 10.0,
            lambda_seg: 1.0,
            dice_smooth: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_ce, self.w_dice, self.lambda_cls, self.lambda_seg, self.dice_smooth];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if (self.w_ce + self.w_dice - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "w_ce + w_dice must equal 1, got {} + {}",
                self.w_ce, self.w_dice
            )));
        }
        Ok(())
    }
}

/// Which classification head a sample is scored by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub enum Way {
    Two,
    Four,
}

impl Way {
    pub fn classes(self) -> usize {
        match self {
            Way::Two => 2,
            Way::Four => 4,
        }
    }
}

impl TryFrom<usize> for Way {
    type Error = String;

    fn try_from(v: usize) -> std::result::Result<Self, String> {
        match v {
            2 => Ok(Way::Two),
            4 => Ok(Way::Four),
            other => Err(format!("way must be 2 or 4, got {other}")),
        }
    }
}

impl From<Way> for usize {
    fn from(w: Way) -> usize {
        w.classes()
    }
}

/// Mean `-log softmax(logits)[label]` over every labeled position. Logits
/// are `[N, K]` or `[N, K, H, W]` with classes on axis 1.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

fn one_hot_planes(labels: &[usize], n: usize, k: usize, hw: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[n, k, hw]);
    for s in 0..n {
        for i in 0..hw {
            let l = labels[s * hw + i];
            if l >= k {
                return Err(Error::Invalid(format!(
                    "dice: label {l} out of range for {k} classes"
                )));
            }
            t.data_mut()[(s * k + l) * hw + i] = 1.0;
        }
    }
    Ok(t)
}

/// `1 - mean_k (2·Σ p_k t_k + smooth) / (Σ p_k + Σ t_k + smooth)` on the
/// softmax of `[N, K, H, W]` logits, averaged uniformly over all K classes.
pub fn soft_dice_loss(tape: &mut Tape, logits: Var, labels: &[usize], smooth: f64) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 4 || s[1] < 2 {
        return Err(Error::shape("soft_dice_loss", format!("logits {s:?} must be [N, K>=2, H, W]")));
    }
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    if labels.len() != n * hw {
        return Err(Error::shape(
            "soft_dice_loss",
            format!("{} labels for logits {s:?}", labels.len()),
        ));
    }
    let target = one_hot_planes(labels, n, k, hw)?.reshape(&s)?;
    let target_sums: Vec<f64> = (0..k)
        .map(|c| {
            (0..n)
                .map(|b| target.data()[(b * k + c) * hw..(b * k + c + 1) * hw].iter().sum::<f64>())
                .sum()
        })
        .collect();

    let probs = tape.softmax(logits, 1)?;
    let t = tape.constant(target);
    let overlap = tape.mul(probs, t)?;
    let inter = tape.sum_keep_axis(overlap, 1)?;
    let psum = tape.sum_keep_axis(probs, 1)?;
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, smooth);
    let tsum = tape.constant(Tensor::new(
        vec![k],
        target_sums.iter().map(|v| v + smooth).collect(),
    )?);
    let den = tape.add(psum, tsum)?;
    let dice = tape.div(num, den)?;
    let mean = tape.mean(dice);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Segmentation loss and its two components.
#[derive(Clone, Copy, Debug)]
pub struct SegLoss {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
}

/// `w_ce · CE + w_dice · Dice`
pub fn seg_loss(tape: &mut Tape, logits: Var, labels: &[usize], w: &LossWeights) -> Result<SegLoss> {
    let ce = cross_entropy(tape, logits, labels)?;
    let dice = soft_dice_loss(tape, logits, labels, w.dice_smooth)?;
    let a = tape.scale(ce, w.w_ce);
    let b = tape.scale(dice, w.w_dice);
    let total = tape.add(a, b)?;
    Ok(SegLoss { total, ce, dice })
}

fn gather_rows(tape: &mut Tape, x: Var, rows: &[usize]) -> Result<Var> {
    let parts = rows
        .iter()
        .map(|&r| tape.narrow(x, 0, r, 1))
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&parts, 0)
}

/// Classification loss: 2-way samples are scored on `logits2`, 4-way on
/// `logits4`; a batch holding both contributes the sum of the two
/// sub-batch means.
pub fn cls_loss(
    tape: &mut Tape,
    logits2: Var,
    logits4: Var,
    labels: &[usize],
    ways: &[Way],
) -> Result<Var> {
    let n = tape.shape(logits2)[0];
    if labels.len() != n || ways.len() != n || tape.shape(logits4)[0] != n {
        return Err(Error::shape(
            "cls_loss",
            format!("{} labels and {} ways for a batch of {n}", labels.len(), ways.len()),
        ));
    }
    for (l, w) in labels.iter().zip(ways) {
        if *l >= w.classes() {
            return Err(Error::Invalid(format!(
                "cls_loss: label {l} >= way {}",
                w.classes()
            )));
        }
    }
    let mut total: Option<Var> = None;
    for (way, logits) in [(Way::Two, logits2), (Way::Four, logits4)] {
        let rows: Vec<usize> = (0..n).filter(|&i| ways[i] == way).collect();
        if rows.is_empty() {
            continue;
        }
        let sub_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
        let sub = if rows.len() == n {
            logits
        } else {
            gather_rows(tape, logits, &rows)?
        };
        let l = cross_entropy(tape, sub, &sub_labels)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Invalid("cls_loss: empty batch".into()))
}

/// Scales a task loss for backpropagation: `λ_seg` for segmentation
/// batches, `λ_cls` for classification batches.
pub fn final_loss(tape: &mut Tape, task: Task, task_loss: Var, w: &LossWeights) -> Var {
    match task {
        Task::Seg => tape.scale(task_loss, w.lambda_seg),
        Task::Cls => tape.scale(task_loss, w.lambda_cls),
    }
}

/// Hard Dice `2|P∩T| / (|P| + |T|)` for one class; 1.0 when both are empty.
pub fn dice_score(pred: &[usize], target: &[usize], class: usize) -> f64 {
    assert_eq!(pred.len(), target.len());
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for (&a, &b) in pred.iter().zip(target) {
        let (ia, ib) = (a == class, b == class);
        inter += (ia && ib) as usize;
        p += ia as usize;
        t += ib as usize;
    }
    if p + t == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + t) as f64
    }
}

/// Fraction of exact matches.
pub fn accuracy(pred: &[usize], target: &[usize]) -> f64 {
    assert_eq!(pred.len(), target.len());
    assert!(!pred.is_empty(), "accuracy of an empty set");
    let hits = pred.iter().zip(target).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}
