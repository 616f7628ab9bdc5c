//! Pixel-level binary segmentation scores, micro-aggregated.
//!
//! All scores derive from one confusion matrix pooled over every pixel of
//! every patch, with the fire class as positive.

use std::fmt;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Add one predicted/true mask pair. Both must have equal shape and
    /// contain only 0 and 1.
    pub fn accumulate<T: Element>(&mut self, pred: &Tensor<T>, truth: &Tensor<T>) -> Result<()> {
        pred.expect_same_shape(truth, "accumulate")?;
        let (p, t) = (
            binary_bits(pred, "prediction")?,
            binary_bits(truth, "ground truth")?,
        );
        for (p, t) in p.into_iter().zip(t) {
            match (p, t) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => self.tn += 1,
            }
        }
        Ok(())
    }

    pub fn scores(&self) -> Scores {
        let ratio = |num: u64, den: u64| {
            if den == 0 {
                None
            } else {
                Some(num as f64 / den as f64)
            }
        };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let iou = ratio(self.tp, self.tp + self.fp + self.fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        Scores {
            precision: precision.unwrap_or(0.0),
            recall: recall.unwrap_or(0.0),
            iou: iou.unwrap_or(0.0),
            f1: f1.unwrap_or(0.0),
            degenerate: precision.is_none() || recall.is_none() || iou.is_none() || f1.is_none(),
        }
    }
}

fn binary_bits<T: Element>(mask: &Tensor<T>, what: &str) -> Result<Vec<bool>> {
    mask.data()
        .iter()
        .map(|&v| {
            if v == T::one() {
                Ok(true)
            } else if v == T::zero() {
                Ok(false)
            } else {
                Err(Error::InvalidArgument(format!(
                    "{what} mask must be binary, found {v}"
                )))
            }
        })
        .collect()
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            fn_: self.fn_ + rhs.fn_,
            tn: self.tn + rhs.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Precision, recall, IoU and F1 in `[0, 1]`.
///
/// A zero denominator yields 0 for that score and sets `degenerate`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub f1: f64,
    pub degenerate: bool,
}

impl Scores {
    /// Tab-separated percentages with one decimal: `P  R  IoU  F1`.
    pub fn report_line(&self) -> String {
        format!(
            "{:.1}\t{:.1}\t{:.1}\t{:.1}",
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.iou,
            100.0 * self.f1
        )
    }
}

impl fmt::Display for Scores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.report_line())
    }
}

/// F1 expressed through IoU for the same confusion counts.
pub fn f1_from_iou(iou: f64) -> f64 {
    2.0 * iou / (1.0 + iou)
}
