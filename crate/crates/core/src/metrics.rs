//! Confusion-matrix accumulation and intersection-over-union scoring.
//!
//! Evaluation happens on the original 3D points after back-projection,
//! never on pixels. Ground-truth ignore points are skipped and counted;
//! classes whose union is empty are excluded from the mean rather than
//! scored zero, matching common benchmark tooling.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("ground truth has {gt} points but prediction has {pred}")]
    LengthMismatch { gt: usize, pred: usize },
    #[error("label {id} outside the {classes}-class matrix")]
    ClassOutOfRange { id: u16, classes: usize },
    #[error("cannot merge a {a}-class matrix into a {b}-class matrix")]
    MergeMismatch { a: usize, b: usize },
}

/// Square count matrix over all class ids, rows = ground truth, columns =
/// prediction. The ignore id owns a row and column so a fallback
/// prediction stays representable, but it never enters any IoU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore: u16,
    counts: Vec<u64>,
    /// Points skipped because their ground truth was the ignore id.
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore: u16) -> Self {
        ConfusionMatrix {
            classes,
            ignore,
            counts: vec![0; classes * classes],
            ignored: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ignore_id(&self) -> u16 {
        self.ignore
    }

    pub fn count(&self, gt: u16, pred: u16) -> u64 {
        self.counts[usize::from(gt) * self.classes + usize::from(pred)]
    }

    /// Total points that entered the matrix (ignored ones not included).
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, gt: &[u16], pred: &[u16]) -> Result<(), MetricsError> {
        if gt.len() != pred.len() {
            return Err(MetricsError::LengthMismatch {
                gt: gt.len(),
                pred: pred.len(),
            });
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g == self.ignore {
                self.ignored += 1;
                continue;
            }
            for id in [g, p] {
                if usize::from(id) >= self.classes {
                    return Err(MetricsError::ClassOutOfRange {
                        id,
                        classes: self.classes,
                    });
                }
            }
            self.counts[usize::from(g) * self.classes + usize::from(p)] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.classes != other.classes {
            return Err(MetricsError::MergeMismatch {
                a: other.classes,
                b: self.classes,
            });
        }
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    /// Per-class `TP / (TP + FP + FN)`. `None` marks a class with an empty
    /// union (absent from both ground truth and prediction) and the ignore
    /// class itself.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                if c == usize::from(self.ignore) {
                    return None;
                }
                let tp = self.counts[c * k + c];
                let row: u64 = (0..k).map(|j| self.counts[c * k + j]).sum();
                let col: u64 = (0..k).map(|i| self.counts[i * k + c]).sum();
                let union = row + col - tp;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean over the populated classes; `None` when nothing was scored.
    ///
    /// The mean is accumulated over the exact integer ratios and rounded
    /// to f64 once at the end. Averaging the rounded per-class values
    /// instead can land exactly on a rounding tie and come out an ulp
    /// low; the two-class case 1/2, 2/3 does.
    pub fn mean_iou(&self) -> Option<f64> {
        let k = self.classes;
        let mut fracs = Vec::new();
        for c in 0..k {
            if c == usize::from(self.ignore) {
                continue;
            }
            let tp = self.counts[c * k + c];
            let row: u64 = (0..k).map(|j| self.counts[c * k + j]).sum();
            let col: u64 = (0..k).map(|i| self.counts[i * k + c]).sum();
            let union = row + col - tp;
            if union > 0 {
                fracs.push((tp, union));
            }
        }
        if fracs.is_empty() {
            return None;
        }
        Some(exact_fraction_mean(&fracs).unwrap_or_else(|| {
            // Unreachable at sane count scales; see exact_fraction_mean.
            let sum: f64 = fracs.iter().map(|&(tp, u)| tp as f64 / u as f64).sum();
            sum / fracs.len() as f64
        }))
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Correctly rounded mean of `tp/union` fractions. `None` when the
/// running fraction overflows u128 or its reduced parts exceed 2^53,
/// which needs near-coprime unions in the 10^9 range; callers fall back
/// to the f64 mean there.
fn exact_fraction_mean(fracs: &[(u64, u64)]) -> Option<f64> {
    let mut num: u128 = 0;
    let mut den: u128 = 1;
    for &(tp, union) in fracs {
        let (tp, union) = (u128::from(tp), u128::from(union));
        let g = gcd(den, union);
        num = num
            .checked_mul(union / g)?
            .checked_add(tp.checked_mul(den / g)?)?;
        den = den.checked_mul(union / g)?;
        let g = gcd(num, den);
        if g > 1 {
            num /= g;
            den /= g;
        }
    }
    den = den.checked_mul(fracs.len() as u128)?;
    let g = gcd(num, den);
    if g > 1 {
        num /= g;
        den /= g;
    }
    // Division of two exactly representable integers rounds once.
    const MAX_EXACT: u128 = 1 << 53;
    if num <= MAX_EXACT && den <= MAX_EXACT {
        Some(num as f64 / den as f64)
    } else {
        None
    }
}
