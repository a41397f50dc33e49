//! Central-difference gradient checking at f64.
//!
//! Each check perturbs one scalar input at a time by `step` in both
//! directions, recomputes a scalar loss, and compares the finite-difference
//! slope against the analytic gradient. The defect for one coordinate is
//! `|fd - an| / max(|fd|, |an|, 0.01)`, so tiny gradients are judged on an
//! absolute scale and large ones on a relative scale.

use alloc::vec::Vec;

/// Default perturbation step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Defect threshold used by the kernel test suite.
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Coordinates checked.
    pub checked: usize,
    /// Largest defect observed.
    pub max_defect: f64,
    /// Coordinate index of the largest defect.
    pub worst_index: usize,
    /// Finite-difference and analytic values at the worst coordinate.
    pub worst_pair: (f64, f64),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_defect <= tol
    }
}

pub fn defect(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(0.01)
}

/// Check `analytic` against central differences of `loss` with respect to
/// the coordinates of `x` listed in `indices` (all coordinates when empty).
///
/// `loss` must be deterministic in `x`; it is called twice per coordinate.
pub fn central_diff_check<L>(
    x: &mut [f64],
    analytic: &[f64],
    indices: &[usize],
    step: f64,
    mut loss: L,
) -> GradCheckReport
where
    L: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let all: Vec<usize>;
    let picked: &[usize] = if indices.is_empty() {
        all = (0..x.len()).collect();
        &all
    } else {
        indices
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_defect: 0.0,
        worst_index: 0,
        worst_pair: (0.0, 0.0),
    };
    for &i in picked {
        let saved = x[i];
        x[i] = saved + step;
        let up = loss(x);
        x[i] = saved - step;
        let down = loss(x);
        x[i] = saved;

        let fd = (up - down) / (2.0 * step);
        let an = analytic[i];
        let d = defect(fd, an);
        report.checked += 1;
        if d > report.max_defect {
            report.max_defect = d;
            report.worst_index = i;
            report.worst_pair = (fd, an);
        }
    }
    report
}

/// Deterministic sub-sampling of coordinate indices for large tensors:
/// every `len/count`-th coordinate, starting at `offset`.
pub fn strided_indices(len: usize, count: usize, offset: usize) -> Vec<usize> {
    if len == 0 || count == 0 {
        return Vec::new();
    }
    let stride = (len / count).max(1);
    (0..len).skip(offset % stride.max(1)).step_by(stride).take(count).collect()
}
