//! Alternating marginal scaling onto the `(Y, X1)` / `(Y, X2)` constraint set,
//! with a taped variant that can be differentiated.

use super::MarginalPair;
use crate::{Error, Result};

pub const SK_ATOL: f64 = 1e-6;
pub const SK_MAX_ROUNDS: usize = 500;
/// Round cap for the differentiated projection inside the optimizer.
pub const SK_UNROLLED_ROUNDS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Projected joint, flat `[y][x1][x2]`.
    pub joint: Vec<f64>,
    /// Rounds in which at least one rescaling happened.
    pub rounds: usize,
    pub converged: bool,
    /// Relative error of the `(Y, X1)` marginal.
    pub err1: f64,
    /// Relative error of the `(Y, X2)` marginal.
    pub err2: f64,
    /// Cells forced to zero because their target marginal is zero.
    pub zeroed: usize,
    /// Accumulated log scaling applied to each `(y, x1)` slice.
    pub log_scale1: Vec<f64>,
    /// Accumulated log scaling applied to each `(y, x2)` slice.
    pub log_scale2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    /// Match `q(y, x1)`.
    X1,
    /// Match `q(y, x2)`.
    X2,
}

fn slice_sums(q: &[f64], sizes: (usize, usize, usize), axis: Axis) -> Vec<f64> {
    let (ny, n1, n2) = sizes;
    let mut s = vec![0.0; match axis {
        Axis::X1 => ny * n1,
        Axis::X2 => ny * n2,
    }];
    for y in 0..ny {
        for a in 0..n1 {
            for b in 0..n2 {
                let v = q[(y * n1 + a) * n2 + b];
                match axis {
                    Axis::X1 => s[y * n1 + a] += v,
                    Axis::X2 => s[y * n2 + b] += v,
                }
            }
        }
    }
    s
}

fn slice_of(y: usize, a: usize, b: usize, sizes: (usize, usize, usize), axis: Axis) -> usize {
    match axis {
        Axis::X1 => y * sizes.1 + a,
        Axis::X2 => y * sizes.2 + b,
    }
}

fn target(t: &MarginalPair, axis: Axis) -> &[f64] {
    match axis {
        Axis::X1 => t.p_yx1(),
        Axis::X2 => t.p_yx2(),
    }
}

fn relative_error(q: &[f64], t: &MarginalPair, axis: Axis) -> f64 {
    let s = slice_sums(q, t.sizes(), axis);
    s.iter()
        .zip(target(t, axis))
        .filter(|(_, &p)| p > 0.0)
        .map(|(v, p)| (v - p).abs() / p)
        .fold(0.0, f64::max)
}

/// Relative marginal errors `(err1, err2)`, taken over cells with positive target.
pub fn marginal_errors(q: &[f64], targets: &MarginalPair) -> (f64, f64) {
    (relative_error(q, targets, Axis::X1), relative_error(q, targets, Axis::X2))
}

/// Rescales `q` in place along `axis`; returns the pre-scaling slice sums.
fn scale(q: &mut [f64], t: &MarginalPair, axis: Axis) -> Result<Vec<f64>> {
    let sizes = t.sizes();
    let (ny, n1, n2) = sizes;
    let s = slice_sums(q, sizes, axis);
    let p = target(t, axis);
    if let Some(k) = (0..s.len()).find(|&k| s[k] <= 0.0 && p[k] > 0.0) {
        return Err(Error::Infeasible(format!("target cell {k} is positive but the joint has no support there")));
    }
    for y in 0..ny {
        for a in 0..n1 {
            for b in 0..n2 {
                let k = slice_of(y, a, b, sizes, axis);
                let c = &mut q[(y * n1 + a) * n2 + b];
                *c = if s[k] > 0.0 { *c * p[k] / s[k] } else { 0.0 };
            }
        }
    }
    Ok(s)
}

/// Cells whose `(y, x1)` or `(y, x2)` target is zero.
fn zero_mask(t: &MarginalPair) -> Vec<bool> {
    let (ny, n1, n2) = t.sizes();
    let mut keep = vec![true; ny * n1 * n2];
    for y in 0..ny {
        for a in 0..n1 {
            for b in 0..n2 {
                if t.p_yx1()[y * n1 + a] == 0.0 || t.p_yx2()[y * n2 + b] == 0.0 {
                    keep[(y * n1 + a) * n2 + b] = false;
                }
            }
        }
    }
    keep
}

/// One scaling step recorded for reverse mode: the pre-scaling joint and slice sums.
#[derive(Debug, Clone)]
struct Step {
    axis: Axis,
    input: Vec<f64>,
    sums: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Tape {
    keep: Vec<bool>,
    steps: Vec<Step>,
}

/// With `unroll`, the exit checks are skipped and exactly `max_rounds` rounds run.
fn run(q: &[f64], t: &MarginalPair, atol: f64, max_rounds: usize, unroll: bool, mut tape: Option<&mut Vec<Step>>) -> Result<Projection> {
    let sizes = t.sizes();
    if q.len() != sizes.0 * sizes.1 * sizes.2 {
        return Err(Error::InvalidInput("joint size does not match the marginal alphabets".into()));
    }
    if !(atol > 0.0) {
        return Err(Error::InvalidInput("projection tolerance must be positive".into()));
    }
    if q.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidInput("joint entries must be finite and non-negative".into()));
    }
    let keep = zero_mask(t);
    let mut q = q.to_vec();
    let mut zeroed = 0;
    for (c, &k) in q.iter_mut().zip(&keep) {
        if !k && *c > 0.0 {
            *c = 0.0;
            zeroed += 1;
        }
    }
    if zeroed > 0 && tape.is_none() {
        log::debug!("zeroed {zeroed} cells outside the target support");
    }

    let mut rounds = 0;
    let converged;
    let mut log_scale1 = vec![0.0; sizes.0 * sizes.1];
    let mut log_scale2 = vec![0.0; sizes.0 * sizes.2];
    let mut record = |q: &mut Vec<f64>, axis: Axis, tape: &mut Option<&mut Vec<Step>>| -> Result<()> {
        let input = tape.as_ref().map(|_| q.clone());
        let sums = scale(q, t, axis)?;
        let acc = match axis {
            Axis::X1 => &mut log_scale1,
            Axis::X2 => &mut log_scale2,
        };
        for ((l, s), p) in acc.iter_mut().zip(&sums).zip(target(t, axis)) {
            if *s > 0.0 && *p > 0.0 {
                *l += (p / s).ln();
            }
        }
        if let (Some(tp), Some(input)) = (tape.as_mut(), input) {
            tp.push(Step { axis, input, sums });
        }
        Ok(())
    };
    loop {
        let (e1, e2) = marginal_errors(&q, t);
        if !unroll && e1 <= atol && e2 <= atol {
            converged = true;
            break;
        }
        if rounds == max_rounds {
            converged = e1 <= atol && e2 <= atol;
            break;
        }
        rounds += 1;
        record(&mut q, Axis::X2, &mut tape)?;
        if !unroll && relative_error(&q, t, Axis::X1) <= atol {
            converged = true;
            break;
        }
        record(&mut q, Axis::X1, &mut tape)?;
    }
    let (err1, err2) = marginal_errors(&q, t);
    Ok(Projection { joint: q, rounds, converged, err1, err2, zeroed, log_scale1, log_scale2 })
}

/// Projects a non-negative joint onto the set matching both pairwise targets.
///
/// Each round first checks both marginals and exits if they are within
/// `atol`; otherwise it rescales toward `p(y, x2)`, rechecks the `(Y, X1)`
/// marginal, and rescales toward `p(y, x1)`. Cells whose target marginal is
/// zero are zeroed up front. Non-convergence after `max_rounds` is reported
/// through [`Projection::converged`].
pub fn sinkhorn_project(q: &[f64], targets: &MarginalPair, atol: f64, max_rounds: usize) -> Result<Projection> {
    let out = run(q, targets, atol, max_rounds, false, None)?;
    if !out.converged {
        log::warn!(
            "projection stopped after {} rounds with marginal errors {:.2e} / {:.2e}",
            out.rounds,
            out.err1,
            out.err2
        );
    }
    Ok(out)
}

/// [`sinkhorn_project`] without the non-convergence warning, for inner loops.
pub(crate) fn sinkhorn_quiet(q: &[f64], targets: &MarginalPair, atol: f64, max_rounds: usize) -> Result<Projection> {
    run(q, targets, atol, max_rounds, false, None)
}

/// Runs exactly `rounds` rounds, recording each scaling for [`sinkhorn_backward`].
pub(crate) fn sinkhorn_taped(q: &[f64], targets: &MarginalPair, atol: f64, rounds: usize) -> Result<(Projection, Tape)> {
    let mut steps = Vec::new();
    let out = run(q, targets, atol, rounds, true, Some(&mut steps))?;
    Ok((out, Tape { keep: zero_mask(targets), steps }))
}

/// Pulls `d loss / d output` back to `d loss / d input` through a taped projection.
///
/// For a slice scaled by `p / s`, `d out_k / d q_j = (p / s)(delta_kj - q_k / s)`.
pub(crate) fn sinkhorn_backward(tape: &Tape, targets: &MarginalPair, grad_out: &[f64]) -> Vec<f64> {
    let sizes = targets.sizes();
    let (ny, n1, n2) = sizes;
    let mut g = grad_out.to_vec();
    for step in tape.steps.iter().rev() {
        let p = target(targets, step.axis);
        let mut dot = vec![0.0; step.sums.len()];
        for y in 0..ny {
            for a in 0..n1 {
                for b in 0..n2 {
                    let c = (y * n1 + a) * n2 + b;
                    dot[slice_of(y, a, b, sizes, step.axis)] += g[c] * step.input[c];
                }
            }
        }
        for y in 0..ny {
            for a in 0..n1 {
                for b in 0..n2 {
                    let c = (y * n1 + a) * n2 + b;
                    let k = slice_of(y, a, b, sizes, step.axis);
                    let s = step.sums[k];
                    g[c] = if s > 0.0 { p[k] / s * (g[c] - dot[k] / s) } else { 0.0 };
                }
            }
        }
    }
    for (gc, &k) in g.iter_mut().zip(&tape.keep) {
        if !k {
            *gc = 0.0;
        }
    }
    g
}
