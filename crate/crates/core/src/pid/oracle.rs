//! Exact minimization of `I_q(Y : (X1, X2))` for small alphabets.
//!
//! Fixing `q(y)` and the conditional marginals `q(x1 | y)`, `q(x2 | y)`, each
//! conditional coupling `q(x1, x2 | y)` ranges over a transportation polytope
//! and the objective is convex in the couplings. Binary alphabets have one
//! free parameter per label and are swept on a grid; larger alphabets use
//! projected gradient descent from several seeded starts.

use rand::Rng;

use super::{MarginalPair, PIDResult, SolverDiagnostics};
use crate::infotheory::{entropy_bits, DiscreteJoint, MiForm};
use crate::par;
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub grid_points: usize,
    pub refine_tol: f64,
    pub restarts: usize,
    pub pgd_iters: usize,
    pub seed: u64,
    /// Sweep grid rows on the rayon pool.
    pub parallel: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { grid_points: 2001, refine_tol: 1e-7, restarts: 20, pgd_iters: 3000, seed: 0, parallel: true }
    }
}

const MAX_CELLS: usize = 1024;

/// `I_q(Y : (X1, X2))` for a flat joint.
fn three_way_mi(q: &[f64], sizes: (usize, usize, usize)) -> f64 {
    let (ny, n1, n2) = sizes;
    let mut py = vec![0.0; ny];
    let mut px = vec![0.0; n1 * n2];
    for y in 0..ny {
        for x in 0..n1 * n2 {
            let v = q[y * n1 * n2 + x];
            py[y] += v;
            px[x] += v;
        }
    }
    entropy_bits(&py) + entropy_bits(&px) - entropy_bits(q)
}

/// Exact PID: minimizes the three-way information over the joints matching
/// `marginals` and evaluates the components with `total_mi` as the full information.
pub fn pid_oracle(marginals: &MarginalPair, total_mi: f64, cfg: &OracleConfig) -> Result<PIDResult> {
    let sizes = marginals.sizes();
    let (ny, n1, n2) = sizes;
    if ny * n1 * n2 > MAX_CELLS {
        return Err(Error::InvalidInput(format!("oracle limited to {MAX_CELLS} cells, got {}", ny * n1 * n2)));
    }
    if marginals.y_gap > 1e-6 {
        log::warn!("oracle marginals were reconciled (gap {:.2e})", marginals.y_gap);
    }
    let (q, iterations, solver) = if (ny, n1, n2) == (2, 2, 2) {
        let (q, it) = binary_grid(marginals, cfg);
        (q, it, "oracle-grid")
    } else {
        let (q, it) = projected_gradient(marginals, cfg)?;
        (q, it, "oracle-pgd")
    };
    let (e1, e2) = super::marginal_errors(&q, marginals);
    let diag = SolverDiagnostics {
        solver: solver.into(),
        iterations,
        sk_rounds: 0,
        sk_converged: true,
        marginal_error: e1.max(e2),
        objective_value: 0.0,
        converged: true,
    };
    PIDResult::at_minimizer(&q, sizes, total_mi, diag)
}

/// Oracle on the exact marginals of `joint`, with its own total information.
pub fn pid_oracle_joint(joint: &DiscreteJoint, cfg: &OracleConfig) -> Result<PIDResult> {
    pid_oracle(&MarginalPair::from_joint(joint), joint.mutual_info(MiForm::Total), cfg)
}

/// Binary case: `t_y = q(x1=0, x2=0 | y)` in `[max(0, a+b-1), min(a, b)]`.
struct BinaryFamily {
    py: [f64; 2],
    a: [f64; 2],
    b: [f64; 2],
}

impl BinaryFamily {
    fn new(m: &MarginalPair) -> Self {
        let py = m.p_y();
        let cond = |t: &[f64], y: usize| if py[y] > 0.0 { t[y * 2] / py[y] } else { 0.5 };
        Self {
            py: [py[0], py[1]],
            a: [cond(m.p_yx1(), 0), cond(m.p_yx1(), 1)],
            b: [cond(m.p_yx2(), 0), cond(m.p_yx2(), 1)],
        }
    }

    fn range(&self, y: usize) -> (f64, f64) {
        ((self.a[y] + self.b[y] - 1.0).max(0.0), self.a[y].min(self.b[y]))
    }

    fn joint(&self, t: [f64; 2]) -> [f64; 8] {
        let mut q = [0.0; 8];
        for y in 0..2 {
            let (a, b, p) = (self.a[y], self.b[y], self.py[y]);
            let cells = [t[y], a - t[y], b - t[y], 1.0 - a - b + t[y]];
            for (k, c) in cells.iter().enumerate() {
                q[y * 4 + k] = p * c.max(0.0);
            }
        }
        q
    }

    fn objective(&self, t: [f64; 2]) -> f64 {
        three_way_mi(&self.joint(t), (2, 2, 2))
    }
}

fn linspace(lo: f64, hi: f64, n: usize, k: usize) -> f64 {
    if n <= 1 {
        lo
    } else {
        lo + (hi - lo) * k as f64 / (n - 1) as f64
    }
}

fn binary_grid(m: &MarginalPair, cfg: &OracleConfig) -> (Vec<f64>, usize) {
    let fam = BinaryFamily::new(m);
    let n = cfg.grid_points.max(2);
    let mut ranges = [fam.range(0), fam.range(1)];
    let mut evals = 0;

    let sweep = |ranges: [(f64, f64); 2], n: usize, parallel: bool| -> ([f64; 2], f64) {
        let rows = par::map_range(n, parallel, |i| {
            let t0 = linspace(ranges[0].0, ranges[0].1, n, i);
            let mut best = (f64::INFINITY, 0.0);
            for j in 0..n {
                let t1 = linspace(ranges[1].0, ranges[1].1, n, j);
                let v = fam.objective([t0, t1]);
                if v < best.0 {
                    best = (v, t1);
                }
            }
            (best.0, [t0, best.1])
        });
        let (v, t) = rows.into_iter().fold((f64::INFINITY, [0.0; 2]), |acc, r| if r.0 < acc.0 { r } else { acc });
        (t, v)
    };

    let (mut t, mut best) = sweep(ranges, n, cfg.parallel);
    evals += n * n;
    // Zoom around the incumbent; the objective is convex in (t0, t1).
    let full = [fam.range(0), fam.range(1)];
    let mut half = [(ranges[0].1 - ranges[0].0) / (n - 1) as f64, (ranges[1].1 - ranges[1].0) / (n - 1) as f64];
    while half[0].max(half[1]) > cfg.refine_tol {
        for y in 0..2 {
            ranges[y] = ((t[y] - half[y]).max(full[y].0), (t[y] + half[y]).min(full[y].1));
        }
        let (nt, nv) = sweep(ranges, 21, false);
        evals += 21 * 21;
        if nv <= best {
            t = nt;
            best = nv;
        }
        half = [half[0] / 10.0, half[1] / 10.0];
    }
    (fam.joint(t).to_vec(), evals)
}

/// Euclidean projection of `x` (`n1 x n2`) onto
/// `{X >= 0, X 1 = a, X^T 1 = b}` by Dykstra's alternating projections
/// between the affine constraints and the non-negative orthant.
fn project_transport(x: &mut [f64], a: &[f64], b: &[f64]) {
    let (n1, n2) = (a.len(), b.len());
    let affine = |z: &mut [f64]| {
        let mut r = vec![0.0; n1];
        let mut c = vec![0.0; n2];
        for i in 0..n1 {
            for j in 0..n2 {
                r[i] += z[i * n2 + j];
                c[j] += z[i * n2 + j];
            }
        }
        r.iter_mut().zip(a).for_each(|(r, a)| *r -= a);
        c.iter_mut().zip(b).for_each(|(c, b)| *c -= b);
        let s: f64 = r.iter().sum();
        for i in 0..n1 {
            for j in 0..n2 {
                z[i * n2 + j] += -r[i] / n2 as f64 - c[j] / n1 as f64 + s / (n1 * n2) as f64;
            }
        }
    };
    let mut corr = vec![0.0; x.len()];
    for _ in 0..20_000 {
        // The affine set needs no correction term.
        affine(x);
        let mut moved = 0.0f64;
        for (v, c) in x.iter_mut().zip(corr.iter_mut()) {
            let y = *v + *c;
            let p = y.max(0.0);
            *c = y - p;
            moved = moved.max((p - *v).abs());
            *v = p;
        }
        if moved < 1e-15 {
            break;
        }
    }
    // Final exact affine correction keeps the margins tight; clip tiny negatives.
    affine(x);
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

fn projected_gradient(m: &MarginalPair, cfg: &OracleConfig) -> Result<(Vec<f64>, usize)> {
    let sizes = m.sizes();
    let (ny, n1, n2) = sizes;
    let py = m.p_y();
    let cond1: Vec<Vec<f64>> = (0..ny)
        .map(|y| (0..n1).map(|a| if py[y] > 0.0 { m.p_yx1()[y * n1 + a] / py[y] } else { 0.0 }).collect())
        .collect();
    let cond2: Vec<Vec<f64>> = (0..ny)
        .map(|y| (0..n2).map(|b| if py[y] > 0.0 { m.p_yx2()[y * n2 + b] / py[y] } else { 0.0 }).collect())
        .collect();
    let assemble = |c: &[Vec<f64>]| -> Vec<f64> {
        let mut q = vec![0.0; ny * n1 * n2];
        for y in 0..ny {
            for k in 0..n1 * n2 {
                q[y * n1 * n2 + k] = py[y] * c[y][k];
            }
        }
        q
    };
    let objective = |c: &[Vec<f64>]| three_way_mi(&assemble(c), sizes);

    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut total_iters = 0;
    let mut rng = stream(cfg.seed, "pid-oracle-restarts");
    for restart in 0..cfg.restarts.max(1) {
        // Start 0 is the conditional-independence coupling; the rest are
        // random positive tables projected onto the polytope.
        let mut c: Vec<Vec<f64>> = (0..ny)
            .map(|y| {
                let mut x: Vec<f64> = (0..n1 * n2)
                    .map(|k| {
                        let base = cond1[y][k / n2] * cond2[y][k % n2];
                        if restart == 0 {
                            base
                        } else {
                            base * rng.random_range(0.0..2.0) + 0.1 * rng.random::<f64>() / (n1 * n2) as f64
                        }
                    })
                    .collect();
                if py[y] > 0.0 {
                    project_transport(&mut x, &cond1[y], &cond2[y]);
                }
                x
            })
            .collect();
        let mut f = objective(&c);
        let mut step = 1.0;
        for _ in 0..cfg.pgd_iters {
            total_iters += 1;
            let q = assemble(&c);
            let mut qx = vec![0.0; n1 * n2];
            for y in 0..ny {
                for k in 0..n1 * n2 {
                    qx[k] += q[y * n1 * n2 + k];
                }
            }
            // d I / d c_y(k) = p(y) (log q(y,k) - log q(k) - log p(y)) / ln 2, up to a constant
            let grad: Vec<Vec<f64>> = (0..ny)
                .map(|y| {
                    (0..n1 * n2)
                        .map(|k| {
                            if py[y] == 0.0 {
                                return 0.0;
                            }
                            let v = q[y * n1 * n2 + k].max(1e-300);
                            py[y] * (v.ln() - qx[k].max(1e-300).ln() - py[y].ln()) / std::f64::consts::LN_2
                        })
                        .collect()
                })
                .collect();
            let mut improved = false;
            while step > 1e-12 {
                let cand: Vec<Vec<f64>> = (0..ny)
                    .map(|y| {
                        let mut x: Vec<f64> = c[y].iter().zip(&grad[y]).map(|(v, g)| v - step * g).collect();
                        if py[y] > 0.0 {
                            project_transport(&mut x, &cond1[y], &cond2[y]);
                        }
                        x
                    })
                    .collect();
                let fc = objective(&cand);
                if fc < f {
                    let gain = f - fc;
                    c = cand;
                    f = fc;
                    step *= 1.5;
                    improved = gain > 1e-15;
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, c));
        }
    }
    let (_, c) = best.ok_or_else(|| Error::Numerical("no oracle restart completed".into()))?;
    Ok((assemble(&c), total_iters))
}
