//! Partial information decomposition of `I(Y : (X1, X2))`.
//!
//! Both solvers minimize `I_q(Y : (X1, X2))` over joints `q` whose `(Y, X1)`
//! and `(Y, X2)` marginals match a [`MarginalPair`], then read the four
//! components off the minimizer:
//!
//! - unique 1 = `I_q(Y : X1 | X2)`
//! - unique 2 = `I_q(Y : X2 | X1)`
//! - shared = `CoI_q(Y; X1; X2)`
//! - complementary = `total - I_q(Y : (X1, X2))`
//!
//! [`pid_oracle`] is exact for small alphabets; [`pid_icym2i`] optimizes a
//! score parametrization through an unrolled Sinkhorn projection.

mod estimator;
mod oracle;
mod sinkhorn;

pub use estimator::{pid_icym2i, pid_icym2i_joint, QParametrization, SolverConfig};
pub use oracle::{pid_oracle, pid_oracle_joint, OracleConfig};
pub use sinkhorn::{marginal_errors, sinkhorn_project, Projection, SK_ATOL, SK_MAX_ROUNDS, SK_UNROLLED_ROUNDS};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::infotheory::{entropy_bits, DiscreteJoint, Quantizer, Vars};
use crate::metrics::Arm;
use crate::propensity::{ipw_weights, Normalization, Propensity};
use crate::{Error, Result};

const Y_CONSISTENCY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    EmpiricalFull,
    EmpiricalObserved,
    IpwCorrected,
    /// Weighted averages of calibrated unimodal classifier probabilities.
    ModelBased,
    Exact,
}

/// The two pairwise joints `p(y, x1)` and `p(y, x2)` that define the feasible set.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPair {
    ny: usize,
    n1: usize,
    n2: usize,
    /// `[y][x1]`
    p_yx1: Vec<f64>,
    /// `[y][x2]`
    p_yx2: Vec<f64>,
    pub provenance: Provenance,
    /// Largest `|p1(y) - p2(y)|` before reconciliation.
    pub y_gap: f64,
}

impl MarginalPair {
    /// Normalizes both tables and reconciles their `Y` marginals: if they
    /// differ by more than 1e-6, each table's rows are rescaled to the
    /// average `Y` marginal and a warning is logged.
    pub fn new(
        sizes: (usize, usize, usize),
        mut p_yx1: Vec<f64>,
        mut p_yx2: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        let (ny, n1, n2) = sizes;
        if ny == 0 || n1 == 0 || n2 == 0 || p_yx1.len() != ny * n1 || p_yx2.len() != ny * n2 {
            return Err(Error::InvalidInput("marginal tables do not match alphabet sizes".into()));
        }
        for t in [&mut p_yx1, &mut p_yx2] {
            if t.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::InvalidInput("marginal entries must be finite and non-negative".into()));
            }
            let s: f64 = t.iter().sum();
            if !(s > 0.0) {
                return Err(Error::Infeasible("marginal table has no mass".into()));
            }
            t.iter_mut().for_each(|p| *p /= s);
        }
        let py1: Vec<f64> = (0..ny).map(|y| p_yx1[y * n1..(y + 1) * n1].iter().sum()).collect();
        let py2: Vec<f64> = (0..ny).map(|y| p_yx2[y * n2..(y + 1) * n2].iter().sum()).collect();
        let y_gap = py1.iter().zip(&py2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if y_gap > Y_CONSISTENCY_TOL {
            if provenance == Provenance::ModelBased {
                // two separately trained models never agree exactly
                log::debug!("model-based marginals disagree on p(y) by {y_gap:.3e}; averaging");
            } else {
                log::warn!("pairwise marginals disagree on p(y) by {y_gap:.3e}; averaging");
            }
            for y in 0..ny {
                let avg = 0.5 * (py1[y] + py2[y]);
                if avg > 0.0 && (py1[y] == 0.0 || py2[y] == 0.0) {
                    return Err(Error::Infeasible(format!("label {y} has mass in only one pairwise marginal")));
                }
                for (t, n, p) in [(&mut p_yx1, n1, py1[y]), (&mut p_yx2, n2, py2[y])] {
                    if p > 0.0 {
                        t[y * n..(y + 1) * n].iter_mut().for_each(|v| *v *= avg / p);
                    }
                }
            }
        }
        Ok(Self { ny, n1, n2, p_yx1, p_yx2, provenance, y_gap })
    }

    pub fn from_joint(joint: &DiscreteJoint) -> Self {
        let (ny, n1, n2) = joint.sizes();
        Self {
            ny,
            n1,
            n2,
            p_yx1: joint.marginal(Vars::Y | Vars::X1),
            p_yx2: joint.marginal(Vars::Y | Vars::X2),
            provenance: Provenance::Exact,
            y_gap: 0.0,
        }
    }

    /// Weighted empirical pairwise joints.
    pub fn from_samples(
        sizes: (usize, usize, usize),
        y: &[usize],
        b1: &[usize],
        b2: &[usize],
        weights: Option<&[f64]>,
        provenance: Provenance,
    ) -> Result<Self> {
        let (ny, n1, n2) = sizes;
        if y.len() != b1.len() || y.len() != b2.len() || weights.is_some_and(|w| w.len() != y.len()) {
            return Err(Error::InvalidInput("sample columns have different lengths".into()));
        }
        if y.is_empty() {
            return Err(Error::InsufficientRows { needed: 1, have: 0 });
        }
        let mut t1 = vec![0.0; ny * n1];
        let mut t2 = vec![0.0; ny * n2];
        for i in 0..y.len() {
            if y[i] >= ny || b1[i] >= n1 || b2[i] >= n2 {
                return Err(Error::InvalidInput(format!("sample {i} falls outside the alphabet")));
            }
            let w = weights.map_or(1.0, |w| w[i]);
            t1[y[i] * n1 + b1[i]] += w;
            t2[y[i] * n2 + b2[i]] += w;
        }
        Self::new(sizes, t1, t2, provenance)
    }

    /// Pairwise joints from binary-label classifier outputs: each row spreads
    /// weight `w_i` over labels by the model's `p(y = 1 | x_i)`.
    pub fn from_predictions(
        n1: usize,
        n2: usize,
        b1: &[usize],
        b2: &[usize],
        p1: &[f64],
        p2: &[f64],
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        let n = b1.len();
        if b2.len() != n || p1.len() != n || p2.len() != n || weights.is_some_and(|w| w.len() != n) {
            return Err(Error::InvalidInput("prediction columns have different lengths".into()));
        }
        if n == 0 {
            return Err(Error::InsufficientRows { needed: 1, have: 0 });
        }
        let mut t1 = vec![0.0; 2 * n1];
        let mut t2 = vec![0.0; 2 * n2];
        for i in 0..n {
            if b1[i] >= n1 || b2[i] >= n2 {
                return Err(Error::InvalidInput(format!("sample {i} falls outside the alphabet")));
            }
            if !(0.0..=1.0).contains(&p1[i]) || !(0.0..=1.0).contains(&p2[i]) {
                return Err(Error::InvalidInput(format!("sample {i} has a probability outside [0, 1]")));
            }
            let w = weights.map_or(1.0, |w| w[i]);
            t1[b1[i]] += w * (1.0 - p1[i]);
            t1[n1 + b1[i]] += w * p1[i];
            t2[b2[i]] += w * (1.0 - p2[i]);
            t2[n2 + b2[i]] += w * p2[i];
        }
        Self::new((2, n1, n2), t1, t2, Provenance::ModelBased)
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.ny, self.n1, self.n2)
    }

    pub fn p_yx1(&self) -> &[f64] {
        &self.p_yx1
    }

    pub fn p_yx2(&self) -> &[f64] {
        &self.p_yx2
    }

    pub fn p_y(&self) -> Vec<f64> {
        (0..self.ny).map(|y| self.p_yx1[y * self.n1..(y + 1) * self.n1].iter().sum()).collect()
    }

    /// `I(Y : X1)` implied by the first table.
    pub fn mi_yx1(&self) -> f64 {
        pairwise_mi(&self.p_yx1, self.ny, self.n1)
    }

    /// `I(Y : X2)` implied by the second table.
    pub fn mi_yx2(&self) -> f64 {
        pairwise_mi(&self.p_yx2, self.ny, self.n2)
    }

    /// The joint with `X1` and `X2` conditionally independent given `Y`.
    pub fn product_joint(&self) -> Vec<f64> {
        let py = self.p_y();
        let mut q = vec![0.0; self.ny * self.n1 * self.n2];
        for y in 0..self.ny {
            if py[y] == 0.0 {
                continue;
            }
            for a in 0..self.n1 {
                for b in 0..self.n2 {
                    q[(y * self.n1 + a) * self.n2 + b] = self.p_yx1[y * self.n1 + a] * self.p_yx2[y * self.n2 + b] / py[y];
                }
            }
        }
        q
    }
}

fn pairwise_mi(t: &[f64], ny: usize, nx: usize) -> f64 {
    let py: Vec<f64> = (0..ny).map(|y| t[y * nx..(y + 1) * nx].iter().sum()).collect();
    let px: Vec<f64> = (0..nx).map(|x| (0..ny).map(|y| t[y * nx + x]).sum()).collect();
    (entropy_bits(&py) + entropy_bits(&px) - entropy_bits(t)).max(0.0)
}

/// Bins a modality for PID. Without a quantizer the modality must be a single
/// column of small non-negative integers, used directly as bin labels.
pub fn bin_modality(
    ds: &Dataset,
    second: bool,
    quantizer: Option<&Quantizer>,
    rows: &[usize],
) -> Result<(Vec<usize>, usize)> {
    let m = if second { ds.x2() } else { ds.x1() };
    match quantizer {
        Some(q) => {
            if q.centroids().first().is_some_and(|c| c.len() != m.cols()) {
                return Err(Error::SchemaMismatch("quantizer width differs from modality width".into()));
            }
            Ok((q.assign_rows(m, rows), q.k()))
        }
        None => {
            if m.cols() != 1 {
                return Err(Error::InvalidInput("continuous modality needs a quantizer".into()));
            }
            let mut bins = Vec::with_capacity(rows.len());
            for &i in rows {
                let v = m.row(i)[0];
                if !(v >= 0.0 && v.fract() == 0.0 && v < 1024.0) {
                    return Err(Error::InvalidInput(format!("value {v} is not a discrete level; supply a quantizer")));
                }
                bins.push(v as usize);
            }
            let k = bins.iter().copied().max().map_or(1, |m| m + 1).max(2);
            Ok((bins, k))
        }
    }
}

/// Empirical pairwise joints for one arm: full rows (oracle), complete cases
/// (observed), or IPW-weighted complete cases (icym2i).
pub fn marginals_from_data(
    ds: &Dataset,
    arm: Arm,
    propensity: Option<&dyn Propensity>,
    quantizers: (Option<&Quantizer>, Option<&Quantizer>),
) -> Result<MarginalPair> {
    let rows = match arm {
        Arm::Oracle => (0..ds.n()).collect(),
        Arm::Observed | Arm::Icym2i => ds.complete_rows(),
    };
    if rows.is_empty() {
        return Err(Error::InsufficientRows { needed: 1, have: 0 });
    }
    let (b1, n1) = bin_modality(ds, false, quantizers.0, &rows)?;
    let (b2, n2) = bin_modality(ds, true, quantizers.1, &rows)?;
    let y: Vec<usize> = rows.iter().map(|&i| usize::from(ds.y()[i])).collect();
    match arm {
        Arm::Oracle => MarginalPair::from_samples((2, n1, n2), &y, &b1, &b2, None, Provenance::EmpiricalFull),
        Arm::Observed => MarginalPair::from_samples((2, n1, n2), &y, &b1, &b2, None, Provenance::EmpiricalObserved),
        Arm::Icym2i => {
            let model = propensity.ok_or_else(|| Error::InvalidInput("icym2i arm needs a propensity model".into()))?;
            let w = ipw_weights(model, ds, &rows, Normalization::None)?;
            MarginalPair::from_samples((2, n1, n2), &y, &b1, &b2, Some(&w.w), Provenance::IpwCorrected)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub solver: String,
    pub iterations: usize,
    pub sk_rounds: usize,
    pub sk_converged: bool,
    /// Largest relative marginal error of the final joint.
    pub marginal_error: f64,
    /// Minimized `I_q(Y : (X1, X2))`.
    pub objective_value: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PIDResult {
    pub unique1: f64,
    pub unique2: f64,
    pub shared: f64,
    pub complementary: f64,
    pub total_mi: f64,
    /// `|total - (unique1 + unique2 + shared + complementary)|`
    pub residual: f64,
    pub diagnostics: SolverDiagnostics,
}

impl PIDResult {
    /// Evaluates the four components at a minimizer `q` (flat `[y][x1][x2]`).
    pub fn at_minimizer(q: &[f64], sizes: (usize, usize, usize), total_mi: f64, diagnostics: SolverDiagnostics) -> Result<Self> {
        let (ny, n1, n2) = sizes;
        let joint = DiscreteJoint::from_masses(ny, n1, n2, q.to_vec())?;
        let h = |v: Vars| joint.entropy(v);
        let (hy, h1, h2) = (h(Vars::Y), h(Vars::X1), h(Vars::X2));
        let (hy1, hy2, h12, hall) = (h(Vars::Y | Vars::X1), h(Vars::Y | Vars::X2), h(Vars::X1 | Vars::X2), h(Vars::ALL));
        let i_q = hy + h12 - hall;
        let unique1 = hy2 + h12 - hall - h2;
        let unique2 = hy1 + h12 - hall - h1;
        let shared = hy + h1 + h2 - h12 - hy1 - hy2 + hall;
        let complementary = total_mi - i_q;
        let residual = (total_mi - (unique1 + unique2 + shared + complementary)).abs();
        Ok(Self {
            unique1,
            unique2,
            shared,
            complementary,
            total_mi,
            residual,
            diagnostics: SolverDiagnostics { objective_value: i_q, ..diagnostics },
        })
    }

    pub fn components(&self) -> [f64; 4] {
        [self.unique1, self.unique2, self.shared, self.complementary]
    }

    pub fn max_component_diff(&self, other: &PIDResult) -> f64 {
        self.components().iter().zip(other.components()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
pub(crate) mod test_joints {
    use crate::data::Gate;
    use crate::infotheory::DiscreteJoint;

    pub fn gate(g: Gate) -> DiscreteJoint {
        let mut m = vec![0.0; 8];
        for a in 0..2u8 {
            for b in 0..2u8 {
                m[(usize::from(g.apply(a, b)) * 2 + usize::from(a)) * 2 + usize::from(b)] += 0.25;
            }
        }
        DiscreteJoint::new(2, 2, 2, m).unwrap()
    }

    /// Gate joint as seen on complete cases when `x1` is observed with probability `0.6 x1 + 0.2`.
    pub fn shifted_gate(g: Gate) -> DiscreteJoint {
        let mut m = vec![0.0; 8];
        for a in 0..2u8 {
            for b in 0..2u8 {
                m[(usize::from(g.apply(a, b)) * 2 + usize::from(a)) * 2 + usize::from(b)] += 0.25 * (0.6 * f64::from(a) + 0.2);
            }
        }
        DiscreteJoint::from_masses(2, 2, 2, m).unwrap()
    }

    pub fn copy_x1() -> DiscreteJoint {
        let mut m = vec![0.0; 8];
        for a in 0..2 {
            for b in 0..2 {
                m[(a * 2 + a) * 2 + b] = 0.25;
            }
        }
        DiscreteJoint::new(2, 2, 2, m).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_joints::*;
    use super::*;
    use crate::data::{apply_missingness, generate_logic_gate, Gate, MaskTarget, MechanismKind, MechanismSpec, Variable};
    use crate::propensity::TruePropensity;

    #[test]
    fn marginals_match_joint() {
        let j = gate(Gate::And);
        let m = MarginalPair::from_joint(&j);
        assert_eq!(m.p_yx1(), &[0.5, 0.25, 0.0, 0.25]);
        assert!((m.mi_yx1() - j.mutual_info(crate::infotheory::MiForm::YX1)).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_y_marginals_are_averaged() {
        let m = MarginalPair::new((2, 2, 2), vec![0.3, 0.3, 0.2, 0.2], vec![0.25, 0.25, 0.25, 0.25], Provenance::Exact).unwrap();
        assert!((m.y_gap - 0.1).abs() < 1e-12);
        let py2: f64 = m.p_yx2()[..2].iter().sum();
        assert!((m.p_y()[0] - 0.55).abs() < 1e-12 && (py2 - 0.55).abs() < 1e-12);
    }

    #[test]
    fn arms_agree_without_missingness() {
        let ds = generate_logic_gate(Gate::Or, 2000, 1).unwrap();
        let truth = TruePropensity { probs: vec![1.0; ds.n()], floor: 0.01 };
        let arms: Vec<MarginalPair> = Arm::ALL
            .iter()
            .map(|&a| marginals_from_data(&ds, a, Some(&truth), (None, None)).unwrap())
            .collect();
        for m in &arms[1..] {
            assert_eq!(m.p_yx1(), arms[0].p_yx1());
            assert_eq!(m.p_yx2(), arms[0].p_yx2());
        }
    }

    #[test]
    fn ipw_restores_shifted_marginal() {
        let ds = generate_logic_gate(Gate::And, 10_000, 3).unwrap();
        let spec = MechanismSpec::binary(MechanismKind::Mar, MaskTarget::X2AndY, Variable::X1, 0.8, 0.2);
        let masked = apply_missingness(&ds, &spec, 5).unwrap();
        let truth = TruePropensity { probs: masked.observation_prob.clone(), floor: 0.01 };
        let px1 = |m: &MarginalPair| m.p_yx1()[1] + m.p_yx1()[3];
        let obs = marginals_from_data(&masked.dataset, Arm::Observed, None, (None, None)).unwrap();
        let ipw = marginals_from_data(&masked.dataset, Arm::Icym2i, Some(&truth), (None, None)).unwrap();
        assert!((px1(&obs) - 0.8).abs() < 0.02, "{}", px1(&obs));
        assert!((px1(&ipw) - 0.5).abs() < 0.02, "{}", px1(&ipw));
        assert!(marginals_from_data(&masked.dataset, Arm::Icym2i, None, (None, None)).is_err());
    }

    #[test]
    fn components_of_known_minimizers() {
        // XOR: the product joint is the minimizer and all information is synergistic.
        let j = gate(Gate::Xor);
        let q = MarginalPair::from_joint(&j).product_joint();
        let r = PIDResult::at_minimizer(&q, (2, 2, 2), 1.0, SolverDiagnostics::default()).unwrap();
        for (got, want) in r.components().iter().zip([0.0, 0.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(r.residual < 1e-12);
        let c = copy_x1();
        let r = PIDResult::at_minimizer(c.probs(), (2, 2, 2), 1.0, SolverDiagnostics::default()).unwrap();
        assert!((r.unique1 - 1.0).abs() < 1e-12 && r.unique2.abs() < 1e-12);
    }
}
