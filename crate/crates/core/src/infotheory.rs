//! Discrete information theory over `(Y, X1, X2)` tables, in bits.

use std::io::{BufRead, Write};
use std::ops::BitOr;

use rand::Rng;

use crate::data::{fmt_sig9, ModalityMatrix};
use crate::rng;
use crate::{Error, Result};

const SUM_TOL: f64 = 1e-9;

/// A subset of the three variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vars(u8);

impl Vars {
    pub const Y: Vars = Vars(0b001);
    pub const X1: Vars = Vars(0b010);
    pub const X2: Vars = Vars(0b100);
    pub const ALL: Vars = Vars(0b111);

    fn has(self, other: Vars) -> bool {
        self.0 & other.0 == other.0
    }
}

impl BitOr for Vars {
    type Output = Vars;
    fn bitor(self, rhs: Vars) -> Vars {
        Vars(self.0 | rhs.0)
    }
}

/// Mutual-information forms over a joint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiForm {
    /// `I(Y : (X1, X2))`
    Total,
    /// `I(Y : X1)`
    YX1,
    /// `I(Y : X2)`
    YX2,
    /// `I(Y : X1 | X2)`
    YX1GivenX2,
    /// `I(Y : X2 | X1)`
    YX2GivenX1,
}

/// Normalized probability table over `Y x X1 x X2`, stored `[y][x1][x2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    ny: usize,
    n1: usize,
    n2: usize,
    prob: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(ny: usize, n1: usize, n2: usize, prob: Vec<f64>) -> Result<Self> {
        if ny == 0 || n1 == 0 || n2 == 0 {
            return Err(Error::InvalidInput("alphabet sizes must be positive".into()));
        }
        if prob.len() != ny * n1 * n2 {
            return Err(Error::InvalidInput(format!("table has {} cells, expected {}", prob.len(), ny * n1 * n2)));
        }
        if prob.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidInput("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = prob.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidInput(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { ny, n1, n2, prob })
    }

    /// Normalizes non-negative masses into a joint.
    pub fn from_masses(ny: usize, n1: usize, n2: usize, mut mass: Vec<f64>) -> Result<Self> {
        let total: f64 = mass.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidInput("joint needs positive finite total mass".into()));
        }
        mass.iter_mut().for_each(|m| *m /= total);
        Self::new(ny, n1, n2, mass)
    }

    /// Weighted empirical joint of `(y, bin1, bin2)` samples.
    pub fn from_samples(
        sizes: (usize, usize, usize),
        y: &[usize],
        b1: &[usize],
        b2: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        let (ny, n1, n2) = sizes;
        if y.len() != b1.len() || y.len() != b2.len() || weights.is_some_and(|w| w.len() != y.len()) {
            return Err(Error::InvalidInput("sample columns have different lengths".into()));
        }
        let mut mass = vec![0.0; ny * n1 * n2];
        for i in 0..y.len() {
            if y[i] >= ny || b1[i] >= n1 || b2[i] >= n2 {
                return Err(Error::InvalidInput(format!("sample {i} falls outside the alphabet")));
            }
            mass[(y[i] * n1 + b1[i]) * n2 + b2[i]] += weights.map_or(1.0, |w| w[i]);
        }
        Self::from_masses(ny, n1, n2, mass)
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.ny, self.n1, self.n2)
    }

    pub fn probs(&self) -> &[f64] {
        &self.prob
    }

    pub fn get(&self, y: usize, x1: usize, x2: usize) -> f64 {
        self.prob[(y * self.n1 + x1) * self.n2 + x2]
    }

    /// Marginal over `over`, flattened in `(y, x1, x2)` order of the kept axes.
    pub fn marginal(&self, over: Vars) -> Vec<f64> {
        let dy = if over.has(Vars::Y) { self.ny } else { 1 };
        let d1 = if over.has(Vars::X1) { self.n1 } else { 1 };
        let d2 = if over.has(Vars::X2) { self.n2 } else { 1 };
        let mut out = vec![0.0; dy * d1 * d2];
        for y in 0..self.ny {
            for a in 0..self.n1 {
                for b in 0..self.n2 {
                    let iy = if dy > 1 { y } else { 0 };
                    let ia = if d1 > 1 { a } else { 0 };
                    let ib = if d2 > 1 { b } else { 0 };
                    out[(iy * d1 + ia) * d2 + ib] += self.get(y, a, b);
                }
            }
        }
        out
    }

    /// `-sum p log2 p` of the marginal over `over`.
    pub fn entropy(&self, over: Vars) -> f64 {
        entropy_bits(&self.marginal(over))
    }

    pub fn mutual_info(&self, form: MiForm) -> f64 {
        let h = |v| self.entropy(v);
        match form {
            MiForm::Total => h(Vars::Y) + h(Vars::X1 | Vars::X2) - h(Vars::ALL),
            MiForm::YX1 => h(Vars::Y) + h(Vars::X1) - h(Vars::Y | Vars::X1),
            MiForm::YX2 => h(Vars::Y) + h(Vars::X2) - h(Vars::Y | Vars::X2),
            MiForm::YX1GivenX2 => h(Vars::Y | Vars::X2) + h(Vars::X1 | Vars::X2) - h(Vars::ALL) - h(Vars::X2),
            MiForm::YX2GivenX1 => h(Vars::Y | Vars::X1) + h(Vars::X1 | Vars::X2) - h(Vars::ALL) - h(Vars::X1),
        }
    }

    /// `CoI(Y; X1; X2)`; negative values indicate synergy.
    pub fn coinformation(&self) -> f64 {
        let h = |v| self.entropy(v);
        h(Vars::Y) + h(Vars::X1) + h(Vars::X2) - h(Vars::X1 | Vars::X2) - h(Vars::Y | Vars::X1) - h(Vars::Y | Vars::X2)
            + h(Vars::ALL)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "y,x1,x2,prob")?;
        for y in 0..self.ny {
            for a in 0..self.n1 {
                for b in 0..self.n2 {
                    writeln!(w, "{y},{a},{b},{}", fmt_sig9(self.get(y, a, b)))?;
                }
            }
        }
        Ok(())
    }

    /// Reads the flat table; alphabet sizes are one past the largest index seen.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty joint file".into()))??;
        if header.trim() != "y,x1,x2,prob" {
            return Err(Error::Parse(format!("unexpected joint header {header:?}")));
        }
        let mut cells = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("bad joint row {line:?}")));
            }
            let idx = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(e.to_string()));
            let p = f[3].parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?;
            cells.push((idx(f[0])?, idx(f[1])?, idx(f[2])?, p));
        }
        let ny = cells.iter().map(|c| c.0).max().map_or(0, |m| m + 1);
        let n1 = cells.iter().map(|c| c.1).max().map_or(0, |m| m + 1);
        let n2 = cells.iter().map(|c| c.2).max().map_or(0, |m| m + 1);
        let mut prob = vec![0.0; ny * n1 * n2];
        for (y, a, b, p) in cells {
            prob[(y * n1 + a) * n2 + b] = p;
        }
        // Values were written with 9 significant digits.
        let total: f64 = prob.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Parse(format!("joint sums to {total}")));
        }
        prob.iter_mut().for_each(|p| *p /= total);
        Self::new(ny, n1, n2, prob)
    }
}

pub fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.log2()).sum::<f64>()
}

/// Binary entropy `h(p)` in bits.
pub fn binary_entropy(p: f64) -> f64 {
    entropy_bits(&[p, 1.0 - p])
}

pub const PROB_CLAMP: f64 = 1e-9;

/// Output of [`ipw_mutual_info`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectedMi {
    pub bits: f64,
    /// Number of probabilities clamped into `[1e-9, 1 - 1e-9]`.
    pub clamped: usize,
}

/// IPW-corrected `I(Y : (X1, X2))` from model probabilities on complete cases.
///
/// `p_pos[i]` is the calibrated `p(y = 1 | x1_i, x2_i)` and `weights[i]` the
/// stabilized weight `(1 - p(m)) / (1 - p(m | c_i))`. The label is integrated
/// out under the model, `p(y)` is the weighted average of the conditionals,
/// and the result is the plain weighted mean over samples of
/// `sum_y p(y|x) log2(p(y|x) / p(y))`.
pub fn ipw_mutual_info(p_pos: &[f64], weights: &[f64]) -> Result<CorrectedMi> {
    if p_pos.is_empty() || p_pos.len() != weights.len() {
        return Err(Error::InvalidInput("ipw_mutual_info needs equal, non-empty inputs".into()));
    }
    let mut clamped = 0;
    let probs: Vec<f64> = p_pos
        .iter()
        .map(|&p| {
            let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if c != p {
                clamped += 1;
            }
            c
        })
        .collect();
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::InvalidInput("weights must have positive sum".into()));
    }
    let py1 = probs.iter().zip(weights).map(|(p, w)| p * w).sum::<f64>() / wsum;
    let py = [1.0 - py1, py1];
    let mut acc = 0.0;
    for (&p, &w) in probs.iter().zip(weights) {
        let cond = [1.0 - p, p];
        let term: f64 = cond.iter().zip(&py).map(|(c, m)| c * (c / m).log2()).sum();
        acc += w * term;
    }
    let bits = acc / probs.len() as f64;
    if !bits.is_finite() {
        return Err(Error::Numerical("corrected mutual information is not finite".into()));
    }
    Ok(CorrectedMi { bits, clamped })
}

/// Stabilized-weight MI sum evaluated exactly on an enumerated joint: cells are drawn from
/// the observed distribution `p(cell) pi(cell) / P(obs)` and reweighted by
/// the stabilized weight `P(obs) / pi(cell)`, where `pi` is the observation
/// probability of each cell.
pub fn ipw_mutual_info_exact<F>(full: &DiscreteJoint, observation_prob: F) -> Result<f64>
where
    F: Fn(usize, usize, usize) -> f64,
{
    let (ny, n1, n2) = full.sizes();
    let py = full.marginal(Vars::Y);
    let px = full.marginal(Vars::X1 | Vars::X2);
    let mut p_obs_total = 0.0;
    for y in 0..ny {
        for a in 0..n1 {
            for b in 0..n2 {
                p_obs_total += full.get(y, a, b) * observation_prob(y, a, b);
            }
        }
    }
    if !(p_obs_total > 0.0) {
        return Err(Error::DegenerateMechanism("nothing is ever observed".into()));
    }
    let mut acc = 0.0;
    for y in 0..ny {
        for a in 0..n1 {
            for b in 0..n2 {
                let p = full.get(y, a, b);
                let pi = observation_prob(y, a, b);
                if p == 0.0 || pi == 0.0 {
                    continue;
                }
                let p_obs = p * pi / p_obs_total;
                let w = p_obs_total / pi;
                acc += p_obs * w * (p / (px[a * n2 + b] * py[y])).log2();
            }
        }
    }
    Ok(acc)
}

/// k-means codebook mapping feature rows to discrete bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    centroids: Vec<Vec<f64>>,
    seed: u64,
    effective_bins: usize,
}

const KMEANS_ITERS: usize = 50;

impl Quantizer {
    /// k-means++ seeding followed by 50 Lloyd iterations. Centroids are sorted
    /// lexicographically so bin labels do not depend on the seeding order.
    pub fn fit(features: &ModalityMatrix, k: usize, seed: u64) -> Result<Self> {
        let n = features.rows();
        if k < 2 {
            return Err(Error::InvalidInput("quantizer needs k >= 2".into()));
        }
        if n < k {
            return Err(Error::InsufficientRows { needed: k, have: n });
        }
        let mut r = rng::stream(seed, "kmeans");
        let first = r.random_range(0..n);
        let mut centroids = vec![features.row(first).to_vec()];
        let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), &centroids[0])).collect();
        while centroids.len() < k {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut u = r.random::<f64>() * total;
                let mut chosen = n - 1;
                for (i, &d) in d2.iter().enumerate() {
                    if u < d {
                        chosen = i;
                        break;
                    }
                    u -= d;
                }
                chosen
            } else {
                r.random_range(0..n)
            };
            let c = features.row(pick).to_vec();
            for (i, d) in d2.iter_mut().enumerate() {
                *d = d.min(sq_dist(features.row(i), &c));
            }
            centroids.push(c);
        }
        let dim = features.cols();
        for _ in 0..KMEANS_ITERS {
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for i in 0..n {
                let row = features.row(i);
                let c = nearest(&centroids, row);
                counts[c] += 1;
                sums[c].iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            let mut moved = false;
            for c in 0..k {
                if counts[c] == 0 {
                    continue;
                }
                let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                if next != centroids[c] {
                    moved = true;
                }
                centroids[c] = next;
            }
            if !moved {
                break;
            }
        }
        centroids.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let mut q = Self { centroids, seed, effective_bins: 0 };
        let mut used = vec![false; k];
        for i in 0..n {
            used[q.assign(features.row(i))] = true;
        }
        q.effective_bins = used.iter().filter(|&&u| u).count();
        if q.effective_bins < k {
            log::warn!("quantizer: only {} of {k} bins are used (degenerate features)", q.effective_bins);
        }
        Ok(q)
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn effective_bins(&self) -> usize {
        self.effective_bins
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// Nearest centroid, ties to the lowest index.
    pub fn assign(&self, row: &[f64]) -> usize {
        nearest(&self.centroids, row)
    }

    pub fn assign_rows(&self, features: &ModalityMatrix, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&i| self.assign(features.row(i))).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centre) in centroids.iter().enumerate() {
        let d = sq_dist(row, centre);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gate_joint(f: impl Fn(usize, usize) -> usize) -> DiscreteJoint {
        let mut mass = vec![0.0; 8];
        for a in 0..2 {
            for b in 0..2 {
                mass[(f(a, b) * 2 + a) * 2 + b] += 0.25;
            }
        }
        DiscreteJoint::new(2, 2, 2, mass).unwrap()
    }

    #[test]
    fn entropy_basics() {
        assert!((entropy_bits(&[0.5, 0.5]) - 1.0).abs() < 1e-15);
        assert_eq!(entropy_bits(&[1.0, 0.0]), 0.0);
        assert!((entropy_bits(&[0.25; 4]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn xor_information() {
        let j = gate_joint(|a, b| a ^ b);
        assert!((j.mutual_info(MiForm::Total) - 1.0).abs() < 1e-12);
        assert!(j.mutual_info(MiForm::YX1).abs() < 1e-12);
        assert!(j.mutual_info(MiForm::YX2).abs() < 1e-12);
        assert!((j.coinformation() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn and_total_information_is_label_entropy() {
        let j = gate_joint(|a, b| a & b);
        // h(0.25) evaluated independently: -(0.25 log2 0.25 + 0.75 log2 0.75)
        assert!((j.mutual_info(MiForm::Total) - 0.811_278_124_459_132_9).abs() < 1e-12);
    }

    #[test]
    fn copy_channel() {
        // Y = X1, X2 independent fair bit.
        let mut mass = vec![0.0; 8];
        for a in 0..2 {
            for b in 0..2 {
                mass[(a * 2 + a) * 2 + b] = 0.25;
            }
        }
        let j = DiscreteJoint::new(2, 2, 2, mass).unwrap();
        assert!((j.mutual_info(MiForm::YX1) - 1.0).abs() < 1e-12);
        assert!(j.mutual_info(MiForm::YX2).abs() < 1e-12);
        assert!((j.mutual_info(MiForm::Total) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn redundant_triple_has_unit_coinformation() {
        let mut mass = vec![0.0; 8];
        mass[0] = 0.5;
        mass[7] = 0.5;
        let j = DiscreteJoint::new(2, 2, 2, mass).unwrap();
        assert!((j.coinformation() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_triple_has_zero_coinformation() {
        let j = DiscreteJoint::new(2, 2, 2, vec![0.125; 8]).unwrap();
        assert!(j.coinformation().abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_tables() {
        assert!(DiscreteJoint::new(2, 2, 2, vec![0.2; 8]).is_err());
        assert!(DiscreteJoint::new(2, 2, 2, vec![-0.1, 0.3, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1]).is_err());
    }

    #[test]
    fn ipw_mi_without_missingness_matches_plugin() {
        // AND gate rows with exact conditionals, unit weights.
        let j = gate_joint(|a, b| a & b);
        let mut p = Vec::new();
        for a in 0..2usize {
            for b in 0..2usize {
                p.push(if a & b == 1 { 1.0 } else { 0.0 });
            }
        }
        let out = ipw_mutual_info(&p, &[1.0; 4]).unwrap();
        assert!((out.bits - j.mutual_info(MiForm::Total)).abs() < 1e-6);
        assert_eq!(out.clamped, 2 + 2);
    }

    #[test]
    fn joint_csv_round_trip() {
        let j = gate_joint(|a, b| a | b);
        let mut buf = Vec::new();
        j.write_csv(&mut buf).unwrap();
        let back = DiscreteJoint::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, j);
    }

    #[test]
    fn quantizer_reproduces_binary_values() {
        let vals: Vec<f64> = (0..200).map(|i| f64::from(i % 3 == 0)).collect();
        let m = ModalityMatrix::from_column(vals.clone()).unwrap();
        let q = Quantizer::fit(&m, 2, 5).unwrap();
        for v in vals {
            assert_eq!(q.assign(&[v]), v as usize);
        }
    }

    #[test]
    fn quantizer_is_deterministic() {
        let vals: Vec<f64> = (0..300).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let m = ModalityMatrix::new(vals, 150, 2).unwrap();
        assert_eq!(Quantizer::fit(&m, 4, 9).unwrap(), Quantizer::fit(&m, 4, 9).unwrap());
    }

    #[test]
    fn degenerate_features_use_one_bin() {
        let m = ModalityMatrix::from_column(vec![3.0; 50]).unwrap();
        let q = Quantizer::fit(&m, 4, 0).unwrap();
        assert_eq!(q.effective_bins(), 1);
    }

    #[test]
    fn quantizer_needs_enough_rows() {
        let m = ModalityMatrix::from_column(vec![0.0, 1.0]).unwrap();
        assert!(Quantizer::fit(&m, 3, 0).is_err());
        assert!(Quantizer::fit(&m, 1, 0).is_err());
    }
}
