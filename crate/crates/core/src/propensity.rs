//! Missingness models and inverse-probability weights.
//!
//! Missingness of `(x2, y)` is treated as a single event `M`; a row is
//! observed when it is a complete case. A [`PropensityModel`] estimates
//! `P(M = 1 | C)` by logistic regression and exposes the observation
//! probability `P(M = 0 | C)`, floored for positivity.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{sigmoid, variable_observed, CovariateMap, Covariates, Dataset, Split};
use crate::{Error, Result};

/// Weighted logistic regression by iteratively reweighted least squares.
///
/// `design` rows exclude the intercept column; the returned coefficient vector
/// is `[intercept, betas...]`. `ridge` penalizes the betas only.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

pub const IRLS_MAX_ITER: usize = 200;
pub const IRLS_GRAD_TOL: f64 = 1e-8;

pub fn fit_logistic(
    design: &[Vec<f64>],
    labels: &[f64],
    weights: Option<&[f64]>,
    ridge: f64,
) -> Result<LogisticFit> {
    let n = design.len();
    if n == 0 || labels.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::InvalidInput("logistic fit needs matching, non-empty inputs".into()));
    }
    let p = design[0].len() + 1;
    if design.iter().any(|r| r.len() + 1 != p) {
        return Err(Error::InvalidInput("ragged design matrix".into()));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let wsum: f64 = (0..n).map(w).sum();
    if !(wsum > 0.0) {
        return Err(Error::InvalidInput("weights must have positive sum".into()));
    }
    let x = |i: usize, j: usize| if j == 0 { 1.0 } else { design[i][j - 1] };

    let objective = |beta: &DVector<f64>| -> f64 {
        let mut nll = 0.0;
        for i in 0..n {
            let eta: f64 = (0..p).map(|j| x(i, j) * beta[j]).sum();
            // log(1 + e^eta) - y eta, computed stably
            let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
            nll += w(i) * (softplus - labels[i] * eta);
        }
        nll / wsum + 0.5 * ridge * beta.iter().skip(1).map(|b| b * b).sum::<f64>()
    };

    let mut beta = DVector::<f64>::zeros(p);
    let mut current = objective(&beta);
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < IRLS_MAX_ITER {
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let eta: f64 = (0..p).map(|j| x(i, j) * beta[j]).sum();
            let mu = sigmoid(eta);
            let r = w(i) * (mu - labels[i]) / wsum;
            let s = w(i) * mu * (1.0 - mu) / wsum;
            for a in 0..p {
                grad[a] += r * x(i, a);
                for b in 0..=a {
                    hess[(a, b)] += s * x(i, a) * x(i, b);
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        for a in 1..p {
            grad[a] += ridge * beta[a];
            hess[(a, a)] += ridge;
        }
        grad_norm = grad.norm();
        if grad_norm < IRLS_GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        // Tiny diagonal jitter keeps the solve defined for rank-deficient designs.
        let mut h = hess.clone();
        for a in 0..p {
            h[(a, a)] += 1e-12;
        }
        let step = match h.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => hess.clone().pseudo_inverse(1e-14).map_err(|e| Error::Numerical(e.to_string()))? * &grad,
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &beta - &step * t;
            let value = objective(&candidate);
            if value <= current + 1e-15 * current.abs().max(1.0) {
                beta = candidate;
                current = value;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numerical("logistic coefficients diverged".into()));
    }
    Ok(LogisticFit { coefficients: beta.iter().copied().collect(), iterations, converged, grad_norm })
}

/// Anything that yields per-row observation probabilities `P(M = 0 | C)`.
pub trait Propensity {
    fn observation_prob(&self, ds: &Dataset, row: usize) -> Result<f64>;
    fn floor(&self) -> f64;
}

/// Known mechanism probabilities (as returned by `apply_missingness`).
#[derive(Debug, Clone, PartialEq)]
pub struct TruePropensity {
    pub probs: Vec<f64>,
    pub floor: f64,
}

impl Propensity for TruePropensity {
    fn observation_prob(&self, ds: &Dataset, row: usize) -> Result<f64> {
        if self.probs.len() != ds.n() {
            return Err(Error::SchemaMismatch(format!(
                "true propensity covers {} rows, dataset has {}",
                self.probs.len(),
                ds.n()
            )));
        }
        Ok(self.probs[row].max(self.floor).min(1.0))
    }

    fn floor(&self) -> f64 {
        self.floor
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub ridge_fallback: bool,
    pub holdout_log_loss: Option<f64>,
}

/// Logistic model of `P(M = 1 | C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    covariates: CovariateMap,
    names: Vec<String>,
    /// Coefficients over the design columns (cluster one-hots drop the first level).
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub floor: f64,
    pub diagnostics: FitDiagnostics,
    design_width: usize,
}

pub const SEPARATION_RIDGE: f64 = 1e-4;

impl PropensityModel {
    fn design_row(&self, ds: &Dataset, row: usize) -> Result<Vec<f64>> {
        let v = design_row(&self.covariates, ds, row);
        if v.len() != self.design_width {
            return Err(Error::SchemaMismatch(format!(
                "covariate width {} does not match fitted width {}",
                v.len(),
                self.design_width
            )));
        }
        Ok(v)
    }

    /// `P(M = 1 | C)` before flooring.
    pub fn missing_prob(&self, ds: &Dataset, row: usize) -> Result<f64> {
        let x = self.design_row(ds, row)?;
        Ok(sigmoid(self.intercept + x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>()))
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.names
    }

    pub fn to_record(&self) -> PropensityRecord {
        PropensityRecord {
            covariates: self.names.clone(),
            coefficients: self.coefficients.clone(),
            intercept: self.intercept,
            floor: self.floor,
        }
    }
}

impl Propensity for PropensityModel {
    fn observation_prob(&self, ds: &Dataset, row: usize) -> Result<f64> {
        Ok((1.0 - self.missing_prob(ds, row)?).max(self.floor))
    }

    fn floor(&self) -> f64 {
        self.floor
    }
}

/// Text export of a fitted propensity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityRecord {
    pub covariates: Vec<String>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub floor: f64,
}

impl PropensityRecord {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn design_row(map: &CovariateMap, ds: &Dataset, row: usize) -> Vec<f64> {
    let mut v = map.row(ds, row);
    if matches!(map, CovariateMap::Clusters { .. }) && !v.is_empty() {
        // reference coding: the intercept absorbs cluster 0
        v.remove(0);
    }
    v
}

/// Fits `P(M = 1 | C)` on the training split and scores log-loss on validation.
pub fn fit_propensity(ds: &Dataset, covariates: &Covariates, floor: f64) -> Result<PropensityModel> {
    if !(floor > 0.0 && floor <= 0.5) {
        return Err(Error::InvalidInput(format!("floor {floor} not in (0, 0.5]")));
    }
    if let Some(src) = covariates.source() {
        if (0..ds.n()).any(|i| !variable_observed(ds, src, i)) {
            return Err(Error::InvalidInput(format!(
                "covariate source {src:?} is not fully observed; the mechanism is not estimable from it"
            )));
        }
    }
    let missing: Vec<f64> = (0..ds.n()).map(|i| f64::from(u8::from(!ds.is_complete(i)))).collect();
    let n_missing = missing.iter().filter(|&&m| m == 1.0).count();
    if n_missing < 2 || ds.n() - n_missing < 2 {
        return Err(Error::DegenerateMechanism(format!(
            "need at least 2 rows in each missingness class, have {} missing of {}",
            n_missing,
            ds.n()
        )));
    }
    let map = CovariateMap::fit(covariates, ds)?;
    let names = match &map {
        CovariateMap::Clusters { .. } => map.names().into_iter().skip(1).collect(),
        _ => map.names(),
    };
    let mut fit_rows = ds.rows_in(Split::Train);
    let class_count = |rows: &[usize]| rows.iter().filter(|&&i| missing[i] == 1.0).count();
    if class_count(&fit_rows) < 2 || fit_rows.len() - class_count(&fit_rows) < 2 {
        fit_rows = (0..ds.n()).collect();
    }
    let design: Vec<Vec<f64>> = fit_rows.iter().map(|&i| design_row(&map, ds, i)).collect();
    let labels: Vec<f64> = fit_rows.iter().map(|&i| missing[i]).collect();

    let mut fit = fit_logistic(&design, &labels, None, 0.0)?;
    let separated = !fit.converged || fit.coefficients.iter().skip(1).any(|c| c.abs() > 25.0);
    let mut diagnostics = FitDiagnostics::default();
    if separated {
        log::warn!("propensity fit did not converge cleanly; refitting with ridge {SEPARATION_RIDGE}");
        fit = fit_logistic(&design, &labels, None, SEPARATION_RIDGE)?;
        diagnostics.ridge_fallback = true;
    }
    diagnostics.iterations = fit.iterations;
    diagnostics.converged = fit.converged;
    let design_width = design.first().map_or(0, Vec::len);
    let mut model = PropensityModel {
        covariates: map,
        names,
        intercept: fit.coefficients[0],
        coefficients: fit.coefficients[1..].to_vec(),
        floor,
        diagnostics,
        design_width,
    };
    let holdout = ds.rows_in(Split::Val);
    if !holdout.is_empty() {
        let mut ll = 0.0;
        for &i in &holdout {
            let p = model.missing_prob(ds, i)?.clamp(1e-15, 1.0 - 1e-15);
            ll -= missing[i] * p.ln() + (1.0 - missing[i]) * (1.0 - p).ln();
        }
        model.diagnostics.holdout_log_loss = Some(ll / holdout.len() as f64);
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    MeanOne,
}

/// Per-row positive weights aligned with a row index set.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub rows: Vec<usize>,
    pub w: Vec<f64>,
    pub normalization: Normalization,
    /// Rows whose observation probability was raised to the floor.
    pub floored: usize,
}

impl WeightVector {
    pub fn ones(rows: Vec<usize>) -> Self {
        let w = vec![1.0; rows.len()];
        Self { rows, w, normalization: Normalization::None, floored: 0 }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.w.iter().sum::<f64>() / self.w.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.w.iter().copied().fold(0.0, f64::max)
    }

    pub fn normalized(mut self, normalization: Normalization) -> Self {
        if normalization == Normalization::MeanOne && !self.w.is_empty() {
            let m = self.mean();
            self.w.iter_mut().for_each(|w| *w /= m);
        }
        self.normalization = normalization;
        self
    }

    /// Kish effective sample size `(sum w)^2 / sum w^2`.
    pub fn effective_size(&self) -> f64 {
        let s: f64 = self.w.iter().sum();
        let s2: f64 = self.w.iter().map(|w| w * w).sum();
        s * s / s2
    }
}

fn check_complete(ds: &Dataset, rows: &[usize]) -> Result<()> {
    match rows.iter().find(|&&i| i >= ds.n() || !ds.is_complete(i)) {
        Some(&bad) => Err(Error::InvalidInput(format!("row {bad} is not a complete case"))),
        None => Ok(()),
    }
}

fn raw_observation_probs<P: Propensity + ?Sized>(model: &P, ds: &Dataset, rows: &[usize]) -> Result<(Vec<f64>, usize)> {
    let floor = model.floor();
    let mut floored = 0;
    let mut out = Vec::with_capacity(rows.len());
    for &i in rows {
        let p = model.observation_prob(ds, i)?;
        if p <= floor {
            floored += 1;
        }
        out.push(p.max(floor));
    }
    if floored > 0 {
        log::warn!("{floored} rows hit the positivity floor {floor}");
    }
    Ok((out, floored))
}

/// `w_i = 1 / max(floor, P(M = 0 | C_i))` on complete-case rows.
pub fn ipw_weights<P: Propensity + ?Sized>(
    model: &P,
    ds: &Dataset,
    rows: &[usize],
    normalization: Normalization,
) -> Result<WeightVector> {
    check_complete(ds, rows)?;
    let (probs, floored) = raw_observation_probs(model, ds, rows)?;
    let w = probs.iter().map(|p| 1.0 / p).collect();
    Ok(WeightVector { rows: rows.to_vec(), w, normalization: Normalization::None, floored }.normalized(normalization))
}

/// Stabilized weights `(1 - p(m)) / (1 - p(m | c_i))`, with `1 - p(m)` the
/// model's average observation probability over every row of `ds`.
pub fn mi_correction_weights<P: Propensity + ?Sized>(model: &P, ds: &Dataset, rows: &[usize]) -> Result<WeightVector> {
    check_complete(ds, rows)?;
    let mut observed_rate = 0.0;
    for i in 0..ds.n() {
        observed_rate += model.observation_prob(ds, i)?.max(model.floor());
    }
    observed_rate /= ds.n() as f64;
    let (probs, floored) = raw_observation_probs(model, ds, rows)?;
    let w = probs.iter().map(|p| observed_rate / p).collect();
    Ok(WeightVector { rows: rows.to_vec(), w, normalization: Normalization::None, floored })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_missingness, Variable, generate_logic_gate, Gate, MaskTarget, MechanismKind, MechanismSpec};

    fn x1_covariates() -> Covariates {
        Covariates::Columns { source: Variable::X1, columns: vec![0] }
    }

    #[test]
    fn recovers_mar_gate_mechanism() {
        let ds = generate_logic_gate(Gate::And, 10_000, 0).unwrap();
        let spec = MechanismSpec::binary(MechanismKind::Mar, MaskTarget::X2AndY, Variable::X1, 0.2, 0.8);
        let masked = apply_missingness(&ds, &spec, 1).unwrap().dataset;
        let model = fit_propensity(&masked, &x1_covariates(), 0.01).unwrap();
        let at = |v: f64| (0..masked.n()).find(|&i| masked.x1().row(i)[0] == v).unwrap();
        let p0 = model.observation_prob(&masked, at(0.0)).unwrap();
        let p1 = model.observation_prob(&masked, at(1.0)).unwrap();
        assert!((p0 - 0.8).abs() < 0.02, "p(obs|x1=0) = {p0}");
        assert!((p1 - 0.2).abs() < 0.02, "p(obs|x1=1) = {p1}");
        assert!(model.diagnostics.converged);
        assert!(model.diagnostics.holdout_log_loss.is_some());
    }

    #[test]
    fn mcar_fit_is_flat() {
        let ds = generate_logic_gate(Gate::Or, 10_000, 4).unwrap();
        let masked = apply_missingness(&ds, &MechanismSpec::mcar(0.5, MaskTarget::X2AndY), 2).unwrap().dataset;
        let model = fit_propensity(&masked, &x1_covariates(), 0.01).unwrap();
        assert!(model.coefficients[0].abs() < 0.1);
        assert!(model.intercept.abs() < 0.1);
        for i in 0..20 {
            assert!((model.observation_prob(&masked, i).unwrap() - 0.5).abs() < 0.03);
        }
    }

    #[test]
    fn degenerate_mechanisms_rejected() {
        let ds = generate_logic_gate(Gate::Or, 100, 4).unwrap();
        assert!(matches!(
            fit_propensity(&ds, &x1_covariates(), 0.01),
            Err(Error::DegenerateMechanism(_))
        ));
    }

    #[test]
    fn covariates_must_be_observed() {
        let ds = generate_logic_gate(Gate::Or, 1000, 4).unwrap();
        let masked = apply_missingness(&ds, &MechanismSpec::mcar(0.5, MaskTarget::X2AndY), 2).unwrap().dataset;
        let cov = Covariates::Columns { source: Variable::X2, columns: vec![0] };
        assert!(fit_propensity(&masked, &cov, 0.01).is_err());
    }

    #[test]
    fn separable_data_falls_back_to_ridge() {
        // Missingness is a deterministic function of x1.
        let ds = generate_logic_gate(Gate::And, 400, 4).unwrap();
        let mut mask = ds.mask().clone();
        for i in 0..ds.n() {
            let m = u8::from(ds.x1().row(i)[0] == 1.0);
            mask.m2[i] = m;
            mask.my[i] = m;
        }
        let masked = ds.with_mask(mask).unwrap();
        let model = fit_propensity(&masked, &x1_covariates(), 0.01).unwrap();
        assert!(model.diagnostics.ridge_fallback);
        assert!(model.coefficients[0] > 5.0);
    }

    #[test]
    fn weights_are_reciprocal_probabilities() {
        let ds = generate_logic_gate(Gate::And, 10, 0).unwrap();
        let probs: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 0.2 } else { 0.8 }).collect();
        let truth = TruePropensity { probs, floor: 0.01 };
        let rows: Vec<usize> = (0..10).collect();
        let w = ipw_weights(&truth, &ds, &rows, Normalization::None).unwrap();
        for (k, &wi) in w.w.iter().enumerate() {
            let expected = if k % 2 == 0 { 5.0 } else { 1.25 };
            assert!((wi - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_propensity_gives_flat_weights() {
        let ds = generate_logic_gate(Gate::And, 10, 0).unwrap();
        let truth = TruePropensity { probs: vec![0.5; 10], floor: 0.01 };
        let rows: Vec<usize> = (0..10).collect();
        let w = ipw_weights(&truth, &ds, &rows, Normalization::None).unwrap();
        assert!(w.w.iter().all(|&x| (x - 2.0).abs() < 1e-12));
        let w = w.normalized(Normalization::MeanOne);
        assert!(w.w.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn floor_is_reported() {
        let ds = generate_logic_gate(Gate::And, 4, 0).unwrap();
        let truth = TruePropensity { probs: vec![0.001, 0.5, 0.5, 0.5], floor: 0.01 };
        let w = ipw_weights(&truth, &ds, &[0, 1, 2, 3], Normalization::None).unwrap();
        assert_eq!(w.floored, 1);
        assert!((w.w[0] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn incomplete_rows_rejected() {
        let ds = generate_logic_gate(Gate::And, 100, 0).unwrap();
        let masked = apply_missingness(&ds, &MechanismSpec::mcar(0.5, MaskTarget::X2AndY), 2).unwrap();
        let truth = TruePropensity { probs: masked.observation_prob.clone(), floor: 0.01 };
        let bad = (0..100).find(|&i| !masked.dataset.is_complete(i)).unwrap();
        assert!(ipw_weights(&truth, &masked.dataset, &[bad], Normalization::None).is_err());
    }

    #[test]
    fn stabilized_weights_without_missingness_are_one() {
        let ds = generate_logic_gate(Gate::And, 50, 0).unwrap();
        let truth = TruePropensity { probs: vec![1.0; 50], floor: 0.01 };
        let rows: Vec<usize> = (0..50).collect();
        let w = mi_correction_weights(&truth, &ds, &rows).unwrap();
        assert!(w.w.iter().all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn stabilized_weights_under_true_mcar_are_one() {
        let ds = generate_logic_gate(Gate::Xor, 2000, 3).unwrap();
        let masked = apply_missingness(&ds, &MechanismSpec::mcar(0.5, MaskTarget::X2AndY), 5).unwrap();
        let truth = TruePropensity { probs: masked.observation_prob.clone(), floor: 0.01 };
        let rows = masked.dataset.complete_rows();
        let w = mi_correction_weights(&truth, &masked.dataset, &rows).unwrap();
        assert!(w.w.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn record_round_trips() {
        let rec = PropensityRecord {
            covariates: vec!["x1_0".into()],
            coefficients: vec![-2.5],
            intercept: 0.75,
            floor: 0.01,
        };
        assert_eq!(PropensityRecord::from_toml(&rec.to_toml().unwrap()).unwrap(), rec);
    }
}
