//! Weighted evaluation metrics and across-batch dispersion.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from;
use crate::{Error, Result};

fn check_lengths(scores: &[f64], labels: &[u8], weights: Option<&[f64]>) -> Result<()> {
    if scores.len() != labels.len() || weights.is_some_and(|w| w.len() != scores.len()) {
        return Err(Error::InvalidInput(format!(
            "metric inputs differ in length: {} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(w) = weights {
        if let Some(bad) = w.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidInput(format!("invalid metric weight {bad}")));
        }
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    Ok(())
}

/// Pairwise-weighted AUROC with half credit for ties:
/// `sum_{i pos, j neg} w_i w_j [1(s_i > s_j) + 1/2 1(s_i = s_j)] / sum w_i w_j`.
///
/// Runs in `O(n log n)` by sweeping tied score groups in ascending order.
pub fn weighted_auroc(scores: &[f64], labels: &[u8], weights: Option<&[f64]>) -> Result<f64> {
    check_lengths(scores, labels, weights)?;
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut neg_below = 0.0;
    let mut concordant = 0.0;
    let (mut total_pos, mut total_neg) = (0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let (mut pos, mut neg) = (0.0, 0.0);
        while k < order.len() && scores[order[k]] == s {
            let i = order[k];
            if labels[i] == 1 {
                pos += w(i);
            } else {
                neg += w(i);
            }
            k += 1;
        }
        concordant += pos * (neg_below + 0.5 * neg);
        neg_below += neg;
        total_pos += pos;
        total_neg += neg;
    }
    if !(total_pos > 0.0 && total_neg > 0.0) {
        return Err(Error::UndefinedMetric("AUROC needs both classes with positive weight".into()));
    }
    Ok(concordant / (total_pos * total_neg))
}

/// `sum w_i (s_i - y_i)^2 / sum w_i`.
pub fn weighted_brier(scores: &[f64], labels: &[u8], weights: Option<&[f64]>) -> Result<f64> {
    check_lengths(scores, labels, weights)?;
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidInput(format!("Brier score needs probabilities, got {s}")));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (&s, &y)) in scores.iter().zip(labels).enumerate() {
        let wi = weights.map_or(1.0, |w| w[i]);
        num += wi * (s - f64::from(y)).powi(2);
        den += wi;
    }
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric("Brier score needs positive total weight".into()));
    }
    Ok(num / den)
}

/// Kish effective sample size `(sum w)^2 / sum w^2`.
pub fn kish_effective_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub mean: f64,
    pub sd: f64,
    pub batches: usize,
}

/// Shuffles `rows` with `seed`, splits them into full batches of `batch_size`
/// (the remainder is dropped), evaluates `metric` per batch and returns the
/// mean and sample standard deviation. Batches where the metric is undefined
/// are skipped.
pub fn batch_dispersion<F>(metric: F, rows: &[usize], batch_size: usize, seed: u64) -> Result<Dispersion>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let full = rows.len() / batch_size;
    if full < 2 {
        return Err(Error::InsufficientRows { needed: 2 * batch_size, have: rows.len() });
    }
    let mut shuffled = rows.to_vec();
    shuffled.shuffle(&mut rng_from(seed));
    let mut values = Vec::with_capacity(full);
    for batch in shuffled.chunks_exact(batch_size) {
        match metric(batch) {
            Ok(v) => values.push(v),
            Err(Error::UndefinedMetric(msg)) => log::debug!("skipping batch: {msg}"),
            Err(e) => return Err(e),
        }
    }
    if values.len() < 2 {
        return Err(Error::UndefinedMetric(format!("only {} batches had a defined metric", values.len())));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    Ok(Dispersion { mean, sd: var.sqrt(), batches: values.len() })
}

pub fn rmse_vs_oracle(estimates: &[f64], oracle: &[f64]) -> Result<f64> {
    if estimates.len() != oracle.len() || estimates.is_empty() {
        return Err(Error::InvalidInput(format!(
            "rmse needs equal non-empty inputs, got {} and {}",
            estimates.len(),
            oracle.len()
        )));
    }
    let ss: f64 = estimates.iter().zip(oracle).map(|(e, o)| (e - o).powi(2)).sum();
    Ok((ss / estimates.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Oracle,
    Observed,
    Icym2i,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Oracle, Arm::Observed, Arm::Icym2i];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Oracle => "oracle",
            Arm::Observed => "observed",
            Arm::Icym2i => "icym2i",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Oracle => "Oracle",
            Arm::Observed => "Observed",
            Arm::Icym2i => "ICYM2I",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oracle" => Ok(Arm::Oracle),
            "observed" => Ok(Arm::Observed),
            "icym2i" => Ok(Arm::Icym2i),
            other => Err(Error::Parse(format!("unknown arm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub arm: Arm,
    pub auroc: f64,
    pub brier: f64,
    pub n_effective: f64,
    pub batch_sd: f64,
}

impl MetricReport {
    /// Full-set AUROC/Brier plus the across-batch AUROC spread.
    pub fn evaluate(
        arm: Arm,
        scores: &[f64],
        labels: &[u8],
        weights: Option<&[f64]>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let auroc = weighted_auroc(scores, labels, weights)?;
        let brier = weighted_brier(scores, labels, weights)?;
        let n_effective = weights.map_or(scores.len() as f64, kish_effective_size);
        let idx: Vec<usize> = (0..scores.len()).collect();
        let batch_sd = match batch_dispersion(
            |b| {
                let s: Vec<f64> = b.iter().map(|&i| scores[i]).collect();
                let y: Vec<u8> = b.iter().map(|&i| labels[i]).collect();
                let w: Option<Vec<f64>> = weights.map(|w| b.iter().map(|&i| w[i]).collect());
                weighted_auroc(&s, &y, w.as_deref())
            },
            &idx,
            batch_size,
            seed,
        ) {
            Ok(d) => d.sd,
            Err(Error::InsufficientRows { .. } | Error::UndefinedMetric(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        Ok(Self { arm, auroc, brier, n_effective, batch_sd })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// O(n^2) definition used as an oracle.
    fn pairwise_auroc(s: &[f64], y: &[u8], w: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    let ww = w[i] * w[j];
                    den += ww;
                    num += ww * if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        let y = [0, 0, 1, 1];
        assert_eq!(weighted_auroc(&[0.1, 0.2, 0.8, 0.9], &y, None).unwrap(), 1.0);
        assert!((weighted_auroc(&[0.1, 0.2, 0.8, 0.9], &y, Some(&[3.0, 0.1, 2.0, 7.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(weighted_auroc(&[0.4; 4], &y, None).unwrap(), 0.5);
        assert_eq!(weighted_auroc(&[0.1, 0.9, 0.5, 0.3], &y, None).unwrap(), 0.5);
        assert_eq!(weighted_auroc(&[0.6, 0.9, 0.5, 0.3], &y, None).unwrap(), 0.0);
        assert!(matches!(weighted_auroc(&[0.1, 0.2], &[1, 1], None), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn random_scores_give_half() {
        let mut rng = rng_from(1);
        let s: Vec<f64> = (0..20_000).map(|_| rng.random()).collect();
        let y: Vec<u8> = (0..20_000).map(|_| rng.random_range(0..2)).collect();
        assert!((weighted_auroc(&s, &y, None).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn brier_examples() {
        assert_eq!(weighted_brier(&[0.0, 1.0, 1.0], &[0, 1, 1], None).unwrap(), 0.0);
        assert_eq!(weighted_brier(&[0.5; 4], &[0, 1, 0, 1], None).unwrap(), 0.25);
        assert!(weighted_brier(&[1.5], &[1], None).is_err());
    }

    #[test]
    fn dispersion_examples() {
        let rows: Vec<usize> = (0..100).collect();
        let d = batch_dispersion(|_| Ok(0.7), &rows, 10, 3).unwrap();
        assert!((d.mean - 0.7).abs() < 1e-12 && d.sd < 1e-12 && d.batches == 10);
        let f = |b: &[usize]| Ok(b.iter().sum::<usize>() as f64);
        assert_eq!(batch_dispersion(f, &rows, 30, 5).unwrap(), batch_dispersion(f, &rows, 30, 5).unwrap());
        assert!(matches!(batch_dispersion(f, &rows, 60, 5), Err(Error::InsufficientRows { .. })));
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse_vs_oracle(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert!((rmse_vs_oracle(&[0.4, 0.6, 0.9], &[0.3, 0.5, 0.8]).unwrap() - 0.1).abs() < 1e-12);
        assert!(rmse_vs_oracle(&[0.1], &[]).is_err());
    }

    fn sample() -> impl Strategy<Value = (Vec<f64>, Vec<u8>, Vec<u32>)> {
        (4usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..6, n).prop_map(|v| v.into_iter().map(|k| f64::from(k) / 5.0).collect()),
                proptest::collection::vec(0u8..2, n),
                proptest::collection::vec(1u32..4, n),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise_definition((s, y, w) in sample()) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            let w: Vec<f64> = w.into_iter().map(f64::from).collect();
            let fast = weighted_auroc(&s, &y, Some(&w)).unwrap();
            prop_assert!((fast - pairwise_auroc(&s, &y, &w)).abs() < 1e-12);
        }

        #[test]
        fn integer_weights_equal_replication((s, y, w) in sample()) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            let (mut rs, mut ry) = (Vec::new(), Vec::new());
            for i in 0..s.len() {
                for _ in 0..w[i] {
                    rs.push(s[i]);
                    ry.push(y[i]);
                }
            }
            let wf: Vec<f64> = w.iter().map(|&k| f64::from(k)).collect();
            prop_assert!((weighted_auroc(&s, &y, Some(&wf)).unwrap() - weighted_auroc(&rs, &ry, None).unwrap()).abs() < 1e-12);
            prop_assert!((weighted_brier(&s, &y, Some(&wf)).unwrap() - weighted_brier(&rs, &ry, None).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn weight_scale_invariance((s, y, w) in sample(), c in 0.01f64..100.0) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            let w: Vec<f64> = w.into_iter().map(f64::from).collect();
            let wc: Vec<f64> = w.iter().map(|v| v * c).collect();
            prop_assert!((weighted_auroc(&s, &y, Some(&w)).unwrap() - weighted_auroc(&s, &y, Some(&wc)).unwrap()).abs() < 1e-12);
            prop_assert!((weighted_brier(&s, &y, Some(&w)).unwrap() - weighted_brier(&s, &y, Some(&wc)).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_invariance((s, y, w) in sample()) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            let w: Vec<f64> = w.into_iter().map(f64::from).collect();
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v - 1.0).exp()).collect();
            prop_assert_eq!(weighted_auroc(&s, &y, Some(&w)).unwrap(), weighted_auroc(&t, &y, Some(&w)).unwrap());
        }
    }
}
