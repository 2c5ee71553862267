//! Weighted binary classifiers: a small ReLU MLP trained with Adam and a
//! logistic model fit by IRLS, plus post-hoc temperature scaling.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sigmoid, Dataset, ModalityMatrix};
use crate::propensity::{fit_logistic, SEPARATION_RIDGE};
use crate::rng::rng_from;
use crate::{Error, Result};

/// Which modality columns a classifier reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSchema {
    X1,
    X2,
    Both,
}

impl InputSchema {
    pub const ALL: [InputSchema; 3] = [InputSchema::X1, InputSchema::X2, InputSchema::Both];

    pub fn name(self) -> &'static str {
        match self {
            InputSchema::X1 => "x1",
            InputSchema::X2 => "x2",
            InputSchema::Both => "x1+x2",
        }
    }

    pub fn width(self, ds: &Dataset) -> usize {
        match self {
            InputSchema::X1 => ds.x1().cols(),
            InputSchema::X2 => ds.x2().cols(),
            InputSchema::Both => ds.x1().cols() + ds.x2().cols(),
        }
    }

    /// Feature rows for `rows`. The caller is responsible for the columns being observed.
    pub fn features(self, ds: &Dataset, rows: &[usize]) -> ModalityMatrix {
        match self {
            InputSchema::X1 => ds.x1().select(rows),
            InputSchema::X2 => ds.x2().select(rows),
            InputSchema::Both => {
                let width = self.width(ds);
                let mut values = Vec::with_capacity(rows.len() * width);
                for &i in rows {
                    values.extend_from_slice(ds.x1().row(i));
                    values.extend_from_slice(ds.x2().row(i));
                }
                ModalityMatrix::new(values, rows.len(), width).expect("consistent widths")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub architecture: Architecture,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fit a temperature on the validation rows after training.
    pub calibrate: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp,
            hidden_layers: 2,
            hidden_width: 32,
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 256,
            calibrate: true,
        }
    }
}

impl MlpConfig {
    pub fn logistic() -> Self {
        Self { architecture: Architecture::Logistic, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.hidden_layers > 0 && self.hidden_width > 0 && self.epochs > 0 && self.batch_size > 0;
        if !positive || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!("model config has non-positive fields: {self:?}")));
        }
        Ok(())
    }

    fn layer_sizes(&self, input: usize) -> Vec<usize> {
        match self.architecture {
            Architecture::Logistic => vec![input, 1],
            Architecture::Mlp => {
                let mut sizes = vec![input];
                sizes.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
                sizes.push(1);
                sizes
            }
        }
    }
}

/// Borrowed labelled feature rows with per-row weights.
#[derive(Debug, Clone, Copy)]
pub struct Labelled<'a> {
    pub x: &'a ModalityMatrix,
    pub y: &'a [u8],
    pub w: &'a [f64],
}

impl Labelled<'_> {
    fn validate(&self, what: &str) -> Result<()> {
        let n = self.x.rows();
        if self.y.len() != n || self.w.len() != n {
            return Err(Error::InvalidInput(format!(
                "{what}: {} feature rows, {} labels, {} weights",
                n,
                self.y.len(),
                self.w.len()
            )));
        }
        if n == 0 {
            return Err(Error::InsufficientRows { needed: 1, have: 0 });
        }
        if let Some(bad) = self.w.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidInput(format!("{what}: invalid weight {bad}")));
        }
        let total: f64 = self.w.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidInput(format!("{what}: weight sum {total} is not positive and finite")));
        }
        if self.y.iter().any(|&y| y > 1) {
            return Err(Error::InvalidInput(format!("{what}: labels must be 0/1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub final_train_loss: f64,
}

/// A trained binary classifier.
///
/// Parameters are stored flat, layer by layer, as a row-major `out x in`
/// weight block followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    architecture: Architecture,
    sizes: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    params: Vec<f64>,
    temperature: f64,
    pub report: TrainReport,
}

const FORMAT_HEADER: &str = "icym2i-classifier";
const FORMAT_VERSION: u32 = 1;

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Classifier {
    /// Classifier with all-zero parameters and identity standardization.
    pub fn zeros(architecture: Architecture, sizes: Vec<usize>) -> Self {
        let input = sizes[0];
        Self {
            architecture,
            params: vec![0.0; param_count(&sizes)],
            sizes,
            mean: vec![0.0; input],
            scale: vec![1.0; input],
            temperature: 1.0,
            report: TrainReport::default(),
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidInput(format!("temperature {t} must be positive")));
        }
        self.temperature = t;
        Ok(())
    }

    fn standardize(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s));
    }

    /// Uncalibrated logit.
    pub fn raw_logit(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_width() {
            return Err(Error::SchemaMismatch(format!(
                "classifier expects {} inputs, got {}",
                self.input_width(),
                x.len()
            )));
        }
        let mut a = Vec::with_capacity(x.len());
        self.standardize(x, &mut a);
        let mut next = Vec::new();
        let mut offset = 0;
        let layers = self.sizes.len() - 1;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            next.clear();
            for o in 0..n_out {
                let z = b[o] + dot(&w[o * n_in..(o + 1) * n_in], &a);
                next.push(if l + 1 < layers { z.max(0.0) } else { z });
            }
            std::mem::swap(&mut a, &mut next);
            offset += n_in * n_out + n_out;
        }
        Ok(a[0])
    }

    /// Calibrated logit `raw / T`.
    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        Ok(self.raw_logit(x)? / self.temperature)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(x)?))
    }

    pub fn predict_batch(&self, x: &ModalityMatrix) -> Result<Vec<f64>> {
        (0..x.rows()).map(|i| self.predict_proba(x.row(i))).collect()
    }

    pub fn raw_logits(&self, x: &ModalityMatrix) -> Result<Vec<f64>> {
        (0..x.rows()).map(|i| self.raw_logit(x.row(i))).collect()
    }

    /// Fits the temperature on held-out rows by weighted negative log-likelihood.
    pub fn calibrate(&mut self, val: Labelled<'_>) -> Result<f64> {
        val.validate("calibration")?;
        let logits = self.raw_logits(val.x)?;
        self.temperature = fit_temperature(&logits, val.y, val.w)?;
        Ok(self.temperature)
    }

    /// Versioned plain-text export: layer shapes, standardization, then row-major values.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let arch = match self.architecture {
            Architecture::Logistic => "logistic",
            Architecture::Mlp => "mlp",
        };
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_HEADER} {FORMAT_VERSION}");
        let _ = writeln!(s, "architecture {arch}");
        let sizes: Vec<String> = self.sizes.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "sizes {}", sizes.join(" "));
        let _ = writeln!(s, "temperature {:?}", self.temperature);
        let _ = writeln!(s, "mean {}", join(&self.mean));
        let _ = writeln!(s, "scale {}", join(&self.scale));
        let mut offset = 0;
        for l in 0..self.sizes.len() - 1 {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let _ = writeln!(s, "weight {n_out} {n_in} {}", join(&self.params[offset..offset + n_in * n_out]));
            offset += n_in * n_out;
            let _ = writeln!(s, "bias {n_out} {}", join(&self.params[offset..offset + n_out]));
            offset += n_out;
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Parse(format!("classifier text: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut field = |name: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing `{name}` line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(bad(&format!("expected `{name}`, got `{line}`")));
            }
            Ok(parts.map(str::to_owned).collect())
        };
        let floats = |v: &[String]| -> Result<Vec<f64>> {
            v.iter().map(|s| s.parse::<f64>().map_err(|e| bad(&e.to_string()))).collect()
        };
        let ints = |v: &[String]| -> Result<Vec<usize>> {
            v.iter().map(|s| s.parse::<usize>().map_err(|e| bad(&e.to_string()))).collect()
        };

        let header = field(FORMAT_HEADER)?;
        if header.first().map(String::as_str) != Some(&FORMAT_VERSION.to_string()) {
            return Err(bad(&format!("unsupported version {header:?}")));
        }
        let architecture = match field("architecture")?.first().map(String::as_str) {
            Some("logistic") => Architecture::Logistic,
            Some("mlp") => Architecture::Mlp,
            other => return Err(bad(&format!("unknown architecture {other:?}"))),
        };
        let sizes = ints(&field("sizes")?)?;
        if sizes.len() < 2 || sizes.contains(&0) || *sizes.last().unwrap() != 1 {
            return Err(bad("layer sizes must be positive and end in 1"));
        }
        let temperature = floats(&field("temperature")?)?;
        let mean = floats(&field("mean")?)?;
        let scale = floats(&field("scale")?)?;
        if temperature.len() != 1 || mean.len() != sizes[0] || scale.len() != sizes[0] {
            return Err(bad("standardization width mismatch"));
        }
        let mut params = Vec::with_capacity(param_count(&sizes));
        for l in 0..sizes.len() - 1 {
            let w = field("weight")?;
            let shape = ints(&w[..2.min(w.len())])?;
            if shape != [sizes[l + 1], sizes[l]] || w.len() != 2 + sizes[l] * sizes[l + 1] {
                return Err(bad(&format!("weight block {l} has wrong shape")));
            }
            params.extend(floats(&w[2..])?);
            let b = field("bias")?;
            if ints(&b[..1.min(b.len())])? != [sizes[l + 1]] || b.len() != 1 + sizes[l + 1] {
                return Err(bad(&format!("bias block {l} has wrong shape")));
            }
            params.extend(floats(&b[1..])?);
        }
        let mut clf = Self { architecture, sizes, mean, scale, params, temperature: 1.0, report: TrainReport::default() };
        clf.set_temperature(temperature[0])?;
        Ok(clf)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(1 + e^z) - y z`, the logistic loss on a logit.
#[inline]
fn bce_with_logit(z: f64, y: f64) -> f64 {
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - y * z
}

fn weighted_bce(logits: &[f64], y: &[u8], w: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&z, &yi), &wi) in logits.iter().zip(y).zip(w) {
        num += wi * bce_with_logit(z, f64::from(yi));
        den += wi;
    }
    num / den
}

/// Weighted-NLL temperature on `[0.05, 20]` by golden-section search in log space.
/// Single-class labels leave the temperature at 1.
pub fn fit_temperature(logits: &[f64], y: &[u8], w: &[f64]) -> Result<f64> {
    if logits.len() != y.len() || w.len() != y.len() {
        return Err(Error::InvalidInput("temperature fit needs aligned inputs".into()));
    }
    let pos: f64 = y.iter().zip(w).filter(|(&yi, _)| yi == 1).map(|(_, &wi)| wi).sum();
    let neg: f64 = y.iter().zip(w).filter(|(&yi, _)| yi == 0).map(|(_, &wi)| wi).sum();
    if !(pos > 0.0 && neg > 0.0) {
        log::warn!("calibration labels are single-class; keeping temperature 1");
        return Ok(1.0);
    }
    let nll = |log_t: f64| {
        let t = log_t.exp();
        let mut acc = 0.0;
        for ((&z, &yi), &wi) in logits.iter().zip(y).zip(w) {
            acc += wi * bce_with_logit(z / t, f64::from(yi));
        }
        acc
    };
    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.05f64.ln(), 20f64.ln());
    let mut c = b - invphi * (b - a);
    let mut d = a + invphi * (b - a);
    let (mut fc, mut fd) = (nll(c), nll(d));
    while b - a > 1e-9 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = nll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = nll(d);
        }
    }
    Ok((0.5 * (a + b)).exp())
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Adam applied to an arbitrary parameter vector; shared with the PID solver.
pub(crate) struct AdamOptimizer(Adam);

impl AdamOptimizer {
    pub(crate) fn new(n: usize, lr: f64) -> Self {
        Self(Adam::new(n, lr))
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.0.step(params, grad);
    }
}

/// Scratch buffers for batched forward/backward passes.
struct Workspace {
    /// Post-activation values per layer, `batch x size` row-major (layer 0 is the input).
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    grad: Vec<f64>,
}

impl Workspace {
    fn new(sizes: &[usize], batch: usize) -> Self {
        Self {
            acts: sizes.iter().map(|&s| vec![0.0; s * batch]).collect(),
            deltas: sizes.iter().map(|&s| vec![0.0; s * batch]).collect(),
            grad: vec![0.0; param_count(sizes)],
        }
    }
}

fn forward(sizes: &[usize], params: &[f64], acts: &mut [Vec<f64>], bsz: usize) {
    let layers = sizes.len() - 1;
    let mut offset = 0;
    for l in 0..layers {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let w = &params[offset..offset + n_in * n_out];
        let b = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        let (lo, hi) = acts.split_at_mut(l + 1);
        let a_in = &lo[l];
        let a_out = &mut hi[0];
        for r in 0..bsz {
            let x = &a_in[r * n_in..(r + 1) * n_in];
            let out = &mut a_out[r * n_out..(r + 1) * n_out];
            for o in 0..n_out {
                let z = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
                out[o] = if l + 1 < layers { z.max(0.0) } else { z };
            }
        }
        offset += n_in * n_out + n_out;
    }
}

/// Gradient of `sum_r coef[r] * bce(z_r, y_r)` with respect to the parameters.
fn backward(sizes: &[usize], params: &[f64], ws: &mut Workspace, bsz: usize, coef: &[f64], y: &[f64]) {
    let layers = sizes.len() - 1;
    ws.grad.iter_mut().for_each(|g| *g = 0.0);
    {
        let out = &ws.acts[layers];
        let d = &mut ws.deltas[layers];
        for r in 0..bsz {
            d[r] = coef[r] * (sigmoid(out[r]) - y[r]);
        }
    }
    let offsets: Vec<usize> = sizes
        .windows(2)
        .scan(0, |acc, w| {
            let o = *acc;
            *acc += w[0] * w[1] + w[1];
            Some(o)
        })
        .collect();
    for l in (0..layers).rev() {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let offset = offsets[l];
        let w = &params[offset..offset + n_in * n_out];
        let (gw, gb) = ws.grad[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
        let (d_lo, d_hi) = ws.deltas.split_at_mut(l + 1);
        let delta = &d_hi[0];
        let a_in = &ws.acts[l];
        for r in 0..bsz {
            let dr = &delta[r * n_out..(r + 1) * n_out];
            let x = &a_in[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let d = dr[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        if l > 0 {
            let prev = &mut d_lo[l];
            for r in 0..bsz {
                let dr = &delta[r * n_out..(r + 1) * n_out];
                let x = &a_in[r * n_in..(r + 1) * n_in];
                let p = &mut prev[r * n_in..(r + 1) * n_in];
                p.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..n_out {
                    let d = dr[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (pv, wv) in p.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *pv += d * wv;
                    }
                }
                // ReLU derivative: hidden activations are zero exactly where inactive.
                for (pv, &xv) in p.iter_mut().zip(x) {
                    if xv <= 0.0 {
                        *pv = 0.0;
                    }
                }
            }
        }
    }
}

fn standardization(x: &ModalityMatrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var.iter().map(|s| (s / n as f64).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
    (mean, scale)
}

/// Trains a classifier on weighted rows; `val` drives best-epoch selection
/// and, when `cfg.calibrate` is set, temperature scaling.
pub fn train(cfg: &MlpConfig, data: Labelled<'_>, val: Option<Labelled<'_>>, seed: u64) -> Result<Classifier> {
    cfg.validate()?;
    data.validate("training")?;
    if let Some(v) = &val {
        v.validate("validation")?;
        if v.x.cols() != data.x.cols() {
            return Err(Error::SchemaMismatch("validation width differs from training width".into()));
        }
    }
    let mut clf = match cfg.architecture {
        Architecture::Logistic => train_logistic(cfg, data)?,
        Architecture::Mlp => train_mlp(cfg, data, val, seed)?,
    };
    if cfg.calibrate {
        if let Some(v) = val {
            if v.x.rows() < 50 {
                log::warn!("only {} calibration rows; skipping temperature scaling", v.x.rows());
            } else {
                clf.calibrate(v)?;
            }
        }
    }
    Ok(clf)
}

fn standardized_rows(x: &ModalityMatrix, mean: &[f64], scale: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.values().len());
    for i in 0..x.rows() {
        out.extend(x.row(i).iter().zip(mean).zip(scale).map(|((v, m), s)| (v - m) / s));
    }
    out
}

fn train_logistic(cfg: &MlpConfig, data: Labelled<'_>) -> Result<Classifier> {
    let (mean, scale) = standardization(data.x);
    let d = data.x.cols();
    let flat = standardized_rows(data.x, &mean, &scale);
    let design: Vec<Vec<f64>> = flat.chunks(d.max(1)).map(<[f64]>::to_vec).collect();
    let design = if d == 0 { vec![Vec::new(); data.x.rows()] } else { design };
    let labels: Vec<f64> = data.y.iter().map(|&y| f64::from(y)).collect();
    let mut fit = fit_logistic(&design, &labels, Some(data.w), 0.0)?;
    if !fit.converged || fit.coefficients.iter().any(|c| c.abs() > 25.0) {
        fit = fit_logistic(&design, &labels, Some(data.w), SEPARATION_RIDGE)?;
    }
    let mut clf = Classifier::zeros(Architecture::Logistic, cfg.layer_sizes(d));
    clf.mean = mean;
    clf.scale = scale;
    clf.params[..d].copy_from_slice(&fit.coefficients[1..]);
    clf.params[d] = fit.coefficients[0];
    let logits = clf.raw_logits(data.x)?;
    clf.report = TrainReport {
        epochs_run: fit.iterations,
        best_epoch: fit.iterations,
        best_val_loss: None,
        final_train_loss: weighted_bce(&logits, data.y, data.w),
    };
    Ok(clf)
}

fn train_mlp(cfg: &MlpConfig, data: Labelled<'_>, val: Option<Labelled<'_>>, seed: u64) -> Result<Classifier> {
    let d = data.x.cols();
    let sizes = cfg.layer_sizes(d);
    let (mean, scale) = standardization(data.x);
    let mut rng = rng_from(seed);

    let mut clf = Classifier::zeros(Architecture::Mlp, sizes.clone());
    let mut offset = 0;
    for w in sizes.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        // He-uniform for ReLU layers
        let bound = (6.0 / n_in as f64).sqrt();
        for p in &mut clf.params[offset..offset + n_in * n_out] {
            *p = rng.random_range(-bound..bound);
        }
        offset += n_in * n_out + n_out;
    }
    clf.mean = mean;
    clf.scale = scale;

    let x = standardized_rows(data.x, &clf.mean, &clf.scale);
    let y: Vec<f64> = data.y.iter().map(|&v| f64::from(v)).collect();
    let n = data.x.rows();
    let bsz_max = cfg.batch_size.min(n);
    let mut ws = Workspace::new(&sizes, bsz_max);
    let mut adam = Adam::new(clf.params.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut coef = vec![0.0; bsz_max];
    let mut yb = vec![0.0; bsz_max];
    let max_weight = data.w.iter().copied().fold(0.0, f64::max);

    let val_x = val.map(|v| standardized_rows(v.x, &clf.mean, &clf.scale));
    let mut val_ws = val.map(|v| Workspace::new(&sizes, v.x.rows()));
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let mut train_loss = f64::NAN;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_num = 0.0;
        let mut epoch_den = 0.0;
        for chunk in order.chunks(bsz_max) {
            let bsz = chunk.len();
            let wsum: f64 = chunk.iter().map(|&i| data.w[i]).sum();
            if wsum <= 0.0 {
                continue;
            }
            for (r, &i) in chunk.iter().enumerate() {
                ws.acts[0][r * d..(r + 1) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
                coef[r] = data.w[i] / wsum;
                yb[r] = y[i];
            }
            forward(&sizes, &clf.params, &mut ws.acts, bsz);
            let out = &ws.acts[sizes.len() - 1];
            for r in 0..bsz {
                epoch_num += data.w[chunk[r]] * bce_with_logit(out[r], yb[r]);
            }
            epoch_den += wsum;
            if !epoch_num.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, max_weight });
            }
            backward(&sizes, &clf.params, &mut ws, bsz, &coef, &yb);
            adam.step(&mut clf.params, &ws.grad);
        }
        train_loss = epoch_num / epoch_den;
        if !train_loss.is_finite() || clf.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch, max_weight });
        }
        if let (Some(v), Some(vx), Some(vws)) = (val, &val_x, &mut val_ws) {
            let m = v.x.rows();
            vws.acts[0].copy_from_slice(vx);
            forward(&sizes, &clf.params, &mut vws.acts, m);
            let loss = weighted_bce(&vws.acts[sizes.len() - 1][..m], v.y, v.w);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, max_weight });
            }
            if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
                best = Some((loss, clf.params.clone(), epoch));
            }
        }
    }
    clf.report = TrainReport { epochs_run: cfg.epochs, best_epoch: cfg.epochs, best_val_loss: None, final_train_loss: train_loss };
    if let Some((loss, params, epoch)) = best {
        clf.params = params;
        clf.report.best_epoch = epoch;
        clf.report.best_val_loss = Some(loss);
    }
    Ok(clf)
}
