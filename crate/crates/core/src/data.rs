//! Two-modality datasets with explicit missingness masks, synthetic
//! generators, and missingness mechanisms.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::infotheory::Quantizer;
use crate::rng;
use crate::{Error, Result};

/// Dense row-major feature block for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityMatrix {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl ModalityMatrix {
    pub fn new(values: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if cols == 0 {
            return Err(Error::InvalidInput("modality needs at least one feature".into()));
        }
        if values.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "modality has {} values, expected {rows}x{cols}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite feature at flat index {i}")));
        }
        Ok(Self { values, rows, cols })
    }

    pub fn from_column(col: Vec<f64>) -> Result<Self> {
        let rows = col.len();
        Self::new(col, rows, 1)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Gathers the given rows into a new matrix.
    pub fn select(&self, rows: &[usize]) -> ModalityMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        ModalityMatrix { values, rows: rows.len(), cols: self.cols }
    }
}

/// Per-row missingness flags, 1 = missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingnessMask {
    pub m1: Vec<u8>,
    pub m2: Vec<u8>,
    pub my: Vec<u8>,
}

impl MissingnessMask {
    pub fn all_observed(n: usize) -> Self {
        Self { m1: vec![0; n], m2: vec![0; n], my: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.m1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m1.is_empty()
    }

    pub fn is_complete(&self, i: usize) -> bool {
        self.m1[i] == 0 && self.m2[i] == 0 && self.my[i] == 0
    }

    fn validate(&self, n: usize) -> Result<()> {
        for (name, v) in [("m1", &self.m1), ("m2", &self.m2), ("my", &self.my)] {
            if v.len() != n {
                return Err(Error::InvalidInput(format!("{name} has {} rows, expected {n}", v.len())));
            }
            if v.iter().any(|&f| f > 1) {
                return Err(Error::InvalidInput(format!("{name} flags must be 0 or 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Rows of `(x1, x2, y)` with missingness flags and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x1: ModalityMatrix,
    x2: ModalityMatrix,
    y: Vec<u8>,
    mask: MissingnessMask,
    split: Vec<Split>,
    seed: u64,
}

impl Dataset {
    pub fn new(
        x1: ModalityMatrix,
        x2: ModalityMatrix,
        y: Vec<u8>,
        mask: MissingnessMask,
        split: Vec<Split>,
        seed: u64,
    ) -> Result<Self> {
        let n = y.len();
        if x1.rows() != n || x2.rows() != n || split.len() != n {
            return Err(Error::InvalidInput(format!(
                "row counts disagree: x1={}, x2={}, y={n}, split={}",
                x1.rows(),
                x2.rows(),
                split.len()
            )));
        }
        if y.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("labels must be binary".into()));
        }
        mask.validate(n)?;
        Ok(Self { x1, x2, y, mask, split, seed })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn x1(&self) -> &ModalityMatrix {
        &self.x1
    }

    pub fn x2(&self) -> &ModalityMatrix {
        &self.x2
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    pub fn mask(&self) -> &MissingnessMask {
        &self.mask
    }

    pub fn split(&self) -> &[Split] {
        &self.split
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_complete(&self, i: usize) -> bool {
        self.mask.is_complete(i)
    }

    pub fn has_missingness(&self) -> bool {
        (0..self.n()).any(|i| !self.is_complete(i))
    }

    /// `X2_obs` for row `i`: the features if observed, `None` otherwise.
    pub fn x2_obs(&self, i: usize) -> Option<&[f64]> {
        (self.mask.m2[i] == 0).then(|| self.x2.row(i))
    }

    pub fn x1_obs(&self, i: usize) -> Option<&[f64]> {
        (self.mask.m1[i] == 0).then(|| self.x1.row(i))
    }

    pub fn y_obs(&self, i: usize) -> Option<u8> {
        (self.mask.my[i] == 0).then_some(self.y[i])
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.is_complete(i)).collect()
    }

    pub fn complete_rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.split[i] == split && self.is_complete(i)).collect()
    }

    pub fn with_mask(&self, mask: MissingnessMask) -> Result<Self> {
        mask.validate(self.n())?;
        Ok(Self { mask, ..self.clone() })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header: Vec<String> = (0..self.x1.cols()).map(|j| format!("x1_{j}")).collect();
        header.extend((0..self.x2.cols()).map(|j| format!("x2_{j}")));
        header.extend(["y", "m1", "m2", "my", "split"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.n() {
            let mut fields: Vec<String> = self.x1.row(i).iter().map(|&v| fmt_sig9(v)).collect();
            fields.extend(self.x2.row(i).iter().map(|&v| fmt_sig9(v)));
            fields.push(self.y[i].to_string());
            fields.push(self.mask.m1[i].to_string());
            fields.push(self.mask.m2[i].to_string());
            fields.push(self.mask.my[i].to_string());
            fields.push(self.split[i].as_str().to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, seed: u64) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty dataset file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let k1 = cols.iter().filter(|c| c.starts_with("x1_")).count();
        let k2 = cols.iter().filter(|c| c.starts_with("x2_")).count();
        let expected = k1 + k2 + 5;
        let tail = ["y", "m1", "m2", "my", "split"];
        if cols.len() != expected || cols[k1 + k2..] != tail {
            return Err(Error::Parse(format!("unexpected dataset header {header:?}")));
        }
        let (mut x1, mut x2, mut y) = (Vec::new(), Vec::new(), Vec::new());
        let mut mask = MissingnessMask::all_observed(0);
        let mut split = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != expected {
                return Err(Error::Parse(format!("row {}: {} fields, expected {expected}", lineno + 2, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 2)));
            let flag = |s: &str| s.parse::<u8>().map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 2)));
            for s in &f[..k1] {
                x1.push(num(s)?);
            }
            for s in &f[k1..k1 + k2] {
                x2.push(num(s)?);
            }
            let b = k1 + k2;
            y.push(flag(f[b])?);
            mask.m1.push(flag(f[b + 1])?);
            mask.m2.push(flag(f[b + 2])?);
            mask.my.push(flag(f[b + 3])?);
            split.push(f[b + 4].parse()?);
        }
        let n = y.len();
        Dataset::new(
            ModalityMatrix::new(x1, n, k1)?,
            ModalityMatrix::new(x2, n, k2)?,
            y,
            mask,
            split,
            seed,
        )
    }
}

/// Formats a float with 9 significant digits (C `%.9g` style).
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{v:.8e}");
        let (mant, e) = s.split_once('e').unwrap_or((&s, "0"));
        let mant = if mant.contains('.') { mant.trim_end_matches('0').trim_end_matches('.') } else { mant };
        format!("{mant}e{e}")
    }
}

/// Seeded 80/10/10 split assignment.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let mut split = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    split
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    And,
    Or,
    Xor,
}

impl Gate {
    pub fn apply(self, a: u8, b: u8) -> u8 {
        match self {
            Gate::And => a & b,
            Gate::Or => a | b,
            Gate::Xor => a ^ b,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Gate::And => "AND",
            Gate::Or => "OR",
            Gate::Xor => "XOR",
        }
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Two fair bits and `y = gate(x1, x2)`, fully observed.
pub fn generate_logic_gate(gate: Gate, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    let mut r = rng::stream(seed, "logic-gate");
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a = u8::from(r.random_bool(0.5));
        let b = u8::from(r.random_bool(0.5));
        x1.push(f64::from(a));
        x2.push(f64::from(b));
        y.push(gate.apply(a, b));
    }
    Dataset::new(
        ModalityMatrix::from_column(x1)?,
        ModalityMatrix::from_column(x2)?,
        y,
        MissingnessMask::all_observed(n),
        assign_splits(n, seed),
        seed,
    )
}

/// Parameters of the clustered-latent generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteredLatent {
    pub p1: f64,
    pub p2: f64,
    /// Dimension of each latent block; x1 and x2 have `2 * dims` features.
    pub dims: usize,
    pub clusters: usize,
    /// Standard deviation of the cluster centres (within-cluster sd is 1).
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_spread() -> f64 {
    3.0
}

impl ClusteredLatent {
    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.p1) || !ok(self.p2) || self.p1 + self.p2 > 1.0 + 1e-12 {
            return Err(Error::InvalidInput(format!(
                "mixing proportions must lie in [0,1] with p1 + p2 <= 1 (got {}, {})",
                self.p1, self.p2
            )));
        }
        if self.dims == 0 || self.clusters == 0 {
            return Err(Error::InvalidInput("dims and clusters must be positive".into()));
        }
        if !(self.spread.is_finite() && self.spread >= 0.0) {
            return Err(Error::InvalidInput("spread must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Three latent Gaussian-mixture blocks `zc, z1, z2`; `x1 = [zc, z1]`,
/// `x2 = [zc, z2]`, and `y ~ Bern(sigmoid(p1 mean(z1) + p2 mean(z2) + (1-p1-p2) mean(zc)))`.
pub fn generate_clustered_latent(params: &ClusteredLatent, n: usize, seed: u64) -> Result<Dataset> {
    params.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    let d = params.dims;
    let mut r = rng::stream(seed, "clustered-latent");
    let centre_dist = Normal::new(0.0, params.spread).map_err(|e| Error::InvalidInput(e.to_string()))?;
    // centres[block][cluster][dim]
    let centres: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|_| {
            (0..params.clusters).map(|_| (0..d).map(|_| centre_dist.sample(&mut r)).collect()).collect()
        })
        .collect();
    let draw = |block: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let c = r.random_range(0..params.clusters);
        centres[block][c].iter().map(|&m| {
            let z: f64 = StandardNormal.sample(r);
            m + z
        }).collect::<Vec<f64>>()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let pc = 1.0 - params.p1 - params.p2;
    let mut x1 = Vec::with_capacity(n * 2 * d);
    let mut x2 = Vec::with_capacity(n * 2 * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let zc = draw(0, &mut r);
        let z1 = draw(1, &mut r);
        let z2 = draw(2, &mut r);
        let logit = params.p1 * mean(&z1) + params.p2 * mean(&z2) + pc * mean(&zc);
        y.push(u8::from(r.random_bool(sigmoid(logit))));
        x1.extend_from_slice(&zc);
        x1.extend_from_slice(&z1);
        x2.extend_from_slice(&zc);
        x2.extend_from_slice(&z2);
    }
    Dataset::new(
        ModalityMatrix::new(x1, n, 2 * d)?,
        ModalityMatrix::new(x2, n, 2 * d)?,
        y,
        MissingnessMask::all_observed(n),
        assign_splits(n, seed),
        seed,
    )
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MechanismKind {
    Mcar,
    Mar,
    Mnar,
}

/// Which variables a missingness event masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    X2AndY,
    X2Only,
    YOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    X1,
    X2,
    Y,
}

/// How covariates `C` are built from a dataset row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Covariates {
    /// No covariates (MCAR).
    None,
    /// Raw feature columns of one variable (`columns` empty = all columns).
    Columns {
        source: Variable,
        #[serde(default)]
        columns: Vec<usize>,
    },
    /// One-hot k-means cluster membership of one variable's features.
    Clusters { source: Variable, k: usize, seed: u64 },
}

impl Covariates {
    pub fn source(&self) -> Option<Variable> {
        match self {
            Covariates::None => None,
            Covariates::Columns { source, .. } | Covariates::Clusters { source, .. } => Some(*source),
        }
    }
}

/// A covariate map with any data-dependent state (cluster codebook) fitted.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateMap {
    None,
    Columns { source: Variable, columns: Vec<usize> },
    Clusters { source: Variable, quantizer: Quantizer },
}

impl CovariateMap {
    /// Fits the map. Cluster codebooks are fit on rows where the source is observed.
    pub fn fit(spec: &Covariates, ds: &Dataset) -> Result<Self> {
        match spec {
            Covariates::None => Ok(CovariateMap::None),
            Covariates::Columns { source, columns } => {
                let width = variable_width(ds, *source);
                let columns = if columns.is_empty() { (0..width).collect() } else { columns.clone() };
                if let Some(&bad) = columns.iter().find(|&&c| c >= width) {
                    return Err(Error::SchemaMismatch(format!("covariate column {bad} out of range for {source:?}")));
                }
                Ok(CovariateMap::Columns { source: *source, columns })
            }
            Covariates::Clusters { source, k, seed } => {
                let rows: Vec<usize> = (0..ds.n()).filter(|&i| variable_observed(ds, *source, i)).collect();
                let feats = variable_rows(ds, *source, &rows);
                let quantizer = Quantizer::fit(&feats, *k, *seed)?;
                Ok(CovariateMap::Clusters { source: *source, quantizer })
            }
        }
    }

    pub fn width(&self) -> usize {
        match self {
            CovariateMap::None => 0,
            CovariateMap::Columns { columns, .. } => columns.len(),
            CovariateMap::Clusters { quantizer, .. } => quantizer.k(),
        }
    }

    pub fn source(&self) -> Option<Variable> {
        match self {
            CovariateMap::None => None,
            CovariateMap::Columns { source, .. } | CovariateMap::Clusters { source, .. } => Some(*source),
        }
    }

    pub fn names(&self) -> Vec<String> {
        match self {
            CovariateMap::None => Vec::new(),
            CovariateMap::Columns { source, columns } => {
                columns.iter().map(|c| format!("{}_{c}", var_name(*source))).collect()
            }
            CovariateMap::Clusters { source, quantizer } => {
                (0..quantizer.k()).map(|c| format!("{}_cluster{c}", var_name(*source))).collect()
            }
        }
    }

    /// Covariate vector for row `i` (reads the underlying value; callers
    /// guarantee the source is observed on the rows they use).
    pub fn row(&self, ds: &Dataset, i: usize) -> Vec<f64> {
        match self {
            CovariateMap::None => Vec::new(),
            CovariateMap::Columns { source, columns } => match source {
                Variable::X1 => columns.iter().map(|&c| ds.x1().row(i)[c]).collect(),
                Variable::X2 => columns.iter().map(|&c| ds.x2().row(i)[c]).collect(),
                Variable::Y => vec![f64::from(ds.y()[i])],
            },
            CovariateMap::Clusters { source, quantizer } => {
                let feats: Vec<f64> = match source {
                    Variable::X1 => ds.x1().row(i).to_vec(),
                    Variable::X2 => ds.x2().row(i).to_vec(),
                    Variable::Y => vec![f64::from(ds.y()[i])],
                };
                let mut v = vec![0.0; quantizer.k()];
                v[quantizer.assign(&feats)] = 1.0;
                v
            }
        }
    }
}

fn var_name(v: Variable) -> &'static str {
    match v {
        Variable::X1 => "x1",
        Variable::X2 => "x2",
        Variable::Y => "y",
    }
}

fn variable_width(ds: &Dataset, v: Variable) -> usize {
    match v {
        Variable::X1 => ds.x1().cols(),
        Variable::X2 => ds.x2().cols(),
        Variable::Y => 1,
    }
}

pub(crate) fn variable_observed(ds: &Dataset, v: Variable, i: usize) -> bool {
    match v {
        Variable::X1 => ds.mask().m1[i] == 0,
        Variable::X2 => ds.mask().m2[i] == 0,
        Variable::Y => ds.mask().my[i] == 0,
    }
}

fn variable_rows(ds: &Dataset, v: Variable, rows: &[usize]) -> ModalityMatrix {
    match v {
        Variable::X1 => ds.x1().select(rows),
        Variable::X2 => ds.x2().select(rows),
        Variable::Y => ModalityMatrix {
            values: rows.iter().map(|&i| f64::from(ds.y()[i])).collect(),
            rows: rows.len(),
            cols: 1,
        },
    }
}

pub const DEFAULT_FLOOR: f64 = 0.01;

/// A logistic missingness mechanism:
/// `P(M = 1 | c) = sigmoid(intercept + coefficients . c)`.
///
/// When `rate` is set the intercept is recalibrated by bisection so that the
/// average missingness probability over the dataset equals `rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub kind: MechanismKind,
    pub target: MaskTarget,
    #[serde(default = "covariates_none")]
    pub covariates: Covariates,
    #[serde(default)]
    pub coefficients: Vec<f64>,
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub rate: Option<f64>,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn covariates_none() -> Covariates {
    Covariates::None
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

impl MechanismSpec {
    pub fn mcar(rate: f64, target: MaskTarget) -> Self {
        Self {
            kind: MechanismKind::Mcar,
            target,
            covariates: Covariates::None,
            coefficients: Vec::new(),
            intercept: 0.0,
            rate: Some(rate),
            floor: DEFAULT_FLOOR,
        }
    }

    /// Binary-covariate mechanism given directly by its two missingness
    /// probabilities, `P(M=1 | c=0)` and `P(M=1 | c=1)`.
    pub fn binary(kind: MechanismKind, target: MaskTarget, source: Variable, p_missing_at_0: f64, p_missing_at_1: f64) -> Self {
        Self {
            kind,
            target,
            covariates: Covariates::Columns { source, columns: vec![0] },
            coefficients: vec![logit(p_missing_at_1) - logit(p_missing_at_0)],
            intercept: logit(p_missing_at_0),
            rate: None,
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.floor <= 0.5) {
            return Err(Error::InvalidInput(format!("positivity floor {} not in (0, 0.5]", self.floor)));
        }
        if let Some(rate) = self.rate {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidInput(format!("missingness rate {rate} not in [0, 1)")));
            }
        }
        if !self.intercept.is_finite() || self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("mechanism parameters must be finite".into()));
        }
        let masked: &[Variable] = match self.target {
            MaskTarget::X2AndY => &[Variable::X2, Variable::Y],
            MaskTarget::X2Only => &[Variable::X2],
            MaskTarget::YOnly => &[Variable::Y],
        };
        match (self.kind, self.covariates.source()) {
            (MechanismKind::Mcar, None) => {
                if !self.coefficients.is_empty() {
                    return Err(Error::InvalidInput("MCAR mechanism cannot have coefficients".into()));
                }
            }
            (MechanismKind::Mcar, Some(_)) => {
                return Err(Error::InvalidInput("MCAR mechanism cannot depend on covariates".into()))
            }
            (_, None) => {
                return Err(Error::InvalidInput(format!("{:?} mechanism needs covariates", self.kind)))
            }
            (MechanismKind::Mar, Some(src)) => {
                if masked.contains(&src) {
                    return Err(Error::InvalidInput(format!(
                        "MAR mechanism may only use observed variables, but {src:?} is masked"
                    )));
                }
            }
            (MechanismKind::Mnar, Some(src)) => {
                if !masked.contains(&src) {
                    return Err(Error::InvalidInput(format!(
                        "MNAR mechanism must depend on a masked variable, got {src:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Result of masking: the masked dataset and the true per-row observation
/// probability `P(M = 0 | c)`.
#[derive(Debug, Clone)]
pub struct Masked {
    pub dataset: Dataset,
    pub observation_prob: Vec<f64>,
    /// Intercept actually used (after rate calibration).
    pub intercept: f64,
}

/// Draws a missingness mask according to `spec`.
pub fn apply_missingness(ds: &Dataset, spec: &MechanismSpec, seed: u64) -> Result<Masked> {
    spec.validate()?;
    if ds.has_missingness() {
        return Err(Error::InvalidInput("apply_missingness expects a fully observed dataset".into()));
    }
    let map = CovariateMap::fit(&spec.covariates, ds)?;
    if spec.kind != MechanismKind::Mcar && spec.coefficients.len() != map.width() {
        return Err(Error::SchemaMismatch(format!(
            "mechanism has {} coefficients but covariates have width {}",
            spec.coefficients.len(),
            map.width()
        )));
    }
    let eta: Vec<f64> = (0..ds.n())
        .map(|i| map.row(ds, i).iter().zip(&spec.coefficients).map(|(c, b)| c * b).sum())
        .collect();
    let intercept = match spec.rate {
        None => spec.intercept,
        Some(rate) if spec.kind == MechanismKind::Mcar => logit_clamped(rate),
        Some(rate) => calibrate_intercept(&eta, rate)?,
    };
    let missing_prob: Vec<f64> = eta.iter().map(|e| sigmoid(intercept + e)).collect();
    let observation_prob: Vec<f64> = missing_prob.iter().map(|p| 1.0 - p).collect();
    let below: Vec<f64> = observation_prob.iter().copied().filter(|&p| p < spec.floor).collect();
    if !below.is_empty() {
        return Err(Error::Positivity {
            count: below.len(),
            floor: spec.floor,
            min: below.iter().copied().fold(f64::INFINITY, f64::min),
        });
    }
    let mut r = rng::stream(seed, "missingness");
    let mut mask = MissingnessMask::all_observed(ds.n());
    for (i, &p) in missing_prob.iter().enumerate() {
        let m = u8::from(r.random::<f64>() < p);
        match spec.target {
            MaskTarget::X2AndY => {
                mask.m2[i] = m;
                mask.my[i] = m;
            }
            MaskTarget::X2Only => mask.m2[i] = m,
            MaskTarget::YOnly => mask.my[i] = m,
        }
    }
    Ok(Masked { dataset: ds.with_mask(mask)?, observation_prob, intercept })
}

fn logit_clamped(rate: f64) -> f64 {
    if rate <= 0.0 {
        -40.0
    } else {
        logit(rate)
    }
}

fn calibrate_intercept(eta: &[f64], rate: f64) -> Result<f64> {
    if rate <= 0.0 {
        return Ok(-40.0);
    }
    let mean_at = |b: f64| eta.iter().map(|e| sigmoid(b + e)).sum::<f64>() / eta.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    if mean_at(lo) > rate || mean_at(hi) < rate {
        return Err(Error::InvalidInput(format!("cannot reach missingness rate {rate}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xor_truth_table_holds() {
        let ds = generate_logic_gate(Gate::Xor, 2000, 3).unwrap();
        for i in 0..ds.n() {
            if ds.x1().row(i)[0] == 1.0 && ds.x2().row(i)[0] == 1.0 {
                assert_eq!(ds.y()[i], 0);
            }
        }
    }

    #[test]
    fn gate_label_rates() {
        let rate = |g| {
            let ds = generate_logic_gate(g, 10_000, 0).unwrap();
            ds.y().iter().map(|&v| f64::from(v)).sum::<f64>() / ds.n() as f64
        };
        assert!((rate(Gate::And) - 0.25).abs() < 0.02);
        assert!((rate(Gate::Or) - 0.75).abs() < 0.02);
    }

    #[test]
    fn splits_are_80_10_10() {
        let s = assign_splits(1000, 1);
        let c = |t| s.iter().filter(|&&x| x == t).count();
        assert_eq!((c(Split::Train), c(Split::Val), c(Split::Test)), (800, 100, 100));
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(generate_logic_gate(Gate::And, 0, 0).is_err());
    }

    #[test]
    fn clustered_latent_rejects_bad_proportions() {
        let p = ClusteredLatent { p1: 0.7, p2: 0.5, dims: 2, clusters: 3, spread: 3.0 };
        assert!(generate_clustered_latent(&p, 100, 0).is_err());
        let p = ClusteredLatent { p1: -0.1, p2: 0.5, dims: 2, clusters: 3, spread: 3.0 };
        assert!(generate_clustered_latent(&p, 100, 0).is_err());
    }

    #[test]
    fn clustered_latent_shares_zc_block() {
        let p = ClusteredLatent { p1: 0.4, p2: 0.4, dims: 3, clusters: 4, spread: 3.0 };
        let ds = generate_clustered_latent(&p, 50, 7).unwrap();
        assert_eq!(ds.x1().cols(), 6);
        for i in 0..ds.n() {
            assert_eq!(&ds.x1().row(i)[..3], &ds.x2().row(i)[..3]);
        }
    }

    #[test]
    fn mar_gate_mechanism_probabilities() {
        let ds = generate_logic_gate(Gate::And, 10_000, 0).unwrap();
        let spec = MechanismSpec::binary(MechanismKind::Mar, MaskTarget::X2AndY, Variable::X1, 0.2, 0.8);
        let m = apply_missingness(&ds, &spec, 11).unwrap();
        for i in 0..ds.n() {
            let expected = if ds.x1().row(i)[0] == 0.0 { 0.8 } else { 0.2 };
            assert!((m.observation_prob[i] - expected).abs() < 1e-12);
        }
        let complete = m.dataset.complete_rows();
        let frac_x1 = complete.iter().filter(|&&i| ds.x1().row(i)[0] == 1.0).count() as f64 / complete.len() as f64;
        assert!((frac_x1 - 0.2).abs() < 0.02, "P(x1=1 | complete) = {frac_x1}");
        let missing = 1.0 - complete.len() as f64 / ds.n() as f64;
        assert!((missing - 0.5).abs() < 0.02);
        // x2 and y are masked together
        for i in 0..ds.n() {
            assert_eq!(m.dataset.mask().m2[i], m.dataset.mask().my[i]);
            assert_eq!(m.dataset.mask().m1[i], 0);
        }
    }

    #[test]
    fn mcar_propensity_is_constant() {
        let ds = generate_logic_gate(Gate::Or, 5000, 2).unwrap();
        let m = apply_missingness(&ds, &MechanismSpec::mcar(0.5, MaskTarget::X2AndY), 3).unwrap();
        assert!(m.observation_prob.iter().all(|&p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn mnar_depends_on_masked_variable() {
        let ds = generate_logic_gate(Gate::And, 10_000, 0).unwrap();
        let spec = MechanismSpec::binary(MechanismKind::Mnar, MaskTarget::X2AndY, Variable::X2, 0.2, 0.8);
        let m = apply_missingness(&ds, &spec, 5).unwrap();
        let missing_given = |v: f64| {
            let rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.x2().row(i)[0] == v).collect();
            rows.iter().filter(|&&i| !m.dataset.is_complete(i)).count() as f64 / rows.len() as f64
        };
        assert!((missing_given(1.0) - 0.8).abs() < 0.03);
        assert!((missing_given(0.0) - 0.2).abs() < 0.03);
    }

    #[test]
    fn kind_and_covariates_must_agree() {
        let mar_on_x2 = MechanismSpec::binary(MechanismKind::Mar, MaskTarget::X2AndY, Variable::X2, 0.2, 0.8);
        assert!(mar_on_x2.validate().is_err());
        let mnar_on_x1 = MechanismSpec::binary(MechanismKind::Mnar, MaskTarget::X2AndY, Variable::X1, 0.2, 0.8);
        assert!(mnar_on_x1.validate().is_err());
    }

    #[test]
    fn positivity_floor_rejects_extreme_mechanism() {
        let ds = generate_logic_gate(Gate::And, 100, 0).unwrap();
        let spec = MechanismSpec::binary(MechanismKind::Mar, MaskTarget::X2AndY, Variable::X1, 0.2, 0.995);
        match apply_missingness(&ds, &spec, 0) {
            Err(Error::Positivity { count, .. }) => assert!(count > 0),
            other => panic!("expected positivity error, got {other:?}"),
        }
    }

    #[test]
    fn rate_calibration_hits_target() {
        let p = ClusteredLatent { p1: 0.3, p2: 0.3, dims: 2, clusters: 3, spread: 3.0 };
        let ds = generate_clustered_latent(&p, 6000, 4).unwrap();
        let spec = MechanismSpec {
            kind: MechanismKind::Mar,
            target: MaskTarget::X2AndY,
            covariates: Covariates::Columns { source: Variable::X1, columns: vec![] },
            coefficients: vec![0.3; 4],
            intercept: 0.0,
            rate: Some(0.5),
            floor: 0.01,
        };
        let m = apply_missingness(&ds, &spec, 9).unwrap();
        let mean_missing = 1.0 - m.observation_prob.iter().sum::<f64>() / ds.n() as f64;
        assert!((mean_missing - 0.5).abs() < 1e-9);
        let realized = 1.0 - m.dataset.complete_rows().len() as f64 / ds.n() as f64;
        assert!((realized - 0.5).abs() < 0.02);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(-0.125), "-0.125");
        assert_eq!(fmt_sig9(std::f64::consts::PI), "3.14159265");
        assert_eq!(fmt_sig9(1.0e-7), "1e-7");
        assert_eq!(fmt_sig9(123456789.0), "123456789");
    }

    #[test]
    fn csv_round_trip_preserves_dataset() {
        let p = ClusteredLatent { p1: 0.4, p2: 0.2, dims: 2, clusters: 3, spread: 3.0 };
        let ds = generate_clustered_latent(&p, 40, 1).unwrap();
        let spec = MechanismSpec::mcar(0.3, MaskTarget::X2AndY);
        let ds = apply_missingness(&ds, &spec, 2).unwrap().dataset;
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header, "x1_0,x1_1,x1_2,x1_3,x2_0,x2_1,x2_2,x2_3,y,m1,m2,my,split");
        let back = Dataset::read_csv(std::io::Cursor::new(buf), ds.seed()).unwrap();
        assert_eq!(back.y(), ds.y());
        assert_eq!(back.mask(), ds.mask());
        assert_eq!(back.split(), ds.split());
        for (a, b) in back.x1().values().iter().zip(ds.x1().values()) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-300));
        }
    }
}
