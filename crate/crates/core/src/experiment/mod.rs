//! Config-driven experiment runner.
//!
//! A run is a grid of blocks (one data generator each) times seeds. Every
//! (block, seed) task generates data, masks it, fits or looks up the
//! propensity, trains one classifier per modality set for each training
//! regime the requested arms need, evaluates every arm and solves one PID
//! per PID-capable arm. Tasks are independent and run on [`crate::par::map`].

mod presets;
mod report;

pub use presets::{preset, PRESETS};
pub use report::{
    compare_to_reference, summarize, CellVerdict, Comparison, ExperimentReport, Failure, MetricRow, PidRow,
    ReferenceRow, RmseRow, SummaryCell, Tolerances, PID_COLUMNS,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    apply_missingness, generate_clustered_latent, generate_logic_gate, ClusteredLatent, CovariateMap, Covariates,
    Dataset, Gate, MechanismSpec, Split,
};
use crate::infotheory::{ipw_mutual_info, Quantizer};
use crate::metrics::{Arm, MetricReport};
use crate::pid::{
    bin_modality, pid_icym2i, pid_oracle, MarginalPair, OracleConfig, PIDResult, SolverConfig,
};
use crate::predictors::{train, Classifier, InputSchema, Labelled, MlpConfig};
use crate::propensity::{fit_propensity, ipw_weights, mi_correction_weights, Normalization, Propensity, TruePropensity};
use crate::rng::derive_seed;
use crate::{par, Error, Result};

/// Experiment arms: the three PID arms plus the two single-correction cells
/// of the train/eval correction grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArmKind {
    Oracle,
    Observed,
    Icym2i,
    TrainOnlyCorrected,
    EvalOnlyCorrected,
}

/// Which rows and weights a classifier is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Regime {
    Full,
    Complete,
    CompleteIpw,
}

impl ArmKind {
    pub const ALL: [ArmKind; 5] = [
        ArmKind::Oracle,
        ArmKind::Observed,
        ArmKind::Icym2i,
        ArmKind::TrainOnlyCorrected,
        ArmKind::EvalOnlyCorrected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArmKind::Oracle => "oracle",
            ArmKind::Observed => "observed",
            ArmKind::Icym2i => "icym2i",
            ArmKind::TrainOnlyCorrected => "train-only-corrected",
            ArmKind::EvalOnlyCorrected => "eval-only-corrected",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ArmKind::Oracle => "Oracle",
            ArmKind::Observed => "Observed",
            ArmKind::Icym2i => "ICYM2I",
            ArmKind::TrainOnlyCorrected => "Train-corrected",
            ArmKind::EvalOnlyCorrected => "Eval-corrected",
        }
    }

    fn regime(self) -> Regime {
        match self {
            ArmKind::Oracle => Regime::Full,
            ArmKind::Observed | ArmKind::EvalOnlyCorrected => Regime::Complete,
            ArmKind::Icym2i | ArmKind::TrainOnlyCorrected => Regime::CompleteIpw,
        }
    }

    fn eval_weighted(self) -> bool {
        matches!(self, ArmKind::Icym2i | ArmKind::EvalOnlyCorrected)
    }

    fn needs_propensity(self) -> bool {
        !matches!(self, ArmKind::Oracle | ArmKind::Observed)
    }

    /// The PID arm, for arms that get a decomposition.
    pub fn pid_arm(self) -> Option<Arm> {
        match self {
            ArmKind::Oracle => Some(Arm::Oracle),
            ArmKind::Observed => Some(Arm::Observed),
            ArmKind::Icym2i => Some(Arm::Icym2i),
            _ => None,
        }
    }

    /// The arm whose evaluation distribution this arm's metrics describe.
    fn metric_arm(self) -> Arm {
        match self {
            ArmKind::Oracle => Arm::Oracle,
            ArmKind::Observed | ArmKind::TrainOnlyCorrected => Arm::Observed,
            ArmKind::Icym2i | ArmKind::EvalOnlyCorrected => Arm::Icym2i,
        }
    }
}

impl fmt::Display for ArmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        ArmKind::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown arm `{s}`")))
    }
}

/// One block of the experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    LogicGate { gate: Gate },
    ClusteredLatent(ClusteredLatent),
}

impl GeneratorSpec {
    pub fn label(&self) -> String {
        match self {
            GeneratorSpec::LogicGate { gate } => gate.name().to_string(),
            GeneratorSpec::ClusteredLatent(c) => format!("p1={:.2}/p2={:.2}", c.p1, c.p2),
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            GeneratorSpec::LogicGate { gate } => generate_logic_gate(*gate, n, seed),
            GeneratorSpec::ClusteredLatent(c) => generate_clustered_latent(c, n, seed),
        }
    }

    fn discrete(&self) -> bool {
        matches!(self, GeneratorSpec::LogicGate { .. })
    }
}

/// Where IPW weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PropensitySource {
    /// Logistic model fit on the masked data with these covariates.
    Fitted { covariates: Covariates },
    /// The mechanism's own probabilities.
    True,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PidSolver {
    Estimator,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidSettings {
    pub enabled: bool,
    pub solver: PidSolver,
    /// Bins per continuous modality.
    pub quantizer_k: usize,
    pub estimator: SolverConfig,
}

impl Default for PidSettings {
    fn default() -> Self {
        Self { enabled: true, solver: PidSolver::Estimator, quantizer_k: 4, estimator: SolverConfig::default() }
    }
}

fn default_batch_size() -> usize {
    100
}

fn default_floor() -> f64 {
    crate::data::DEFAULT_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// Rows per generated dataset.
    pub n: usize,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmKind>,
    pub blocks: Vec<GeneratorSpec>,
    #[serde(default)]
    pub mechanism: Option<MechanismSpec>,
    /// For cluster-covariate mechanisms without coefficients: per-cluster
    /// coefficients `strength * (mean(y | cluster j) - mean(y))`, so rows in
    /// high-outcome regions of `x1` go missing more often.
    #[serde(default)]
    pub outcome_link: Option<f64>,
    pub propensity: PropensitySource,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default)]
    pub model: MlpConfig,
    #[serde(default)]
    pub pid: PidSettings,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::InvalidInput("config needs at least one arm".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidInput("config needs at least one seed".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::InvalidInput("config needs at least one block".into()));
        }
        if self.n < 20 {
            return Err(Error::InvalidInput(format!("n = {} is too small", self.n)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be positive".into()));
        }
        if !(self.floor > 0.0 && self.floor <= 0.5) {
            return Err(Error::InvalidInput(format!("floor {} not in (0, 0.5]", self.floor)));
        }
        let mut labels: Vec<String> = self.blocks.iter().map(GeneratorSpec::label).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.blocks.len() {
            return Err(Error::InvalidInput("block labels must be unique".into()));
        }
        for b in &self.blocks {
            if let GeneratorSpec::ClusteredLatent(c) = b {
                c.validate()?;
            }
        }
        if let Some(m) = &self.mechanism {
            m.validate()?;
        }
        if let Some(s) = self.outcome_link {
            let clusters = matches!(
                self.mechanism.as_ref().map(|m| &m.covariates),
                Some(Covariates::Clusters { .. })
            );
            if !s.is_finite() || !clusters {
                return Err(Error::InvalidInput("outcome_link needs a finite strength and cluster covariates".into()));
            }
        }
        if self.pid.enabled && self.pid.quantizer_k < 2 {
            return Err(Error::InvalidInput("quantizer_k must be at least 2".into()));
        }
        self.model.validate()
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Fills in outcome-linked cluster coefficients when requested.
fn resolve_mechanism(cfg: &ExperimentConfig, full: &Dataset) -> Result<Option<MechanismSpec>> {
    let Some(spec) = &cfg.mechanism else { return Ok(None) };
    let (Some(strength), true) = (cfg.outcome_link, spec.coefficients.is_empty()) else {
        return Ok(Some(spec.clone()));
    };
    let map = CovariateMap::fit(&spec.covariates, full)?;
    let k = map.width();
    let (mut pos, mut count) = (vec![0.0; k], vec![0.0; k]);
    for i in 0..full.n() {
        let row = map.row(full, i);
        let j = row.iter().position(|&v| v == 1.0).unwrap_or(0);
        count[j] += 1.0;
        pos[j] += f64::from(full.y()[i]);
    }
    let overall = pos.iter().sum::<f64>() / count.iter().sum::<f64>();
    let coefficients = (0..k)
        .map(|j| if count[j] > 0.0 { strength * (pos[j] / count[j] - overall) } else { 0.0 })
        .collect();
    Ok(Some(MechanismSpec { coefficients, ..spec.clone() }))
}

struct TaskOutput {
    metrics: Vec<MetricRow>,
    pid: Vec<PidRow>,
    failures: Vec<Failure>,
}

fn stage<T>(r: Result<T>, what: &str) -> Result<T> {
    r.map_err(|e| e.context(what.to_string()))
}

/// Rows, labels and weights for one training regime.
struct TrainingData {
    rows: Vec<usize>,
    w: Vec<f64>,
    val_rows: Vec<usize>,
    val_w: Vec<f64>,
}

fn training_data(regime: Regime, full: &Dataset, ds: &Dataset, prop: Option<&dyn Propensity>) -> Result<TrainingData> {
    Ok(match regime {
        Regime::Full => {
            let rows = full.rows_in(Split::Train);
            let val_rows = full.rows_in(Split::Val);
            TrainingData { w: vec![1.0; rows.len()], val_w: vec![1.0; val_rows.len()], rows, val_rows }
        }
        Regime::Complete => {
            let rows = ds.complete_rows_in(Split::Train);
            let val_rows = ds.complete_rows_in(Split::Val);
            TrainingData { w: vec![1.0; rows.len()], val_w: vec![1.0; val_rows.len()], rows, val_rows }
        }
        Regime::CompleteIpw => {
            let prop = prop.ok_or_else(|| Error::InvalidInput("corrected training needs a propensity".into()))?;
            let rows = ds.complete_rows_in(Split::Train);
            let val_rows = ds.complete_rows_in(Split::Val);
            let w = ipw_weights(prop, ds, &rows, Normalization::MeanOne)?.w;
            let val_w = ipw_weights(prop, ds, &val_rows, Normalization::None)?.w;
            TrainingData { rows, w, val_rows, val_w }
        }
    })
}

fn fit_models(
    cfg: &ExperimentConfig,
    data: &TrainingData,
    ds: &Dataset,
    seed: u64,
    block: &str,
) -> Result<Vec<Classifier>> {
    if data.rows.is_empty() {
        return Err(Error::InsufficientRows { needed: 1, have: 0 });
    }
    let y: Vec<u8> = data.rows.iter().map(|&i| ds.y()[i]).collect();
    let yv: Vec<u8> = data.val_rows.iter().map(|&i| ds.y()[i]).collect();
    InputSchema::ALL
        .iter()
        .map(|&schema| {
            let x = schema.features(ds, &data.rows);
            let xv = schema.features(ds, &data.val_rows);
            let val = (!data.val_rows.is_empty()).then_some(Labelled { x: &xv, y: &yv, w: &data.val_w });
            let model_seed = derive_seed(seed, &format!("model/{block}/{}", schema.name()));
            train(&cfg.model, Labelled { x: &x, y: &y, w: &data.w }, val, model_seed)
                .map_err(|e| e.context(format!("training {} model", schema.name())))
        })
        .collect()
}

fn run_task(cfg: &ExperimentConfig, block: &GeneratorSpec, seed: u64) -> TaskOutput {
    let label = block.label();
    let mut out = TaskOutput { metrics: Vec::new(), pid: Vec::new(), failures: Vec::new() };
    let fail = |out: &mut TaskOutput, arm: Option<ArmKind>, stage: &str, e: Error| {
        log::error!("block {label} seed {seed} arm {arm:?} stage {stage}: {e}");
        out.failures.push(Failure {
            block: label.clone(),
            seed,
            arm,
            stage: stage.to_string(),
            message: e.to_string(),
            numerical: is_numerical(&e),
        });
    };

    // shared stages: a failure here takes out every arm of the task
    let shared = (|| -> Result<_> {
        let full = stage(block.generate(cfg.n, derive_seed(seed, &format!("data/{label}"))), "generate")?;
        let spec = stage(resolve_mechanism(cfg, &full), "mask")?;
        let (ds, true_probs) = match &spec {
            Some(spec) => {
                let m = stage(apply_missingness(&full, spec, derive_seed(seed, &format!("mask/{label}"))), "mask")?;
                (m.dataset, m.observation_prob)
            }
            None => (full.clone(), vec![1.0; full.n()]),
        };
        Ok((full, ds, true_probs))
    })();
    let (full, ds, true_probs) = match shared {
        Ok(v) => v,
        Err(e) => {
            fail(&mut out, None, "data", e);
            return out;
        }
    };

    let mut prop: Option<Box<dyn Propensity>> = None;
    if cfg.arms.iter().any(|a| a.needs_propensity()) {
        let fitted: Result<Box<dyn Propensity>> = if !ds.has_missingness() {
            Ok(Box::new(TruePropensity { probs: vec![1.0; ds.n()], floor: cfg.floor }))
        } else {
            match &cfg.propensity {
                PropensitySource::True => Ok(Box::new(TruePropensity { probs: true_probs.clone(), floor: cfg.floor })),
                PropensitySource::Fitted { covariates } => {
                    fit_propensity(&ds, covariates, cfg.floor).map(|m| Box::new(m) as Box<dyn Propensity>)
                }
            }
        };
        match fitted {
            Ok(p) => prop = Some(p),
            Err(e) => fail(&mut out, None, "propensity", e),
        }
    }

    let mut models: BTreeMap<Regime, Vec<Classifier>> = BTreeMap::new();
    let mut regime_failed: BTreeSet<Regime> = BTreeSet::new();
    for &arm in &cfg.arms {
        if arm.needs_propensity() && prop.is_none() {
            continue;
        }
        let regime = arm.regime();
        if models.contains_key(&regime) || regime_failed.contains(&regime) {
            continue;
        }
        let source = if regime == Regime::Full { &full } else { &ds };
        let trained = training_data(regime, &full, &ds, prop.as_deref())
            .and_then(|d| fit_models(cfg, &d, source, seed, &label));
        match trained {
            Ok(m) => {
                models.insert(regime, m);
            }
            Err(e) => {
                regime_failed.insert(regime);
                fail(&mut out, Some(arm), "train", e);
            }
        }
    }

    for &arm in &cfg.arms {
        let Some(clfs) = models.get(&arm.regime()) else { continue };
        let eval_seed = derive_seed(seed, &format!("batches/{label}"));
        match evaluate_arm(cfg, arm, &full, &ds, prop.as_deref(), clfs, eval_seed) {
            Ok(rows) => out.metrics.extend(rows.into_iter().map(|(schema, r)| MetricRow {
                block: label.clone(),
                arm,
                seed,
                modality: schema.name().to_string(),
                auroc: r.auroc,
                brier: r.brier,
                n_effective: r.n_effective,
                batch_sd: r.batch_sd,
            })),
            Err(e) => fail(&mut out, Some(arm), "evaluate", e),
        }
        if cfg.pid.enabled && arm.pid_arm().is_some() {
            let pid_seed = derive_seed(seed, &format!("pid/{label}"));
            match pid_for_arm(cfg, block, arm, &full, &ds, prop.as_deref(), clfs, pid_seed) {
                Ok(r) => out.pid.push(PidRow::new(&label, arm, seed, r)),
                Err(e) => fail(&mut out, Some(arm), "pid", e),
            }
        }
    }
    out
}

fn evaluate_arm(
    cfg: &ExperimentConfig,
    arm: ArmKind,
    full: &Dataset,
    ds: &Dataset,
    prop: Option<&dyn Propensity>,
    clfs: &[Classifier],
    seed: u64,
) -> Result<Vec<(InputSchema, MetricReport)>> {
    let (source, rows) = match arm {
        ArmKind::Oracle => (full, full.rows_in(Split::Test)),
        _ => (ds, ds.complete_rows_in(Split::Test)),
    };
    let weights = if arm.eval_weighted() {
        let prop = prop.ok_or_else(|| Error::InvalidInput("corrected evaluation needs a propensity".into()))?;
        Some(ipw_weights(prop, ds, &rows, Normalization::None)?.w)
    } else {
        None
    };
    let labels: Vec<u8> = rows.iter().map(|&i| source.y()[i]).collect();
    InputSchema::ALL
        .iter()
        .zip(clfs)
        .map(|(&schema, clf)| {
            let scores = clf.predict_batch(&schema.features(source, &rows))?;
            let r = MetricReport::evaluate(arm.metric_arm(), &scores, &labels, weights.as_deref(), cfg.batch_size, seed)
                .map_err(|e| e.context(format!("{} metrics", schema.name())))?;
            Ok((schema, r))
        })
        .collect()
}

/// Model-based PID for one arm: pairwise targets from the unimodal models'
/// probabilities over the arm's rows, total information from the multimodal
/// model (with stabilized weights on the corrected arm).
#[allow(clippy::too_many_arguments)]
fn pid_for_arm(
    cfg: &ExperimentConfig,
    block: &GeneratorSpec,
    arm: ArmKind,
    full: &Dataset,
    ds: &Dataset,
    prop: Option<&dyn Propensity>,
    clfs: &[Classifier],
    seed: u64,
) -> Result<PIDResult> {
    let (source, rows) = match arm {
        ArmKind::Oracle => (full, (0..full.n()).collect::<Vec<_>>()),
        _ => (ds, ds.complete_rows()),
    };
    if rows.is_empty() {
        return Err(Error::InsufficientRows { needed: 1, have: 0 });
    }
    let quantizers = if block.discrete() {
        (None, None)
    } else {
        let k = cfg.pid.quantizer_k;
        (
            Some(Quantizer::fit(&source.x1().select(&rows), k, derive_seed(seed, "quantizer/x1"))?),
            Some(Quantizer::fit(&source.x2().select(&rows), k, derive_seed(seed, "quantizer/x2"))?),
        )
    };
    let (b1, n1) = bin_modality(source, false, quantizers.0.as_ref(), &rows)?;
    let (b2, n2) = bin_modality(source, true, quantizers.1.as_ref(), &rows)?;
    let probs: Vec<Vec<f64>> = InputSchema::ALL
        .iter()
        .zip(clfs)
        .map(|(&schema, clf)| clf.predict_batch(&schema.features(source, &rows)))
        .collect::<Result<_>>()?;
    let (target_w, mi_w) = if arm == ArmKind::Icym2i {
        let prop = prop.ok_or_else(|| Error::InvalidInput("icym2i arm needs a propensity".into()))?;
        (Some(ipw_weights(prop, ds, &rows, Normalization::None)?.w), mi_correction_weights(prop, ds, &rows)?.w)
    } else {
        (None, vec![1.0; rows.len()])
    };
    let targets = MarginalPair::from_predictions(n1, n2, &b1, &b2, &probs[0], &probs[1], target_w.as_deref())?;
    let total = ipw_mutual_info(&probs[2], &mi_w)?.bits;
    match cfg.pid.solver {
        PidSolver::Estimator => pid_icym2i(&targets, total, &SolverConfig { seed, ..cfg.pid.estimator.clone() }),
        PidSolver::Oracle => pid_oracle(&targets, total, &OracleConfig { seed, ..OracleConfig::default() }),
    }
}

fn is_numerical(e: &Error) -> bool {
    matches!(
        e.root(),
        Error::Numerical(_)
            | Error::NonFiniteLoss { .. }
            | Error::Infeasible(_)
            | Error::Positivity { .. }
            | Error::DegenerateMechanism(_)
            | Error::UndefinedMetric(_)
            | Error::InsufficientRows { .. }
    )
}

/// Runs every (block, seed) task, `jobs` at a time, and assembles the report.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let tasks: Vec<(usize, u64)> =
        (0..cfg.blocks.len()).flat_map(|b| cfg.seeds.iter().map(move |&s| (b, s))).collect();
    let outputs = par::map(tasks, jobs, |(b, seed)| {
        log::info!("running block {} seed {seed}", cfg.blocks[b].label());
        run_task(cfg, &cfg.blocks[b], seed)
    });
    let mut metrics = Vec::new();
    let mut pid = Vec::new();
    let mut failures = Vec::new();
    for o in outputs {
        metrics.extend(o.metrics);
        pid.extend(o.pid);
        failures.extend(o.failures);
    }
    Ok(ExperimentReport::assemble(cfg.clone(), metrics, pid, failures))
}
