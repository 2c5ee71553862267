//! Built-in configurations for the logic-gate and clustered-latent tables.

use super::{ArmKind, ExperimentConfig, GeneratorSpec, PidSettings, PropensitySource};
use crate::data::{ClusteredLatent, Covariates, Gate, MaskTarget, MechanismKind, MechanismSpec, Variable, DEFAULT_FLOOR};
use crate::predictors::MlpConfig;
use crate::{Error, Result};

pub const PRESETS: [&str; 4] = ["table1", "table2", "table4", "table5"];

fn gates() -> Vec<GeneratorSpec> {
    [Gate::And, Gate::Or, Gate::Xor].into_iter().map(|gate| GeneratorSpec::LogicGate { gate }).collect()
}

fn x1_column() -> Covariates {
    Covariates::Columns { source: Variable::X1, columns: vec![0] }
}

fn gate_config(name: &str, mechanism: MechanismSpec, covariates: Covariates) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        n: 10_000,
        seeds: (1..=8).collect(),
        arms: vec![ArmKind::Oracle, ArmKind::Observed, ArmKind::Icym2i],
        blocks: gates(),
        mechanism: Some(mechanism),
        outcome_link: None,
        propensity: PropensitySource::Fitted { covariates },
        floor: DEFAULT_FLOOR,
        model: MlpConfig::default(),
        pid: PidSettings::default(),
        batch_size: 100,
    }
}

/// Gates under MAR: `x2` and `y` are observed with probability `0.6 x1 + 0.2`.
pub fn table1() -> ExperimentConfig {
    gate_config(
        "table1",
        MechanismSpec::binary(MechanismKind::Mar, MaskTarget::X2AndY, Variable::X1, 0.8, 0.2),
        x1_column(),
    )
}

/// Gates under 50% MCAR, with an intercept-only propensity model.
pub fn table4() -> ExperimentConfig {
    gate_config("table4", MechanismSpec::mcar(0.5, MaskTarget::X2AndY), Covariates::None)
}

/// Gates under MNAR on `x2`; the analyst's propensity model only sees `x1`.
pub fn table5() -> ExperimentConfig {
    gate_config(
        "table5",
        MechanismSpec::binary(MechanismKind::Mnar, MaskTarget::X2AndY, Variable::X2, 0.8, 0.2),
        x1_column(),
    )
}

/// Clustered-latent sweep over `(p1, p2)` on a 0.25 grid with 50% MAR
/// missingness of `x2` driven by k-means clusters of `x1`.
pub fn table2() -> ExperimentConfig {
    let mut blocks = Vec::new();
    for i in 0..=4 {
        for j in 0..=(4 - i) {
            blocks.push(GeneratorSpec::ClusteredLatent(ClusteredLatent {
                p1: f64::from(i) * 0.25,
                p2: f64::from(j) * 0.25,
                dims: 2,
                clusters: 4,
                spread: 3.0,
            }));
        }
    }
    ExperimentConfig {
        name: "table2".into(),
        n: 10_000,
        seeds: (1..=6).collect(),
        arms: ArmKind::ALL.to_vec(),
        blocks,
        mechanism: Some(MechanismSpec {
            kind: MechanismKind::Mar,
            target: MaskTarget::X2Only,
            covariates: Covariates::Clusters { source: Variable::X1, k: 100, seed: 7 },
            coefficients: Vec::new(),
            intercept: 0.0,
            rate: Some(0.5),
            floor: DEFAULT_FLOOR,
        }),
        outcome_link: Some(4.0),
        propensity: PropensitySource::True,
        floor: DEFAULT_FLOOR,
        model: MlpConfig::default(),
        pid: PidSettings { enabled: false, ..PidSettings::default() },
        batch_size: 100,
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "table1" => Ok(table1()),
        "table2" => Ok(table2()),
        "table4" => Ok(table4()),
        "table5" => Ok(table5()),
        other => Err(Error::InvalidInput(format!("unknown preset `{other}` (expected one of {PRESETS:?})"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn clustered_grid_has_fifteen_settings() {
        let cfg = table2();
        assert_eq!(cfg.blocks.len(), 15);
        assert!(cfg.blocks.iter().all(|b| match b {
            GeneratorSpec::ClusteredLatent(c) => c.p1 + c.p2 <= 1.0,
            _ => false,
        }));
    }
}
