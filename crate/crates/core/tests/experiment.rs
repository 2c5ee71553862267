use icym2i::data::{Gate, MaskTarget, MechanismKind, MechanismSpec, Variable};
use icym2i::data::Covariates;
use icym2i::experiment::{
    compare_to_reference, run_experiment, ArmKind, ExperimentConfig, ExperimentReport, GeneratorSpec, PidSettings,
    PropensitySource, ReferenceRow, Tolerances,
};
use icym2i::predictors::MlpConfig;

fn small(gate: Gate, mechanism: Option<MechanismSpec>, arms: Vec<ArmKind>) -> ExperimentConfig {
    let x1 = Covariates::Columns { source: Variable::X1, columns: vec![0] };
    ExperimentConfig {
        name: "small".into(),
        n: 1500,
        seeds: vec![3],
        arms,
        blocks: vec![GeneratorSpec::LogicGate { gate }],
        mechanism,
        outcome_link: None,
        propensity: PropensitySource::Fitted { covariates: x1 },
        floor: 0.01,
        model: MlpConfig { epochs: 15, ..MlpConfig::default() },
        pid: PidSettings::default(),
        batch_size: 30,
    }
}

fn mar() -> Option<MechanismSpec> {
    Some(MechanismSpec::binary(MechanismKind::Mar, MaskTarget::X2AndY, Variable::X1, 0.8, 0.2))
}

fn smoke() -> ExperimentConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/smoke.toml");
    ExperimentConfig::from_toml(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn shipped_config_parses() {
    let cfg = smoke();
    assert_eq!(cfg.blocks.len(), 2);
    assert_eq!(cfg.arms, vec![ArmKind::Oracle, ArmKind::Observed, ArmKind::Icym2i]);
}

#[test]
fn reports_are_byte_identical_across_runs_and_round_trip() {
    let cfg = small(Gate::And, mar(), vec![ArmKind::Oracle, ArmKind::Observed, ArmKind::Icym2i]);
    let a = run_experiment(&cfg, 1).unwrap();
    let b = run_experiment(&cfg, 0).unwrap();
    assert!(a.complete, "{:?}", a.failures);
    let json = a.to_json().unwrap();
    assert_eq!(json, b.to_json().unwrap());
    assert_eq!(ExperimentReport::from_json(&json).unwrap().to_json().unwrap(), json);

    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    a.write(d1.path()).unwrap();
    b.write(d2.path()).unwrap();
    for f in ["report.json", "report.txt"] {
        assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap());
    }
}

#[test]
fn adding_an_arm_leaves_other_arms_untouched() {
    let two = run_experiment(&small(Gate::Or, mar(), vec![ArmKind::Oracle, ArmKind::Observed]), 1).unwrap();
    let all = run_experiment(&small(Gate::Or, mar(), ArmKind::ALL.to_vec()), 1).unwrap();
    for row in &two.metrics {
        let twin = all
            .metrics
            .iter()
            .find(|r| r.arm == row.arm && r.modality == row.modality && r.seed == row.seed)
            .unwrap();
        assert_eq!(row, twin);
    }
    for row in &two.pid {
        let twin = all.pid.iter().find(|r| r.arm == row.arm).unwrap();
        assert_eq!(row, twin);
    }
}

#[test]
fn without_missingness_every_arm_matches_the_oracle() {
    let cfg = small(Gate::And, None, vec![ArmKind::Oracle, ArmKind::Observed, ArmKind::Icym2i]);
    let r = run_experiment(&cfg, 1).unwrap();
    for row in r.metrics.iter().filter(|r| r.arm != ArmKind::Oracle) {
        let oracle = r.metrics.iter().find(|o| o.arm == ArmKind::Oracle && o.modality == row.modality).unwrap();
        assert!((row.auroc - oracle.auroc).abs() < 1e-9, "{row:?} vs {oracle:?}");
    }
    let oracle = r.pid.iter().find(|p| p.arm == ArmKind::Oracle).unwrap();
    for p in &r.pid {
        for (a, b) in p.components().iter().zip(oracle.components()) {
            assert!((a - b).abs() < 1e-6, "{p:?}");
        }
    }
}

#[test]
fn oracle_arm_ignores_the_mask() {
    let arms = vec![ArmKind::Oracle];
    let plain = run_experiment(&small(Gate::Xor, None, arms.clone()), 1).unwrap();
    let masked = run_experiment(&small(Gate::Xor, mar(), arms), 1).unwrap();
    assert_eq!(plain.metrics, masked.metrics);
    assert_eq!(plain.pid, masked.pid);
}

#[test]
fn comparison_flags_exactly_the_perturbed_cell() {
    let cfg = small(Gate::And, mar(), vec![ArmKind::Oracle, ArmKind::Icym2i]);
    let report = run_experiment(&cfg, 1).unwrap();
    let tol = 0.05;
    let mut refs: Vec<ReferenceRow> = report
        .summary
        .iter()
        .map(|c| ReferenceRow { block: c.block.clone(), arm: c.arm, column: c.column.clone(), value: c.mean })
        .collect();
    assert!(compare_to_reference(&report, &refs, &Tolerances::new(tol)).unwrap().passed());
    refs[4].value += 2.0 * tol;
    let cmp = compare_to_reference(&report, &refs, &Tolerances::new(tol)).unwrap();
    let bad: Vec<_> = cmp.failures().collect();
    assert_eq!(bad.len(), 1);
    assert_eq!(bad[0].column, refs[4].column);

    // A rule loosening that cell clears it.
    let rule = format!("{}:{}:{}=0.5", refs[4].block, refs[4].arm, refs[4].column);
    assert!(compare_to_reference(&report, &refs, &Tolerances::new(tol).rule(&rule).unwrap()).unwrap().passed());

    refs.push(ReferenceRow { block: "NAND".into(), arm: ArmKind::Oracle, column: "X1".into(), value: 0.5 });
    assert!(compare_to_reference(&report, &refs, &Tolerances::new(tol)).is_err());
}

#[test]
fn reference_tables_cover_every_cell() {
    for t in ["table1", "table4", "table5"] {
        let path = format!("{}/data/{t}_reference.csv", env!("CARGO_MANIFEST_DIR"));
        let rows = ReferenceRow::read_csv(std::io::BufReader::new(std::fs::File::open(path).unwrap())).unwrap();
        assert_eq!(rows.len(), 3 * 3 * 7, "{t}");
    }
}
