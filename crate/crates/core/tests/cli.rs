use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_icym2i"))
}

fn smoke() -> String {
    format!("{}/configs/smoke.toml", env!("CARGO_MANIFEST_DIR"))
}

fn code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&mut bin()), 1);
    assert_eq!(code(bin().args(["run", "--preset", "table9"])), 1);
    assert_eq!(code(bin().args(["run", "--preset", "table1", "--arms", "bogus"])), 1);
    assert_eq!(code(bin().args(["report", "--input", "/nonexistent/report.json"])), 1);
    assert_eq!(code(bin().arg("--help")), 0);
}

fn write_reference(path: &Path, report: &icym2i::experiment::ExperimentReport, bump: f64) {
    let mut s = String::from("block,arm,column,value\n");
    for (k, c) in report.summary.iter().enumerate() {
        let v = if k == 0 { c.mean + bump } else { c.mean };
        s.push_str(&format!("{},{},{},{v}\n", c.block, c.arm, c.column));
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn run_report_compare_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = bin().args(["run", "--config", &smoke(), "--seed", "2", "--out"]).arg(&out).output().unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    let json = out.join("report.json");
    let report = icym2i::experiment::ExperimentReport::from_json(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report.config.seeds, vec![2]);

    let rendered = bin().args(["report", "--input"]).arg(&json).output().unwrap();
    assert_eq!(rendered.status.code(), Some(0));
    assert_eq!(String::from_utf8(rendered.stdout).unwrap(), std::fs::read_to_string(out.join("report.txt")).unwrap());

    let reference = dir.path().join("ref.csv");
    write_reference(&reference, &report, 0.0);
    assert_eq!(code(bin().args(["compare", "--report"]).arg(&json).arg("--reference").arg(&reference)), 0);
    write_reference(&reference, &report, 0.2);
    assert_eq!(code(bin().args(["compare", "--report"]).arg(&json).arg("--reference").arg(&reference)), 3);
    assert_eq!(
        code(bin().args(["compare", "--rule", "*:*:*=0.5", "--report"]).arg(&json).arg("--reference").arg(&reference)),
        0
    );
}

#[test]
fn generate_writes_one_csv_per_block_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin().args(["generate", "--config", &smoke(), "--seed", "1,2", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(status.status.code(), Some(0));
    let files = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(files, 4);
}
