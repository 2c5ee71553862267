use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use icym2i::data::apply_missingness;
use icym2i::experiment::{compare_to_reference, preset, ArmKind, ExperimentConfig, ExperimentReport, ReferenceRow, Tolerances};
use icym2i::rng::derive_seed;
use icym2i::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_COMPARISON: u8 = 3;

#[derive(Parser)]
#[command(name = "icym2i", version, about = "Missingness-corrected modality performance and information decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: table1, table2, table4 or table5.
    #[arg(long)]
    preset: Option<String>,
    /// Override the config's seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Override the config's arms.
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the masked datasets a config would generate as CSV.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run an experiment and write report.json / report.txt.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads (0 = all cores).
        #[arg(long, env = "ICYM2I_JOBS", default_value_t = 1)]
        jobs: usize,
    },
    /// Re-render report.txt from a report.json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a report against a block,arm,column,value reference table.
    Compare {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Default absolute tolerance.
        #[arg(long, default_value_t = 0.05)]
        tol: f64,
        /// Per-cell tolerance rules, `block:arm:column=tol` with `*` wildcards.
        #[arg(long = "rule")]
        rules: Vec<String>,
    },
}

fn load_config(a: &ConfigArgs) -> icym2i::Result<ExperimentConfig> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => ExperimentConfig::from_toml(&std::fs::read_to_string(path)?)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => return Err(Error::InvalidInput("one of --config or --preset is required".into())),
    };
    if let Some(seeds) = &a.seed {
        cfg.seeds = seeds.clone();
    }
    if let Some(arms) = &a.arms {
        cfg.arms = arms.iter().map(|s| s.parse()).collect::<icym2i::Result<Vec<ArmKind>>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_for(e: &Error) -> u8 {
    match e.root() {
        Error::InvalidInput(_) | Error::Parse(_) | Error::SchemaMismatch(_) | Error::Io(_) => EXIT_USAGE,
        _ => EXIT_NUMERICAL,
    }
}

fn generate(cfg: &ExperimentConfig, out: &Path) -> icym2i::Result<()> {
    std::fs::create_dir_all(out)?;
    for block in &cfg.blocks {
        let label = block.label();
        for &seed in &cfg.seeds {
            let full = block.generate(cfg.n, derive_seed(seed, &format!("data/{label}")))?;
            let ds = match &cfg.mechanism {
                Some(m) if cfg.outcome_link.is_none() => {
                    apply_missingness(&full, m, derive_seed(seed, &format!("mask/{label}")))?.dataset
                }
                Some(_) => {
                    log::warn!("outcome-linked mechanisms are resolved at run time; writing unmasked data");
                    full
                }
                None => full,
            };
            let name = format!("{}_{}_seed{seed}.csv", cfg.name, label.replace(['/', '='], "_"));
            ds.write_csv(std::io::BufWriter::new(File::create(out.join(&name))?))?;
            println!("wrote {}", out.join(name).display());
        }
    }
    Ok(())
}

fn run(cmd: Command) -> Result<(), (u8, String)> {
    let fail = |e: Error| (exit_for(&e), e.to_string());
    match cmd {
        Command::Generate { cfg, out } => generate(&load_config(&cfg).map_err(fail)?, &out).map_err(fail),
        Command::Run { cfg, out, jobs } => {
            let cfg = load_config(&cfg).map_err(fail)?;
            let report = icym2i::experiment::run_experiment(&cfg, jobs).map_err(fail)?;
            report.write(&out).map_err(fail)?;
            print!("{}", report.to_text());
            if !report.complete {
                return Err((EXIT_NUMERICAL, format!("report incomplete: {} failures", report.failures.len())));
            }
            Ok(())
        }
        Command::Report { input, out } => {
            let report = ExperimentReport::from_json(&std::fs::read_to_string(&input).map_err(|e| fail(e.into()))?)
                .map_err(fail)?;
            let text = report.to_text();
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| fail(e.into()))?;
                std::fs::write(dir.join("report.txt"), &text).map_err(|e| fail(e.into()))?;
            }
            print!("{text}");
            Ok(())
        }
        Command::Compare { report, reference, tol, rules } => {
            let report = ExperimentReport::from_json(&std::fs::read_to_string(&report).map_err(|e| fail(e.into()))?)
                .map_err(fail)?;
            let reference =
                ReferenceRow::read_csv(BufReader::new(File::open(&reference).map_err(|e| fail(e.into()))?)).map_err(fail)?;
            let mut tolerances = Tolerances::new(tol);
            for r in &rules {
                tolerances = tolerances.rule(r).map_err(fail)?;
            }
            let cmp = compare_to_reference(&report, &reference, &tolerances).map_err(fail)?;
            print!("{}", cmp.to_text());
            if cmp.passed() {
                Ok(())
            } else {
                Err((EXIT_COMPARISON, format!("{} cells outside tolerance", cmp.failures().count())))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
