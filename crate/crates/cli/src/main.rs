use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use ckd_cli::config::{Settings, KEYS, OUT_DIR_ENV};
use ckd_cli::report::cmd_report;
use ckd_cli::run::cmd_train;
use ckd_cli::sweep::cmd_sweep;
use ckd_cli::verify::{run_suite, VerifyOptions};
use ckd_core::Error;

fn setting_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("PATH")
        .help("flat 'key = value' file; keys are the long flag names")];
    args.extend(
        KEYS.iter()
            .map(|&(key, value, help)| Arg::new(key).long(key).value_name(value).help(help).overrides_with(key)),
    );
    args
}

fn cli() -> Command {
    Command::new("ckd")
        .about("Contrastive knowledge distillation experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("train")
                .about("Train (or load) a teacher, then distill a student")
                .args(setting_args()),
        )
        .subcommand(
            Command::new("sweep")
                .about("Repeat training over one axis of values and seeds")
                .args(setting_args()),
        )
        .subcommand(
            Command::new("verify")
                .about("Run the loss and gradient property suite")
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_name("N")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("0"),
                ),
        )
        .subcommand(
            Command::new("report")
                .about("Compare metrics logs")
                .arg(
                    Arg::new("logs")
                        .value_name("LOG")
                        .required(true)
                        .action(ArgAction::Append)
                        .value_parser(clap::value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("DIR")
                        .value_parser(clap::value_parser!(PathBuf)),
                ),
        )
}

fn settings_from(m: &ArgMatches) -> Result<Settings, Error> {
    let file = m.get_one::<String>("config").map(PathBuf::from);
    let overrides = KEYS
        .iter()
        .filter_map(|&(key, _, _)| m.get_one::<String>(key).map(|v| (key, v.as_str())));
    Settings::resolve(file.as_deref(), overrides)
}

fn train(m: &ArgMatches) -> Result<ExitCode, Error> {
    let settings = settings_from(m)?;
    let outcome = cmd_train(&settings)?;
    if let Some(acc) = outcome.teacher_test_accuracy {
        println!("teacher test accuracy {:.4}", acc);
    }
    for rec in &outcome.history {
        println!(
            "epoch {:>3}  lr {:.5}  loss {:.4}  kd {:.4}  train {:.4}  test {:.4}",
            rec.epoch, rec.lr, rec.total_loss, rec.kd_loss, rec.train_accuracy, rec.test_accuracy
        );
    }
    println!("outputs in {}", settings.out_dir()?.display());
    Ok(ExitCode::SUCCESS)
}

fn sweep(m: &ArgMatches) -> Result<ExitCode, Error> {
    let outcome = cmd_sweep(&settings_from(m)?)?;
    println!("{:<16} {:>8} {:>8} {:>8} {:>8}", outcome.axis.name(), "median", "iqr", "mean", "failed");
    let cell = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
    for row in &outcome.rows {
        println!(
            "{:<16} {:>8} {:>8} {:>8} {:>8}",
            row.value,
            cell(row.median),
            cell(row.iqr),
            cell(row.mean),
            row.failures
        );
    }
    println!("report: {}", outcome.report_path.display());
    if outcome.failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for (vi, r, msg) in &outcome.failures {
        eprintln!("run value #{} repeat {} failed: {}", vi, r, msg);
    }
    Ok(ExitCode::from(2))
}

fn verify(m: &ArgMatches) -> Result<ExitCode, Error> {
    let opts = VerifyOptions {
        seed: *m.get_one::<u64>("seed").expect("has default"),
        ..VerifyOptions::default()
    };
    let results = run_suite(&opts);
    for r in &results {
        println!("{}", r);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn report(m: &ArgMatches) -> Result<ExitCode, Error> {
    let logs: Vec<PathBuf> = m.get_many::<PathBuf>("logs").expect("required").cloned().collect();
    let out = m
        .get_one::<PathBuf>("out")
        .cloned()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let cmp = cmd_report(&logs, &out)?;
    if let Some(note) = &cmp.truncation_note {
        println!("note: {}", note);
    }
    println!("{:<24} {:>10} {:>10}", "run", "final acc", "delta");
    for (label, acc, delta) in &cmp.summary {
        println!("{:<24} {:>10.4} {:>+10.4}", label, acc, delta);
    }
    println!("tables in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("train", m)) => train(m),
        Some(("sweep", m)) => sweep(m),
        Some(("verify", m)) => verify(m),
        Some(("report", m)) => report(m),
        _ => unreachable!("subcommand required"),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {}", e);
        ExitCode::FAILURE
    })
}
