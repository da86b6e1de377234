use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tta_core::tta::Strategy;
use tta_lab::report::{self, Table};
use tta_lab::{model_io, ExperimentConfig, Lab, Overrides, Report, Result};

#[derive(Parser)]
#[command(
    name = "tta-lab",
    version,
    about = "Test-time adaptation experiments on synthetic shifts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Every configured strategy on every seed.
    Run(Common),
    /// Accuracy across learning rates for each adapting strategy.
    SweepLr(Common),
    /// Tent with encoder dropout off versus on, at each dropout rate.
    StudyDropoutMode(Common),
    /// Tent with encoder dropout on, across dropout rates.
    StudyDropoutRate(Common),
    /// PCL with and without each perturbation component.
    StudyPerturbation(Common),
    /// Episodic versus online adaptation over a sequence of shifts.
    RunOnline(Common),
    /// Write the source data and shifted streams as CSV.
    ExportData(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; the reference benchmark when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list. Repeatable.
    #[arg(long = "seed", value_name = "N")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this strategy.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Parallel runs; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Leave wall-clock fields out of the report.
    #[arg(long)]
    no_timing: bool,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
        format!(
            "unknown strategy `{s}`, expected one of {}",
            names.join(", ")
        )
    })
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    config.apply(&Overrides {
        seeds: common.seeds.clone(),
        strategy: common.strategy,
        out: common.out.clone(),
        no_timing: common.no_timing,
    });
    config.validate()?;
    Ok(config)
}

fn save_outputs(lab: &Lab, report: &Report, extra: &[(&str, Table)]) -> Result<PathBuf> {
    let dir = lab.config.output.dir.clone();
    report::write_all(report, &dir, extra)?;
    report::write_text(&dir.join("config.toml"), &lab.config.to_toml())?;
    if lab.config.model.path.is_none() {
        model_io::save(&lab.source, &dir.join("source.ttam"))?;
    }
    Ok(dir)
}

fn print_summary(report: &Report, dir: &Path) {
    if let Some(acc) = report.source.val_accuracy {
        println!("source model validation accuracy {acc:.4}");
    }
    println!(
        "{:<28} {:>10} {:>10} {:>8}",
        "variant", "accuracy", "direct", "net"
    );
    for (agg, t) in report.aggregate.iter().zip(&report.transitions) {
        println!(
            "{:<28} {:>10.4} {:>10.4} {:>8}",
            agg.variant,
            agg.mean("accuracy").unwrap_or(f64::NAN),
            agg.mean("direct_accuracy").unwrap_or(f64::NAN),
            t.net
        );
    }
    for (k, v) in &report.summary {
        println!("{k} = {v:.4}");
    }
    println!("wrote {}", dir.display());
}

fn execute(cli: Cli) -> Result<()> {
    let (common, name) = match &cli.command {
        Command::Run(c) => (c, "run"),
        Command::SweepLr(c) => (c, "sweep-lr"),
        Command::StudyDropoutMode(c) => (c, "study-dropout-mode"),
        Command::StudyDropoutRate(c) => (c, "study-dropout-rate"),
        Command::StudyPerturbation(c) => (c, "study-perturbation"),
        Command::RunOnline(c) => (c, "run-online"),
        Command::ExportData(c) => (c, "export-data"),
    };
    let config = resolve(common)?;
    let lab = Lab::prepare(config, common.jobs)?;
    let (report, extra) = match name {
        "run" => (lab.run()?, None),
        "sweep-lr" => {
            let (r, t) = lab.sweep_lr()?;
            (r, Some(("sweep_lr.csv", t)))
        }
        "study-dropout-mode" => {
            let (r, t) = lab.study_dropout_mode()?;
            (r, Some(("dropout_mode.csv", t)))
        }
        "study-dropout-rate" => {
            let (r, t) = lab.study_dropout_rate()?;
            (r, Some(("dropout_rate.csv", t)))
        }
        "study-perturbation" => {
            let (r, t) = lab.study_perturbation()?;
            (r, Some(("perturbation.csv", t)))
        }
        "run-online" => {
            let (r, t) = lab.run_online()?;
            (r, Some(("online.csv", t)))
        }
        _ => {
            let dir = lab.config.output.dir.clone();
            tta_lab::export::export_data(&lab, &dir)?;
            println!("wrote {}", dir.display());
            return Ok(());
        }
    };
    let extra: Vec<(&str, Table)> = extra.into_iter().collect();
    let dir = save_outputs(&lab, &report, &extra)?;
    print_summary(&report, &dir);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tta-lab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
