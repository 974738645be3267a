//! `sparse-contrast`: train, probe, run paired comparisons and report.
//!
//! Exit codes: 0 on success, 1 on configuration or input errors, 2 when a
//! run diverged.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparse_contrast::config::parse_override;
use sparse_contrast::data::DataModel;
use sparse_contrast::eval::{probe_classification, probe_regression, wstar_sample, ProbeTask};
use sparse_contrast::experiment::{default_out_dir, load_pair, report, run_paired, run_train, ExperimentSpec};
use sparse_contrast::trainer::RunStatus;
use sparse_contrast::{Error, Mode, SeededRng, Stream};

#[derive(Parser)]
#[command(name = "sparse-contrast", version, about = "Contrastive learning of sparse features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and write a run directory.
    Train(TrainArgs),
    /// Fit a linear probe on a saved checkpoint and print the result as JSON.
    Probe(ProbeArgs),
    /// Train with and without augmentation on the same seed and compare.
    Paired(PairedArgs),
    /// Print a markdown summary of a run or paired-run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct Overrides {
    /// `key=value` applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to a directory under $SPARSE_CONTRAST_OUT (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    task: ProbeTask,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional config supplying data and probe settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct PairedArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

/// Failure that maps to an exit code.
enum Failure {
    Config(Error),
    Diverged,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Config(e)
    }
}

/// Parsed `key = value` pairs and the raw strings logged in the manifest.
type ParsedOverrides = (Vec<(String, String)>, Vec<String>);

/// Collects `--set` pairs, with `--mode`/`--seed` appended as overrides.
fn overrides(set: &[String], mode: Option<Mode>, seed: Option<u64>) -> Result<ParsedOverrides, Error> {
    let mut raw = set.to_vec();
    if let Some(m) = mode {
        raw.push(format!("mode={m}"));
    }
    if let Some(s) = seed {
        raw.push(format!("seed={s}"));
    }
    let pairs = raw.iter().map(|s| parse_override(s)).collect::<Result<_, _>>()?;
    Ok((pairs, raw))
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let (pairs, raw) = overrides(&a.overrides.set, a.mode, a.seed)?;
    let spec = ExperimentSpec::from_file(&a.config, &pairs)?;
    spec.validate()?;
    let out = a.out.unwrap_or_else(|| default_out_dir(&spec, false));
    let run = run_train(&spec, &out, &raw, None)?;
    eprintln!("run written to {} ({})", out.display(), run.manifest.outcome);
    match run.status {
        RunStatus::Diverged { step, reason } => {
            eprintln!("diverged at step {step}: {reason}");
            Err(Failure::Diverged)
        }
        _ => Ok(()),
    }
}

fn cmd_probe(a: ProbeArgs) -> Result<(), Failure> {
    let (params, dict) = load_pair(&a.ckpt, &a.dict)?;
    let (pairs, _) = overrides(&a.overrides.set, None, None)?;
    let mut spec = match &a.config {
        Some(p) => ExperimentSpec::from_file(p, &[])?,
        None => ExperimentSpec::default(),
    };
    spec.train.d = dict.d();
    spec.train.d1 = dict.d1();
    for (k, v) in &pairs {
        spec.set(k, v)?;
    }
    let data = DataModel {
        latent: spec.train.latent(),
        noise: spec.train.noise(),
        dict,
    };
    data.latent.validate()?;
    let wstar = wstar_sample(data.dict.d(), &mut SeededRng::new(a.seed, Stream::Probe.at(0)));
    let mut rng = SeededRng::new(a.seed, Stream::Probe.at(1));
    let p = &spec.probe;
    let result = match a.task {
        ProbeTask::Regression => {
            probe_regression(&params, &data.dict, &data.latent, &data.noise, &wstar, p.n_train, p.n_test, p.ridge_mu, &mut rng)?
        }
        ProbeTask::Classification => probe_classification(
            &params, &data.dict, &data.latent, &data.noise, &wstar, p.n_train, p.n_test, &p.logistic, &mut rng,
        )?,
    };
    println!("{}", serde_json::to_string(&result).expect("probe result serialises"));
    Ok(())
}

fn cmd_paired(a: PairedArgs) -> Result<(), Failure> {
    let (pairs, raw) = overrides(&a.overrides.set, None, a.seed)?;
    let spec = ExperimentSpec::from_file(&a.config, &pairs)?;
    let out = a.out.unwrap_or_else(|| default_out_dir(&spec, true));
    let res = run_paired(&spec, &out, &raw, None)?;
    let mut diverged = false;
    for (name, leg) in [("with-aug", &res.with_aug), ("no-aug", &res.no_aug)] {
        match leg {
            Ok(run) => {
                eprintln!("{name}: {}", run.manifest.outcome);
                diverged |= matches!(run.status, RunStatus::Diverged { .. });
            }
            Err(e) => eprintln!("{name}: failed: {e}"),
        }
    }
    if let Some(v) = &res.verdicts {
        for line in v {
            eprintln!("{}", line.line());
        }
    }
    eprintln!("paired run written to {}", out.display());
    if diverged {
        return Err(Failure::Diverged);
    }
    for leg in [res.with_aug, res.no_aug] {
        leg?;
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<(), Failure> {
    print!("{}", report(&a.run)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Paired(a) => cmd_paired(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Diverged) => ExitCode::from(2),
    }
}
