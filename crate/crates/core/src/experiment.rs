//! Run directories: a spec in the flat config format, a trajectory on disk,
//! checkpoints, probe reports and a manifest; plus the paired
//! with-aug/no-aug comparison and the verdicts printed by `report`.
//!
//! Layout of a single run:
//!
//! ```text
//! config.txt         resolved spec, enough to re-run bit-identically
//! manifest.json      hash, seed, version, timestamps, outcome
//! dictionary.csv
//! trajectory.jsonl   one MetricsRecord per logged step
//! ckpt_{step}.bin
//! pca_{step}.csv
//! ```
//!
//! A paired run holds `with-aug/` and `no-aug/` run directories, `summary.csv`
//! and `verdicts.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{fmt_f64, parse_pairs, read_text, TrainConfig, TRAIN_KEYS};
use crate::data::{DataModel, Dictionary};
use crate::eval::{
    labelled_samples, probe_classification, probe_regression, wstar_sample, write_pca_csv, LogisticSettings,
    MetricsRecord, OracleEncoder, ProbeScores,
};
use crate::network::NetworkParams;
use crate::objective::Mode;
use crate::rng::{SeededRng, Stream};
use crate::trainer::{train, RunStatus, TrainObserver, TrainOptions};
use crate::{Error, Result};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "SPARSE_CONTRAST_OUT";

/// Acceptance thresholds used by `report` and the paired verdicts.
pub mod thresholds {
    pub const AUG_SPARSE_FRACTION_MIN: f64 = 0.5;
    pub const AUG_LARGE_SINGLETON_MIN: f64 = 0.8;
    pub const AUG_COVERAGE_MIN: f64 = 0.8;
    pub const AUG_ACCURACY_MIN: f64 = 0.9;
    pub const AUG_NMSE_MAX: f64 = 0.1;
    pub const NOAUG_COSINE_MIN: f64 = 0.9;
    pub const NOAUG_SPARSE_FRACTION_MAX: f64 = 0.25;
    pub const NOAUG_ACCURACY_MAX: f64 = 0.6;
    pub const NOAUG_NMSE_MIN: f64 = 0.5;
}

/// A step list entry: a literal step or the last step of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRef {
    At(u64),
    Final,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StepList(pub Vec<StepRef>);

impl StepList {
    pub fn parse(key: &str, s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self(Vec::new()));
        }
        s.split(',')
            .map(|t| match t.trim() {
                "final" => Ok(StepRef::Final),
                v => v
                    .parse()
                    .map(StepRef::At)
                    .map_err(|e| Error::Config(format!("bad step `{v}` in `{key}`: {e}"))),
            })
            .collect::<Result<_>>()
            .map(Self)
    }

    pub fn resolve(&self, total_steps: u64) -> Vec<u64> {
        let mut v: Vec<u64> = self
            .0
            .iter()
            .map(|r| match r {
                StepRef::At(s) => *s,
                StepRef::Final => total_steps,
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

impl std::fmt::Display for StepList {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|r| match r {
                StepRef::At(s) => s.to_string(),
                StepRef::Final => "final".into(),
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub steps: StepList,
    pub n_train: usize,
    pub n_test: usize,
    pub ridge_mu: f64,
    /// Ridge used for the oracle control, whose features are exact.
    pub oracle_ridge_mu: f64,
    pub logistic: LogisticSettings,
    /// Samples in each `pca_{step}.csv`; 0 disables the dump.
    pub pca_samples: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            steps: StepList(vec![StepRef::Final]),
            n_train: 4096,
            n_test: 2048,
            ridge_mu: 1e-4,
            oracle_ridge_mu: 1e-8,
            logistic: LogisticSettings::default(),
            pca_samples: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub train: TrainConfig,
    pub probe: ProbeSettings,
    pub checkpoint_steps: StepList,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "run".into(),
            train: TrainConfig::default(),
            probe: ProbeSettings::default(),
            checkpoint_steps: StepList(vec![StepRef::Final]),
        }
    }
}

/// Keys accepted on top of [`TRAIN_KEYS`].
pub const EXPERIMENT_KEYS: &[&str] = &[
    "name",
    "probe_steps",
    "probe_n_train",
    "probe_n_test",
    "ridge_mu",
    "oracle_ridge_mu",
    "logistic_steps",
    "logistic_lr",
    "logistic_l2",
    "pca_samples",
    "checkpoint_steps",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e}")))
}

impl ExperimentSpec {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "name" => self.name = v.to_string(),
            "probe_steps" => self.probe.steps = StepList::parse(key, v)?,
            "probe_n_train" => self.probe.n_train = num(key, v)?,
            "probe_n_test" => self.probe.n_test = num(key, v)?,
            "ridge_mu" => self.probe.ridge_mu = num(key, v)?,
            "oracle_ridge_mu" => self.probe.oracle_ridge_mu = num(key, v)?,
            "logistic_steps" => self.probe.logistic.steps = num(key, v)?,
            "logistic_lr" => self.probe.logistic.lr = num(key, v)?,
            "logistic_l2" => self.probe.logistic.l2 = num(key, v)?,
            "pca_samples" => self.probe.pca_samples = num(key, v)?,
            "checkpoint_steps" => self.checkpoint_steps = StepList::parse(key, v)?,
            k if TRAIN_KEYS.contains(&k) => self.train.set(k, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key `{other}`; valid keys: {}, {}",
                    TRAIN_KEYS.join(", "),
                    EXPERIMENT_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses a config text and then applies `key=value` overrides.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut spec = Self::default();
        for (k, v) in parse_pairs(text)? {
            spec.set(&k, &v)?;
        }
        for (k, v) in overrides {
            spec.set(k, v)?;
        }
        Ok(spec)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = read_text(path)?;
        Self::from_text(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "name = {}", self.name);
        out.push_str(&self.train.to_text());
        let p = &self.probe;
        for (k, v) in [
            ("probe_steps", p.steps.to_string()),
            ("probe_n_train", p.n_train.to_string()),
            ("probe_n_test", p.n_test.to_string()),
            ("ridge_mu", fmt_f64(p.ridge_mu)),
            ("oracle_ridge_mu", fmt_f64(p.oracle_ridge_mu)),
            ("logistic_steps", p.logistic.steps.to_string()),
            ("logistic_lr", fmt_f64(p.logistic.lr)),
            ("logistic_l2", fmt_f64(p.logistic.l2)),
            ("pca_samples", p.pca_samples.to_string()),
            ("checkpoint_steps", self.checkpoint_steps.to_string()),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of [`Self::to_text`].
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let total = self.train.total_steps;
        if let Some(s) = self.probe.steps.resolve(total).into_iter().find(|&s| s > total) {
            return Err(Error::Config(format!("probe step {s} exceeds total_steps = {total}")));
        }
        if !self.probe.steps.0.is_empty() {
            if self.probe.n_train == 0 || self.probe.n_test == 0 {
                return Err(Error::Config("probe sample sizes must be positive".into()));
            }
            if !(self.probe.ridge_mu > 0.0 && self.probe.oracle_ridge_mu > 0.0) {
                return Err(Error::Config("ridge_mu must be positive".into()));
            }
            if !(self.probe.logistic.lr > 0.0) {
                return Err(Error::Config("logistic_lr must be positive".into()));
            }
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run name `{}`", self.name)));
        }
        Ok(())
    }

    /// Copy of the spec with the training mode replaced.
    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut s = self.clone();
        s.train.mode = mode;
        s
    }
}

/// Default output directory: `$SPARSE_CONTRAST_OUT/<name>-<mode>-seed<seed>`,
/// with `runs` as the root when the variable is unset.
pub fn default_out_dir(spec: &ExperimentSpec, paired: bool) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let leaf = if paired {
        format!("{}-paired-seed{}", spec.name, spec.train.seed)
    } else {
        format!("{}-{}-seed{}", spec.name, spec.train.mode, spec.train.seed)
    };
    root.join(leaf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// `running`, `completed`, `diverged` or `aborted`.
    pub outcome: String,
    pub stopped_at_step: Option<u64>,
    pub reason: Option<String>,
    pub t1_detected_at: Option<u64>,
    pub overrides: Vec<String>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serialises");
        write_atomic(&dir.join("manifest.json"), json.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = read_text(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

/// Probe draws for one step: the same `w*` at every step, fresh samples.
pub fn probe_scores(
    params: &NetworkParams,
    data: &DataModel,
    settings: &ProbeSettings,
    seed: u64,
    step: u64,
) -> Result<ProbeScores> {
    let wstar = wstar_sample(data.dict.d(), &mut SeededRng::new(seed, Stream::Probe.at(0)));
    let stream = Stream::Probe.at(1 + step as u32);
    let oracle = OracleEncoder { d: data.dict.d() };
    let (lat, noise) = (&data.latent, &data.noise);
    let (n_train, n_test) = (settings.n_train, settings.n_test);
    // Trained and oracle encoders see identical draws.
    let reg = |enc: &dyn crate::eval::Representation, mu: f64| {
        let mut rng = SeededRng::new(seed, stream);
        probe_regression(enc, &data.dict, lat, noise, &wstar, n_train, n_test, mu, &mut rng)
    };
    let cls = |enc: &dyn crate::eval::Representation| {
        let mut rng = SeededRng::new(seed, stream ^ (1 << 31));
        probe_classification(enc, &data.dict, lat, noise, &wstar, n_train, n_test, &settings.logistic, &mut rng)
    };
    let (r, c) = (reg(params, settings.ridge_mu)?, cls(params)?);
    let (ro, co) = (reg(&oracle, settings.oracle_ridge_mu)?, cls(&oracle)?);
    Ok(ProbeScores {
        regression_mse: r.score,
        regression_nmse: r.normalized_mse(),
        accuracy: c.score,
        classification_converged: c.converged,
        oracle_regression_mse: ro.score,
        oracle_accuracy: co.score,
    })
}

/// Trainer observer that streams everything to a run directory.
struct DirObserver<'a> {
    dir: &'a Path,
    spec: &'a ExperimentSpec,
    probe_steps: Vec<u64>,
    trajectory: BufWriter<std::fs::File>,
    wrote_dictionary: bool,
    stop: Option<&'a dyn Fn(u64) -> bool>,
}

impl TrainObserver for DirObserver<'_> {
    fn on_record(&mut self, record: &mut MetricsRecord, params: &NetworkParams, data: &DataModel) -> Result<()> {
        if !self.wrote_dictionary {
            data.dict.write_csv(&self.dir.join("dictionary.csv"))?;
            self.wrote_dictionary = true;
        }
        let step = record.step;
        if self.probe_steps.contains(&step) {
            let seed = self.spec.train.seed;
            record.probe = Some(probe_scores(params, data, &self.spec.probe, seed, step)?);
            if self.spec.probe.pca_samples > 0 {
                let mut rng = SeededRng::new(seed, Stream::Probe.at(0));
                let wstar = wstar_sample(data.dict.d(), &mut rng);
                let mut rng = SeededRng::new(seed, Stream::Eval.at(u32::MAX));
                let (samples, labels) =
                    labelled_samples(&data.dict, &data.latent, &data.noise, &wstar, self.spec.probe.pca_samples, &mut rng);
                write_pca_csv(&self.dir.join(format!("pca_{step}.csv")), params, &samples, &labels)?;
            }
        }
        let path = self.dir.join("trajectory.jsonl");
        let line = serde_json::to_string(record).expect("record serialises");
        writeln!(self.trajectory, "{line}").map_err(|e| Error::io(&path, e))?;
        self.trajectory.flush().map_err(|e| Error::io(&path, e))
    }

    fn on_checkpoint(&mut self, step: u64, params: &NetworkParams) -> Result<()> {
        params.save(&self.dir.join(format!("ckpt_{step}.bin")))
    }

    fn should_stop(&mut self, step: u64) -> bool {
        self.stop.is_some_and(|f| f(step))
    }
}

/// What a finished (or stopped) run left behind.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub status: RunStatus,
    pub records: Vec<MetricsRecord>,
    pub params: NetworkParams,
    pub data: DataModel,
    pub manifest: RunManifest,
}

/// Trains `spec` into `dir`. `stop` is polled before every step.
pub fn run_train(
    spec: &ExperimentSpec,
    dir: &Path,
    overrides: &[String],
    stop: Option<&dyn Fn(u64) -> bool>,
) -> Result<RunOutcome> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("config.txt"), spec.to_text().as_bytes())?;
    let mut manifest = RunManifest {
        name: spec.name.clone(),
        mode: spec.train.mode,
        seed: spec.train.seed,
        config_hash: spec.config_hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: unix_now(),
        finished_unix: None,
        outcome: "running".into(),
        stopped_at_step: None,
        reason: None,
        t1_detected_at: None,
        overrides: overrides.to_vec(),
    };
    manifest.write(dir)?;

    let total = spec.train.total_steps;
    let traj_path = dir.join("trajectory.jsonl");
    let file = std::fs::File::create(&traj_path).map_err(|e| Error::io(&traj_path, e))?;
    let mut observer = DirObserver {
        dir,
        spec,
        probe_steps: spec.probe.steps.resolve(total),
        trajectory: BufWriter::new(file),
        wrote_dictionary: false,
        stop,
    };
    let opts = TrainOptions {
        checkpoint_steps: spec.checkpoint_steps.resolve(total),
    };
    let run = train(&spec.train, &opts, &mut observer)?;

    let final_step = run.schedule.step;
    match &run.status {
        RunStatus::Completed => manifest.outcome = "completed".into(),
        RunStatus::Diverged { step, reason } => {
            manifest.outcome = "diverged".into();
            manifest.stopped_at_step = Some(*step);
            manifest.reason = Some(reason.clone());
        }
        RunStatus::Aborted { step } => {
            manifest.outcome = "aborted".into();
            manifest.stopped_at_step = Some(*step);
        }
    }
    if run.status != RunStatus::Completed && !opts.checkpoint_steps.contains(&final_step) {
        // Keep the last good state for post-mortems.
        run.params.save(&dir.join(format!("ckpt_{final_step}.bin")))?;
    }
    manifest.t1_detected_at = run.schedule.t1_detected_at;
    manifest.finished_unix = Some(unix_now());
    manifest.write(dir)?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        status: run.status,
        records: run.trajectory.records,
        params: run.params,
        data: run.data,
        manifest,
    })
}

/// Reads `trajectory.jsonl` from a run directory.
pub fn read_trajectory(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let path = dir.join("trajectory.jsonl");
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out: Vec<MetricsRecord> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))?;
        if out.last().is_some_and(|prev| prev.step >= rec.step) {
            return Err(Error::format(&path, format!("line {}: steps out of order", i + 1)));
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::format(&path, "trajectory is empty"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `">="` or `"<="`.
    pub relation: String,
    pub pass: bool,
}

impl Verdict {
    pub fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            relation: ">=".into(),
            pass: value >= threshold,
        }
    }

    pub fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            relation: "<=".into(),
            pass: value <= threshold,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {:.4} {} {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.relation,
            self.threshold
        )
    }
}

fn probe_value(rec: &MetricsRecord, f: impl Fn(&ProbeScores) -> f64) -> f64 {
    rec.probe.as_ref().map_or(f64::NAN, f)
}

/// Threshold checks for the final record of a single run in `mode`.
pub fn single_run_verdicts(mode: Mode, last: &MetricsRecord) -> Vec<Verdict> {
    use thresholds::*;
    match mode {
        Mode::WithAug => vec![
            Verdict::at_least("sparse fraction", last.sparse_fraction_mean, AUG_SPARSE_FRACTION_MIN),
            Verdict::at_least("large-neuron singletons", last.large_singleton_fraction, AUG_LARGE_SINGLETON_MIN),
            Verdict::at_least("atom coverage", last.atom_coverage, last.coverage_threshold),
            Verdict::at_least("probe accuracy", probe_value(last, |p| p.accuracy), AUG_ACCURACY_MIN),
            Verdict::at_most("probe nmse", probe_value(last, |p| p.regression_nmse), AUG_NMSE_MAX),
        ],
        Mode::NoAug => vec![
            Verdict::at_least("rep-noise cosine", last.rep_noise_cosine, NOAUG_COSINE_MIN),
            Verdict::at_most("sparse fraction", last.sparse_fraction_mean, NOAUG_SPARSE_FRACTION_MAX),
            Verdict::at_most("probe accuracy", probe_value(last, |p| p.accuracy), NOAUG_ACCURACY_MAX),
            Verdict::at_least("probe nmse", probe_value(last, |p| p.regression_nmse), NOAUG_NMSE_MIN),
        ],
    }
}

/// The four paired inequalities, one per summary column pair.
pub fn paired_verdicts(aug: &MetricsRecord, noaug: &MetricsRecord) -> Vec<Verdict> {
    use thresholds::*;
    vec![
        Verdict::at_least("with-aug sparse fraction", aug.sparse_fraction_mean, AUG_SPARSE_FRACTION_MIN),
        Verdict::at_least("no-aug rep-noise cosine", noaug.rep_noise_cosine, NOAUG_COSINE_MIN),
        Verdict::at_least("with-aug probe accuracy", probe_value(aug, |p| p.accuracy), AUG_ACCURACY_MIN),
        Verdict::at_most("no-aug probe accuracy", probe_value(noaug, |p| p.accuracy), NOAUG_ACCURACY_MAX),
    ]
}

/// Outcome of both legs of a paired run.
#[derive(Debug)]
pub struct PairedOutcome {
    pub with_aug: Result<RunOutcome>,
    pub no_aug: Result<RunOutcome>,
    pub verdicts: Option<Vec<Verdict>>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// `summary.csv` rows keyed by step.
pub fn summary_csv(aug: &[MetricsRecord], noaug: &[MetricsRecord]) -> String {
    let mut rows: BTreeMap<u64, [Option<f64>; 6]> = BTreeMap::new();
    for (col, recs) in [(0usize, aug), (1, noaug)] {
        for r in recs {
            let row = rows.entry(r.step).or_default();
            row[col] = Some(r.sparse_fraction_mean);
            row[2 + col] = Some(r.rep_noise_cosine);
            row[4 + col] = r.probe.as_ref().map(|p| p.accuracy);
        }
    }
    let mut out = String::from("step,sparse_fraction_aug,sparse_fraction_noaug,cosine_aug,cosine_noaug,acc_aug,acc_noaug\n");
    for (step, cells) in rows {
        let cells: Vec<String> = cells.iter().map(|c| opt_cell(*c)).collect();
        let _ = writeln!(out, "{step},{}", cells.join(","));
    }
    out
}

/// Runs the with-aug leg then the no-aug leg into `dir/with-aug` and
/// `dir/no-aug`. Both legs share the seed, hence dictionary, init and data
/// streams. A leg that fails or stops does not prevent the other from
/// writing its results. `stop` receives the leg mode and step.
pub fn run_paired(
    spec: &ExperimentSpec,
    dir: &Path,
    overrides: &[String],
    stop: Option<&dyn Fn(Mode, u64) -> bool>,
) -> Result<PairedOutcome> {
    let legs = [spec.with_mode(Mode::WithAug), spec.with_mode(Mode::NoAug)];
    for leg in &legs {
        leg.validate()?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let run_leg = |leg: &ExperimentSpec| {
        let mode = leg.train.mode;
        let leg_stop = stop.map(|f| move |step: u64| f(mode, step));
        let dyn_stop: Option<&dyn Fn(u64) -> bool> = leg_stop.as_ref().map(|f| f as &dyn Fn(u64) -> bool);
        run_train(leg, &dir.join(mode.as_str()), overrides, dyn_stop)
    };
    let with_aug = run_leg(&legs[0]);
    let no_aug = run_leg(&legs[1]);

    let records = |r: &Result<RunOutcome>| r.as_ref().map(|o| o.records.clone()).unwrap_or_default();
    let csv = summary_csv(&records(&with_aug), &records(&no_aug));
    write_atomic(&dir.join("summary.csv"), csv.as_bytes())?;

    let verdicts = match (&with_aug, &no_aug) {
        (Ok(a), Ok(n)) if a.status == RunStatus::Completed && n.status == RunStatus::Completed => {
            let v = paired_verdicts(a.records.last().expect("init record"), n.records.last().expect("init record"));
            let json = serde_json::to_string_pretty(&v).expect("verdicts serialise");
            write_atomic(&dir.join("verdicts.json"), json.as_bytes())?;
            Some(v)
        }
        _ => None,
    };
    Ok(PairedOutcome {
        with_aug,
        no_aug,
        verdicts,
    })
}

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.3}")
    }
}

/// Markdown table of a trajectory's key metrics, one row per logged step.
pub fn trajectory_table(records: &[MetricsRecord]) -> String {
    let mut out = String::from(
        "| step | stage | loss | sparse frac | coverage | singleton | big singletons | cosine | active | acc | nmse |\n\
         |---:|:---|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n",
    );
    for r in records {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.step,
            r.stage,
            fmt_cell(r.loss),
            fmt_cell(r.sparse_fraction_mean),
            fmt_cell(r.atom_coverage),
            fmt_cell(r.singleton_score_mean),
            fmt_cell(r.large_singleton_fraction),
            fmt_cell(r.rep_noise_cosine),
            fmt_cell(r.activation_fraction),
            fmt_cell(probe_value(r, |p| p.accuracy)),
            fmt_cell(probe_value(r, |p| p.regression_nmse)),
        );
    }
    out
}

fn is_paired_dir(dir: &Path) -> bool {
    dir.join("summary.csv").is_file() && dir.join(Mode::WithAug.as_str()).is_dir()
}

/// The `report` text for a run or paired-run directory.
pub fn report(dir: &Path) -> Result<String> {
    let mut out = String::new();
    if is_paired_dir(dir) {
        let mut finals = Vec::new();
        for mode in [Mode::WithAug, Mode::NoAug] {
            let leg = dir.join(mode.as_str());
            let recs = read_trajectory(&leg)?;
            let manifest = RunManifest::read(&leg)?;
            let _ = writeln!(out, "## {mode} ({})\n", manifest.outcome);
            out.push_str(&trajectory_table(&recs));
            out.push('\n');
            for v in single_run_verdicts(mode, recs.last().expect("non-empty")) {
                let _ = writeln!(out, "- {}", v.line());
            }
            out.push('\n');
            finals.push(recs.last().cloned().expect("non-empty"));
        }
        let _ = writeln!(out, "## paired verdicts\n");
        for v in paired_verdicts(&finals[0], &finals[1]) {
            let _ = writeln!(out, "- {}", v.line());
        }
        return Ok(out);
    }
    let recs = read_trajectory(dir)?;
    let spec = ExperimentSpec::from_file(&dir.join("config.txt"), &[])?;
    let outcome = RunManifest::read(dir).map_or_else(|_| "unknown".to_string(), |m| m.outcome);
    let _ = writeln!(out, "## {} {} seed {} ({outcome})\n", spec.name, spec.train.mode, spec.train.seed);
    out.push_str(&trajectory_table(&recs));
    out.push('\n');
    for v in single_run_verdicts(spec.train.mode, recs.last().expect("non-empty")) {
        let _ = writeln!(out, "- {}", v.line());
    }
    Ok(out)
}

/// Loads a checkpoint and a dictionary, checking that they fit together.
pub fn load_pair(ckpt: &Path, dict: &Path) -> Result<(NetworkParams, Dictionary)> {
    let params = NetworkParams::load(ckpt)?;
    let dict = Dictionary::read_csv(dict)?;
    if params.d1() != dict.d1() {
        return Err(Error::DimensionMismatch {
            op: "checkpoint input dimension vs dictionary d1",
            expected: dict.d1(),
            got: params.d1(),
        });
    }
    Ok((params, dict))
}
