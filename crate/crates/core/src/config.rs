//! Training configuration and its flat `key = value` text format.
//!
//! Keys left at `auto` are derived from `d` (and `d1`, `eta`) when resolved:
//!
//! | key            | auto value            |
//! |----------------|-----------------------|
//! | p_active       | c_z · ln ln d / d     |
//! | sigma_xi_sq    | sqrt(ln d) / d        |
//! | sigma0_sq      | 1 / (d1 · d²)         |
//! | tau            | (ln d)²               |
//! | lambda         | d^-1.49               |
//! | bias_floor_rate| eta / d               |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{LatentConfig, NoiseConfig};
use crate::network::InitConfig;
use crate::objective::Mode;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    pub d1: usize,
    pub m: usize,
    pub eta: f64,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    pub n_negatives: usize,
    pub k_batches: usize,
    pub total_steps: u64,
    pub mode: Mode,
    pub stage1_ratio: f64,
    pub bias_reset_coeff: f64,
    pub bias_floor_rate: Option<f64>,
    pub bias_cap_coeff: f64,
    pub log_every: u64,
    pub seed: u64,
    pub c_z: f64,
    pub p_active: Option<f64>,
    pub sigma_xi_sq: Option<f64>,
    pub sigma0_sq: Option<f64>,
    pub c_inf: f64,
    /// Samples used for the cosine / activation diagnostics at each log step.
    pub eval_samples: usize,
    pub singleton_threshold: f64,
    pub coverage_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d1: 256,
            m: 64,
            eta: 0.02,
            lambda: None,
            tau: None,
            n_negatives: 64,
            k_batches: 8,
            total_steps: 20_000,
            mode: Mode::WithAug,
            stage1_ratio: 10.0,
            bias_reset_coeff: 0.3,
            bias_floor_rate: None,
            bias_cap_coeff: 0.2,
            log_every: 500,
            seed: 0,
            c_z: 2.0,
            p_active: None,
            sigma_xi_sq: None,
            sigma0_sq: None,
            c_inf: 4.0,
            eval_samples: 512,
            singleton_threshold: 0.5,
            coverage_threshold: 0.8,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in file order.
pub const TRAIN_KEYS: &[&str] = &[
    "d",
    "d1",
    "m",
    "eta",
    "lambda",
    "tau",
    "n_negatives",
    "k_batches",
    "total_steps",
    "mode",
    "stage1_ratio",
    "bias_reset_coeff",
    "bias_floor_rate",
    "bias_cap_coeff",
    "log_every",
    "seed",
    "c_z",
    "p_active",
    "sigma_xi_sq",
    "sigma0_sq",
    "c_inf",
    "eval_samples",
    "singleton_threshold",
    "coverage_threshold",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_auto(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn fmt_auto(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".to_string(), fmt_f64)
}

/// Shortest representation that parses back to the same bits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "d" => self.d = parse_num(key, v)?,
            "d1" => self.d1 = parse_num(key, v)?,
            "m" => self.m = parse_num(key, v)?,
            "eta" => self.eta = parse_num(key, v)?,
            "lambda" => self.lambda = parse_auto(key, v)?,
            "tau" => self.tau = parse_auto(key, v)?,
            "n_negatives" => self.n_negatives = parse_num(key, v)?,
            "k_batches" => self.k_batches = parse_num(key, v)?,
            "total_steps" => self.total_steps = parse_num(key, v)?,
            "mode" => self.mode = v.parse()?,
            "stage1_ratio" => self.stage1_ratio = parse_num(key, v)?,
            "bias_reset_coeff" => self.bias_reset_coeff = parse_num(key, v)?,
            "bias_floor_rate" => self.bias_floor_rate = parse_auto(key, v)?,
            "bias_cap_coeff" => self.bias_cap_coeff = parse_num(key, v)?,
            "log_every" => self.log_every = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "c_z" => self.c_z = parse_num(key, v)?,
            "p_active" => self.p_active = parse_auto(key, v)?,
            "sigma_xi_sq" => self.sigma_xi_sq = parse_auto(key, v)?,
            "sigma0_sq" => self.sigma0_sq = parse_auto(key, v)?,
            "c_inf" => self.c_inf = parse_num(key, v)?,
            "eval_samples" => self.eval_samples = parse_num(key, v)?,
            "singleton_threshold" => self.singleton_threshold = parse_num(key, v)?,
            "coverage_threshold" => self.coverage_threshold = parse_num(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key `{other}`; valid keys: {}",
                    TRAIN_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d", self.d.to_string()),
            ("d1", self.d1.to_string()),
            ("m", self.m.to_string()),
            ("eta", fmt_f64(self.eta)),
            ("lambda", fmt_auto(self.lambda)),
            ("tau", fmt_auto(self.tau)),
            ("n_negatives", self.n_negatives.to_string()),
            ("k_batches", self.k_batches.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("mode", self.mode.to_string()),
            ("stage1_ratio", fmt_f64(self.stage1_ratio)),
            ("bias_reset_coeff", fmt_f64(self.bias_reset_coeff)),
            ("bias_floor_rate", fmt_auto(self.bias_floor_rate)),
            ("bias_cap_coeff", fmt_f64(self.bias_cap_coeff)),
            ("log_every", self.log_every.to_string()),
            ("seed", self.seed.to_string()),
            ("c_z", fmt_f64(self.c_z)),
            ("p_active", fmt_auto(self.p_active)),
            ("sigma_xi_sq", fmt_auto(self.sigma_xi_sq)),
            ("sigma0_sq", fmt_auto(self.sigma0_sq)),
            ("c_inf", fmt_f64(self.c_inf)),
            ("eval_samples", self.eval_samples.to_string()),
            ("singleton_threshold", fmt_f64(self.singleton_threshold)),
            ("coverage_threshold", fmt_f64(self.coverage_threshold)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn df(&self) -> f64 {
        self.d as f64
    }

    pub fn resolved_lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| self.df().powf(-1.49))
    }

    pub fn resolved_tau(&self) -> f64 {
        self.tau.unwrap_or_else(|| self.df().ln().powi(2))
    }

    pub fn resolved_bias_floor_rate(&self) -> f64 {
        self.bias_floor_rate.unwrap_or(self.eta / self.df())
    }

    pub fn latent(&self) -> LatentConfig {
        match self.p_active {
            Some(p_active) => LatentConfig { p_active },
            None => LatentConfig::from_constant(self.c_z, self.d),
        }
    }

    pub fn noise(&self) -> NoiseConfig {
        match self.sigma_xi_sq {
            Some(sigma_xi_sq) => NoiseConfig { sigma_xi_sq },
            None => NoiseConfig::default_for(self.d),
        }
    }

    pub fn init(&self) -> InitConfig {
        match self.sigma0_sq {
            Some(sigma0_sq) => InitConfig { sigma0_sq },
            None => InitConfig::default_for(self.d, self.d1),
        }
    }

    /// `sqrt(2 ln d / d)`, the bias-to-norm ratio at reset before the coefficient.
    pub fn bias_reset_base(&self) -> f64 {
        (2.0 * self.df().ln() / self.df()).sqrt()
    }

    /// `(ln d)² / sqrt(d)`, the bias-to-norm cap before the coefficient.
    pub fn bias_cap_base(&self) -> f64 {
        self.df().ln().powi(2) / self.df().sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.d > self.d1 {
            return fail(format!("need 1 <= d <= d1, got d={}, d1={}", self.d, self.d1));
        }
        if self.d < 3 {
            return fail(format!("d must be at least 3 so that ln ln d > 0, got {}", self.d));
        }
        if self.m == 0 || self.n_negatives == 0 || self.k_batches == 0 {
            return fail("m, n_negatives and k_batches must be positive".into());
        }
        if !(self.eta > 0.0) {
            return fail(format!("eta must be positive, got {}", self.eta));
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".into());
        }
        let lambda = self.resolved_lambda();
        let df = self.df();
        match self.mode {
            Mode::WithAug => {
                let (lo, hi) = (df.powf(-1.499), df.powf(-1.001));
                if !(lambda >= lo && lambda <= hi) {
                    return fail(format!(
                        "with-aug requires lambda in [d^-1.499, d^-1.001] = [{lo:.5}, {hi:.5}], got {lambda}"
                    ));
                }
            }
            Mode::NoAug => {
                if !(lambda >= 0.0 && lambda <= 1.0 / df) {
                    return fail(format!(
                        "no-aug requires 0 <= lambda <= 1/d = {:.5}, got {lambda}",
                        1.0 / df
                    ));
                }
            }
        }
        if !(self.resolved_tau() > 0.0) {
            return fail("tau must be positive".into());
        }
        let p = self.latent().p_active;
        if !(p > 0.0 && p <= 0.5) {
            return fail(format!("p_active must lie in (0, 0.5], got {p}"));
        }
        if !(self.noise().sigma_xi_sq > 0.0) {
            return fail("sigma_xi_sq must be positive".into());
        }
        if !(self.init().sigma0_sq > 0.0) {
            return fail("sigma0_sq must be positive".into());
        }
        if !(self.stage1_ratio >= 1.0) {
            return fail(format!("stage1_ratio must be >= 1, got {}", self.stage1_ratio));
        }
        if !(self.bias_reset_coeff > 0.0 && self.bias_cap_coeff > 0.0) {
            return fail("bias coefficients must be positive".into());
        }
        if !(self.resolved_bias_floor_rate() >= 0.0) {
            return fail("bias_floor_rate must be non-negative".into());
        }
        if !(self.c_inf > 0.0) {
            return fail("c_inf must be positive".into());
        }
        if self.eval_samples == 0 {
            return fail("eval_samples must be positive".into());
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are an
/// error. Returns the pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
        })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if seen.insert(k.clone(), lineno + 1).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

/// Parses a `key=value` override as given on the command line.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn apply_text(text: &str) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        for (k, v) in parse_pairs(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    #[test]
    fn defaults_are_valid_in_both_modes() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.mode = Mode::NoAug;
        c.validate().unwrap();
    }

    #[test]
    fn desk_defaults_resolve() {
        let c = TrainConfig::default();
        assert!((c.resolved_tau() - 32f64.ln().powi(2)).abs() < 1e-12);
        assert!((c.latent().p_active - 2.0 * 32f64.ln().ln() / 32.0).abs() < 1e-15);
        assert!((c.noise().sigma_xi_sq - 32f64.ln().sqrt() / 32.0).abs() < 1e-15);
        assert!((c.init().sigma0_sq - 1.0 / (256.0 * 1024.0)).abs() < 1e-18);
        assert!((c.bias_reset_base() - 0.465412).abs() < 1e-6);
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = apply_text("# header\n\nm = 12  # neurons\nmode = no-aug\nlambda = auto\n").unwrap();
        assert_eq!(c.m, 12);
        assert_eq!(c.mode, Mode::NoAug);
        assert_eq!(c.lambda, None);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = apply_text("learning_rate = 0.1").unwrap_err().to_string();
        assert!(err.contains("learning_rate") && err.contains("total_steps"));
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(apply_text("eta 0.1").is_err());
        assert!(apply_text("eta = fast").is_err());
        assert!(apply_text("eta = 0.1\neta = 0.2").is_err());
    }

    #[test]
    fn lambda_constraints_per_mode() {
        let mut c = TrainConfig { lambda: Some(0.1), ..TrainConfig::default() };
        c.mode = Mode::NoAug;
        assert!(c.validate().is_err());
        c.lambda = Some(0.0);
        c.validate().unwrap();
        c.mode = Mode::WithAug;
        assert!(c.validate().is_err());
        c.lambda = Some(32f64.powf(-1.2));
        c.validate().unwrap();
    }

    #[test]
    fn override_parsing() {
        assert_eq!(parse_override("total_steps=0").unwrap(), ("total_steps".into(), "0".into()));
        assert!(parse_override("total_steps").is_err());
    }

    prop_compose! {
        fn arb_config()(
            d in 3usize..64, extra in 0usize..200, m in 1usize..128,
            eta in 1e-6f64..1.0, lambda in proptest::option::of(0.0f64..0.1),
            tau in proptest::option::of(0.1f64..100.0), steps in 0u64..100_000,
            noaug in any::<bool>(), ratio in 1.0f64..100.0, seed in any::<u64>(),
            floor in proptest::option::of(0.0f64..0.01), sig in proptest::option::of(1e-6f64..1.0),
        ) -> TrainConfig {
            TrainConfig {
                d, d1: d + extra, m, eta, lambda, tau, total_steps: steps,
                mode: if noaug { Mode::NoAug } else { Mode::WithAug },
                stage1_ratio: ratio, seed, bias_floor_rate: floor, sigma_xi_sq: sig,
                ..TrainConfig::default()
            }
        }
    }

    proptest! {
        #[test]
        fn text_round_trip(cfg in arb_config()) {
            let back = apply_text(&cfg.to_text()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
