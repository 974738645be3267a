//! Stop-grad similarity, the InfoNCE-style contrastive loss and its exact
//! gradient with respect to the weights.
//!
//! For one batch `B = {x⁺⁺} ∪ N` with anchor `x⁺`:
//!
//! ```text
//! loss = -Sim(x⁺, x⁺⁺) + τ · log Σ_{x ∈ B} exp(Sim(x⁺, x) / τ)
//! ```
//!
//! with `Sim(a, b) = <f(a), f(b)>` where `f(b)` is a constant. Only the anchor
//! branch carries gradient, so for neuron `i`
//!
//! ```text
//! g_i = [ -(1 - ℓ_p) h_i(x⁺⁺) + Σ_s ℓ_s h_i(x_s) ] · 1{|<w_i, x⁺>| >= b_i} · x⁺
//! ```

use serde::{Deserialize, Serialize};

use crate::data::{AugmentedPair, Sample};
use crate::linalg::{axpy_unchecked, dot_unchecked, Mat64};
use crate::network::{forward, NetworkParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    WithAug,
    NoAug,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::WithAug => "with-aug",
            Mode::NoAug => "no-aug",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with-aug" => Ok(Mode::WithAug),
            "no-aug" => Ok(Mode::NoAug),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected with-aug or no-aug)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub pair: AugmentedPair,
    pub negatives: Vec<Sample>,
    pub mode: Mode,
}

impl Batch {
    pub fn new(pair: AugmentedPair, negatives: Vec<Sample>, mode: Mode) -> Result<Self> {
        if negatives.is_empty() {
            return Err(Error::Config("a batch needs at least one negative".into()));
        }
        if mode == Mode::NoAug && pair.x_plus != pair.x_plusplus {
            return Err(Error::Config(
                "no-aug batches must use the identical pair (x, x)".into(),
            ));
        }
        Ok(Self {
            pair,
            negatives,
            mode,
        })
    }

    /// `|B| = 1 + |N|`.
    pub fn candidates(&self) -> usize {
        1 + self.negatives.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitSet {
    pub sim_pos: f64,
    pub sim_neg: Vec<f64>,
    pub ell_p: f64,
    pub ell_s: Vec<f64>,
    pub tau: f64,
    /// `log Σ exp(sim / τ)` over the whole candidate set.
    pub log_partition: f64,
}

impl LogitSet {
    /// `-τ log ℓ_p`, computed from the log-partition to stay finite when
    /// `ℓ_p` underflows.
    pub fn loss(&self) -> f64 {
        self.tau * self.log_partition - self.sim_pos
    }
}

/// `<rep_a, StopGrad(rep_b)>`.
pub fn similarity(rep_a: &[f64], rep_b: &[f64]) -> Result<f64> {
    crate::linalg::dot(rep_a, rep_b)
}

/// Softmax over `Sim(x⁺, x)/τ` for `x` in `candidates`, the first of which is
/// the positive view.
pub fn compute_logits(anchor: &[f64], candidates: &[Vec<f64>], tau: f64) -> Result<LogitSet> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if candidates.len() < 2 {
        return Err(Error::Config(
            "candidate set needs the positive and at least one negative".into(),
        ));
    }
    let sims = candidates
        .iter()
        .map(|c| similarity(anchor, c))
        .collect::<Result<Vec<f64>>>()?;
    logits_from_similarities(&sims, tau)
}

pub(crate) fn logits_from_similarities(sims: &[f64], tau: f64) -> Result<LogitSet> {
    if let Some((k, &v)) = sims.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("similarity of candidate {k}"),
            value: v,
        });
    }
    let scaled: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let top = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    let logits: Vec<f64> = exps.iter().map(|e| e / total).collect();
    Ok(LogitSet {
        sim_pos: sims[0],
        sim_neg: sims[1..].to_vec(),
        ell_p: logits[0],
        ell_s: logits[1..].to_vec(),
        tau,
        log_partition: top + total.ln(),
    })
}

/// Representations and logits of one batch.
struct BatchForward {
    anchor_active: Vec<bool>,
    positive_rep: Vec<f64>,
    negative_reps: Vec<Vec<f64>>,
    logits: LogitSet,
}

fn batch_forward(params: &NetworkParams, batch: &Batch, tau: f64) -> Result<BatchForward> {
    let anchor = forward(params, &batch.pair.x_plus)?;
    let positive_rep = params.represent(&batch.pair.x_plusplus)?;
    let negative_reps = batch
        .negatives
        .iter()
        .map(|s| params.represent(&s.x))
        .collect::<Result<Vec<_>>>()?;
    let mut sims = Vec::with_capacity(batch.candidates());
    sims.push(dot_unchecked(&anchor.rep, &positive_rep));
    sims.extend(negative_reps.iter().map(|r| dot_unchecked(&anchor.rep, r)));
    let logits = logits_from_similarities(&sims, tau)?;
    Ok(BatchForward {
        anchor_active: anchor.active,
        positive_rep,
        negative_reps,
        logits,
    })
}

/// Logits of one batch under the current parameters.
pub fn batch_logits(params: &NetworkParams, batch: &Batch, tau: f64) -> Result<LogitSet> {
    Ok(batch_forward(params, batch, tau)?.logits)
}

pub fn loss(params: &NetworkParams, batch: &Batch, tau: f64) -> Result<f64> {
    Ok(batch_logits(params, batch, tau)?.loss())
}

/// Loss and `∂loss/∂W` for one batch.
pub fn loss_and_grad(params: &NetworkParams, batch: &Batch, tau: f64) -> Result<(f64, Mat64)> {
    let fwd = batch_forward(params, batch, tau)?;
    let mut grad = Mat64::zeros(params.m(), params.d1());
    let x_plus = &batch.pair.x_plus;
    let logits = &fwd.logits;
    for i in 0..params.m() {
        if !fwd.anchor_active[i] {
            continue;
        }
        let mut coef = -(1.0 - logits.ell_p) * fwd.positive_rep[i];
        for (ell, rep) in logits.ell_s.iter().zip(&fwd.negative_reps) {
            coef += ell * rep[i];
        }
        if coef != 0.0 {
            axpy_unchecked(coef, x_plus, grad.row_mut(i));
        }
    }
    Ok((logits.loss(), grad))
}

pub fn grad_weights(params: &NetworkParams, batch: &Batch, tau: f64) -> Result<Mat64> {
    Ok(loss_and_grad(params, batch, tau)?.1)
}

/// Mean loss over the batches together with `(1/K) Σ ∇loss + λ W`.
pub fn batch_loss_and_gradient(
    params: &NetworkParams,
    batches: &[Batch],
    tau: f64,
    lambda: f64,
) -> Result<(f64, Mat64)> {
    if batches.is_empty() {
        return Err(Error::Config("batch_gradient needs at least one batch".into()));
    }
    let k = batches.len() as f64;
    let mut total = Mat64::zeros(params.m(), params.d1());
    let mut loss_sum = 0.0;
    for batch in batches {
        let (l, g) = loss_and_grad(params, batch, tau)?;
        loss_sum += l;
        total.add_scaled(1.0, &g)?;
    }
    total.scale(1.0 / k);
    total.add_scaled(lambda, params.weights())?;
    Ok((loss_sum / k, total))
}

pub fn batch_gradient(params: &NetworkParams, batches: &[Batch], tau: f64, lambda: f64) -> Result<Mat64> {
    Ok(batch_loss_and_gradient(params, batches, tau, lambda)?.1)
}
