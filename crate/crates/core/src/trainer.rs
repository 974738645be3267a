//! The staged SGD loop: weight updates, the manual bias schedule with stage-I
//! detection, and trajectory logging.
//!
//! Stage I runs with zero biases until every neuron has grown by
//! `stage1_ratio` over its init norm. At that step each bias is reset to
//! `bias_reset_coeff · sqrt(2 ln d / d) · |w_i|` and from then on grows as
//! `b_i ← b_i (1 + max(floor, |w_i^{t+1}| / |w_i^t| - 1))` while
//! `b_i ≤ bias_cap_coeff · (ln d)² / sqrt(d) · |w_i|`.

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{build_dictionary, random_mask, AugmentedPair, DataModel, Dictionary};
use crate::eval::{measure, MetricsRecord, RecordSettings};
use crate::linalg::Mat64;
use crate::network::{init_params, NetworkParams};
use crate::objective::{batch_loss_and_gradient, loss, Batch, Mode};
use crate::rng::{SeededRng, Stream};
use crate::{Error, Result};

/// Any weight beyond this magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "I")]
    One,
    #[serde(rename = "II-III")]
    TwoThree,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::One => "I",
            Stage::TwoThree => "II-III",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: u64,
    pub stage: Stage,
    pub t1_detected_at: Option<u64>,
    pub prev_norm: Vec<f64>,
}

impl ScheduleState {
    pub fn new(params: &NetworkParams) -> Self {
        Self {
            step: 0,
            stage: Stage::One,
            t1_detected_at: None,
            prev_norm: params.row_norms(),
        }
    }
}

/// The three training streams.
#[derive(Debug, Clone)]
pub struct StepRngs {
    pub data: SeededRng,
    pub masks: SeededRng,
    pub negatives: SeededRng,
}

impl StepRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            data: SeededRng::for_stream(seed, Stream::Data),
            masks: SeededRng::for_stream(seed, Stream::Masks),
            negatives: SeededRng::for_stream(seed, Stream::Negatives),
        }
    }
}

/// Draws the `K` batches of one step, each with fresh negatives.
pub fn draw_batches(cfg: &TrainConfig, data: &DataModel, rngs: &mut StepRngs) -> Result<Vec<Batch>> {
    (0..cfg.k_batches)
        .map(|_| {
            let s = data.sample(&mut rngs.data);
            let pair = match cfg.mode {
                Mode::WithAug => random_mask(&s.x, &mut rngs.masks),
                Mode::NoAug => AugmentedPair::identity(&s.x),
            };
            let negatives = data.negatives(cfg.n_negatives, &mut rngs.negatives)?;
            Batch::new(pair, negatives, cfg.mode)
        })
        .collect()
}

/// `true` iff `min_i |w_i| / |w_i^(0)| ≥ stage1_ratio`.
pub fn detect_stage1_end(params: &NetworkParams, cfg: &TrainConfig) -> bool {
    params
        .row_norms()
        .iter()
        .zip(params.init_row_norms())
        .all(|(n, n0)| if n0 > 0.0 { n / n0 >= cfg.stage1_ratio } else { *n > 0.0 })
}

/// Applies the bias schedule after a weight update. `schedule.step` must
/// already count the update.
pub fn update_bias(params: &mut NetworkParams, schedule: &mut ScheduleState, cfg: &TrainConfig) {
    let norms = params.row_norms();
    match schedule.stage {
        Stage::One => {
            if detect_stage1_end(params, cfg) {
                schedule.stage = Stage::TwoThree;
                schedule.t1_detected_at = Some(schedule.step);
                if cfg.mode == Mode::WithAug {
                    let coeff = cfg.bias_reset_coeff * cfg.bias_reset_base();
                    let b = norms.iter().map(|n| coeff * n).collect();
                    params.set_biases(b).expect("reset biases are non-negative");
                }
            }
        }
        Stage::TwoThree if cfg.mode == Mode::WithAug => {
            let floor = cfg.resolved_bias_floor_rate();
            let cap = cfg.bias_cap_coeff * cfg.bias_cap_base();
            let b: Vec<f64> = params
                .biases()
                .iter()
                .zip(&norms)
                .zip(&schedule.prev_norm)
                .map(|((&b, &n), &prev)| {
                    if b > cap * n {
                        return b;
                    }
                    let growth = if prev > 0.0 { n / prev - 1.0 } else { floor };
                    b * (1.0 + floor.max(growth))
                })
                .collect();
            params.set_biases(b).expect("bias updates keep signs");
        }
        Stage::TwoThree => {}
    }
    schedule.prev_norm = norms;
}

/// One SGD step with the gradient supplied by `gradient`. Returns the mean
/// training loss it reports. Parameters are left untouched on divergence.
pub fn sgd_step_with<G>(
    params: &mut NetworkParams,
    cfg: &TrainConfig,
    data: &DataModel,
    schedule: &mut ScheduleState,
    rngs: &mut StepRngs,
    gradient: G,
) -> Result<f64>
where
    G: FnOnce(&NetworkParams, &[Batch]) -> Result<(f64, Mat64)>,
{
    let batches = draw_batches(cfg, data, rngs)?;
    let (loss, grad) = gradient(params, &batches)?;
    let mut w = params.weights().clone();
    w.add_scaled(-cfg.eta, &grad)?;
    let step = schedule.step + 1;
    if !w.is_finite() {
        return Err(Error::Divergence {
            step,
            reason: "non-finite weights".into(),
        });
    }
    let peak = w.max_abs();
    if peak > DIVERGENCE_LIMIT {
        return Err(Error::Divergence {
            step,
            reason: format!("max |w| = {peak:.3e} exceeds {DIVERGENCE_LIMIT:.0e}"),
        });
    }
    *params.weights_mut() = w;
    schedule.step = step;
    update_bias(params, schedule, cfg);
    Ok(loss)
}

pub fn sgd_step(
    params: &mut NetworkParams,
    cfg: &TrainConfig,
    data: &DataModel,
    schedule: &mut ScheduleState,
    rngs: &mut StepRngs,
) -> Result<f64> {
    let (tau, lambda) = (cfg.resolved_tau(), cfg.resolved_lambda());
    sgd_step_with(params, cfg, data, schedule, rngs, |p, b| {
        batch_loss_and_gradient(p, b, tau, lambda)
    })
}

/// Builds the dictionary and the initial network for `cfg`.
pub fn setup(cfg: &TrainConfig) -> Result<(DataModel, NetworkParams)> {
    let mut dict_rng = SeededRng::for_stream(cfg.seed, Stream::Dictionary);
    let dict = build_dictionary(cfg.d, cfg.d1, cfg.c_inf, &mut dict_rng)?;
    let mut init_rng = SeededRng::for_stream(cfg.seed, Stream::Init);
    let params = init_params(cfg.m, cfg.d1, &cfg.init(), &mut init_rng)?;
    let data = DataModel {
        dict,
        latent: cfg.latent(),
        noise: cfg.noise(),
    };
    Ok((data, params))
}

/// Computes the record for the current state. Evaluation draws come from a
/// stream indexed by step so they never perturb training.
pub fn record(
    params: &NetworkParams,
    data: &DataModel,
    schedule: &ScheduleState,
    cfg: &TrainConfig,
) -> Result<MetricsRecord> {
    let mut rng = SeededRng::new(cfg.seed, Stream::Eval.at(schedule.step as u32));
    let settings = RecordSettings {
        eval_samples: cfg.eval_samples,
        singleton_threshold: cfg.singleton_threshold,
        coverage_threshold: cfg.coverage_threshold,
    };
    let mut rec = measure(params, data, schedule.step, &settings, &mut rng)?;
    let mut rngs = StepRngs {
        data: rng.clone(),
        masks: SeededRng::new(cfg.seed, Stream::Eval.at(schedule.step as u32) ^ (1 << 31)),
        negatives: rng,
    };
    let batches = draw_batches(cfg, data, &mut rngs)?;
    let tau = cfg.resolved_tau();
    let total = batches.iter().map(|b| loss(params, b, tau)).sum::<Result<f64>>()?;
    rec.loss = total / batches.len() as f64;
    rec.stage = schedule.stage.as_str().to_string();
    Ok(rec)
}

/// Hooks called by [`train`].
pub trait TrainObserver {
    /// Sees each record before it is stored; may attach probe scores.
    fn on_record(&mut self, _record: &mut MetricsRecord, _params: &NetworkParams, _data: &DataModel) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: u64, _params: &NetworkParams) -> Result<()> {
        Ok(())
    }

    /// Polled before every step; returning `true` stops the run as aborted.
    fn should_stop(&mut self, _step: u64) -> bool {
        false
    }
}

/// Observer that does nothing.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub records: Vec<MetricsRecord>,
    pub checkpoints: Vec<(u64, NetworkParams)>,
}

impl Trajectory {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Diverged { step: u64, reason: String },
    Aborted { step: u64 },
}

#[derive(Debug, Clone)]
pub struct Run {
    pub data: DataModel,
    pub params: NetworkParams,
    pub schedule: ScheduleState,
    pub trajectory: Trajectory,
    pub status: RunStatus,
}

impl Run {
    pub fn dictionary(&self) -> &Dictionary {
        &self.data.dict
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOptions {
    /// Steps at which a checkpoint is kept (and handed to the observer).
    pub checkpoint_steps: Vec<u64>,
}

/// Runs `total_steps` SGD steps from a fresh init. Config errors are returned
/// as `Err`; divergence and aborts end the run early with the partial
/// trajectory kept.
pub fn train(cfg: &TrainConfig, opts: &TrainOptions, observer: &mut dyn TrainObserver) -> Result<Run> {
    cfg.validate()?;
    let (data, mut params) = setup(cfg)?;
    let mut schedule = ScheduleState::new(&params);
    let mut rngs = StepRngs::new(cfg.seed);
    let mut trajectory = Trajectory::default();

    let log = |params: &NetworkParams, schedule: &ScheduleState, traj: &mut Trajectory, obs: &mut dyn TrainObserver| -> Result<()> {
        let step = schedule.step;
        if step.is_multiple_of(cfg.log_every) || step == cfg.total_steps {
            let mut rec = record(params, &data, schedule, cfg)?;
            obs.on_record(&mut rec, params, &data)?;
            traj.records.push(rec);
        }
        if opts.checkpoint_steps.contains(&step) {
            obs.on_checkpoint(step, params)?;
            traj.checkpoints.push((step, params.clone()));
        }
        Ok(())
    };

    log(&params, &schedule, &mut trajectory, observer)?;
    let mut status = RunStatus::Completed;
    while schedule.step < cfg.total_steps {
        if observer.should_stop(schedule.step) {
            status = RunStatus::Aborted { step: schedule.step };
            break;
        }
        match sgd_step(&mut params, cfg, &data, &mut schedule, &mut rngs) {
            Ok(_) => {}
            Err(Error::Divergence { step, reason }) => {
                status = RunStatus::Diverged { step, reason };
                break;
            }
            Err(e) => return Err(e),
        }
        log(&params, &schedule, &mut trajectory, observer)?;
    }
    Ok(Run {
        data,
        params,
        schedule,
        trajectory,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::loss_and_grad;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            d: 8,
            d1: 32,
            m: 6,
            n_negatives: 4,
            k_batches: 2,
            total_steps: 20,
            log_every: 5,
            eval_samples: 16,
            lambda: Some(8f64.powf(-1.25)),
            ..TrainConfig::default()
        }
    }

    fn small_setup(cfg: &TrainConfig) -> (DataModel, NetworkParams, ScheduleState, StepRngs) {
        let (data, params) = setup(cfg).unwrap();
        let sched = ScheduleState::new(&params);
        (data, params, sched, StepRngs::new(cfg.seed))
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let cfg = TrainConfig { eta: 0.0, lambda: Some(0.0), mode: Mode::NoAug, ..small_cfg() };
        let (data, mut p, mut s, mut r) = small_setup(&cfg);
        let before = p.clone();
        sgd_step(&mut p, &cfg, &data, &mut s, &mut r).unwrap();
        assert_eq!(p.weights(), before.weights());
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_weights_are_a_fixed_point() {
        let cfg = small_cfg();
        let (data, p, mut s, mut r) = small_setup(&cfg);
        let mut p = NetworkParams::with_init(Mat64::zeros(6, 32), vec![0.0; 6], p.init_weights().clone()).unwrap();
        for _ in 0..3 {
            sgd_step(&mut p, &cfg, &data, &mut s, &mut r).unwrap();
        }
        assert_eq!(p.weights().max_abs(), 0.0);
    }

    #[test]
    fn single_batch_step_matches_objective() {
        let cfg = TrainConfig { k_batches: 1, ..small_cfg() };
        let (data, mut p, mut s, mut r) = small_setup(&cfg);
        let before = p.clone();
        let batches = draw_batches(&cfg, &data, &mut r.clone()).unwrap();
        let (_, g) = loss_and_grad(&before, &batches[0], cfg.resolved_tau()).unwrap();
        sgd_step(&mut p, &cfg, &data, &mut s, &mut r).unwrap();
        let lambda = cfg.resolved_lambda();
        for i in 0..6 {
            for l in 0..32 {
                let expect = before.weights()[(i, l)] - cfg.eta * (g[(i, l)] + lambda * before.weights()[(i, l)]);
                assert!((p.weights()[(i, l)] - expect).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let cfg = TrainConfig { eta: 0.1, ..small_cfg() };
        let lambda = cfg.resolved_lambda();
        let (data, mut p, mut s, mut r) = small_setup(&cfg);
        let n0 = p.row_norms();
        let t = 50;
        for _ in 0..t {
            sgd_step_with(&mut p, &cfg, &data, &mut s, &mut r, |p, _| {
                let mut g = p.weights().clone();
                g.scale(lambda);
                Ok((0.0, g))
            })
            .unwrap();
        }
        let f = (1.0 - cfg.eta * lambda).powi(t);
        for (n, n0) in p.row_norms().iter().zip(n0) {
            assert!((n - f * n0).abs() <= 1e-12);
        }
    }

    #[test]
    fn divergence_is_reported_and_params_kept() {
        let cfg = small_cfg();
        let (data, mut p, mut s, mut r) = small_setup(&cfg);
        let before = p.clone();
        let err = sgd_step_with(&mut p, &cfg, &data, &mut s, &mut r, |p, _| {
            let mut g = p.weights().clone();
            g.scale(-1e12);
            Ok((0.0, g))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1, .. }));
        assert_eq!(p, before);
        let err = sgd_step_with(&mut p, &cfg, &data, &mut s, &mut r, |_, _| {
            Ok((0.0, Mat64::from_row_major(6, 32, vec![f64::NAN; 192])?))
        })
        .unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn stage_one_keeps_zero_bias_and_detection_edges() {
        let cfg = small_cfg();
        let (_, mut p, mut s, _) = small_setup(&cfg);
        assert!(!detect_stage1_end(&p, &cfg));
        s.step = 1;
        update_bias(&mut p, &mut s, &cfg);
        assert!(p.biases().iter().all(|&b| b == 0.0));
        assert_eq!(s.stage, Stage::One);
        let trivial = TrainConfig { stage1_ratio: 1.0, ..cfg };
        assert!(detect_stage1_end(&p, &trivial));
    }

    #[test]
    fn reset_uses_closed_form() {
        let cfg = TrainConfig { d: 32, d1: 64, stage1_ratio: 1.0, ..small_cfg() };
        let mut w = Mat64::zeros(2, 64);
        w[(0, 0)] = 1.0;
        w[(1, 5)] = 1.0;
        let mut p = NetworkParams::new(w, vec![0.0; 2]).unwrap();
        let mut s = ScheduleState::new(&p);
        s.step = 7;
        update_bias(&mut p, &mut s, &cfg);
        assert_eq!(s.stage, Stage::TwoThree);
        assert_eq!(s.t1_detected_at, Some(7));
        let expect = (2.0 * 32f64.ln() / 32.0).sqrt() * cfg.bias_reset_coeff;
        for &b in p.biases() {
            assert!((b - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_norms_grow_bias_at_floor_rate() {
        let cfg = TrainConfig { stage1_ratio: 1.0, ..small_cfg() };
        let (_, mut p, mut s, _) = small_setup(&cfg);
        update_bias(&mut p, &mut s, &cfg);
        let b0 = p.biases().to_vec();
        update_bias(&mut p, &mut s, &cfg);
        let f = 1.0 + cfg.eta / cfg.d as f64;
        for (b, b0) in p.biases().iter().zip(&b0) {
            assert_eq!(*b, b0 * f);
        }
    }

    #[test]
    fn capped_bias_stops_growing() {
        let cfg = TrainConfig { stage1_ratio: 1.0, bias_cap_coeff: 1e-3, ..small_cfg() };
        let (_, mut p, mut s, _) = small_setup(&cfg);
        update_bias(&mut p, &mut s, &cfg);
        let b0 = p.biases().to_vec();
        update_bias(&mut p, &mut s, &cfg);
        assert_eq!(p.biases(), &b0[..]);
    }

    #[test]
    fn no_aug_biases_stay_zero() {
        let cfg = TrainConfig { stage1_ratio: 1.0, mode: Mode::NoAug, ..small_cfg() };
        let (_, mut p, mut s, _) = small_setup(&cfg);
        update_bias(&mut p, &mut s, &cfg);
        update_bias(&mut p, &mut s, &cfg);
        assert_eq!(s.stage, Stage::TwoThree);
        assert!(p.biases().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_steps_gives_init_record() {
        let cfg = TrainConfig { total_steps: 0, ..small_cfg() };
        let run = train(&cfg, &TrainOptions::default(), &mut NoObserver).unwrap();
        assert_eq!(run.trajectory.records.len(), 1);
        assert_eq!(run.trajectory.records[0].step, 0);
        assert_eq!(run.status, RunStatus::Completed);
    }

    #[test]
    fn records_are_ordered_and_deterministic() {
        let cfg = small_cfg();
        let opts = TrainOptions { checkpoint_steps: vec![10, 20] };
        let a = train(&cfg, &opts, &mut NoObserver).unwrap();
        let b = train(&cfg, &opts, &mut NoObserver).unwrap();
        assert_eq!(a.trajectory.to_jsonl(), b.trajectory.to_jsonl());
        let steps: Vec<u64> = a.trajectory.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 5, 10, 15, 20]);
        assert_eq!(a.trajectory.checkpoints.len(), 2);
        for r in &a.trajectory.records {
            for v in [r.sparse_fraction_mean, r.atom_coverage, r.activation_fraction, r.singleton_score_mean] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn observer_can_abort() {
        struct StopAt(u64);
        impl TrainObserver for StopAt {
            fn should_stop(&mut self, step: u64) -> bool {
                step >= self.0
            }
        }
        let run = train(&small_cfg(), &TrainOptions::default(), &mut StopAt(7)).unwrap();
        assert_eq!(run.status, RunStatus::Aborted { step: 7 });
        assert_eq!(run.schedule.step, 7);
        assert_eq!(run.trajectory.records.last().unwrap().step, 5);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig { eta: -1.0, ..small_cfg() };
        assert!(matches!(
            train(&cfg, &TrainOptions::default(), &mut NoObserver),
            Err(Error::Config(_))
        ));
    }
}
