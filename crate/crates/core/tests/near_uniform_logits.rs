//! Near initialization every logit is close to uniform: with
//! `Σ|w_i|² ≤ 1e-2 τ / d`, `|ℓ - 1/|B|| ≤ 10 Σ|w_i|² / (τ |B|)`.

use sparse_contrast::config::TrainConfig;
use sparse_contrast::network::NetworkParams;
use sparse_contrast::objective::batch_logits;
use sparse_contrast::trainer::{draw_batches, setup, StepRngs};
use sparse_contrast::{Mat64, Mode, SeededRng, Stream};

fn max_deviation(mode: Mode) -> (f64, f64) {
    let cfg = TrainConfig { mode, k_batches: 1, ..TrainConfig::default() };
    let (data, init) = setup(&cfg).unwrap();
    let tau = cfg.resolved_tau();
    let budget = 1e-2 * tau / cfg.d as f64;
    let mut rng = SeededRng::for_stream(31, Stream::Test);
    let raw: Vec<f64> = (0..cfg.m * cfg.d1).map(|_| rng.standard_normal()).collect();
    let total: f64 = raw.iter().map(|v| v * v).sum();
    let scale = (budget / total).sqrt();
    let w = Mat64::from_row_major(cfg.m, cfg.d1, raw.iter().map(|v| v * scale).collect()).unwrap();
    let params = NetworkParams::new(w, init.biases().to_vec()).unwrap();
    let sum_sq: f64 = params.row_norms().iter().map(|n| n * n).sum();
    assert!(sum_sq <= budget * (1.0 + 1e-12));

    let mut rngs = StepRngs::new(77);
    let size = (cfg.n_negatives + 1) as f64;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let batch = &draw_batches(&cfg, &data, &mut rngs).unwrap()[0];
        let l = batch_logits(&params, batch, tau).unwrap();
        for v in std::iter::once(l.ell_p).chain(l.ell_s.iter().copied()) {
            worst = worst.max((v - 1.0 / size).abs());
        }
    }
    (worst, 10.0 * sum_sq / (tau * size))
}

#[test]
fn logits_near_uniform_with_augmentation() {
    let (worst, bound) = max_deviation(Mode::WithAug);
    assert!(worst <= bound, "max deviation {worst:.3e} > bound {bound:.3e}");
}

#[test]
fn logits_near_uniform_without_augmentation() {
    let (worst, bound) = max_deviation(Mode::NoAug);
    assert!(worst <= bound, "max deviation {worst:.3e} > bound {bound:.3e}");
}
