//! Diagnostics on a network: alignment of weights with the dictionary,
//! init-time lucky sets, the representation/noise cosine, activation sparsity
//! and the two linear probes.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{sample_input, sample_latent, Dictionary, LatentConfig, NoiseConfig, Sample};
use crate::linalg::{dot_unchecked, norm_sq, solve_spd, Mat64};
use crate::network::NetworkParams;
use crate::rng::SeededRng;
use crate::{Error, Result};

/// Anything that maps a sample to a feature vector.
pub trait Representation {
    fn dim(&self) -> usize;
    fn features(&self, sample: &Sample) -> Vec<f64>;
}

impl Representation for NetworkParams {
    fn dim(&self) -> usize {
        self.m()
    }

    fn features(&self, sample: &Sample) -> Vec<f64> {
        self.represent(&sample.x).expect("sample drawn from a matching dictionary")
    }
}

/// Returns the ground-truth latent `z`. Upper-bounds every trained encoder.
#[derive(Debug, Clone, Copy)]
pub struct OracleEncoder {
    pub d: usize,
}

impl Representation for OracleEncoder {
    fn dim(&self) -> usize {
        self.d
    }

    fn features(&self, sample: &Sample) -> Vec<f64> {
        sample.z.clone()
    }
}

/// Always returns zeros.
#[derive(Debug, Clone, Copy)]
pub struct ZeroEncoder {
    pub m: usize,
}

impl Representation for ZeroEncoder {
    fn dim(&self) -> usize {
        self.m
    }

    fn features(&self, _sample: &Sample) -> Vec<f64> {
        vec![0.0; self.m]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronAlignment {
    pub norm_sq: f64,
    pub sparse_energy: f64,
    pub dense_energy: f64,
    pub top_atom: usize,
    pub top_value: f64,
    pub second_value: f64,
    pub singleton_score: f64,
}

impl NeuronAlignment {
    pub fn sparse_fraction(&self) -> f64 {
        if self.norm_sq > 0.0 {
            (self.sparse_energy / self.norm_sq).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn dense_fraction(&self) -> f64 {
        if self.norm_sq > 0.0 {
            (self.dense_energy / self.norm_sq).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub neurons: Vec<NeuronAlignment>,
    pub winner_count: Vec<usize>,
    pub max_coord: Vec<f64>,
    pub singleton_threshold: f64,
}

impl AlignmentStats {
    /// `Σ |Mᵀ w_i|² / Σ |w_i|²`.
    pub fn pooled_sparse_fraction(&self) -> f64 {
        let sparse: f64 = self.neurons.iter().map(|n| n.sparse_energy).sum();
        let total: f64 = self.neurons.iter().map(|n| n.norm_sq).sum();
        if total > 0.0 {
            (sparse / total).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn mean_sparse_fraction(&self) -> f64 {
        mean(self.neurons.iter().map(NeuronAlignment::sparse_fraction))
    }

    pub fn min_sparse_fraction(&self) -> f64 {
        self.neurons
            .iter()
            .map(NeuronAlignment::sparse_fraction)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_sparse_fraction(&self) -> f64 {
        self.neurons
            .iter()
            .map(NeuronAlignment::sparse_fraction)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_singleton_score(&self) -> f64 {
        mean(self.neurons.iter().map(|n| n.singleton_score))
    }

    /// Fraction of atoms with at least one singleton winner.
    pub fn atom_coverage(&self) -> f64 {
        let hit = self.winner_count.iter().filter(|&&c| c >= 1).count();
        hit as f64 / self.winner_count.len() as f64
    }

    /// Among neurons with norm at least the median, the fraction that are
    /// singletons with dense fraction at most `max_dense_fraction`.
    pub fn large_neuron_singleton_fraction(&self, max_dense_fraction: f64) -> f64 {
        let mut norms: Vec<f64> = self.neurons.iter().map(|n| n.norm_sq).collect();
        norms.sort_by(f64::total_cmp);
        let median = median_sorted(&norms);
        let large: Vec<&NeuronAlignment> = self.neurons.iter().filter(|n| n.norm_sq >= median).collect();
        if large.is_empty() {
            return 0.0;
        }
        let good = large
            .iter()
            .filter(|n| n.singleton_score >= self.singleton_threshold && n.dense_fraction() <= max_dense_fraction)
            .count();
        good as f64 / large.len() as f64
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Coordinates `⟨w_i, M_j⟩` for all neurons, as an `m x d` matrix.
fn atom_coords(w: &Mat64, dict: &Dictionary) -> Result<Mat64> {
    w.matmul(dict.matrix())
}

fn neuron_alignment(row: &[f64], coords: &[f64]) -> NeuronAlignment {
    let total = norm_sq(row);
    let sparse = norm_sq(coords);
    let (mut top_atom, mut top, mut second) = (0, 0.0f64, 0.0f64);
    for (j, c) in coords.iter().map(|c| c.abs()).enumerate() {
        if c > top {
            second = top;
            top = c;
            top_atom = j;
        } else if c > second {
            second = c;
        }
    }
    let singleton_score = if sparse > 0.0 { (top * top / sparse).min(1.0) } else { 0.0 };
    NeuronAlignment {
        norm_sq: total,
        sparse_energy: sparse,
        dense_energy: (total - sparse).max(0.0),
        top_atom,
        top_value: top,
        second_value: second,
        singleton_score,
    }
}

pub fn alignment_stats(params: &NetworkParams, dict: &Dictionary, singleton_threshold: f64) -> Result<AlignmentStats> {
    if params.d1() != dict.d1() {
        return Err(Error::DimensionMismatch {
            op: "alignment_stats",
            expected: dict.d1(),
            got: params.d1(),
        });
    }
    let coords = atom_coords(params.weights(), dict)?;
    let d = dict.d();
    let mut winner_count = vec![0usize; d];
    let mut max_coord = vec![0.0f64; d];
    let mut neurons = Vec::with_capacity(params.m());
    for i in 0..params.m() {
        let row = coords.row(i);
        for (mc, c) in max_coord.iter_mut().zip(row) {
            *mc = mc.max(c.abs());
        }
        let n = neuron_alignment(params.weights().row(i), row);
        if n.sparse_energy > 0.0 && n.singleton_score >= singleton_threshold {
            winner_count[n.top_atom] += 1;
        }
        neurons.push(n);
    }
    Ok(AlignmentStats {
        neurons,
        winner_count,
        max_coord,
        singleton_threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LuckyConstants {
    pub gamma: f64,
    pub c0: f64,
}

impl Default for LuckyConstants {
    fn default() -> Self {
        Self { gamma: 0.005, c0: 0.01 }
    }
}

impl LuckyConstants {
    pub fn c1(&self) -> f64 {
        2.0 + 2.0 * (1.0 - self.gamma) * self.c0
    }

    pub fn c2(&self) -> f64 {
        self.c1() - self.gamma * self.c0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LuckySets {
    pub constants: LuckyConstants,
    /// `M_j` for each atom.
    pub sets: Vec<Vec<usize>>,
    /// `M*_j` for each atom.
    pub star_sets: Vec<Vec<usize>>,
}

/// Lucky sets of the init snapshot `W0`.
pub fn lucky_sets(params: &NetworkParams, dict: &Dictionary, constants: LuckyConstants) -> Result<LuckySets> {
    let coords = atom_coords(params.init_weights(), dict)?;
    let d = dict.d();
    let scale = (d as f64).ln() / d as f64;
    let (t1, t2) = (constants.c1() * scale, constants.c2() * scale);
    let mut sets = vec![Vec::new(); d];
    let mut star_sets = vec![Vec::new(); d];
    for i in 0..params.m() {
        let row = coords.row(i);
        let sparse = norm_sq(row);
        let sq: Vec<f64> = row.iter().map(|c| c * c).collect();
        for j in 0..d {
            if sq[j] >= t2 * sparse {
                sets[j].push(i);
            }
            let others_small = sq
                .iter()
                .enumerate()
                .all(|(k, &v)| k == j || v <= t2 * sparse);
            if sq[j] >= t1 * sparse && others_small {
                star_sets[j].push(i);
            }
        }
    }
    Ok(LuckySets {
        constants,
        sets,
        star_sets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineSummary {
    pub mean: f64,
    pub zero_reps: usize,
    pub n_samples: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm_sq(a), norm_sq(b));
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot_unchecked(a, b) / (na * nb).sqrt())
    }
}

/// Mean of `cos(f(x), f(ξ))` where `x = M z + ξ` shares the same `ξ`.
pub fn rep_noise_cosine(
    params: &NetworkParams,
    dict: &Dictionary,
    lat: &LatentConfig,
    noise: &NoiseConfig,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<CosineSummary> {
    if n_samples == 0 {
        return Err(Error::Config("rep_noise_cosine needs n_samples >= 1".into()));
    }
    let mut total = 0.0;
    let mut zero_reps = 0;
    for _ in 0..n_samples {
        let s = sample_input(dict, lat, noise, rng);
        let fx = params.represent(&s.x)?;
        let fxi = params.represent(&s.xi)?;
        match cosine(&fx, &fxi) {
            Some(c) => total += c,
            None => zero_reps += 1,
        }
    }
    Ok(CosineSummary {
        mean: total / n_samples as f64,
        zero_reps,
        n_samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSummary {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

pub fn activation_sparsity(
    params: &NetworkParams,
    dict: &Dictionary,
    lat: &LatentConfig,
    noise: &NoiseConfig,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<ActivationSummary> {
    if n_samples == 0 {
        return Err(Error::Config("activation_sparsity needs n_samples >= 1".into()));
    }
    let m = params.m() as f64;
    let per_sample: Vec<f64> = (0..n_samples)
        .map(|_| {
            let s = sample_input(dict, lat, noise, rng);
            let active = (0..params.m())
                .filter(|&i| dot_unchecked(params.weights().row(i), &s.x).abs() >= params.biases()[i])
                .count();
            active as f64 / m
        })
        .collect();
    Ok(ActivationSummary {
        mean: mean(per_sample.iter().copied()),
        per_sample,
    })
}

/// Percentile bootstrap interval of `mean(a) - mean(b)`.
pub fn bootstrap_mean_difference(a: &[f64], b: &[f64], resamples: usize, level: f64, rng: &mut SeededRng) -> (f64, f64) {
    let resample_mean = |v: &[f64], rng: &mut SeededRng| {
        (0..v.len()).map(|_| v[rng.index(v.len())]).sum::<f64>() / v.len() as f64
    };
    let mut diffs: Vec<f64> = (0..resamples)
        .map(|_| resample_mean(a, rng) - resample_mean(b, rng))
        .collect();
    diffs.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| diffs[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(tail), at(1.0 - tail))
}

/// Each coordinate `±1` with equal probability.
pub fn wstar_sample(d: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..d).map(|_| rng.sign()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeTask {
    Regression,
    Classification,
}

impl std::str::FromStr for ProbeTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Self::Regression),
            "classification" => Ok(Self::Classification),
            other => Err(Error::Config(format!(
                "unknown probe task `{other}` (expected regression or classification)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: ProbeTask,
    pub n_train: usize,
    pub n_test: usize,
    pub ridge_mu: Option<f64>,
    pub logistic_steps: Option<usize>,
    /// Test MSE for regression, test accuracy for classification.
    pub score: f64,
    /// Mean of `y²` on the test set.
    pub label_second_moment: f64,
    pub converged: bool,
    pub wstar: Vec<f64>,
}

impl ProbeResult {
    /// Test MSE over the test-set `E[y²]`; only meaningful for regression.
    pub fn normalized_mse(&self) -> f64 {
        if self.label_second_moment > 0.0 {
            self.score / self.label_second_moment
        } else {
            f64::NAN
        }
    }
}

struct LabelledSet {
    features: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

fn draw_regression<R: Representation + ?Sized>(
    enc: &R,
    dict: &Dictionary,
    lat: &LatentConfig,
    noise: &NoiseConfig,
    wstar: &[f64],
    n: usize,
    rng: &mut SeededRng,
) -> LabelledSet {
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let s = sample_input(dict, lat, noise, rng);
        labels.push(dot_unchecked(wstar, &s.z));
        features.push(enc.features(&s));
    }
    LabelledSet { features, labels }
}

/// Like [`draw_regression`] but labels are `sign(⟨w*, z⟩)` and ties are redrawn.
fn draw_classification<R: Representation + ?Sized>(
    enc: &R,
    dict: &Dictionary,
    lat: &LatentConfig,
    noise: &NoiseConfig,
    wstar: &[f64],
    n: usize,
    rng: &mut SeededRng,
) -> LabelledSet {
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let z = sample_latent(lat, dict.d(), rng);
        let y = dot_unchecked(wstar, &z);
        let sigma = noise.sigma();
        let xi: Vec<f64> = (0..dict.d1()).map(|_| sigma * rng.standard_normal()).collect();
        if y == 0.0 {
            continue;
        }
        let s = Sample::compose(dict, z, xi).expect("dimensions come from the dictionary");
        labels.push(y.signum());
        features.push(enc.features(&s));
    }
    LabelledSet { features, labels }
}

fn check_probe_args<R: Representation + ?Sized>(enc: &R, wstar: &[f64], dict: &Dictionary, n_train: usize, n_test: usize) -> Result<()> {
    if wstar.len() != dict.d() {
        return Err(Error::DimensionMismatch {
            op: "probe w*",
            expected: dict.d(),
            got: wstar.len(),
        });
    }
    if n_train == 0 || n_test == 0 || enc.dim() == 0 {
        return Err(Error::EmptyDimension("probe sample sizes"));
    }
    Ok(())
}

/// Ridge regression of `y = ⟨w*, z⟩` on frozen features, solving
/// `(FᵀF/n + μI) c = Fᵀy/n`.
#[allow(clippy::too_many_arguments)]
pub fn probe_regression<R: Representation + ?Sized>(
    enc: &R,
    dict: &Dictionary,
    lat: &LatentConfig,
    noise: &NoiseConfig,
    wstar: &[f64],
    n_train: usize,
    n_test: usize,
    ridge_mu: f64,
    rng: &mut SeededRng,
) -> Result<ProbeResult> {
    check_probe_args(enc, wstar, dict, n_train, n_test)?;
    if !(ridge_mu > 0.0) {
        return Err(Error::Config(format!("ridge_mu must be positive, got {ridge_mu}")));
    }
    let train = draw_regression(enc, dict, lat, noise, wstar, n_train, rng);
    let test = draw_regression(enc, dict, lat, noise, wstar, n_test, rng);
    let k = enc.dim();
    let n = n_train as f64;
    let mut gram = Mat64::zeros(k, k);
    let mut rhs = vec![0.0; k];
    for (f, y) in train.features.iter().zip(&train.labels) {
        for a in 0..k {
            if f[a] == 0.0 {
                continue;
            }
            rhs[a] += f[a] * y / n;
            let row = gram.row_mut(a);
            for b in 0..k {
                row[b] += f[a] * f[b] / n;
            }
        }
    }
    for a in 0..k {
        gram[(a, a)] += ridge_mu;
    }
    let coef = solve_spd(&gram, &rhs).map_err(|e| {
        Error::IllConditioned(format!(
            "ridge normal equations failed with mu = {ridge_mu} ({e}); increase ridge_mu"
        ))
    })?;
    let mut sq_err = 0.0;
    let mut sq_label = 0.0;
    for (f, y) in test.features.iter().zip(&test.labels) {
        let r = y - dot_unchecked(&coef, f);
        sq_err += r * r;
        sq_label += y * y;
    }
    let nt = n_test as f64;
    Ok(ProbeResult {
        task: ProbeTask::Regression,
        n_train,
        n_test,
        ridge_mu: Some(ridge_mu),
        logistic_steps: None,
        score: sq_err / nt,
        label_second_moment: sq_label / nt,
        converged: true,
        wstar: wstar.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticSettings {
    pub steps: usize,
    pub lr: f64,
    /// L2 penalty; keeps the iterates bounded on separable data.
    pub l2: f64,
    /// Gradient-norm tolerance for the convergence flag.
    pub tol: f64,
}

impl Default for LogisticSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1.0,
            l2: 1e-4,
            tol: 1e-4,
        }
    }
}

/// Per-feature RMS on the training set; zero columns keep scale 1.
fn feature_scales(features: &[Vec<f64>], k: usize) -> Vec<f64> {
    let n = features.len() as f64;
    let mut ms = vec![0.0; k];
    for f in features {
        for (m, v) in ms.iter_mut().zip(f) {
            *m += v * v / n;
        }
    }
    ms.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent on the logistic loss with an intercept, on
/// RMS-standardised features. Returns `(weights, intercept, scales, converged)`.
fn fit_logistic(train: &LabelledSet, k: usize, cfg: &LogisticSettings) -> (Vec<f64>, f64, Vec<f64>, bool) {
    let scales = feature_scales(&train.features, k);
    let xs: Vec<Vec<f64>> = train
        .features
        .iter()
        .map(|f| f.iter().zip(&scales).map(|(v, s)| v / s).collect())
        .collect();
    let n = xs.len() as f64;
    let mut w = vec![0.0; k];
    let mut c = 0.0;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..cfg.steps {
        let mut gw: Vec<f64> = w.iter().map(|v| cfg.l2 * v).collect();
        let mut gc = 0.0;
        for (x, &y) in xs.iter().zip(&train.labels) {
            let margin = y * (dot_unchecked(&w, x) + c);
            let r = -y * sigmoid(-margin) / n;
            for (g, v) in gw.iter_mut().zip(x) {
                *g += r * v;
            }
            gc += r;
        }
        grad_norm = (norm_sq(&gw) + gc * gc).sqrt();
        if grad_norm <= cfg.tol {
            break;
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= cfg.lr * g;
        }
        c -= cfg.lr * gc;
    }
    (w, c, scales, grad_norm <= cfg.tol)
}

/// Logistic regression of `sign(⟨w*, z⟩)` on frozen features.
#[allow(clippy::too_many_arguments)]
pub fn probe_classification<R: Representation + ?Sized>(
    enc: &R,
    dict: &Dictionary,
    lat: &LatentConfig,
    noise: &NoiseConfig,
    wstar: &[f64],
    n_train: usize,
    n_test: usize,
    logistic: &LogisticSettings,
    rng: &mut SeededRng,
) -> Result<ProbeResult> {
    check_probe_args(enc, wstar, dict, n_train, n_test)?;
    if !(logistic.lr > 0.0) {
        return Err(Error::Config(format!("logistic_lr must be positive, got {}", logistic.lr)));
    }
    let train = draw_classification(enc, dict, lat, noise, wstar, n_train, rng);
    let test = draw_classification(enc, dict, lat, noise, wstar, n_test, rng);
    let (w, c, scales, converged) = fit_logistic(&train, enc.dim(), logistic);
    let mut correct = 0usize;
    for (f, &y) in test.features.iter().zip(&test.labels) {
        let t: f64 = f.iter().zip(&scales).zip(&w).map(|((v, s), wv)| v / s * wv).sum::<f64>() + c;
        // A zero score carries no information; count it as half right.
        if t == 0.0 {
            correct += usize::from(rng.bernoulli(0.5));
        } else if t.signum() == y {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        task: ProbeTask::Classification,
        n_train,
        n_test,
        ridge_mu: None,
        logistic_steps: Some(logistic.steps),
        score: correct as f64 / n_test as f64,
        label_second_moment: 1.0,
        converged,
        wstar: wstar.to_vec(),
    })
}

/// Projects the representations of `samples` onto their top two principal
/// components and writes `index,label,pc1,pc2` rows.
pub fn write_pca_csv<R: Representation + ?Sized>(path: &Path, enc: &R, samples: &[Sample], labels: &[f64]) -> Result<()> {
    let feats: Vec<Vec<f64>> = samples.iter().map(|s| enc.features(s)).collect();
    let proj = pca2(&feats, enc.dim());
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "index,label,pc1,pc2").map_err(io)?;
    for (i, ((a, b), y)) in proj.iter().zip(labels).enumerate() {
        writeln!(w, "{i},{y},{a:.8e},{b:.8e}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn pca2(feats: &[Vec<f64>], k: usize) -> Vec<(f64, f64)> {
    let n = feats.len().max(1) as f64;
    let mut mu = vec![0.0; k];
    for f in feats {
        for (m, v) in mu.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut cov = nalgebra::DMatrix::<f64>::zeros(k, k);
    for f in feats {
        for a in 0..k {
            let da = f[a] - mu[a];
            for b in 0..k {
                cov[(a, b)] += da * (f[b] - mu[b]) / n;
            }
        }
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let pc = |idx: Option<&usize>, f: &[f64]| -> f64 {
        idx.map_or(0.0, |&c| (0..k).map(|a| (f[a] - mu[a]) * eig.eigenvectors[(a, c)]).sum())
    };
    feats
        .iter()
        .map(|f| (pc(order.first(), f), pc(order.get(1), f)))
        .collect()
}

/// Draws `n` classification samples (ties redrawn) with their `±1` labels.
pub fn labelled_samples(
    dict: &Dictionary,
    lat: &LatentConfig,
    noise: &NoiseConfig,
    wstar: &[f64],
    n: usize,
    rng: &mut SeededRng,
) -> (Vec<Sample>, Vec<f64>) {
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    while samples.len() < n {
        let s = sample_input(dict, lat, noise, rng);
        let y = dot_unchecked(wstar, &s.z);
        if y != 0.0 {
            labels.push(y.signum());
            samples.push(s);
        }
    }
    (samples, labels)
}

/// Probe scores attached to a record at probe steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub regression_mse: f64,
    /// Regression MSE over the test-set `E[y²]`.
    pub regression_nmse: f64,
    pub accuracy: f64,
    pub classification_converged: bool,
    /// Absolute test MSE of the oracle encoder.
    pub oracle_regression_mse: f64,
    pub oracle_accuracy: f64,
}

/// Diagnostics for one logged step. Serialised as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: String,
    pub loss: f64,
    pub sparse_fraction_mean: f64,
    pub sparse_fraction_min: f64,
    pub sparse_fraction_max: f64,
    pub sparse_fraction_pooled: f64,
    pub atom_coverage: f64,
    pub singleton_score_mean: f64,
    /// Fraction of above-median-norm neurons that are clean singletons.
    pub large_singleton_fraction: f64,
    pub rep_noise_cosine: f64,
    pub zero_rep_count: usize,
    pub activation_fraction: f64,
    pub weight_norm_mean: f64,
    pub bias_mean: f64,
    pub bias_ratio_mean: f64,
    pub singleton_threshold: f64,
    pub coverage_threshold: f64,
    pub probe: Option<ProbeScores>,
}

/// Dense fraction allowed for a neuron to count as a clean singleton.
pub const SINGLETON_MAX_DENSE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordSettings {
    pub eval_samples: usize,
    pub singleton_threshold: f64,
    pub coverage_threshold: f64,
}

/// Everything in a [`MetricsRecord`] except the loss, stage and probes.
pub fn measure(
    params: &NetworkParams,
    data: &crate::data::DataModel,
    step: u64,
    settings: &RecordSettings,
    rng: &mut SeededRng,
) -> Result<MetricsRecord> {
    let align = alignment_stats(params, &data.dict, settings.singleton_threshold)?;
    let cos = rep_noise_cosine(params, &data.dict, &data.latent, &data.noise, settings.eval_samples, rng)?;
    let act = activation_sparsity(params, &data.dict, &data.latent, &data.noise, settings.eval_samples, rng)?;
    let norms = params.row_norms();
    let ratios = params
        .biases()
        .iter()
        .zip(&norms)
        .map(|(b, n)| if *n > 0.0 { b / n } else { 0.0 });
    Ok(MetricsRecord {
        step,
        stage: String::new(),
        loss: f64::NAN,
        sparse_fraction_mean: align.mean_sparse_fraction(),
        sparse_fraction_min: align.min_sparse_fraction(),
        sparse_fraction_max: align.max_sparse_fraction(),
        sparse_fraction_pooled: align.pooled_sparse_fraction(),
        atom_coverage: align.atom_coverage(),
        singleton_score_mean: align.mean_singleton_score(),
        large_singleton_fraction: align.large_neuron_singleton_fraction(SINGLETON_MAX_DENSE_FRACTION),
        rep_noise_cosine: cos.mean,
        zero_rep_count: cos.zero_reps,
        activation_fraction: act.mean,
        weight_norm_mean: mean(norms.iter().copied()),
        bias_mean: mean(params.biases().iter().copied()),
        bias_ratio_mean: mean(ratios),
        singleton_threshold: settings.singleton_threshold,
        coverage_threshold: settings.coverage_threshold,
        probe: None,
    })
}
