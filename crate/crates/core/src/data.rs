//! Sparse-coding data distribution and the RandomMask augmentation.
//!
//! Inputs are `x = M z + xi` with a column-orthonormal dictionary `M`
//! (`d1 x d`), a symmetric ternary latent `z` and spherical Gaussian noise
//! `xi`. The orthocomplement of `span(M)` is never materialised; dense
//! energy is always `|w|^2 - |Mᵀ w|^2`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::{self, Mat64};
use crate::rng::SeededRng;
use crate::{Error, Result};

/// Default retry budget for the infinity-norm rejection loop.
pub const DICTIONARY_RETRY_BUDGET: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    m: Mat64,
    /// `Mᵀ`, kept so that `M z` for sparse `z` touches only active atoms.
    mt: Mat64,
    infinity_bound: f64,
    attempts: usize,
}

impl Dictionary {
    /// Wraps an existing matrix, checking column orthonormality.
    pub fn from_matrix(m: Mat64) -> Result<Self> {
        let (d1, d) = m.shape();
        if d == 0 || d1 < d {
            return Err(Error::Config(format!(
                "dictionary must satisfy 1 <= d <= d1, got d={d}, d1={d1}"
            )));
        }
        let residual = m
            .transpose()
            .matmul(&m)?
            .max_abs_diff(&Mat64::identity(d));
        if residual > 1e-10 {
            return Err(Error::Decomposition(format!(
                "dictionary columns are not orthonormal (residual {residual:.3e})"
            )));
        }
        let infinity_bound = m.max_abs();
        Ok(Self {
            mt: m.transpose(),
            m,
            infinity_bound,
            attempts: 1,
        })
    }

    pub fn matrix(&self) -> &Mat64 {
        &self.m
    }

    /// Number of atoms.
    pub fn d(&self) -> usize {
        self.m.cols()
    }

    /// Ambient dimension.
    pub fn d1(&self) -> usize {
        self.m.rows()
    }

    pub fn infinity_bound(&self) -> f64 {
        self.infinity_bound
    }

    /// Number of Gaussian draws the rejection loop needed.
    pub fn attempts(&self) -> usize {
        self.attempts
    }

    pub fn atom(&self, j: usize) -> Vec<f64> {
        self.m.column(j)
    }

    /// `Mᵀ v`, the coordinates of `v` along every atom.
    pub fn coords(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.m.t_matvec(v)
    }

    /// `M z`.
    pub fn embed(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d() {
            return Err(Error::DimensionMismatch {
                op: "Dictionary::embed",
                expected: self.d(),
                got: z.len(),
            });
        }
        let mut x = vec![0.0; self.d1()];
        for (j, &zj) in z.iter().enumerate() {
            if zj != 0.0 {
                linalg::axpy_unchecked(zj, self.mt.row(j), &mut x);
            }
        }
        Ok(x)
    }

    /// Writes the dictionary as CSV: a `d,d1` header line, a line with the two
    /// values, then `d1` rows of `d` comma-separated entries.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "d,d1").map_err(io)?;
        writeln!(w, "{},{}", self.d(), self.d1()).map_err(io)?;
        for i in 0..self.d1() {
            let line: Vec<String> = self.m.row(i).iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::format(path, "unexpected end of file"))?
                .map_err(|e| Error::io(path, e))
        };
        if next()?.trim() != "d,d1" {
            return Err(Error::format(path, "missing `d,d1` header"));
        }
        let dims = next()?;
        let parsed: Vec<usize> = dims
            .trim()
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("bad dimension line: {e}")))?;
        let [d, d1] = parsed[..] else {
            return Err(Error::format(path, "dimension line must hold `d,d1`"));
        };
        let mut data = Vec::with_capacity(d * d1);
        for _ in 0..d1 {
            let line = next()?;
            let row: Vec<f64> = line
                .trim()
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("bad entry: {e}")))?;
            if row.len() != d {
                return Err(Error::format(
                    path,
                    format!("row has {} entries, expected {d}", row.len()),
                ));
            }
            data.extend(row);
        }
        Self::from_matrix(Mat64::from_row_major(d1, d, data)?)
    }
}

/// `c_inf * sqrt(ln d1 / d1)`, the accepted infinity-norm bound. For `d1 = 1`
/// the logarithm vanishes and the bound is taken as 1.
pub fn infinity_norm_limit(d1: usize, c_inf: f64) -> f64 {
    if d1 <= 1 {
        return 1.0_f64.max(c_inf);
    }
    let d1 = d1 as f64;
    c_inf * (d1.ln() / d1).sqrt()
}

/// Gaussian matrix, QR, and rejection until every entry satisfies the
/// infinity-norm bound.
pub fn build_dictionary(d: usize, d1: usize, c_inf: f64, rng: &mut SeededRng) -> Result<Dictionary> {
    build_dictionary_with_budget(d, d1, c_inf, DICTIONARY_RETRY_BUDGET, rng)
}

pub fn build_dictionary_with_budget(
    d: usize,
    d1: usize,
    c_inf: f64,
    budget: usize,
    rng: &mut SeededRng,
) -> Result<Dictionary> {
    if d == 0 || d > d1 {
        return Err(Error::Config(format!(
            "dictionary requires 1 <= d <= d1, got d={d}, d1={d1}"
        )));
    }
    let limit = infinity_norm_limit(d1, c_inf);
    let mut last_bound = f64::NAN;
    for attempt in 1..=budget {
        let data = (0..d1 * d).map(|_| rng.standard_normal()).collect();
        let a = Mat64::from_row_major(d1, d, data)?;
        let q = match linalg::qr_orthonormalize(&a) {
            Ok(q) => q,
            Err(_) => continue,
        };
        let bound = q.max_abs();
        if bound <= limit {
            return Ok(Dictionary {
                mt: q.transpose(),
                m: q,
                infinity_bound: bound,
                attempts: attempt,
            });
        }
        last_bound = bound;
    }
    Err(Error::DictionaryConstruction {
        attempts: budget,
        reason: format!(
            "infinity norm {last_bound:.4} never met the limit {limit:.4} (c_inf = {c_inf})"
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    /// `Pr(|z_j| = 1)`.
    pub p_active: f64,
}

impl LatentConfig {
    /// `p = c_z * ln ln d / d`.
    pub fn from_constant(c_z: f64, d: usize) -> Self {
        let df = d as f64;
        Self {
            p_active: c_z * df.ln().ln() / df,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_active) {
            return Err(Error::Config(format!(
                "p_active must lie in [0, 1], got {}",
                self.p_active
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_xi_sq: f64,
}

impl NoiseConfig {
    /// `sigma_xi^2 = sqrt(ln d) / d`.
    pub fn default_for(d: usize) -> Self {
        let df = d as f64;
        Self {
            sigma_xi_sq: df.ln().sqrt() / df,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_xi_sq.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub z: Vec<f64>,
    pub xi: Vec<f64>,
    pub x: Vec<f64>,
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    z: Vec<i8>,
    xi: &'a [f64],
    x: &'a [f64],
}

impl Sample {
    /// Builds `x = M z + xi`.
    pub fn compose(dict: &Dictionary, z: Vec<f64>, xi: Vec<f64>) -> Result<Self> {
        let mut x = dict.embed(&z)?;
        if xi.len() != x.len() {
            return Err(Error::DimensionMismatch {
                op: "Sample::compose",
                expected: x.len(),
                got: xi.len(),
            });
        }
        for (xv, n) in x.iter_mut().zip(&xi) {
            *xv += n;
        }
        Ok(Self { z, xi, x })
    }

    /// One JSON object `{z, xi, x}` with integer `z`.
    pub fn to_json_line(&self) -> String {
        let rec = SampleRecord {
            z: self.z.iter().map(|&v| v as i8).collect(),
            xi: &self.xi,
            x: &self.x,
        };
        serde_json::to_string(&rec).expect("sample serialises")
    }
}

/// Each coordinate is `+1` w.p. `p/2`, `-1` w.p. `p/2`, else 0. One uniform per
/// coordinate: `u < p/2` gives `+1`, `p/2 <= u < p` gives `-1`.
pub fn sample_latent(cfg: &LatentConfig, d: usize, rng: &mut SeededRng) -> Vec<f64> {
    let half = cfg.p_active / 2.0;
    (0..d)
        .map(|_| {
            let u = rng.uniform();
            if u < half {
                1.0
            } else if u < cfg.p_active {
                -1.0
            } else {
                0.0
            }
        })
        .collect()
}

pub fn sample_input(
    dict: &Dictionary,
    lat: &LatentConfig,
    noise: &NoiseConfig,
    rng: &mut SeededRng,
) -> Sample {
    let z = sample_latent(lat, dict.d(), rng);
    let sigma = noise.sigma();
    let xi: Vec<f64> = (0..dict.d1()).map(|_| sigma * rng.standard_normal()).collect();
    Sample::compose(dict, z, xi).expect("dimensions come from the dictionary")
}

/// Fresh unaugmented negatives.
pub fn sample_negatives(
    dict: &Dictionary,
    lat: &LatentConfig,
    noise: &NoiseConfig,
    count: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Config("negative count must be at least 1".into()));
    }
    Ok((0..count).map(|_| sample_input(dict, lat, noise, rng)).collect())
}

/// The two complementary views of one input under a coordinate mask `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    /// Diagonal of `D`.
    pub mask: Vec<bool>,
    /// `2 D x`.
    pub x_plus: Vec<f64>,
    /// `2 (I - D) x`.
    pub x_plusplus: Vec<f64>,
}

impl AugmentedPair {
    /// Applies a given mask. Exposed so tests can force `D`.
    pub fn with_mask(x: &[f64], mask: Vec<bool>) -> Result<Self> {
        if mask.len() != x.len() {
            return Err(Error::DimensionMismatch {
                op: "AugmentedPair::with_mask",
                expected: x.len(),
                got: mask.len(),
            });
        }
        let mut x_plus = vec![0.0; x.len()];
        let mut x_plusplus = vec![0.0; x.len()];
        for (l, (&xv, &keep)) in x.iter().zip(&mask).enumerate() {
            if keep {
                x_plus[l] = 2.0 * xv;
            } else {
                x_plusplus[l] = 2.0 * xv;
            }
        }
        Ok(Self {
            mask,
            x_plus,
            x_plusplus,
        })
    }

    /// The degenerate pair `(x, x)` used without augmentation.
    pub fn identity(x: &[f64]) -> Self {
        Self {
            mask: vec![true; x.len()],
            x_plus: x.to_vec(),
            x_plusplus: x.to_vec(),
        }
    }
}

/// RandomMask: `D_ll ~ Bernoulli(1/2)` independently.
pub fn random_mask(x: &[f64], rng: &mut SeededRng) -> AugmentedPair {
    let mask = (0..x.len()).map(|_| rng.bernoulli(0.5)).collect();
    AugmentedPair::with_mask(x, mask).expect("mask length matches input")
}

/// Dictionary plus the latent and noise laws: everything needed to draw inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DataModel {
    pub dict: Dictionary,
    pub latent: LatentConfig,
    pub noise: NoiseConfig,
}

impl DataModel {
    pub fn sample(&self, rng: &mut SeededRng) -> Sample {
        sample_input(&self.dict, &self.latent, &self.noise, rng)
    }

    pub fn negatives(&self, count: usize, rng: &mut SeededRng) -> Result<Vec<Sample>> {
        sample_negatives(&self.dict, &self.latent, &self.noise, count, rng)
    }
}

/// Writes `samples` as JSON lines.
pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        writeln!(w, "{}", s.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    fn rng(seed: u64) -> SeededRng {
        SeededRng::new(seed, 0)
    }

    #[test]
    fn scalar_dictionary_is_plus_minus_one() {
        let dict = build_dictionary(1, 1, 4.0, &mut rng(1)).unwrap();
        assert!((dict.matrix()[(0, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dictionary_is_column_orthonormal() {
        let dict = build_dictionary(8, 64, 4.0, &mut rng(2)).unwrap();
        let g = dict.matrix().transpose().matmul(dict.matrix()).unwrap();
        assert!(g.max_abs_diff(&Mat64::identity(8)) <= 1e-10);
    }

    #[test]
    fn dictionary_acceptance_rate_over_seeds() {
        let limit = infinity_norm_limit(256, 4.0);
        assert!((limit - 0.589).abs() < 1e-3, "limit {limit}");
        let mut first_try = 0;
        for seed in 0..100 {
            let dict = build_dictionary(8, 256, 4.0, &mut rng(seed)).unwrap();
            assert!(dict.infinity_bound() <= limit);
            if dict.attempts() == 1 {
                first_try += 1;
            }
        }
        assert!(first_try >= 90, "accepted on first draw for {first_try}/100 seeds");
    }

    #[test]
    fn tight_bound_exhausts_budget() {
        let err = build_dictionary_with_budget(8, 64, 0.01, 5, &mut rng(3)).unwrap_err();
        assert!(matches!(err, Error::DictionaryConstruction { attempts: 5, .. }));
    }

    #[test]
    fn latent_extremes() {
        let z = sample_latent(&LatentConfig { p_active: 0.0 }, 50, &mut rng(4));
        assert!(z.iter().all(|&v| v == 0.0));
        let z = sample_latent(&LatentConfig { p_active: 1.0 }, 50, &mut rng(4));
        assert!(z.iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn latent_activation_frequency() {
        let d = 32;
        let cfg = LatentConfig::from_constant(2.0, d);
        let p = cfg.p_active;
        let mut r = rng(5);
        let draws = 100_000;
        let (mut active, mut plus) = (0usize, 0usize);
        for _ in 0..draws {
            let z = sample_latent(&cfg, d, &mut r);
            active += z.iter().filter(|&&v| v != 0.0).count();
            plus += z.iter().filter(|&&v| v > 0.0).count();
        }
        let n = (draws * d) as f64;
        let freq = active as f64 / n;
        let band = 3.0 * (p * (1.0 - p) / n).sqrt();
        assert!((freq - p).abs() <= band, "freq {freq} vs p {p} (band {band})");
        let plus_share = plus as f64 / active as f64;
        assert!((plus_share - 0.5).abs() < 3.0 * (0.25 / active as f64).sqrt());
    }

    #[test]
    fn zero_input_when_no_signal_and_no_noise() {
        let dict = build_dictionary(4, 16, 4.0, &mut rng(6)).unwrap();
        let s = sample_input(
            &dict,
            &LatentConfig { p_active: 0.0 },
            &NoiseConfig { sigma_xi_sq: 0.0 },
            &mut rng(7),
        );
        assert!(s.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_atom_reconstructs_column() {
        let dict = build_dictionary(4, 16, 4.0, &mut rng(6)).unwrap();
        let mut z = vec![0.0; 4];
        z[2] = 1.0;
        let s = Sample::compose(&dict, z, vec![0.0; 16]).unwrap();
        let atom = dict.atom(2);
        assert_eq!(s.x, atom);
        assert!((dot(&s.x, &atom).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_residual_is_tiny() {
        let d = 32;
        let dict = build_dictionary(d, 256, 4.0, &mut rng(8)).unwrap();
        let lat = LatentConfig::from_constant(2.0, d);
        let noise = NoiseConfig::default_for(d);
        let mut r = rng(9);
        for _ in 0..50 {
            let s = sample_input(&dict, &lat, &noise, &mut r);
            let mz = dict.embed(&s.z).unwrap();
            for ((x, m), xi) in s.x.iter().zip(&mz).zip(&s.xi) {
                assert!((x - m - xi).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn noise_energy_moment() {
        let d = 32;
        let dict = build_dictionary(d, 256, 4.0, &mut rng(10)).unwrap();
        let lat = LatentConfig::from_constant(2.0, d);
        let noise = NoiseConfig::default_for(d);
        let expected = 256.0 * (32f64).ln().sqrt() / 32.0;
        assert!((expected - 14.8932).abs() < 1e-4);
        let mut r = rng(11);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| linalg::norm_sq(&sample_input(&dict, &lat, &noise, &mut r).xi))
            .sum::<f64>()
            / n as f64;
        assert!((mean / expected - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn mask_of_zero_input() {
        let pair = random_mask(&[0.0; 8], &mut rng(12));
        assert!(pair.x_plus.iter().chain(&pair.x_plusplus).all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_mask() {
        let x = [1.0, -2.0, 3.5];
        let pair = AugmentedPair::with_mask(&x, vec![true; 3]).unwrap();
        assert_eq!(pair.x_plus, vec![2.0, -4.0, 7.0]);
        assert_eq!(pair.x_plusplus, vec![0.0; 3]);
    }

    #[test]
    fn views_are_complementary() {
        let mut r = rng(13);
        let x: Vec<f64> = (0..64).map(|_| r.standard_normal()).collect();
        let pair = random_mask(&x, &mut r);
        for ((a, b), v) in pair.x_plus.iter().zip(&pair.x_plusplus).zip(&x) {
            assert_eq!(a + b, 2.0 * v);
        }
        assert_eq!(dot(&pair.x_plus, &pair.x_plusplus).unwrap(), 0.0);
    }

    #[test]
    fn mask_mean_recovers_input() {
        let mut r = rng(14);
        let x: Vec<f64> = (0..16).map(|_| r.standard_normal()).collect();
        let n = 10_000;
        let mut mean = [0.0; 16];
        for _ in 0..n {
            let pair = random_mask(&x, &mut r);
            for (m, v) in mean.iter_mut().zip(&pair.x_plus) {
                *m += v / n as f64;
            }
        }
        for (m, v) in mean.iter().zip(&x) {
            // x_plus_l is 0 or 2 x_l with equal odds, so its std is |x_l|.
            let se = v.abs() / (n as f64).sqrt();
            // 16 simultaneous checks: 4 standard errors keeps the family-wise error small.
            assert!((m - v).abs() <= 4.0 * se + 1e-15);
        }
    }

    #[test]
    fn negatives_are_fresh() {
        let d = 8;
        let dict = build_dictionary(d, 64, 4.0, &mut rng(15)).unwrap();
        let lat = LatentConfig::from_constant(2.0, d);
        let noise = NoiseConfig::default_for(d);
        let mut r = rng(16);
        let one = sample_negatives(&dict, &lat, &noise, 1, &mut r).unwrap();
        assert_eq!(one.len(), 1);
        let again = sample_negatives(&dict, &lat, &noise, 1, &mut r).unwrap();
        assert_ne!(one[0].x, again[0].x);
        assert!(sample_negatives(&dict, &lat, &noise, 0, &mut r).is_err());
    }

    #[test]
    fn negative_noise_is_nearly_orthogonal() {
        let d = 32;
        let d1 = 256;
        let dict = build_dictionary(d, d1, 4.0, &mut rng(17)).unwrap();
        let lat = LatentConfig::from_constant(2.0, d);
        let noise = NoiseConfig::default_for(d);
        let negs = sample_negatives(&dict, &lat, &noise, 64, &mut rng(18)).unwrap();
        let limit = 5.0 / (d1 as f64).sqrt();
        for i in 0..negs.len() {
            for j in i + 1..negs.len() {
                let a = &negs[i].xi;
                let b = &negs[j].xi;
                let c = dot(a, b).unwrap() / (linalg::norm(a) * linalg::norm(b));
                assert!(c.abs() <= limit, "pair ({i},{j}) cosine {c}");
            }
        }
    }

    #[test]
    fn dictionary_csv_round_trip() {
        let dict = build_dictionary(3, 10, 4.0, &mut rng(19)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dict.csv");
        dict.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("d,d1"));
        assert_eq!(lines.next(), Some("3,10"));
        let back = Dictionary::read_csv(&path).unwrap();
        assert_eq!(back.matrix(), dict.matrix());
    }

    #[test]
    fn dataset_line_format() {
        let dict = build_dictionary(2, 4, 4.0, &mut rng(20)).unwrap();
        let s = Sample::compose(&dict, vec![1.0, -1.0], vec![0.0; 4]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_json_line()).unwrap();
        assert_eq!(v["z"], serde_json::json!([1, -1]));
        assert_eq!(v["x"].as_array().unwrap().len(), 4);
    }
}
