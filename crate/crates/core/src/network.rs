//! One-hidden-layer encoder with symmetrized-ReLU (soft-threshold) units:
//! `h_i(x) = ReLU(<w_i,x> - b_i) - ReLU(-<w_i,x> - b_i) = sign(u)·max(|u| - b_i, 0)`.

use std::io::{Read, Write};
use std::path::Path;

use crate::linalg::{dot_unchecked, Mat64};
use crate::rng::SeededRng;
use crate::{Error, Result};

/// Magic prefix of the checkpoint format, version 1.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCCKPT01";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub sigma0_sq: f64,
}

impl InitConfig {
    /// `sigma0^2 = 1 / (d1 d^2)`.
    pub fn default_for(d: usize, d1: usize) -> Self {
        Self {
            sigma0_sq: 1.0 / (d1 as f64 * (d as f64).powi(2)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    w: Mat64,
    b: Vec<f64>,
    w0: Mat64,
}

impl NetworkParams {
    pub fn new(w: Mat64, b: Vec<f64>) -> Result<Self> {
        Self::with_init(w.clone(), b, w)
    }

    pub fn with_init(w: Mat64, b: Vec<f64>, w0: Mat64) -> Result<Self> {
        if b.len() != w.rows() {
            return Err(Error::DimensionMismatch {
                op: "NetworkParams::new (bias)",
                expected: w.rows(),
                got: b.len(),
            });
        }
        if w0.shape() != w.shape() {
            return Err(Error::DimensionMismatch {
                op: "NetworkParams::new (init snapshot)",
                expected: w.rows() * w.cols(),
                got: w0.rows() * w0.cols(),
            });
        }
        if let Some(bad) = b.iter().find(|&&v| !(v >= 0.0)) {
            return Err(Error::Config(format!("biases must be non-negative, got {bad}")));
        }
        Ok(Self { w, b, w0 })
    }

    /// Number of neurons.
    pub fn m(&self) -> usize {
        self.w.rows()
    }

    pub fn d1(&self) -> usize {
        self.w.cols()
    }

    pub fn weights(&self) -> &Mat64 {
        &self.w
    }

    pub fn weights_mut(&mut self) -> &mut Mat64 {
        &mut self.w
    }

    pub fn biases(&self) -> &[f64] {
        &self.b
    }

    /// Replaces all biases; negative values are rejected.
    pub fn set_biases(&mut self, b: Vec<f64>) -> Result<()> {
        if b.len() != self.m() {
            return Err(Error::DimensionMismatch {
                op: "NetworkParams::set_biases",
                expected: self.m(),
                got: b.len(),
            });
        }
        if let Some(bad) = b.iter().find(|&&v| !(v >= 0.0)) {
            return Err(Error::Config(format!("biases must be non-negative, got {bad}")));
        }
        self.b = b;
        Ok(())
    }

    pub fn init_weights(&self) -> &Mat64 {
        &self.w0
    }

    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.m()).map(|i| crate::linalg::norm(self.w.row(i))).collect()
    }

    pub fn init_row_norms(&self) -> Vec<f64> {
        (0..self.m()).map(|i| crate::linalg::norm(self.w0.row(i))).collect()
    }

    /// `h_i(x)` for one neuron.
    #[inline]
    pub fn neuron(&self, i: usize, x: &[f64]) -> f64 {
        soft_threshold(dot_unchecked(self.w.row(i), x), self.b[i])
    }

    /// `f(x)` without the bookkeeping of [`forward`].
    pub fn represent(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok((0..self.m()).map(|i| self.neuron(i, x)).collect())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d1() {
            return Err(Error::DimensionMismatch {
                op: "network input",
                expected: self.d1(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + 8 * (2 * self.w.as_slice().len() + self.m()));
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.m() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.d1() as u64).to_le_bytes());
        for v in self.w.as_slice().iter().chain(&self.b).chain(self.w0.as_slice()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 24 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let read_u64 = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let m = read_u64(8) as usize;
        let d1 = read_u64(16) as usize;
        let expected = 24 + 8 * (2 * m * d1 + m);
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                format!("expected {expected} bytes for m={m}, d1={d1}, found {}", bytes.len()),
            ));
        }
        let floats: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (w, rest) = floats.split_at(m * d1);
        let (b, w0) = rest.split_at(m);
        Self::with_init(
            Mat64::from_row_major(m, d1, w.to_vec())?,
            b.to_vec(),
            Mat64::from_row_major(m, d1, w0.to_vec())?,
        )
        .map_err(|e| Error::format(path, e.to_string()))
    }
}

#[inline]
pub fn soft_threshold(u: f64, b: f64) -> f64 {
    (u - b).max(0.0) - (-u - b).max(0.0)
}

/// Rows `w_i ~ N(0, sigma0^2 I)`, zero biases, init snapshot stored.
pub fn init_params(m: usize, d1: usize, cfg: &InitConfig, rng: &mut SeededRng) -> Result<NetworkParams> {
    if m == 0 || d1 == 0 {
        return Err(Error::EmptyDimension("init_params"));
    }
    let sigma = cfg.sigma0_sq.sqrt();
    let data = (0..m * d1).map(|_| sigma * rng.standard_normal()).collect();
    NetworkParams::new(Mat64::from_row_major(m, d1, data)?, vec![0.0; m])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    /// `f(x)`.
    pub rep: Vec<f64>,
    /// `u_i = <w_i, x>`.
    pub pre: Vec<f64>,
    /// `|u_i| >= b_i`.
    pub active: Vec<bool>,
}

pub fn forward(params: &NetworkParams, x: &[f64]) -> Result<ForwardResult> {
    params.check_input(x)?;
    let m = params.m();
    let mut rep = Vec::with_capacity(m);
    let mut pre = Vec::with_capacity(m);
    let mut active = Vec::with_capacity(m);
    for i in 0..m {
        let u = dot_unchecked(params.w.row(i), x);
        let b = params.b[i];
        pre.push(u);
        active.push(u.abs() >= b);
        rep.push(soft_threshold(u, b));
    }
    Ok(ForwardResult { rep, pre, active })
}

/// `∂h_i/∂w_i = 1{|<w_i,x>| >= b_i} x`. The kink takes subgradient 1.
pub fn weight_jacobian_row(params: &NetworkParams, x: &[f64], i: usize) -> Result<Vec<f64>> {
    params.check_input(x)?;
    if i >= params.m() {
        return Err(Error::DimensionMismatch {
            op: "weight_jacobian_row (neuron index)",
            expected: params.m(),
            got: i,
        });
    }
    let u = dot_unchecked(params.w.row(i), x);
    Ok(if u.abs() >= params.b[i] {
        x.to_vec()
    } else {
        vec![0.0; x.len()]
    })
}
