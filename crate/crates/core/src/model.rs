//! One-layer, single-head transformer with a two-layer Relu readout:
//!
//! ```text
//! F(X) = 1/|S| Σ_{l∈S} a_lᵀ Relu(W_O W_V X softmax(Xᵀ W_Kᵀ W_Q x_l))
//! ```
//!
//! The output layer `A` is drawn once and never trained.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{DataConfig, Dataset, Example};
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic, BinReader, BinWriter};
use crate::linalg::Matrix;
use crate::rng::{seeded, Stream};

/// Every dimension the parameter shapes depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub seq_len: usize,
    pub num_patterns: usize,
    pub m: usize,
    pub m_a: usize,
    pub m_b: usize,
}

impl Dims {
    pub fn new(data: &DataConfig, model: &ModelConfig) -> Self {
        Dims {
            d: data.d,
            seq_len: data.seq_len,
            num_patterns: data.num_patterns,
            m: model.m,
            m_a: model.m_a,
            m_b: model.m_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden neurons (rows of `W_O`).
    pub m: usize,
    /// Value embedding size.
    pub m_a: usize,
    /// Query/key embedding size.
    pub m_b: usize,
    /// Diagonal of the initial `W_Q`, `W_K`, `W_V`.
    pub delta: f64,
    /// Standard deviation of the initial `W_O` entries.
    pub xi: f64,
    /// Use one shared draw for every column of `A`.
    pub tied_output: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m: 200,
            m_a: 20,
            m_b: 20,
            delta: 0.1,
            xi: 0.1,
            tied_output: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 0.2) {
            return Err(Error::validation("model.delta", format!("delta must lie in (0, 0.2], got {}", self.delta)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::validation("model.xi", "xi must be positive"));
        }
        for (key, v) in [("model.m", self.m), ("model.m_a", self.m_a), ("model.m_b", self.m_b)] {
            if v == 0 {
                return Err(Error::validation(key, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Trainable weights plus the frozen output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `m_b × d`
    pub w_q: Matrix,
    /// `m_b × d`
    pub w_k: Matrix,
    /// `m_a × d`
    pub w_v: Matrix,
    /// `m × m_a`; row `i` is neuron `o_i`.
    pub w_o: Matrix,
    /// `m × L`; column `l` is `a_(l)`.
    pub a: Matrix,
    pub dims: Dims,
}

fn diag_rect(rows: usize, cols: usize, value: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows.min(cols) {
        m[(i, i)] = value;
    }
    m
}

/// Initial weights: `δ` on the diagonals of `W_Q`, `W_K`, `W_V`; `W_O`
/// entries `N(0, ξ²)`; `A` entries `±1/√m` with equal probability.
pub fn init_params(mc: &ModelConfig, dims: Dims) -> Result<Params> {
    if !(mc.delta > 0.0 && mc.delta <= 0.2) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 0.2], got {}", mc.delta)));
    }
    mc.validate()?;
    if dims.d == 0 || dims.seq_len == 0 {
        return Err(Error::InvalidArgument("d and L must be positive".into()));
    }
    let mut rng = seeded(mc.seed, Stream::Init);
    let w_o = Matrix::random_normal(dims.m, dims.m_a, mc.xi, &mut rng);
    let amp = 1.0 / (dims.m as f64).sqrt();
    let draw = |rng: &mut crate::rng::LabRng| if rng.random::<bool>() { amp } else { -amp };
    let mut a = Matrix::zeros(dims.m, dims.seq_len);
    if mc.tied_output {
        let col: Vec<f64> = (0..dims.m).map(|_| draw(&mut rng)).collect();
        for l in 0..dims.seq_len {
            a.set_column(l, &col);
        }
    } else {
        for v in a.as_mut_slice() {
            *v = draw(&mut rng);
        }
    }
    Ok(Params {
        w_q: diag_rect(dims.m_b, dims.d, mc.delta),
        w_k: diag_rect(dims.m_b, dims.d, mc.delta),
        w_v: diag_rect(dims.m_a, dims.d, mc.delta),
        w_o,
        a,
        dims,
    })
}

impl Params {
    fn check_example(&self, x: &Matrix) {
        assert_eq!(x.rows(), self.dims.d, "token dimension does not match model");
        assert_eq!(x.cols(), self.a.cols(), "sequence length does not match model");
    }

    /// The four trainable matrices, in `Q, K, V, O` order.
    pub fn trainable(&self) -> [&Matrix; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    pub fn trainable_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }

    /// Sign of neuron `i`'s output weight in the first column of `A`.
    pub fn neuron_sign(&self, i: usize) -> f64 {
        self.a[(i, 0)].signum()
    }
}

pub const MATRIX_NAMES: [&str; 4] = ["W_Q", "W_K", "W_V", "W_O"];

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    z.iter_mut().for_each(|v| *v /= total);
}

/// Intermediate values of one forward pass, reused by backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `W_Q X`, `m_b × L`
    pub q: Matrix,
    /// `W_K X`, `m_b × L`
    pub k: Matrix,
    /// `W_V X`, `m_a × L`
    pub v: Matrix,
    /// Per query in `S`: attention vector (length `L`).
    pub attn: Vec<Vec<f64>>,
    /// Per query in `S`: attended value `V s_l` (length `m_a`).
    pub value: Vec<Vec<f64>>,
    /// Per query in `S`: hidden preactivation `W_O V s_l` (length `m`).
    pub pre: Vec<Vec<f64>>,
    pub output: f64,
}

/// Softmax attention of query `l` over the `L` tokens of `x`.
pub fn attention_weights(params: &Params, x: &Matrix, l: usize) -> Vec<f64> {
    params.check_example(x);
    let q = params.w_q.matvec(&x.column(l));
    let k = params.w_k.matmul(x).expect("shapes checked");
    let mut z = k.t_matvec(&q);
    softmax_in_place(&mut z);
    z
}

pub fn forward_cached(params: &Params, ex: &Example) -> ForwardCache {
    let x = &ex.x;
    params.check_example(x);
    let q = params.w_q.matmul(x).expect("shapes checked");
    let k = params.w_k.matmul(x).expect("shapes checked");
    let v = params.w_v.matmul(x).expect("shapes checked");
    let n_s = ex.s_set.len();
    let mut attn = Vec::with_capacity(n_s);
    let mut value = Vec::with_capacity(n_s);
    let mut pre = Vec::with_capacity(n_s);
    let mut total = 0.0;
    for &l in &ex.s_set {
        let mut s = k.t_matvec(&q.column(l));
        softmax_in_place(&mut s);
        let u = v.matvec(&s);
        let h = params.w_o.matvec(&u);
        total += h
            .iter()
            .enumerate()
            .filter(|(_, &hi)| hi > 0.0)
            .map(|(i, &hi)| params.a[(i, l)] * hi)
            .sum::<f64>();
        attn.push(s);
        value.push(u);
        pre.push(h);
    }
    ForwardCache {
        q,
        k,
        v,
        attn,
        value,
        pre,
        output: total / n_s as f64,
    }
}

/// Model output `F(X)`.
pub fn forward(params: &Params, ex: &Example) -> f64 {
    forward_cached(params, ex).output
}

pub fn hinge_loss(f_value: f64, y: f64) -> f64 {
    (1.0 - y * f_value).max(0.0)
}

pub fn example_loss(params: &Params, ex: &Example) -> f64 {
    hinge_loss(forward(params, ex), ex.y.sign())
}

/// Mean hinge loss over `dataset`.
pub fn empirical_risk(params: &Params, dataset: &Dataset) -> Result<f64> {
    empirical_risk_of(params, &dataset.examples)
}

pub fn empirical_risk_of(params: &Params, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let total: f64 = examples.iter().map(|e| example_loss(params, e)).sum();
    Ok(total / examples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub hinge: f64,
    pub zero_one_error: f64,
    pub attn_on_relevant: f64,
}

/// Test-set hinge loss, 0-1 error (`F = 0` counts as wrong) and mean
/// attention mass placed on label-relevant tokens.
pub fn evaluate(params: &Params, testset: &Dataset) -> Result<Metrics> {
    evaluate_examples(params, &testset.examples)
}

pub fn evaluate_examples(params: &Params, examples: &[Example]) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let (mut hinge, mut wrong, mut attn) = (0.0, 0usize, 0.0);
    for ex in examples {
        let cache = forward_cached(params, ex);
        let y = ex.y.sign();
        hinge += hinge_loss(cache.output, y);
        if y * cache.output <= 0.0 {
            wrong += 1;
        }
        let mask = ex.relevant_mask();
        let per_query: f64 = cache
            .attn
            .iter()
            .map(|s| s.iter().zip(&mask).filter(|(_, &m)| m).map(|(w, _)| w).sum::<f64>())
            .sum();
        attn += per_query / cache.attn.len() as f64;
    }
    let n = examples.len() as f64;
    Ok(Metrics {
        hinge: hinge / n,
        zero_one_error: wrong as f64 / n,
        attn_on_relevant: attn / n,
    })
}

/// Inner product helper exposed for tests and analysis.
pub fn neuron_output(params: &Params, i: usize, l: usize, hidden: &[f64]) -> f64 {
    params.a[(i, l)] * hidden[i].max(0.0)
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"LRWS";
const SNAPSHOT_VERSION: u32 = 1;

impl Params {
    /// Weight snapshot, little-endian:
    ///
    /// ```text
    /// "LRWS" u32:version u64:iteration
    /// u64: d L M m m_a m_b
    /// f64: W_Q (m_b*d), W_K (m_b*d), W_V (m_a*d), W_O (m*m_a), A (m*L), each row-major
    /// ```
    pub fn to_bytes(&self, iteration: u64) -> Vec<u8> {
        let d = self.dims;
        let mut w = BinWriter::default();
        w.bytes(SNAPSHOT_MAGIC);
        w.u32(SNAPSHOT_VERSION);
        w.u64(iteration);
        for v in [d.d, d.seq_len, d.num_patterns, d.m, d.m_a, d.m_b] {
            w.u64(v as u64);
        }
        for m in [&self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.a] {
            w.f64s(m.as_slice());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(u64, Params)> {
        let mut r = BinReader::new(bytes, path);
        r.expect_magic(SNAPSHOT_MAGIC)?;
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let iteration = r.u64()?;
        let dims = Dims {
            d: r.usize()?,
            seq_len: r.usize()?,
            num_patterns: r.usize()?,
            m: r.usize()?,
            m_a: r.usize()?,
            m_b: r.usize()?,
        };
        let mut read = |rows: usize, cols: usize| -> Result<Matrix> {
            let data = r.f64s(rows * cols)?;
            Matrix::from_vec(rows, cols, data).map_err(|e| r.err(e.to_string()))
        };
        let w_q = read(dims.m_b, dims.d)?;
        let w_k = read(dims.m_b, dims.d)?;
        let w_v = read(dims.m_a, dims.d)?;
        let w_o = read(dims.m, dims.m_a)?;
        let a = read(dims.m, dims.seq_len)?;
        r.finish()?;
        Ok((iteration, Params { w_q, w_k, w_v, w_o, a, dims }))
    }

    pub fn save(&self, path: &Path, iteration: u64) -> Result<()> {
        write_atomic(path, &self.to_bytes(iteration))
    }

    pub fn load(path: &Path) -> Result<(u64, Params)> {
        Params::from_bytes(&read_file(path)?, path)
    }
}
