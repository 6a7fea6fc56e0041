//! Synthetic pattern data.
//!
//! Every token is a noisy copy of one of `M` orthonormal patterns. Patterns
//! 0 and 1 (zero-based) are discriminative: an example is labelled `+1` when
//! copies of pattern 0 outnumber copies of pattern 1, and `-1` in the
//! opposite case. The remaining patterns are label-irrelevant filler.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic, BinReader, BinWriter};
use crate::linalg::{axpy, norm, random_orthonormal, Matrix};
use crate::rng::{seeded, LabRng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// `x = μ + ε`, `ε ~ N(0, σ²I)`, no renormalization.
    Gaussian,
    /// `x` uniform-noise copy of `μ` inside a `τ` ball, renormalized to unit norm.
    Bounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Embedding dimension.
    pub d: usize,
    /// Tokens per example.
    #[serde(rename = "L")]
    pub seq_len: usize,
    /// Number of patterns.
    #[serde(rename = "M")]
    pub num_patterns: usize,
    pub sigma: f64,
    pub tau: f64,
    pub noise_mode: NoiseMode,
    pub n_relevant: usize,
    pub n_confusion: usize,
    /// Training-set size.
    pub n_train: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            d: 20,
            seq_len: 10,
            num_patterns: 20,
            sigma: 0.1,
            tau: 0.05,
            noise_mode: NoiseMode::Gaussian,
            n_relevant: 4,
            n_confusion: 2,
            n_train: 500,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::validation(format!("data.{key}"), msg));
        if self.d == 0 {
            return bad("d", "d must be positive");
        }
        if self.num_patterns < 2 {
            return bad("M", "need M >= 2 patterns");
        }
        if self.num_patterns > self.d {
            return bad("M", &format!("M ≤ d violated (M = {}, d = {})", self.num_patterns, self.d));
        }
        if self.seq_len == 0 {
            return bad("L", "L must be positive");
        }
        if self.n_relevant <= self.n_confusion {
            return bad("n_relevant", "n_relevant must exceed n_confusion");
        }
        if self.n_relevant + self.n_confusion > self.seq_len {
            return bad("n_relevant", "n_relevant + n_confusion must not exceed L");
        }
        if self.n_relevant + self.n_confusion < self.seq_len && self.num_patterns < 3 {
            return bad("M", "irrelevant tokens requested but M < 3");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma", "sigma must be finite and >= 0");
        }
        if !(self.tau >= 0.0 && self.tau < 1.0) {
            return bad("tau", "tau must lie in [0, 1)");
        }
        if self.n_train == 0 {
            return bad("n_train", "n_train must be >= 1");
        }
        Ok(())
    }

    /// Fraction of label-relevant tokens per example.
    pub fn alpha_star(&self) -> f64 {
        self.n_relevant as f64 / self.seq_len as f64
    }

    /// Fraction of confusion tokens per example.
    pub fn alpha_sharp(&self) -> f64 {
        self.n_confusion as f64 / self.seq_len as f64
    }

    pub fn n_irrelevant(&self) -> usize {
        self.seq_len - self.n_relevant - self.n_confusion
    }
}

/// `M` orthonormal patterns stored as the rows of an `M × d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSet {
    patterns: Matrix,
}

impl PatternSet {
    pub fn new(patterns: Matrix) -> Result<Self> {
        if patterns.rows() < 2 {
            return Err(Error::InvalidArgument("a pattern set needs at least two patterns".into()));
        }
        let gram = patterns.matmul(&patterns.transpose())?;
        let defect = gram.sub(&Matrix::identity(patterns.rows()))?.max_abs();
        if defect > 1e-10 {
            return Err(Error::InvalidInput(format!("patterns not orthonormal (defect {defect:e})")));
        }
        Ok(PatternSet { patterns })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.patterns.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.patterns.cols()
    }

    pub fn get(&self, j: usize) -> &[f64] {
        self.patterns.row(j)
    }

    /// Index of the pattern closest to `x` in Euclidean distance, and that distance.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        (0..self.len())
            .map(|j| {
                let dist = self.get(j).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                (j, dist.sqrt())
            })
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }
}

pub fn gen_patterns(config: &DataConfig) -> Result<PatternSet> {
    if config.num_patterns > config.d {
        return Err(Error::InvalidArgument(format!(
            "M ≤ d violated (M = {}, d = {})",
            config.num_patterns, config.d
        )));
    }
    PatternSet::new(random_orthonormal(config.num_patterns, config.d, config.seed)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenRole {
    Relevant,
    Confusion,
    Irrelevant,
}

impl TokenRole {
    fn code(self) -> u8 {
        match self {
            TokenRole::Relevant => 0,
            TokenRole::Confusion => 1,
            TokenRole::Irrelevant => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(TokenRole::Relevant),
            1 => Some(TokenRole::Confusion),
            2 => Some(TokenRole::Irrelevant),
            _ => None,
        }
    }
}

/// Where a token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenTag {
    /// Zero-based source pattern.
    pub pattern: usize,
    pub role: TokenRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Pos,
    Neg,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Pos => 1.0,
            Label::Neg => -1.0,
        }
    }

    pub fn from_sign(v: f64) -> Result<Self> {
        if v == 1.0 {
            Ok(Label::Pos)
        } else if v == -1.0 {
            Ok(Label::Neg)
        } else {
            Err(Error::InvalidArgument(format!("label must be +1 or -1, got {v}")))
        }
    }

    /// Discriminative pattern whose copies are label-relevant for this label.
    pub fn relevant_pattern(self) -> usize {
        match self {
            Label::Pos => 0,
            Label::Neg => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `d × L`, column `l` is token `l`.
    pub x: Matrix,
    pub y: Label,
    pub provenance: Vec<TokenTag>,
    /// Token indices averaged in the model output.
    pub s_set: Vec<usize>,
}

impl Example {
    /// Builds an example with `S = [L]` and no provenance information beyond roles given.
    pub fn new(x: Matrix, y: Label, provenance: Vec<TokenTag>) -> Result<Self> {
        if provenance.len() != x.cols() {
            return Err(Error::Shape(format!(
                "{} provenance tags for {} tokens",
                provenance.len(),
                x.cols()
            )));
        }
        let s_set = (0..x.cols()).collect();
        Ok(Example { x, y, provenance, s_set })
    }

    pub fn seq_len(&self) -> usize {
        self.x.cols()
    }

    pub fn token(&self, l: usize) -> Vec<f64> {
        self.x.column(l)
    }

    pub fn count_role(&self, role: TokenRole) -> usize {
        self.provenance.iter().filter(|t| t.role == role).count()
    }

    /// Mask of token positions carrying label-relevant tokens.
    pub fn relevant_mask(&self) -> Vec<bool> {
        self.provenance.iter().map(|t| t.role == TokenRole::Relevant).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub config: DataConfig,
    pub patterns: PatternSet,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn count_label(&self, y: Label) -> usize {
        self.examples.iter().filter(|e| e.y == y).count()
    }
}

/// Stateful sampler: one rng stream plus the round-robin cursor over
/// irrelevant patterns.
pub struct ExampleSampler<'a> {
    patterns: &'a PatternSet,
    config: &'a DataConfig,
    rng: LabRng,
    next_irrelevant: usize,
}

impl<'a> ExampleSampler<'a> {
    pub fn new(patterns: &'a PatternSet, config: &'a DataConfig, rng: LabRng) -> Result<Self> {
        config.validate()?;
        if patterns.len() != config.num_patterns || patterns.dim() != config.d {
            return Err(Error::Shape(format!(
                "pattern set is {}x{}, config wants {}x{}",
                patterns.len(),
                patterns.dim(),
                config.num_patterns,
                config.d
            )));
        }
        Ok(ExampleSampler {
            patterns,
            config,
            rng,
            next_irrelevant: 0,
        })
    }

    pub fn sample_token(&mut self, pattern_index: usize) -> Result<Vec<f64>> {
        sample_token(pattern_index, self.patterns, self.config, &mut self.rng)
    }

    pub fn sample_example(&mut self, y: Label) -> Result<Example> {
        let cfg = self.config;
        let relevant = y.relevant_pattern();
        let confusion = 1 - relevant;
        let mut tags = Vec::with_capacity(cfg.seq_len);
        tags.extend(std::iter::repeat_n(
            TokenTag { pattern: relevant, role: TokenRole::Relevant },
            cfg.n_relevant,
        ));
        tags.extend(std::iter::repeat_n(
            TokenTag { pattern: confusion, role: TokenRole::Confusion },
            cfg.n_confusion,
        ));
        let n_irr_patterns = cfg.num_patterns - 2;
        for _ in 0..cfg.n_irrelevant() {
            tags.push(TokenTag {
                pattern: 2 + self.next_irrelevant,
                role: TokenRole::Irrelevant,
            });
            self.next_irrelevant = (self.next_irrelevant + 1) % n_irr_patterns;
        }
        tags.shuffle(&mut self.rng);

        let mut x = Matrix::zeros(cfg.d, cfg.seq_len);
        for (l, tag) in tags.iter().enumerate() {
            let tok = self.sample_token(tag.pattern)?;
            x.set_column(l, &tok);
        }
        Example::new(x, y, tags)
    }
}

/// One noisy copy of pattern `pattern_index` (zero-based).
pub fn sample_token<R: Rng + ?Sized>(
    pattern_index: usize,
    patterns: &PatternSet,
    config: &DataConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if pattern_index >= patterns.len() {
        return Err(Error::InvalidArgument(format!(
            "pattern index {pattern_index} out of range for {} patterns",
            patterns.len()
        )));
    }
    let mu = patterns.get(pattern_index);
    let d = mu.len();
    let mut x = mu.to_vec();
    match config.noise_mode {
        NoiseMode::Gaussian => {
            if config.sigma > 0.0 {
                for xi in x.iter_mut() {
                    *xi += config.sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        NoiseMode::Bounded => {
            if config.tau > 0.0 {
                // A perturbation of length r tilts a unit vector by at most
                // asin(r); renormalizing then moves it a chord of
                // 2 sin(asin(r)/2). This radius keeps that chord within tau.
                let radius = config.tau * (1.0 - config.tau * config.tau / 4.0).sqrt();
                let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let dir_norm = norm(&dir);
                let u: f64 = rng.random();
                let r = radius * u.powf(1.0 / d as f64);
                if dir_norm > 0.0 {
                    axpy(r / dir_norm, &dir, &mut x);
                }
            }
            let n = norm(&x);
            x.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(x)
}

/// Majority vote over nearest patterns: `+1` if more tokens sit nearest to
/// pattern 0 than to pattern 1, `-1` in the reverse case.
pub fn label_of(x: &Matrix, patterns: &PatternSet) -> Result<Label> {
    let mut counts = [0usize; 2];
    for l in 0..x.cols() {
        let (j, _) = patterns.nearest(&x.column(l));
        if j < 2 {
            counts[j] += 1;
        }
    }
    match counts[0].cmp(&counts[1]) {
        std::cmp::Ordering::Greater => Ok(Label::Pos),
        std::cmp::Ordering::Less => Ok(Label::Neg),
        std::cmp::Ordering::Equal => Err(Error::Degenerate(format!(
            "tie between discriminative patterns ({} vs {})",
            counts[0], counts[1]
        ))),
    }
}

/// `n` examples with alternating labels `+1, -1, +1, …`.
pub fn gen_dataset(n: usize, patterns: &PatternSet, config: &DataConfig, seed: u64) -> Result<Dataset> {
    gen_dataset_on_stream(n, patterns, config, seed, Stream::TrainData)
}

/// Held-out Monte Carlo sample for population-risk estimates; drawn from a
/// stream disjoint from the training data.
pub fn gen_testset(n: usize, patterns: &PatternSet, config: &DataConfig, seed: u64) -> Result<Dataset> {
    gen_dataset_on_stream(n, patterns, config, seed, Stream::TestData)
}

fn gen_dataset_on_stream(
    n: usize,
    patterns: &PatternSet,
    config: &DataConfig,
    seed: u64,
    stream: Stream,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    let mut sampler = ExampleSampler::new(patterns, config, seeded(seed, stream))?;
    let examples = (0..n)
        .map(|i| sampler.sample_example(if i % 2 == 0 { Label::Pos } else { Label::Neg }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        examples,
        config: config.clone(),
        patterns: patterns.clone(),
    })
}

const DATASET_MAGIC: &[u8; 4] = b"LRDS";
const DATASET_VERSION: u32 = 1;

impl Dataset {
    /// Binary layout, all integers `u64` and floats `f64`, little-endian:
    ///
    /// ```text
    /// "LRDS" u32:version
    /// d L M N u8:mode(0 gaussian, 1 bounded) seed
    /// sigma tau n_relevant n_confusion
    /// patterns           M*d floats, row-major
    /// tokens             N blocks of d*L floats, each X row-major
    /// labels             N bytes (i8: +1 / -1)
    /// provenance         N*L records of (u32 pattern, u8 role: 0 relevant, 1 confusion, 2 irrelevant)
    /// s_sets             N records of (u64 len, len * u64 index)
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = BinWriter::default();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        for v in [c.d, c.seq_len, c.num_patterns, self.len()] {
            w.u64(v as u64);
        }
        w.u8(match c.noise_mode {
            NoiseMode::Gaussian => 0,
            NoiseMode::Bounded => 1,
        });
        w.u64(c.seed);
        w.f64(c.sigma);
        w.f64(c.tau);
        w.u64(c.n_relevant as u64);
        w.u64(c.n_confusion as u64);
        w.f64s(self.patterns.matrix().as_slice());
        for e in &self.examples {
            w.f64s(e.x.as_slice());
        }
        for e in &self.examples {
            w.u8(e.y.sign() as i8 as u8);
        }
        for e in &self.examples {
            for t in &e.provenance {
                w.u32(t.pattern as u32);
                w.u8(t.role.code());
            }
        }
        for e in &self.examples {
            w.u64(e.s_set.len() as u64);
            e.s_set.iter().for_each(|&i| w.u64(i as u64));
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = BinReader::new(bytes, path);
        r.expect_magic(DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let (d, seq_len, num_patterns, n) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        let noise_mode = match r.u8()? {
            0 => NoiseMode::Gaussian,
            1 => NoiseMode::Bounded,
            other => return Err(r.err(format!("unknown noise mode {other}"))),
        };
        let seed = r.u64()?;
        let sigma = r.f64()?;
        let tau = r.f64()?;
        let n_relevant = r.usize()?;
        let n_confusion = r.usize()?;
        let config = DataConfig {
            d,
            seq_len,
            num_patterns,
            sigma,
            tau,
            noise_mode,
            n_relevant,
            n_confusion,
            n_train: n.max(1),
            seed,
        };
        let bad = |r: &BinReader, e: Error| r.err(e.to_string());
        let patterns = PatternSet::new(
            Matrix::from_vec(num_patterns, d, r.f64s(num_patterns * d)?).map_err(|e| bad(&r, e))?,
        )
        .map_err(|e| bad(&r, e))?;
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            xs.push(Matrix::from_vec(d, seq_len, r.f64s(d * seq_len)?).map_err(|e| bad(&r, e))?);
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let s = r.u8()? as i8;
            labels.push(Label::from_sign(s as f64).map_err(|e| bad(&r, e))?);
        }
        let mut provs = Vec::with_capacity(n);
        for _ in 0..n {
            let mut tags = Vec::with_capacity(seq_len);
            for _ in 0..seq_len {
                let pattern = r.u32()? as usize;
                let code = r.u8()?;
                let role = TokenRole::from_code(code).ok_or_else(|| r.err(format!("unknown role {code}")))?;
                if pattern >= num_patterns {
                    return Err(r.err(format!("pattern index {pattern} out of range")));
                }
                tags.push(TokenTag { pattern, role });
            }
            provs.push(tags);
        }
        let mut examples = Vec::with_capacity(n);
        for ((x, y), provenance) in xs.into_iter().zip(labels).zip(provs) {
            let len = r.usize()?;
            let s_set = (0..len).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            if s_set.iter().any(|&i| i >= seq_len) {
                return Err(r.err("token index in S out of range"));
            }
            examples.push(Example { x, y, provenance, s_set });
        }
        r.finish()?;
        Ok(Dataset { examples, config, patterns })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::from_bytes(&read_file(path)?, path)
    }
}
