//! Post-training analysis of the weight updates `ΔW = W^(T) − W^(0)`:
//! singular spectra, projections onto the pattern basis, low-rank
//! reconstruction sweeps, neuron statistics of `W_O`, and a checker that
//! turns the expected low-rank/sparse structure into pass/fail thresholds.

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, PatternSet};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, row_norms, svd, truncate_rank, Matrix};
use crate::model::{evaluate, Metrics, Params, MATRIX_NAMES};
use crate::trainer::TrainTrajectory;

/// `W^(t) − W^(0)` for each trainable matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaWeights {
    pub d_q: Matrix,
    pub d_k: Matrix,
    pub d_v: Matrix,
    pub d_o: Matrix,
}

impl DeltaWeights {
    pub fn between(from: &Params, to: &Params) -> Result<Self> {
        Ok(DeltaWeights {
            d_q: to.w_q.sub(&from.w_q)?,
            d_k: to.w_k.sub(&from.w_k)?,
            d_v: to.w_v.sub(&from.w_v)?,
            d_o: to.w_o.sub(&from.w_o)?,
        })
    }

    pub fn matrices(&self) -> [&Matrix; 4] {
        [&self.d_q, &self.d_k, &self.d_v, &self.d_o]
    }
}

pub fn delta(trajectory: &TrainTrajectory, at_iter: usize) -> Result<DeltaWeights> {
    DeltaWeights::between(&trajectory.initial, trajectory.params_at(at_iter)?)
}

/// Singular values of `dw`, descending.
pub fn spectrum(dw: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(dw)?.s)
}

/// `P_ij = μ_iᵀ ΔW μ_j` for a square update acting on the pattern space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionTable {
    pub p: Matrix,
}

impl ProjectionTable {
    /// Share of squared projection mass in the rows of the two
    /// discriminative patterns. Zero for an all-zero table.
    pub fn discriminative_energy(&self) -> f64 {
        let total: f64 = self.p.as_slice().iter().map(|v| v * v).sum();
        if total == 0.0 {
            return 0.0;
        }
        let top: f64 = (0..2).flat_map(|i| self.p.row(i)).map(|v| v * v).sum();
        top / total
    }

    /// Largest `|P_ij|` with `i` outside the discriminative rows.
    pub fn max_off_target(&self) -> f64 {
        (2..self.p.rows()).flat_map(|i| self.p.row(i)).fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub fn projection_table(dw: &Matrix, patterns: &PatternSet) -> Result<ProjectionTable> {
    let d = patterns.dim();
    if dw.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "projection needs a {d}x{d} update, got {}x{}",
            dw.rows(),
            dw.cols()
        )));
    }
    let mu = patterns.matrix();
    // P = U ΔW Uᵀ with the patterns as rows of U.
    let p = mu.matmul(dw)?.matmul(&mu.transpose())?;
    Ok(ProjectionTable { p })
}

/// Weights `W^(0) + truncate_rank(ΔW, r)` for every trainable matrix.
pub fn low_rank_params(initial: &Params, trained: &Params, rank: usize) -> Result<Params> {
    let dw = DeltaWeights::between(initial, trained)?;
    let mut out = initial.clone();
    for (w, d) in out.trainable_mut().into_iter().zip(dw.matrices()) {
        w.add_scaled(1.0, &truncate_rank(d, rank)?)?;
    }
    Ok(out)
}

/// Test metrics of the model rebuilt from rank-`r` truncations of the final updates.
pub fn rank_sweep(trajectory: &TrainTrajectory, ranks: &[usize], testset: &Dataset) -> Result<Vec<(usize, Metrics)>> {
    if let Some(&r) = ranks.iter().find(|&&r| r == 0) {
        return Err(Error::InvalidArgument(format!("rank {r} is not allowed; ranks start at 1")));
    }
    ranks
        .iter()
        .map(|&r| {
            let p = low_rank_params(&trajectory.initial, &trajectory.final_params, r)?;
            Ok((r, evaluate(&p, testset)?))
        })
        .collect()
}

/// Two-class Otsu split of `values`: the cut maximizing between-class
/// variance over all split points of the sorted values. Returns the number
/// of values in the lower class and the cut (midpoint between classes).
pub fn otsu_split(values: &[f64]) -> (usize, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return (0, 0.0);
    }
    if v[0] == v[n - 1] {
        // One mode only: all small if it is the zero mode, otherwise none.
        return if v[0] == 0.0 { (n, f64::INFINITY) } else { (0, v[0]) };
    }
    let total: f64 = v.iter().sum();
    let mut left = 0.0;
    let mut best = (0usize, f64::NEG_INFINITY);
    for k in 1..n {
        left += v[k - 1];
        if v[k] == v[k - 1] {
            continue;
        }
        let (w0, w1) = (k as f64 / n as f64, (n - k) as f64 / n as f64);
        let (m0, m1) = (left / k as f64, (total - left) / (n - k) as f64);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best.1 {
            best = (k, between);
        }
    }
    (best.0, 0.5 * (v[best.0 - 1] + v[best.0]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeuronStats {
    /// Row norms of `W_O`, ascending.
    pub sorted_norms: Vec<f64>,
    /// Row norms in neuron order.
    pub norms: Vec<f64>,
    pub threshold: f64,
    pub small_fraction: f64,
    /// Per-neuron `|o_iᵀ μ_target| / ‖o_i‖`, target pattern 0 for positive
    /// output weights and pattern 1 for negative ones.
    pub alignment: Vec<f64>,
    /// Neurons above the norm threshold.
    pub large: Vec<bool>,
}

/// Target pattern for neuron `i` from the sign of its first output weight.
fn target_pattern(a: &Matrix, i: usize) -> usize {
    if a[(i, 0)] > 0.0 {
        0
    } else {
        1
    }
}

pub fn alignments(w_o: &Matrix, a: &Matrix, patterns: &PatternSet) -> Vec<f64> {
    (0..w_o.rows())
        .map(|i| {
            let row = w_o.row(i);
            dot(row, patterns.get(target_pattern(a, i))).abs() / norm(row).max(1e-12)
        })
        .collect()
}

pub fn neuron_stats(w_o: &Matrix, a: &Matrix, patterns: &PatternSet) -> NeuronStats {
    let norms = row_norms(w_o);
    let (n_small, threshold) = otsu_split(&norms);
    let mut sorted_norms = norms.clone();
    sorted_norms.sort_by(f64::total_cmp);
    let large = norms.iter().map(|&x| x > threshold).collect();
    NeuronStats {
        sorted_norms,
        small_fraction: n_small as f64 / norms.len() as f64,
        threshold,
        alignment: alignments(w_o, a, patterns),
        large,
        norms,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// `min(P_11, P_22)` must exceed this multiple of the largest off-target projection.
    pub dominance_factor: f64,
    pub energy_min: f64,
    pub spectral_ratio_max: f64,
    pub small_range: [f64; 2],
    pub align_min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            dominance_factor: 3.0,
            energy_min: 0.85,
            spectral_ratio_max: 0.1,
            small_range: [0.3, 0.5],
            align_min: 0.7,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if self.dominance_factor.is_nan() || self.dominance_factor <= 0.0 {
            return Err(Error::validation("analysis.dominance_factor", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.energy_min) {
            return Err(Error::validation("analysis.energy_min", "must lie in [0, 1]"));
        }
        if self.spectral_ratio_max.is_nan() || self.spectral_ratio_max < 0.0 {
            return Err(Error::validation("analysis.spectral_ratio_max", "must be >= 0"));
        }
        let [lo, hi] = self.small_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::validation("analysis.small_range", "need 0 <= lo <= hi <= 1"));
        }
        if !(0.0..=1.0).contains(&self.align_min) {
            return Err(Error::validation("analysis.align_min", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixCheck {
    pub matrix: String,
    pub p11: f64,
    pub p22: f64,
    pub max_off_target: f64,
    pub dominance_pass: bool,
    pub energy_ratio: f64,
    pub energy_pass: bool,
    pub sigma_ratio_21: f64,
    pub sigma_ratio_32: f64,
    pub spectral_pass: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeuronCheck {
    pub norm_threshold: f64,
    pub small_fraction: f64,
    pub small_pass: bool,
    pub large_count: usize,
    pub mean_alignment_weights: f64,
    pub mean_alignment_delta: f64,
    pub align_pass: bool,
    /// Counts of row norms in 20 equal bins over `[0, max norm]`.
    pub norm_histogram: Vec<usize>,
    pub histogram_max: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremReport {
    pub thresholds: Thresholds,
    pub matrices: Vec<MatrixCheck>,
    pub w_o: NeuronCheck,
    pub notes: Vec<String>,
    pub pass: bool,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn check_matrix(name: &str, dw: &Matrix, patterns: &PatternSet, th: &Thresholds) -> Result<MatrixCheck> {
    let table = projection_table(dw, patterns)?;
    let (p11, p22) = (table.p[(0, 0)], table.p[(1, 1)]);
    let max_off_target = table.max_off_target();
    let dominance_pass = p11.min(p22) > th.dominance_factor * max_off_target;
    let energy_ratio = table.discriminative_energy();
    let energy_pass = energy_ratio >= th.energy_min;
    let mut s = spectrum(dw)?;
    s.resize(3.max(s.len()), 0.0);
    let sigma_ratio_21 = ratio(s[1], s[0]);
    let sigma_ratio_32 = ratio(s[2], s[1]);
    let spectral_pass = sigma_ratio_32 <= th.spectral_ratio_max;
    Ok(MatrixCheck {
        matrix: name.to_string(),
        p11,
        p22,
        max_off_target,
        dominance_pass,
        energy_ratio,
        energy_pass,
        sigma_ratio_21,
        sigma_ratio_32,
        spectral_pass,
        pass: dominance_pass && energy_pass && spectral_pass,
    })
}

fn histogram(values: &[f64], bins: usize) -> (Vec<usize>, f64) {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let mut counts = vec![0; bins];
    for &v in values {
        let b = if max > 0.0 { ((v / max) * bins as f64) as usize } else { 0 };
        counts[b.min(bins - 1)] += 1;
    }
    (counts, max)
}

fn mean_over(values: &[f64], mask: &[bool]) -> f64 {
    let picked: Vec<f64> = values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    if picked.is_empty() {
        0.0
    } else {
        picked.iter().sum::<f64>() / picked.len() as f64
    }
}

/// Checks the final updates of a run against the low-rank and sparsity
/// thresholds. Failures are reported in the returned value, never raised.
pub fn theorem_check(trajectory: &TrainTrajectory, patterns: &PatternSet, thresholds: &Thresholds) -> Result<TheoremReport> {
    let dw = DeltaWeights::between(&trajectory.initial, &trajectory.final_params)?;
    let matrices = [&dw.d_q, &dw.d_k, &dw.d_v]
        .iter()
        .zip(MATRIX_NAMES)
        .map(|(m, name)| check_matrix(name, m, patterns, thresholds))
        .collect::<Result<Vec<_>>>()?;

    let trained = &trajectory.final_params;
    let stats = neuron_stats(&trained.w_o, &trained.a, patterns);
    let [lo, hi] = thresholds.small_range;
    let small_pass = (lo..=hi).contains(&stats.small_fraction);
    let delta_align = alignments(&dw.d_o, &trained.a, patterns);
    let mean_alignment_weights = mean_over(&stats.alignment, &stats.large);
    let mean_alignment_delta = mean_over(&delta_align, &stats.large);
    let large_count = stats.large.iter().filter(|&&l| l).count();
    let align_pass = large_count > 0
        && mean_alignment_weights >= thresholds.align_min
        && mean_alignment_delta >= thresholds.align_min;
    let (norm_histogram, histogram_max) = histogram(&stats.norms, 20);
    let w_o = NeuronCheck {
        norm_threshold: stats.threshold,
        small_fraction: stats.small_fraction,
        small_pass,
        large_count,
        mean_alignment_weights,
        mean_alignment_delta,
        align_pass,
        norm_histogram,
        histogram_max,
        pass: small_pass && align_pass,
    };
    let pass = matrices.iter().all(|m| m.pass) && w_o.pass;
    Ok(TheoremReport {
        thresholds: thresholds.clone(),
        matrices,
        w_o,
        notes: vec![
            "neurons outside the large-norm set are checked as having small norm; \
             the lower-bound form of that condition is read as a typo for an upper bound"
                .into(),
            "neuron target pattern uses the sign of the first output-layer column".into(),
        ],
        pass,
    })
}
