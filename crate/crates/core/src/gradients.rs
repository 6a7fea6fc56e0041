//! Hand-derived backpropagation of the hinge loss, and the central
//! difference oracle used to check it.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::datagen::{Example, Label, TokenRole, TokenTag};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::model::{forward_cached, hinge_loss, Dims, ForwardCache, Params, MATRIX_NAMES};
use crate::rng::{seeded, Stream};

/// Gradients of the four trainable matrices (never `A`).
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub g_q: Matrix,
    pub g_k: Matrix,
    pub g_v: Matrix,
    pub g_o: Matrix,
}

impl GradSet {
    pub fn zeros_like(params: &Params) -> Self {
        GradSet {
            g_q: Matrix::zeros(params.w_q.rows(), params.w_q.cols()),
            g_k: Matrix::zeros(params.w_k.rows(), params.w_k.cols()),
            g_v: Matrix::zeros(params.w_v.rows(), params.w_v.cols()),
            g_o: Matrix::zeros(params.w_o.rows(), params.w_o.cols()),
        }
    }

    pub fn matrices(&self) -> [&Matrix; 4] {
        [&self.g_q, &self.g_k, &self.g_v, &self.g_o]
    }

    fn matrices_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.g_q, &mut self.g_k, &mut self.g_v, &mut self.g_o]
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &GradSet) {
        for (mine, theirs) in self.matrices_mut().into_iter().zip(other.matrices()) {
            mine.add_scaled(alpha, theirs).expect("gradient shapes agree");
        }
    }

    pub fn is_zero(&self) -> bool {
        self.matrices().iter().all(|m| m.max_abs() == 0.0)
    }
}

/// Subgradient of `max{1 - yF, 0}` for one example. Returns exact zeros in
/// the flat region `yF >= 1`; Relu units with zero preactivation contribute
/// nothing.
pub fn backward(params: &Params, ex: &Example) -> GradSet {
    let cache = forward_cached(params, ex);
    backward_from_cache(params, ex, &cache)
}

pub fn backward_from_cache(params: &Params, ex: &Example, cache: &ForwardCache) -> GradSet {
    let mut grads = GradSet::zeros_like(params);
    let y = ex.y.sign();
    if 1.0 - y * cache.output <= 0.0 {
        return grads;
    }
    let Dims { m, m_a, m_b, seq_len, .. } = params.dims;
    let coef = -y / ex.s_set.len() as f64;

    let mut d_q = Matrix::zeros(m_b, seq_len);
    let mut d_k = Matrix::zeros(m_b, seq_len);
    let mut d_v = Matrix::zeros(m_a, seq_len);
    let mut g = vec![0.0; m];

    for (slot, &l) in ex.s_set.iter().enumerate() {
        let (s, u, h) = (&cache.attn[slot], &cache.value[slot], &cache.pre[slot]);
        for i in 0..m {
            g[i] = if h[i] > 0.0 { coef * params.a[(i, l)] } else { 0.0 };
        }
        // ∂/∂W_O: g uᵀ
        for (i, &gi) in g.iter().enumerate() {
            if gi != 0.0 {
                axpy(gi, u, grads.g_o.row_mut(i));
            }
        }
        // Back through W_O into the attended value.
        let p = params.w_o.t_matvec(&g);
        for (r, &pr) in p.iter().enumerate() {
            axpy(pr, s, d_v.row_mut(r));
        }
        // Back through V s into the attention vector, then the softmax Jacobian.
        let ds = cache.v.t_matvec(&p);
        let mean = dot(s, &ds);
        let dz: Vec<f64> = s.iter().zip(&ds).map(|(si, di)| si * (di - mean)).collect();
        // z = Kᵀ q_l
        let q_l = cache.q.column(l);
        for (r, &qr) in q_l.iter().enumerate() {
            axpy(qr, &dz, d_k.row_mut(r));
        }
        let dq_l = cache.k.matvec(&dz);
        for (r, &v) in dq_l.iter().enumerate() {
            d_q[(r, l)] += v;
        }
    }

    let xt = ex.x.transpose();
    grads.g_q = d_q.matmul(&xt).expect("shapes agree");
    grads.g_k = d_k.matmul(&xt).expect("shapes agree");
    grads.g_v = d_v.matmul(&xt).expect("shapes agree");
    grads
}

/// Mean of per-example gradients, summed in slice order.
pub fn batch_gradient(params: &Params, batch: &[&Example]) -> Result<GradSet> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = GradSet::zeros_like(params);
    for ex in batch {
        total.add_scaled(1.0, &backward(params, ex));
    }
    let scale = 1.0 / batch.len() as f64;
    for m in total.matrices_mut() {
        *m = m.scale(scale);
    }
    Ok(total)
}

fn perturbed(params: &Params, which: usize, idx: usize, delta: f64) -> Params {
    let mut p = params.clone();
    p.trainable_mut()[which].as_mut_slice()[idx] += delta;
    p
}

/// Central differences of an arbitrary scalar function of the trainable
/// matrices.
pub fn central_difference<F>(params: &Params, eps: f64, loss: F) -> Result<GradSet>
where
    F: Fn(&Params) -> f64,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let mut out = GradSet::zeros_like(params);
    for which in 0..4 {
        let n = params.trainable()[which].as_slice().len();
        for idx in 0..n {
            let plus = loss(&perturbed(params, which, idx, eps));
            let minus = loss(&perturbed(params, which, idx, -eps));
            out.matrices_mut()[which].as_mut_slice()[idx] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(out)
}

/// Which side of every kink the loss sits on: hinge active flag plus the
/// sign pattern of every Relu preactivation.
fn kink_signature(cache: &ForwardCache, y: f64) -> (bool, Vec<bool>) {
    let active = 1.0 - y * cache.output > 0.0;
    let mask = cache.pre.iter().flat_map(|h| h.iter().map(|&v| v > 0.0)).collect();
    (active, mask)
}

/// Central-difference gradient of the hinge loss. Fails with
/// [`Error::Degenerate`] when some probe crosses the hinge or a Relu kink,
/// in which case the point is not differentiable at this resolution.
pub fn finite_diff_grad(params: &Params, ex: &Example, eps: f64) -> Result<GradSet> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let y = ex.y.sign();
    let base = kink_signature(&forward_cached(params, ex), y);
    let crossed = std::cell::Cell::new(false);
    let grads = central_difference(params, eps, |p| {
        let cache = forward_cached(p, ex);
        if kink_signature(&cache, y) != base {
            crossed.set(true);
        }
        hinge_loss(cache.output, y)
    })?;
    if crossed.get() {
        return Err(Error::Degenerate(format!("evaluation point lies within {eps:e} of a kink")));
    }
    Ok(grads)
}

/// `‖analytic − reference‖_F / max(‖reference‖_F, 1e-12)`
pub fn relative_error(analytic: &Matrix, reference: &Matrix) -> f64 {
    analytic.sub(reference).expect("shapes agree").frobenius_norm() / reference.frobenius_norm().max(1e-12)
}

pub const DEFAULT_FD_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub trials: usize,
    pub seed: u64,
    pub eps: f64,
    pub max_rel_error: f64,
    /// Worst relative error per matrix, keyed `W_Q`, `W_K`, `W_V`, `W_O`.
    pub per_matrix: BTreeMap<String, f64>,
    /// Instances redrawn because they sat too close to a kink.
    pub resampled: usize,
}

/// Small random instance: `d = 4`, `L = 3`, `m = 6`, `m_a = m_b = 4`.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R) -> (Params, Example) {
    let dims = Dims { d: 4, seq_len: 3, num_patterns: 4, m: 6, m_a: 4, m_b: 4 };
    let amp = 1.0 / (dims.m as f64).sqrt();
    let mut a = Matrix::zeros(dims.m, dims.seq_len);
    for v in a.as_mut_slice() {
        *v = if rng.random::<bool>() { amp } else { -amp };
    }
    let params = Params {
        w_q: Matrix::random_normal(dims.m_b, dims.d, 0.8, rng),
        w_k: Matrix::random_normal(dims.m_b, dims.d, 0.8, rng),
        w_v: Matrix::random_normal(dims.m_a, dims.d, 0.8, rng),
        w_o: Matrix::random_normal(dims.m, dims.m_a, 0.8, rng),
        a,
        dims,
    };
    let x = Matrix::random_normal(dims.d, dims.seq_len, 0.6, rng);
    let tags = vec![TokenTag { pattern: 0, role: TokenRole::Irrelevant }; dims.seq_len];
    let mut ex = Example::new(x, Label::Pos, tags).expect("consistent shapes");
    // Keep the hinge active so the comparison is informative.
    if 1.0 - forward_cached(&params, &ex).output <= 0.0 {
        ex.y = Label::Neg;
    }
    (params, ex)
}

/// Compares [`backward`] with [`finite_diff_grad`] on `trials` seeded random
/// instances.
pub fn check_gradients(trials: usize, seed: u64) -> Result<GradReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let mut rng = seeded(seed, Stream::GradCheck);
    let mut worst = [0.0f64; 4];
    let mut resampled = 0;
    let mut done = 0;
    while done < trials {
        let (params, ex) = random_instance(&mut rng);
        let fd = match finite_diff_grad(&params, &ex, DEFAULT_FD_EPS) {
            Ok(g) => g,
            Err(Error::Degenerate(_)) => {
                resampled += 1;
                if resampled > 100 * trials {
                    return Err(Error::Degenerate("could not find smooth evaluation points".into()));
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        let analytic = backward(&params, &ex);
        for (k, (a, f)) in analytic.matrices().iter().zip(fd.matrices()).enumerate() {
            worst[k] = worst[k].max(relative_error(a, f));
        }
        done += 1;
    }
    Ok(GradReport {
        trials,
        seed,
        eps: DEFAULT_FD_EPS,
        max_rel_error: worst.iter().cloned().fold(0.0, f64::max),
        per_matrix: MATRIX_NAMES.iter().map(|n| n.to_string()).zip(worst).collect(),
        resampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;

    fn smooth_instance(seed: u64) -> (Params, Example) {
        let mut rng = seeded(seed, Stream::Scratch);
        loop {
            let (p, e) = random_instance(&mut rng);
            if finite_diff_grad(&p, &e, 1e-3).is_ok() {
                return (p, e);
            }
        }
    }

    #[test]
    fn inactive_hinge_has_zero_gradient() {
        let (mut p, mut ex) = smooth_instance(1);
        // Scale the readout until the margin is comfortably above one.
        let f = forward(&p, &ex);
        ex.y = if f > 0.0 { Label::Pos } else { Label::Neg };
        p.w_o = p.w_o.scale(2.0 / f.abs());
        assert!(ex.y.sign() * forward(&p, &ex) >= 1.0);
        assert!(backward(&p, &ex).is_zero());
        assert!(finite_diff_grad(&p, &ex, 1e-6).unwrap().is_zero());
    }

    #[test]
    fn dead_neuron_has_zero_row() {
        let (mut p, ex) = smooth_instance(2);
        let cache = forward_cached(&p, &ex);
        // Force neuron 0 negative for every query by flipping it against the attended values.
        let mean: Vec<f64> = (0..4).map(|r| cache.value.iter().map(|u| u[r]).sum::<f64>()).collect();
        let row: Vec<f64> = mean.iter().map(|v| -v * 100.0).collect();
        p.w_o.row_mut(0).copy_from_slice(&row);
        let cache = forward_cached(&p, &ex);
        if cache.pre.iter().all(|h| h[0] < 0.0) && 1.0 - ex.y.sign() * cache.output > 0.0 {
            let g = backward(&p, &ex);
            assert!(g.g_o.row(0).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn matches_finite_differences() {
        for seed in 0..10 {
            let (p, ex) = smooth_instance(100 + seed);
            let fd = match finite_diff_grad(&p, &ex, 1e-6) {
                Ok(g) => g,
                Err(_) => continue,
            };
            let an = backward(&p, &ex);
            for (a, f) in an.matrices().iter().zip(fd.matrices()) {
                assert!(relative_error(a, f) <= 1e-5, "seed {seed}: {}", relative_error(a, f));
            }
        }
    }

    #[test]
    fn quadratic_surrogate_is_exact() {
        let (p, _) = smooth_instance(3);
        // loss = Σ c_k ‖W_k‖², gradient 2 c_k W_k.
        let c = [0.5, 1.5, -2.0, 3.0];
        let loss = |q: &Params| {
            q.trainable().iter().zip(c).map(|(m, ck)| ck * m.frobenius_norm().powi(2)).sum::<f64>()
        };
        let fd = central_difference(&p, 1e-4, loss).unwrap();
        for ((g, w), ck) in fd.matrices().iter().zip(p.trainable()).zip(c) {
            let expect = w.scale(2.0 * ck);
            assert!(g.sub(&expect).unwrap().max_abs() < 1e-8);
        }
    }

    #[test]
    fn halving_eps_quarters_the_error() {
        let (p, ex) = smooth_instance(4);
        let an = backward(&p, &ex);
        let err = |eps: f64| {
            let fd = finite_diff_grad(&p, &ex, eps).unwrap();
            an.matrices()
                .iter()
                .zip(fd.matrices())
                .map(|(a, f)| a.sub(f).unwrap().frobenius_norm().powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let (e1, e2) = (err(2e-3), err(1e-3));
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn bad_eps_rejected() {
        let (p, ex) = smooth_instance(5);
        assert!(finite_diff_grad(&p, &ex, 0.0).is_err());
    }

    #[test]
    fn kink_proximity_is_detected() {
        let (mut p, ex) = smooth_instance(6);
        // Put the margin right at the hinge kink.
        let f = forward(&p, &ex);
        p.w_o = p.w_o.scale(ex.y.sign() / f);
        let res = finite_diff_grad(&p, &ex, 1e-4);
        assert!(matches!(res, Err(Error::Degenerate(_))), "{res:?}");
    }

    #[test]
    fn check_gradients_report() {
        let r = check_gradients(20, 7).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
        assert_eq!(r.per_matrix.len(), 4);
        assert_eq!(r, check_gradients(20, 7).unwrap());
        assert!(check_gradients(0, 7).is_err());
    }

    #[test]
    fn batch_gradient_is_mean_of_examples() {
        let mut rng = seeded(9, Stream::Scratch);
        let (p, e1) = random_instance(&mut rng);
        let (_, e2) = random_instance(&mut rng);
        let (_, e3) = random_instance(&mut rng);
        let batch = [&e1, &e2, &e3];
        let mean = batch_gradient(&p, &batch).unwrap();
        let mut manual = GradSet::zeros_like(&p);
        for e in batch {
            manual.add_scaled(1.0 / 3.0, &backward(&p, e));
        }
        for (a, b) in mean.matrices().iter().zip(manual.matrices()) {
            assert!(a.sub(b).unwrap().max_abs() <= 1e-12);
        }
        // And the gradient of the mean loss, by central differences.
        let loss = |q: &Params| {
            batch.iter().map(|e| hinge_loss(forward(q, e), e.y.sign())).sum::<f64>() / 3.0
        };
        let fd = central_difference(&p, 1e-6, loss).unwrap();
        for (a, f) in mean.matrices().iter().zip(fd.matrices()) {
            assert!(relative_error(a, f) <= 1e-5);
        }
        assert!(batch_gradient(&p, &[]).is_err());
    }
}
