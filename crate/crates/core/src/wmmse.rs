//! Weighted MMSE block-coordinate solver for the weighted sum rate problem.
//!
//! Each outer iteration updates, in order, the scalar MMSE receivers, the MMSE
//! weights and the precoders. The precoder step solves
//! `v_k = w_k u_k (A + mu I)^{-1} h_k` with `A = sum_j w_j |u_j|^2 h_j h_j^H`,
//! where the power multiplier `mu` is the smallest nonnegative value meeting
//! the power budget. `A` is diagonalized once per iteration so that the power
//! curve `p(mu) = sum_n c_n / (lambda_n + mu)^2` is cheap to evaluate.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_finite, CMat, C64};
use crate::wsr::{mrt, weighted_sum_rate};

/// Eigenvalues below this fraction of the largest are treated as exact zeros.
const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WmmseOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Relative power error accepted by the multiplier search.
    pub bisect_tol: f64,
    /// Bracket growth factor for the multiplier search.
    pub mu_growth: f64,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        Self { max_iters: 200, rel_tol: 1e-6, bisect_tol: 1e-10, mu_growth: 2.0 }
    }
}

impl WmmseOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.rel_tol >= 0.0) || !(self.bisect_tol > 0.0) || !(self.mu_growth > 1.0) {
            return Err(Error::Domain(format!("invalid WMMSE options {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WmmseResult {
    pub v: CMat,
    /// Weighted sum rate (bits) of the initial point and after every iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl WmmseResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the initial point")
    }
}

/// The spectral form of the power curve, `p(mu) = sum_n weights[n] / (eigenvalues[n] + mu)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTerms {
    pub eigenvalues: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PowerTerms {
    pub fn power(&self, mu: f64) -> f64 {
        self.eigenvalues
            .iter()
            .zip(&self.weights)
            .map(|(&l, &c)| if c == 0.0 { 0.0 } else { c / ((l + mu) * (l + mu)) })
            .sum()
    }
}

/// Smallest `mu >= 0` with `p(mu) <= p_m`, located to relative power error
/// `bisect_tol` by geometric bracketing followed by bisection.
pub fn bisect_mu(terms: &PowerTerms, p_m: f64, opts: &WmmseOptions) -> Result<f64> {
    let total: f64 = terms.weights.iter().sum();
    if !total.is_finite() || terms.eigenvalues.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::Bisection(format!(
            "non-finite or negative power terms (sum of weights {total:e})"
        )));
    }
    let p0 = terms.power(0.0);
    if p0 <= p_m {
        return Ok(0.0);
    }

    // p(mu) <= total / mu^2, so sqrt(total / p_m) is always feasible; start
    // well below it and grow.
    let ceiling = (total / p_m).sqrt();
    let mut lo = 0.0;
    let mut p_lo = p0;
    let mut hi = ceiling * 1e-6;
    let mut p_hi = terms.power(hi);
    let mut growths = 0;
    while p_hi > p_m {
        lo = hi;
        p_lo = p_hi;
        hi *= opts.mu_growth;
        p_hi = terms.power(hi);
        growths += 1;
        if growths > 4096 || !hi.is_finite() || !p_hi.is_finite() {
            return Err(Error::Bisection(format!(
                "no bracket after {growths} growth steps: mu={hi:e}, power={p_hi:e}, budget={p_m:e}, p(0)={p0:e}"
            )));
        }
    }

    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let p_mid = terms.power(mid);
        if !(p_mid <= p_lo && p_mid >= p_hi) {
            return Err(Error::Bisection(format!(
                "power curve not monotone: p({lo:e})={p_lo:e}, p({mid:e})={p_mid:e}, p({hi:e})={p_hi:e}"
            )));
        }
        if ((p_mid - p_m) / p_m).abs() <= opts.bisect_tol {
            return Ok(mid);
        }
        if p_mid > p_m {
            lo = mid;
            p_lo = p_mid;
        } else {
            hi = mid;
            p_hi = p_mid;
        }
    }
    // Interval collapsed to adjacent floats; the upper end is feasible.
    Ok(hi)
}

fn validate_inputs(h: &CMat, alpha: &[f64], noise_power: f64, p_m: f64) -> Result<()> {
    if !is_finite(h) {
        return Err(Error::NonFinite("channel matrix passed to WMMSE".into()));
    }
    if alpha.len() != h.ncols() {
        return Err(Error::Shape(format!("{} weights for {} UEs", alpha.len(), h.ncols())));
    }
    if alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) || !alpha.iter().any(|&a| a > 0.0) {
        return Err(Error::Domain(format!("weights must be >= 0 and not all zero: {alpha:?}")));
    }
    if !(noise_power > 0.0 && p_m > 0.0) {
        return Err(Error::Domain("noise power and power budget must be positive".into()));
    }
    Ok(())
}

/// One precoder update for fixed receivers and weights.
fn precoder_step(h: &CMat, recv: &[C64], mse_weight: &[f64], p_m: f64, opts: &WmmseOptions) -> Result<CMat> {
    let (n, k) = h.shape();
    let mut scaled_h = h.clone();
    let mut rhs = h.clone();
    for j in 0..k {
        let a = (mse_weight[j] * recv[j].norm_sqr()).sqrt();
        scaled_h.column_mut(j).scale_mut(a);
        rhs.column_mut(j).scale_mut(0.0);
        let coef = recv[j] * mse_weight[j];
        for r in 0..n {
            rhs[(r, j)] = h[(r, j)] * coef;
        }
    }
    let a_mat = &scaled_h * scaled_h.adjoint();
    let eig = SymmetricEigen::new(a_mat);
    let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l));
    let proj = eig.eigenvectors.adjoint() * &rhs;
    let keep: Vec<bool> = eig.eigenvalues.iter().map(|&l| l > EIGEN_FLOOR * lambda_max).collect();

    let terms = PowerTerms {
        eigenvalues: eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect(),
        weights: (0..n)
            .map(|r| if keep[r] { proj.row(r).iter().map(|z| z.norm_sqr()).sum() } else { 0.0 })
            .collect(),
    };
    let mu = bisect_mu(&terms, p_m, opts)?;

    let mut scaled_proj = proj;
    for r in 0..n {
        let s = if keep[r] { 1.0 / (terms.eigenvalues[r] + mu) } else { 0.0 };
        scaled_proj.row_mut(r).scale_mut(s);
    }
    Ok(&eig.eigenvectors * scaled_proj)
}

/// Solve the weighted sum rate problem from an MRT starting point.
pub fn wmmse_solve(h: &CMat, alpha: &[f64], noise_power: f64, p_m: f64, opts: &WmmseOptions) -> Result<WmmseResult> {
    validate_inputs(h, alpha, noise_power, p_m)?;
    opts.validate()?;
    let k = h.ncols();

    let mut v = mrt(h, p_m)?;
    let mut trace = vec![weighted_sum_rate(h, &v, alpha, noise_power)?];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        let cross = h.adjoint() * &v;
        let mut recv = Vec::with_capacity(k);
        let mut mse_weight = Vec::with_capacity(k);
        for ue in 0..k {
            let signal = cross[(ue, ue)];
            let interference: f64 = (0..k)
                .filter(|&i| i != ue)
                .map(|i| cross[(ue, i)].norm_sqr())
                .sum::<f64>()
                + noise_power;
            let total = interference + signal.norm_sqr();
            recv.push(signal / total);
            // MMSE e_k = interference / total, weight alpha_k / e_k.
            mse_weight.push(if alpha[ue] == 0.0 { 0.0 } else { alpha[ue] * total / interference });
        }

        v = precoder_step(h, &recv, &mse_weight, p_m, opts)?;
        for ue in 0..k {
            if alpha[ue] == 0.0 {
                v.column_mut(ue).fill(C64::new(0.0, 0.0));
            }
        }
        if !is_finite(&v) {
            return Err(Error::NonFinite(format!("WMMSE precoder at iteration {}", iterations + 1)));
        }
        iterations += 1;

        let f = weighted_sum_rate(h, &v, alpha, noise_power)?;
        let prev = *trace.last().unwrap();
        trace.push(f);
        if (f - prev).abs() <= opts.rel_tol * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    Ok(WmmseResult { v, objective_trace: trace, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::complex_gaussian_matrix;
    use crate::wsr::{total_power, zf};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_terms(rng: &mut ChaCha8Rng) -> PowerTerms {
        let n = rng.random_range(1..6);
        PowerTerms {
            eigenvalues: (0..n).map(|_| rng.random::<f64>() * 3.0).collect(),
            weights: (0..n).map(|_| rng.random::<f64>() + 0.01).collect(),
        }
    }

    #[test]
    fn inactive_constraint_returns_zero() {
        let terms = PowerTerms { eigenvalues: vec![2.0, 1.0], weights: vec![1.0, 0.5] };
        assert_eq!(bisect_mu(&terms, terms.power(0.0) * 1.5, &WmmseOptions::default()).unwrap(), 0.0);
    }

    #[test]
    fn multiplier_meets_the_budget() {
        let opts = WmmseOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let terms = random_terms(&mut rng);
            let p = terms.power(0.0) * rng.random_range(0.001..0.9);
            let mu = bisect_mu(&terms, p, &opts).unwrap();
            assert!(mu > 0.0);
            assert!(((terms.power(mu) - p) / p).abs() <= opts.bisect_tol * 1.0001);
        }
    }

    #[test]
    fn multiplier_decreases_with_budget() {
        let opts = WmmseOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..50 {
            let terms = random_terms(&mut rng);
            let p = terms.power(0.0) * rng.random_range(0.001..0.4);
            let mu1 = bisect_mu(&terms, p, &opts).unwrap();
            let mu2 = bisect_mu(&terms, 2.0 * p, &opts).unwrap();
            assert!(mu2 <= mu1);
            // Dense sweep: the power curve itself is decreasing on [0, 2 mu1].
            let mut last = f64::INFINITY;
            for i in 0..=400 {
                let pw = terms.power(mu1 * 2.0 * i as f64 / 400.0);
                assert!(pw <= last);
                last = pw;
            }
        }
    }

    #[test]
    fn single_user_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..10 {
            let h = complex_gaussian_matrix(&mut rng, 4, 1);
            let (noise, p) = (0.3, 2.0);
            let res = wmmse_solve(&h, &[1.7], noise, p, &WmmseOptions::default()).unwrap();
            let target = h.scale(p.sqrt() / h.norm());
            let phase = (target.adjoint() * &res.v)[(0, 0)];
            let aligned = &res.v * (phase.conj() / phase.norm());
            assert!((aligned - &target).norm() < 1e-6);
            let closed = 1.7 * (1.0 + p * h.norm_squared() / noise).log2();
            assert!((res.objective() - closed).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weight_ue_gets_no_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let h = complex_gaussian_matrix(&mut rng, 3, 2);
        let res = wmmse_solve(&h, &[1.0, 0.0], 0.5, 1.0, &WmmseOptions::default()).unwrap();
        assert!(res.v.column(1).iter().all(|z| *z == C64::new(0.0, 0.0)));
        let single = wmmse_solve(&h.columns(0, 1).into_owned(), &[1.0], 0.5, 1.0, &WmmseOptions::default()).unwrap();
        let phase = (single.v.adjoint() * res.v.columns(0, 1))[(0, 0)];
        let aligned = res.v.columns(0, 1) * (phase.conj() / phase.norm());
        assert!((aligned - &single.v).norm() < 1e-6);
    }

    #[test]
    fn beats_closed_form_baselines() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..20 {
            let h = complex_gaussian_matrix(&mut rng, 4, 3);
            let alpha: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 0.1).collect();
            let res = wmmse_solve(&h, &alpha, 0.1, 1.0, &WmmseOptions::default()).unwrap();
            let m = weighted_sum_rate(&h, &mrt(&h, 1.0).unwrap(), &alpha, 0.1).unwrap();
            let z = weighted_sum_rate(&h, &zf(&h, 1.0).unwrap(), &alpha, 0.1).unwrap();
            assert!(res.objective() >= m.max(z) - 1e-9);
            assert!(total_power(&res.v) <= 1.0 + 1e-9);
            for w in res.objective_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut h = CMat::identity(2, 2);
        let opts = WmmseOptions::default();
        assert!(matches!(wmmse_solve(&h, &[0.0, 0.0], 1.0, 1.0, &opts), Err(Error::Domain(_))));
        h[(0, 0)] = C64::new(f64::NAN, 0.0);
        assert!(matches!(wmmse_solve(&h, &[1.0, 1.0], 1.0, 1.0, &opts), Err(Error::NonFinite(_))));
    }
}
