//! Weighted sum rate objective, power normalization and the closed-form
//! MRT / ZF precoders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, is_finite, CMat};

/// Nonnegative per-UE weights with at least one positive entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UeWeights(Vec<f64>);

impl UeWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Domain(format!("weights must be finite and >= 0: {alpha:?}")));
        }
        if !alpha.iter().any(|&a| a > 0.0) {
            return Err(Error::Domain("at least one weight must be positive".into()));
        }
        Ok(Self(alpha))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for UeWeights {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub sinr: Vec<f64>,
    /// Per-UE rate in bits per channel use.
    pub rate: Vec<f64>,
    pub weighted_sum_rate: f64,
}

pub(crate) fn check_shapes(h: &CMat, v: &CMat, alpha: &[f64]) -> Result<()> {
    if h.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "channel is {:?} but precoder is {:?}",
            h.shape(),
            v.shape()
        )));
    }
    if alpha.len() != h.ncols() {
        return Err(Error::Shape(format!(
            "{} weights for {} UEs",
            alpha.len(),
            h.ncols()
        )));
    }
    Ok(())
}

/// Per-UE SINR, base-2 rate and the weighted sum rate of precoder `v` on
/// channel `h`.
pub fn rate_report(h: &CMat, v: &CMat, alpha: &[f64], noise_power: f64) -> Result<RateReport> {
    check_shapes(h, v, alpha)?;
    if !(noise_power > 0.0) {
        return Err(Error::Domain(format!("noise power must be positive, got {noise_power}")));
    }
    // gains[(k, i)] = |h_k^H v_i|^2
    let gains = (h.adjoint() * v).map(|z| z.norm_sqr());
    let k = h.ncols();
    let mut sinr = Vec::with_capacity(k);
    let mut rate = Vec::with_capacity(k);
    let mut wsr = 0.0;
    for ue in 0..k {
        let total: f64 = gains.row(ue).iter().sum();
        let signal = gains[(ue, ue)];
        let s = signal / (total - signal + noise_power);
        let r = s.ln_1p() / std::f64::consts::LN_2;
        wsr += alpha[ue] * r;
        sinr.push(s);
        rate.push(r);
    }
    Ok(RateReport { sinr, rate, weighted_sum_rate: wsr })
}

pub fn weighted_sum_rate(h: &CMat, v: &CMat, alpha: &[f64], noise_power: f64) -> Result<f64> {
    Ok(rate_report(h, v, alpha, noise_power)?.weighted_sum_rate)
}

pub fn total_power(v: &CMat) -> f64 {
    frobenius_sq(v)
}

/// Rescale `v` so that its total power is exactly `p_m`.
pub fn project_power(v: &CMat, p_m: f64) -> Result<CMat> {
    let norm = v.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::ZeroPrecoder);
    }
    Ok(v.scale(p_m.sqrt() / norm))
}

/// Maximum ratio transmission with equal power per UE.
pub fn mrt(h: &CMat, p_m: f64) -> Result<CMat> {
    let k = h.ncols();
    let per_ue = (p_m / k as f64).sqrt();
    let mut v = h.clone();
    for (j, mut col) in v.column_iter_mut().enumerate() {
        let n = col.norm();
        if !(n > 0.0) {
            return Err(Error::Domain(format!("MRT needs nonzero channel columns; column {j} is zero")));
        }
        col.scale_mut(per_ue / n);
    }
    Ok(v)
}

/// Zero forcing `H (H^H H)^{-1}` with each column scaled to `p_m / K`.
pub fn zf(h: &CMat, p_m: f64) -> Result<CMat> {
    let (n, k) = h.shape();
    if k > n {
        return Err(Error::Singular(format!("zero forcing needs K <= N, got N={n}, K={k}")));
    }
    let sv = h.singular_values();
    let (smax, smin) = sv.iter().fold((0.0f64, f64::INFINITY), |(a, b), &s| (a.max(s), b.min(s)));
    if !(smin > 1e-12 * smax) {
        return Err(Error::Singular(format!(
            "Gram matrix H^H H is rank deficient (singular values {smin:e} / {smax:e})"
        )));
    }
    let gram = h.adjoint() * h;
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Singular("Gram matrix H^H H could not be inverted".into()))?;
    let mut v = h * inv;
    if !is_finite(&v) {
        return Err(Error::Singular("Gram matrix inverse is not finite".into()));
    }
    let per_ue = (p_m / k as f64).sqrt();
    for mut col in v.column_iter_mut() {
        let c = col.norm();
        col.scale_mut(per_ue / c);
    }
    Ok(v)
}
