//! Single-cell downlink channel generation.
//!
//! UEs are dropped area-uniformly on an annulus around the base station, the
//! large-scale gain follows a log-distance pathloss anchored at 1 m, and the
//! small-scale part is i.i.d. Rayleigh. Episodes evolve the small-scale part
//! with a first-order Gauss-Markov recursion while large-scale gains stay fixed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{complex_gaussian, CMat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Geometry {
    pub cell_radius_m: f64,
    pub min_distance_m: f64,
    /// Pathloss at the 1 m reference distance.
    pub pathloss_1m_db: f64,
    /// Pathloss slope in dB per decade of distance.
    pub pathloss_exponent_coeff: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            cell_radius_m: 200.0,
            min_distance_m: 10.0,
            pathloss_1m_db: 13.54,
            pathloss_exponent_coeff: 39.08,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_distance_m > 0.0 && self.min_distance_m < self.cell_radius_m) {
            return Err(Error::Domain(format!(
                "need 0 < min_distance_m ({}) < cell_radius_m ({})",
                self.min_distance_m, self.cell_radius_m
            )));
        }
        if !(self.pathloss_1m_db > 0.0 && self.pathloss_exponent_coeff > 0.0) {
            return Err(Error::Domain("pathloss constants must be positive".into()));
        }
        Ok(())
    }

    /// CDF of the area-uniform UE distance on the annulus.
    pub fn distance_cdf(&self, d: f64) -> f64 {
        let (r0, r1) = (self.min_distance_m, self.cell_radius_m);
        ((d * d - r0 * r0) / (r1 * r1 - r0 * r0)).clamp(0.0, 1.0)
    }
}

/// Pathloss in dB at distance `d` meters.
pub fn pathloss_db(d: f64, g: &Geometry) -> Result<f64> {
    if !(d >= 1.0) {
        return Err(Error::Domain(format!(
            "pathloss model is anchored at 1 m, got d = {d}"
        )));
    }
    Ok(g.pathloss_1m_db + g.pathloss_exponent_coeff * d.log10())
}

/// Linear power gain `10^(-PL(d)/10)`.
pub fn linear_gain(d: f64, g: &Geometry) -> Result<f64> {
    Ok(10f64.powf(-pathloss_db(d, g)? / 10.0))
}

/// Noise power such that a full-power single-UE transmission at the cell
/// edge is received at `snr_edge_db`.
pub fn noise_power_for_edge_snr(snr_edge_db: f64, p_m: f64, g: &Geometry) -> Result<f64> {
    if !(p_m > 0.0) {
        return Err(Error::Domain(format!("power budget must be positive, got {p_m}")));
    }
    let edge_gain = linear_gain(g.cell_radius_m, g)?;
    Ok(p_m * edge_gain / 10f64.powf(snr_edge_db / 10.0))
}

/// One optimization instance: channel matrix (column `k` is `h_k`), noise
/// power, power budget and the UE distances that produced the gains.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: CMat,
    pub noise_power: f64,
    pub power_budget: f64,
    pub ue_distances_m: Vec<f64>,
}

impl ChannelRealization {
    pub fn new(h: CMat, noise_power: f64, power_budget: f64, ue_distances_m: Vec<f64>) -> Result<Self> {
        if h.nrows() == 0 || h.ncols() == 0 {
            return Err(Error::Shape("channel matrix must be at least 1x1".into()));
        }
        if ue_distances_m.len() != h.ncols() {
            return Err(Error::Shape(format!(
                "{} distances for {} UEs",
                ue_distances_m.len(),
                h.ncols()
            )));
        }
        if !crate::linalg::is_finite(&h) {
            return Err(Error::NonFinite("channel matrix".into()));
        }
        if !(noise_power > 0.0 && power_budget > 0.0) {
            return Err(Error::Domain("noise power and power budget must be positive".into()));
        }
        Ok(Self { h, noise_power, power_budget, ue_distances_m })
    }

    pub fn num_antennas(&self) -> usize {
        self.h.nrows()
    }

    pub fn num_ues(&self) -> usize {
        self.h.ncols()
    }

    /// Small-scale part `c_k = h_k / sqrt(gain(d_k))`.
    pub fn small_scale(&self, g: &Geometry) -> Result<CMat> {
        let mut c = self.h.clone();
        for (k, &d) in self.ue_distances_m.iter().enumerate() {
            let s = linear_gain(d, g)?.sqrt();
            c.column_mut(k).unscale_mut(s);
        }
        Ok(c)
    }
}

fn sample_distance<R: Rng + ?Sized>(rng: &mut R, g: &Geometry) -> f64 {
    let (r0, r1) = (g.min_distance_m, g.cell_radius_m);
    let u: f64 = rng.random();
    (u * (r1 * r1 - r0 * r0) + r0 * r0).sqrt()
}

fn apply_gains(c: &CMat, distances: &[f64], g: &Geometry) -> Result<CMat> {
    let mut h = c.clone();
    for (k, &d) in distances.iter().enumerate() {
        let s = linear_gain(d, g)?.sqrt();
        h.column_mut(k).scale_mut(s);
    }
    Ok(h)
}

/// Draw one channel instance. Distances are drawn first, then the small-scale
/// matrix column by column.
pub fn sample_channel<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    k: usize,
    g: &Geometry,
    snr_edge_db: f64,
    p_m: f64,
) -> Result<ChannelRealization> {
    if n == 0 || k == 0 {
        return Err(Error::Domain(format!("need n >= 1 and k >= 1, got n={n}, k={k}")));
    }
    g.validate()?;
    let distances: Vec<f64> = (0..k).map(|_| sample_distance(rng, g)).collect();
    let c = crate::linalg::complex_gaussian_matrix(rng, n, k);
    let h = apply_gains(&c, &distances, g)?;
    let noise_power = noise_power_for_edge_snr(snr_edge_db, p_m, g)?;
    ChannelRealization::new(h, noise_power, p_m, distances)
}

/// Channel matrices for consecutive slots sharing UE positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeChannels {
    pub slots: Vec<CMat>,
    pub correlation: f64,
    pub noise_power: f64,
    pub power_budget: f64,
    pub ue_distances_m: Vec<f64>,
}

impl EpisodeChannels {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn realization(&self, t: usize) -> ChannelRealization {
        ChannelRealization {
            h: self.slots[t].clone(),
            noise_power: self.noise_power,
            power_budget: self.power_budget,
            ue_distances_m: self.ue_distances_m.clone(),
        }
    }
}

/// AR(1) evolution of the small-scale fading: `c_t = rho c_{t-1} + sqrt(1-rho^2) w_t`.
pub fn evolve_episode<R: Rng + ?Sized>(
    rng: &mut R,
    base: &ChannelRealization,
    t_slots: usize,
    rho: f64,
    g: &Geometry,
) -> Result<EpisodeChannels> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Domain(format!("correlation must lie in [0, 1], got {rho}")));
    }
    let innovation_scale = (1.0 - rho * rho).sqrt();
    let mut c = base.small_scale(g)?;
    let mut slots = Vec::with_capacity(t_slots);
    for t in 0..t_slots {
        if t > 0 {
            for j in 0..c.ncols() {
                for i in 0..c.nrows() {
                    let w = complex_gaussian(rng);
                    c[(i, j)] = c[(i, j)] * rho + w * innovation_scale;
                }
            }
        }
        // rho = 1 keeps the slot bit-identical to the base realization.
        if t == 0 || rho == 1.0 {
            slots.push(base.h.clone());
        } else {
            slots.push(apply_gains(&c, &base.ue_distances_m, g)?);
        }
    }
    Ok(EpisodeChannels {
        slots,
        correlation: rho,
        noise_power: base.noise_power,
        power_budget: base.power_budget,
        ue_distances_m: base.ue_distances_m.clone(),
    })
}
