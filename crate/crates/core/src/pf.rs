//! Proportional-fairness evaluation: multi-slot episodes with inverse
//! average-rate weights, WMMSE-normalized scoring, rate CDFs and size sweeps.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{sample_channel, EpisodeChannels, Geometry};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::net::{forward, NetConfig, NetParams};
use crate::train::{sample_training_weights, WeightLaw};
use crate::wmmse::{wmmse_solve, WmmseOptions};
use crate::wsr::{mrt, rate_report, weighted_sum_rate, zf};

/// A map from `(H, alpha)` to a feasible precoder.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Wmmse(WmmseOptions),
    Mrt,
    Zf,
    Network { params: &'a NetParams, cfg: &'a NetConfig },
}

impl Policy<'_> {
    pub fn tag(&self) -> &'static str {
        match self {
            Policy::Wmmse(_) => "wmmse",
            Policy::Mrt => "mrt",
            Policy::Zf => "zf",
            Policy::Network { .. } => "network",
        }
    }

    pub fn precode(&self, h: &CMat, alpha: &[f64], noise_power: f64, p_m: f64) -> Result<CMat> {
        match self {
            Policy::Wmmse(opts) => Ok(wmmse_solve(h, alpha, noise_power, p_m, opts)?.v),
            Policy::Mrt => mrt(h, p_m),
            Policy::Zf => zf(h, p_m),
            Policy::Network { params, cfg } => forward(h, alpha, p_m, params, cfg),
        }
    }

    pub fn weighted_sum_rate(&self, sample: &Sample) -> Result<f64> {
        let c = &sample.channel;
        let v = self.precode(&c.h, &sample.alpha, c.noise_power, c.power_budget)?;
        weighted_sum_rate(&c.h, &v, &sample.alpha, c.noise_power)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfOptions {
    /// When false every slot uses the initial weights (sum-rate mode).
    pub update_weights: bool,
    pub weight_cap: f64,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self { update_weights: true, weight_cap: 1e6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub weights: Vec<f64>,
    pub source: String,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub slots: Vec<SlotRecord>,
    /// Per-UE mean rate over all slots.
    pub avg_rates: Vec<f64>,
}

/// `1 / avg` per UE, capped; a UE with zero average rate gets the cap.
pub fn pf_weights(avg_rates: &[f64], cap: f64) -> Vec<f64> {
    avg_rates
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            if r > 0.0 && 1.0 / r <= cap {
                1.0 / r
            } else {
                warn!("UE {k} average rate {r:e}; weight capped at {cap:e}");
                cap
            }
        })
        .collect()
}

fn mean_rates(slots: &[SlotRecord], k: usize) -> Vec<f64> {
    let t = slots.len() as f64;
    (0..k).map(|ue| slots.iter().map(|s| s.rates[ue]).sum::<f64>() / t).collect()
}

/// Weights implied by the recorded rates, slot by slot.
pub fn recompute_weights(trace: &EpisodeTrace, init_weights: &[f64], opts: &PfOptions) -> Vec<Vec<f64>> {
    let k = init_weights.len();
    (0..trace.slots.len())
        .map(|t| {
            if t == 0 || !opts.update_weights {
                init_weights.to_vec()
            } else {
                pf_weights(&mean_rates(&trace.slots[..t], k), opts.weight_cap)
            }
        })
        .collect()
}

pub fn run_pf_episode(
    channels: &EpisodeChannels,
    policy: &Policy<'_>,
    init_weights: &[f64],
    opts: &PfOptions,
) -> Result<EpisodeTrace> {
    if channels.is_empty() {
        return Err(Error::Domain("episode has no slots".into()));
    }
    let k = channels.slots[0].ncols();
    if init_weights.len() != k {
        return Err(Error::Shape(format!("{} initial weights for {k} UEs", init_weights.len())));
    }
    let mut slots: Vec<SlotRecord> = Vec::with_capacity(channels.len());
    for h in &channels.slots {
        let weights = if slots.is_empty() || !opts.update_weights {
            init_weights.to_vec()
        } else {
            pf_weights(&mean_rates(&slots, k), opts.weight_cap)
        };
        let v = policy.precode(h, &weights, channels.noise_power, channels.power_budget)?;
        let report = rate_report(h, &v, &weights, channels.noise_power)?;
        slots.push(SlotRecord { weights, source: policy.tag().to_string(), rates: report.rate });
    }
    let avg_rates = mean_rates(&slots, k);
    Ok(EpisodeTrace { slots, avg_rates })
}

/// WMMSE weighted sum rates used as the normalization reference.
pub fn wmmse_references(samples: &[Sample], opts: &WmmseOptions) -> Result<Vec<f64>> {
    samples.par_iter().map(|s| Policy::Wmmse(*opts).weighted_sum_rate(s)).collect()
}

/// Per-sample `WSR(policy) / WSR(WMMSE)`.
pub fn normalized_wsr_values(policy: &Policy<'_>, samples: &[Sample], refs: &[f64]) -> Result<Vec<f64>> {
    if refs.len() != samples.len() {
        return Err(Error::MissingReference(format!(
            "{} cached references for {} samples",
            refs.len(),
            samples.len()
        )));
    }
    samples
        .par_iter()
        .zip(refs.par_iter())
        .map(|(s, &r)| Ok(policy.weighted_sum_rate(s)? / r))
        .collect()
}

pub fn normalized_wsr(policy: &Policy<'_>, samples: &[Sample], refs: &[f64]) -> Result<f64> {
    let vals = normalized_wsr_values(policy, samples, refs)?;
    if vals.is_empty() {
        return Err(Error::Domain("empty test set".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean and 95% normal-approximation half-width.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NumUes,
    NumAntennas,
    Snr,
    TrainSamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub n: usize,
    pub k: usize,
    pub snr_edge_db: f64,
    #[serde(default = "one")]
    pub power_budget: f64,
    #[serde(default)]
    pub geometry: Geometry,
    pub test_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub wmmse: WmmseOptions,
    #[serde(default)]
    pub weights: WeightLaw,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub normalized_wsr_mean: f64,
    pub normalized_wsr_ci: f64,
    pub mrt_mean: f64,
    /// `None` when zero forcing is undefined at this size (K > N).
    pub zf_mean: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("value,normalized_wsr_mean,normalized_wsr_ci,mrt_mean,zf_mean,note\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.value,
                p.normalized_wsr_mean,
                p.normalized_wsr_ci,
                p.mrt_mean,
                p.zf_mean.map(|z| z.to_string()).unwrap_or_default(),
                p.note.clone().unwrap_or_default()
            ));
        }
        s
    }
}

/// Fresh test set at `(n, k, snr)`; samples are drawn sequentially so the
/// set is reproducible for a given seed.
pub fn test_set(n: usize, k: usize, snr_edge_db: f64, sweep: &SweepConfig, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sweep.test_samples)
        .map(|_| {
            let channel = sample_channel(&mut rng, n, k, &sweep.geometry, snr_edge_db, sweep.power_budget)?;
            let alpha = sample_training_weights(&mut rng, k, &sweep.weights)?.into_inner();
            Ok(Sample { channel, alpha })
        })
        .collect()
}

/// Evaluate fixed network parameters along one size/SNR axis.
pub fn generalization_sweep(
    params: &NetParams,
    cfg: &NetConfig,
    axis: SweepAxis,
    values: &[f64],
    sweep: &SweepConfig,
) -> Result<SweepResult> {
    let mut points = Vec::with_capacity(values.len());
    for (i, &value) in values.iter().enumerate() {
        let (n, k, snr) = match axis {
            SweepAxis::NumUes => (sweep.n, value as usize, sweep.snr_edge_db),
            SweepAxis::NumAntennas => (value as usize, sweep.k, sweep.snr_edge_db),
            SweepAxis::Snr => (sweep.n, sweep.k, value),
            SweepAxis::TrainSamples => {
                return Err(Error::Domain("the train_samples axis needs retraining per point".into()))
            }
        };
        if n == 0 || k == 0 {
            return Err(Error::Domain(format!("sweep point {value} gives an empty system")));
        }
        let samples = test_set(n, k, snr, sweep, sweep.seed.wrapping_add(i as u64))?;
        let refs = wmmse_references(&samples, &sweep.wmmse)?;
        let net = normalized_wsr_values(&Policy::Network { params, cfg }, &samples, &refs)?;
        let (mean, ci) = mean_ci(&net);
        let mrt_mean = mean_ci(&normalized_wsr_values(&Policy::Mrt, &samples, &refs)?).0;
        let (zf_mean, note) = if k <= n {
            (Some(mean_ci(&normalized_wsr_values(&Policy::Zf, &samples, &refs)?).0), None)
        } else {
            (None, Some(format!("zf skipped: K={k} > N={n}")))
        };
        points.push(SweepPoint { value, normalized_wsr_mean: mean, normalized_wsr_ci: ci, mrt_mean, zf_mean, note });
    }
    Ok(SweepResult { axis, points })
}

/// Empirical CDF of per-UE average rates pooled over episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfTable {
    pub rates: Vec<f64>,
    pub levels: Vec<f64>,
}

impl CdfTable {
    /// Lower empirical quantile: smallest rate whose CDF level reaches `q`.
    pub fn quantile(&self, q: f64) -> f64 {
        let idx = self.levels.iter().position(|&l| l >= q - 1e-12).unwrap_or(self.rates.len() - 1);
        self.rates[idx]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("# per-UE average rates pooled across episodes\nrate,cdf\n");
        for (r, l) in self.rates.iter().zip(&self.levels) {
            s.push_str(&format!("{r},{l}\n"));
        }
        s
    }
}

pub fn rate_cdf(traces: &[EpisodeTrace]) -> Result<CdfTable> {
    let mut rates: Vec<f64> = traces.iter().flat_map(|t| t.avg_rates.iter().copied()).collect();
    if rates.is_empty() {
        return Err(Error::Domain("no episodes to pool".into()));
    }
    rates.sort_by(|a, b| a.total_cmp(b));
    let n = rates.len() as f64;
    let levels = (1..=rates.len()).map(|i| i as f64 / n).collect();
    Ok(CdfTable { rates, levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{evolve_episode, ChannelRealization};
    use crate::linalg::C64;

    fn symmetric_episode(rho: f64) -> EpisodeChannels {
        // Two orthogonal equal-gain UEs.
        let h = CMat::from_row_slice(2, 2, &[C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 1.0)]);
        let base = ChannelRealization::new(h.clone(), 0.1, 1.0, vec![100.0, 100.0]).unwrap();
        let g = Geometry::default();
        evolve_episode(&mut ChaCha8Rng::seed_from_u64(0), &base, 20, rho, &g).unwrap()
    }

    #[test]
    fn inverse_rate_rule() {
        assert_eq!(pf_weights(&[1.0, 2.0], 1e6), vec![1.0, 0.5]);
        assert_eq!(pf_weights(&[0.0, 4.0], 1e6), vec![1e6, 0.25]);
    }

    #[test]
    fn symmetric_instance_gives_symmetric_rates() {
        let ep = symmetric_episode(1.0);
        let trace = run_pf_episode(&ep, &Policy::Wmmse(WmmseOptions::default()), &[1.0, 1.0], &PfOptions::default()).unwrap();
        let r = &trace.avg_rates;
        assert!((r[0] - r[1]).abs() / r[0] < 0.02);
    }

    #[test]
    fn trace_bookkeeping_is_consistent_for_every_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Geometry::default();
        let base = sample_channel(&mut rng, 4, 3, &g, 5.0, 1.0).unwrap();
        let ep = evolve_episode(&mut rng, &base, 20, 0.9, &g).unwrap();
        let cfg = NetConfig::default();
        let params = NetParams::init(&cfg, &mut rng);
        let opts = PfOptions::default();
        let init = [1.0; 3];
        for policy in [Policy::Wmmse(WmmseOptions::default()), Policy::Mrt, Policy::Zf, Policy::Network { params: &params, cfg: &cfg }] {
            let trace = run_pf_episode(&ep, &policy, &init, &opts).unwrap();
            assert_eq!(trace.slots.len(), 20);
            assert_eq!(trace.avg_rates.len(), 3);
            assert!(trace.slots.iter().all(|s| s.source == policy.tag() && s.rates.len() == 3));
            let recomputed = recompute_weights(&trace, &init, &opts);
            for (slot, w) in trace.slots.iter().zip(&recomputed) {
                assert_eq!(&slot.weights, w);
            }
        }
    }

    #[test]
    fn sum_rate_mode_keeps_initial_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Geometry::default();
        let base = sample_channel(&mut rng, 4, 3, &g, 5.0, 1.0).unwrap();
        let ep = evolve_episode(&mut rng, &base, 5, 0.9, &g).unwrap();
        let opts = PfOptions { update_weights: false, ..PfOptions::default() };
        let policy = Policy::Wmmse(WmmseOptions::default());
        let trace = run_pf_episode(&ep, &policy, &[1.0; 3], &opts).unwrap();
        for (t, slot) in trace.slots.iter().enumerate() {
            assert_eq!(slot.weights, vec![1.0; 3]);
            let direct = wmmse_solve(&ep.slots[t], &[1.0; 3], ep.noise_power, 1.0, &WmmseOptions::default()).unwrap();
            let sum: f64 = slot.rates.iter().sum();
            assert!((sum - direct.objective()).abs() < 1e-9);
        }
    }

    fn small_test_set(seed: u64) -> Vec<Sample> {
        let sweep = SweepConfig {
            n: 8,
            k: 4,
            snr_edge_db: 10.0,
            power_budget: 1.0,
            geometry: Geometry::default(),
            test_samples: 30,
            seed,
            wmmse: WmmseOptions::default(),
            weights: WeightLaw::Dirichlet,
        };
        test_set(8, 4, 10.0, &sweep, seed).unwrap()
    }

    #[test]
    fn normalization_against_wmmse() {
        let samples = small_test_set(5);
        let opts = WmmseOptions::default();
        let refs = wmmse_references(&samples, &opts).unwrap();
        assert_eq!(normalized_wsr(&Policy::Wmmse(opts), &samples, &refs).unwrap(), 1.0);
        let m = normalized_wsr(&Policy::Mrt, &samples, &refs).unwrap();
        assert!(m < 1.0, "{m}");

        let mut rev_s = samples.clone();
        let mut rev_r = refs.clone();
        rev_s.reverse();
        rev_r.reverse();
        let m2 = normalized_wsr(&Policy::Mrt, &rev_s, &rev_r).unwrap();
        assert!((m - m2).abs() < 1e-12);

        assert!(matches!(normalized_wsr(&Policy::Mrt, &samples, &refs[1..]), Err(Error::MissingReference(_))));
    }

    #[test]
    fn cdf_shape() {
        let t = |r: Vec<f64>| EpisodeTrace { slots: vec![], avg_rates: r };
        let cdf = rate_cdf(&[t(vec![3.0, 1.0]), t(vec![2.0])]).unwrap();
        assert_eq!(cdf.rates, vec![1.0, 2.0, 3.0]);
        assert!(cdf.levels.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*cdf.levels.last().unwrap(), 1.0);
        assert_eq!(cdf.quantile(0.5), 2.0);
        let single = rate_cdf(&[t(vec![4.0])]).unwrap();
        assert_eq!(single.levels, vec![1.0]);
        assert!(rate_cdf(&[]).is_err());
    }

    #[test]
    fn sweep_skips_zero_forcing_when_overloaded() {
        let cfg = NetConfig::default();
        let params = NetParams::zeros(&cfg);
        let sweep = SweepConfig {
            n: 4,
            k: 2,
            snr_edge_db: 5.0,
            power_budget: 1.0,
            geometry: Geometry::default(),
            test_samples: 5,
            seed: 1,
            wmmse: WmmseOptions::default(),
            weights: WeightLaw::Dirichlet,
        };
        let res = generalization_sweep(&params, &cfg, SweepAxis::NumUes, &[2.0, 6.0], &sweep).unwrap();
        assert_eq!(res.points.len(), 2);
        assert!(res.points[0].zf_mean.is_some());
        assert!(res.points[1].zf_mean.is_none() && res.points[1].note.is_some());
        assert_eq!(res.to_csv().lines().count(), 3);
    }
}
