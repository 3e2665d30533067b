//! Unsupervised training: gradient ascent on the weighted sum rate through
//! the network, with exact reverse-mode gradients and a finite-difference
//! check.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{evolve_episode, sample_channel, Geometry};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::net::{backward, forward, forward_tape, NetConfig, NetParams};
use crate::pf::{normalized_wsr, run_pf_episode, PfOptions, Policy, SweepAxis, SweepPoint, SweepResult};
use crate::wmmse::WmmseOptions;
use crate::wsr::{check_shapes, UeWeights};

/// Channel setting for harvesting weights from WMMSE-driven PF episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfReplayConfig {
    pub num_antennas: usize,
    pub snr_edge_db: f64,
    pub power_budget: f64,
    pub geometry: Geometry,
    pub slots: usize,
    pub correlation: f64,
    pub wmmse: WmmseOptions,
}

impl Default for PfReplayConfig {
    fn default() -> Self {
        Self {
            num_antennas: 8,
            snr_edge_db: 5.0,
            power_budget: 1.0,
            geometry: Geometry::default(),
            slots: 20,
            correlation: 0.9,
            wmmse: WmmseOptions::default(),
        }
    }
}

/// How UE weights are drawn for training instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "law")]
pub enum WeightLaw {
    /// `K` times a symmetric Dirichlet(1) draw: positive, summing to `K`.
    #[default]
    Dirichlet,
    /// Weights seen at a random slot of a PF episode on a fresh channel.
    PfReplay(PfReplayConfig),
}

pub fn sample_training_weights<R: Rng + ?Sized>(rng: &mut R, k: usize, law: &WeightLaw) -> Result<UeWeights> {
    if k == 0 {
        return Err(Error::Domain("need at least one UE".into()));
    }
    match law {
        WeightLaw::Dirichlet => {
            let e: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = e.iter().sum();
            let mut alpha: Vec<f64> = e.iter().map(|x| k as f64 * x / total).collect();
            // Snap to a dyadic grid so partial sums are exact, then let the
            // largest entry absorb the remainder: the sum is exactly K.
            let grid = (2.0f64).powi(-40);
            alpha.iter_mut().for_each(|a| *a = (*a / grid).round() * grid);
            let imax = (0..k).max_by(|&a, &b| alpha[a].total_cmp(&alpha[b])).unwrap_or(0);
            let rest: f64 = (0..k).filter(|&i| i != imax).map(|i| alpha[i]).sum();
            alpha[imax] = k as f64 - rest;
            if alpha.iter().any(|&a| a <= 0.0) {
                alpha.iter_mut().for_each(|a| *a = a.max(grid));
            }
            UeWeights::new(alpha)
        }
        WeightLaw::PfReplay(cfg) => {
            if cfg.slots < 2 {
                return Err(Error::Domain("pf_replay needs at least two slots".into()));
            }
            let base = sample_channel(rng, cfg.num_antennas, k, &cfg.geometry, cfg.snr_edge_db, cfg.power_budget)?;
            let episode = evolve_episode(rng, &base, cfg.slots, cfg.correlation, &cfg.geometry)?;
            let trace = run_pf_episode(&episode, &Policy::Wmmse(cfg.wmmse), &vec![1.0; k], &PfOptions::default())?;
            let t = rng.random_range(1..cfg.slots);
            UeWeights::new(trace.slots[t].weights.clone())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub num_samples: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_sampling: WeightLaw,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 0.005,
            num_samples: 12800,
            epochs: 50,
            seed: 0,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_sampling: WeightLaw::Dirichlet,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.num_samples == 0 || self.epochs == 0 {
            return Err(Error::Domain("batch_size, num_samples and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Negative weighted sum rate of the network's precoder on one instance.
pub fn loss(sample: &Sample, params: &NetParams, cfg: &NetConfig) -> Result<f64> {
    let c = &sample.channel;
    let v = forward(&c.h, &sample.alpha, c.power_budget, params, cfg)?;
    Ok(-crate::wsr::weighted_sum_rate(&c.h, &v, &sample.alpha, c.noise_power)?)
}

/// Mean loss over a batch.
pub fn batch_loss(samples: &[Sample], params: &NetParams, cfg: &NetConfig) -> Result<f64> {
    let losses: Vec<f64> = samples.par_iter().map(|s| loss(s, params, cfg)).collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Gradient of the loss with respect to `V` in the convention
/// `dL/dRe V + i dL/dIm V`.
pub fn loss_grad_wrt_precoder(h: &CMat, v: &CMat, alpha: &[f64], noise_power: f64) -> Result<CMat> {
    check_shapes(h, v, alpha)?;
    let t = h.adjoint() * v;
    let k = h.ncols();
    let mut t_bar = CMat::zeros(k, k);
    for ue in 0..k {
        let total: f64 = (0..k).map(|i| t[(ue, i)].norm_sqr()).sum::<f64>() + noise_power;
        let interference = total - t[(ue, ue)].norm_sqr();
        let scale = -alpha[ue] / std::f64::consts::LN_2;
        for i in 0..k {
            let coef = if i == ue { scale / total } else { scale * (1.0 / total - 1.0 / interference) };
            t_bar[(ue, i)] = t[(ue, i)] * (2.0 * coef);
        }
    }
    Ok(h * t_bar)
}

/// Loss and flat parameter gradient for one instance.
pub fn sample_loss_and_grad(sample: &Sample, params: &NetParams, cfg: &NetConfig) -> Result<(f64, Vec<f64>)> {
    let c = &sample.channel;
    let tape = forward_tape(&c.h, &sample.alpha, c.power_budget, params, cfg)?;
    let wsr = crate::wsr::weighted_sum_rate(&c.h, &tape.v, &sample.alpha, c.noise_power)?;
    let v_bar = loss_grad_wrt_precoder(&c.h, &tape.v, &sample.alpha, c.noise_power)?;
    let grad = backward(&tape, &v_bar, params, cfg)?.to_flat();
    Ok((-wsr, grad))
}

/// Mean loss and mean gradient over a batch. Per-sample work may run in
/// parallel; the reduction is a fixed-order sum.
pub fn batch_loss_and_grad(batch: &[&Sample], params: &NetParams, cfg: &NetConfig) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let parts: Vec<(f64, Vec<f64>)> =
        batch.par_iter().map(|s| sample_loss_and_grad(s, params, cfg)).collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.num_params()];
    let mut total = 0.0;
    for (l, g) in &parts {
        total += l;
        for (acc, x) in grad.iter_mut().zip(g) {
            *acc += x;
        }
    }
    grad.iter_mut().for_each(|x| *x /= n);
    Ok((total / n, grad))
}

pub fn gradient(batch: &[&Sample], params: &NetParams, cfg: &NetConfig) -> Result<Vec<f64>> {
    Ok(batch_loss_and_grad(batch, params, cfg)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
}

/// Largest entrywise relative error. Entries are compared relative to
/// `max(|a|, |b|)`, floored at `1e-3` of the largest analytic magnitude so
/// that near-zero entries are judged on an absolute scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compare the analytic batch gradient with central finite differences.
pub fn gradient_check(samples: &[Sample], params: &NetParams, cfg: &NetConfig, step: f64) -> Result<GradReport> {
    let batch: Vec<&Sample> = samples.iter().collect();
    let analytic = gradient(&batch, params, cfg)?;
    let flat = params.to_flat();
    let numeric: Vec<f64> = (0..flat.len())
        .into_par_iter()
        .map(|i| {
            let mut p = flat.clone();
            p[i] = flat[i] + step;
            let up = batch_loss(samples, &NetParams::from_flat(cfg, &p)?, cfg)?;
            p[i] = flat[i] - step;
            let down = batch_loss(samples, &NetParams::from_flat(cfg, &p)?, cfg)?;
            Ok((up - down) / (2.0 * step))
        })
        .collect::<Result<_>>()?;
    let max_rel_err = max_relative_error(&analytic, &numeric);
    Ok(GradReport { analytic, numeric, max_rel_err })
}

/// First-order optimizer state over the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: Optimizer,
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, num_params: usize) -> Self {
        let moments = if kind == Optimizer::Adam { num_params } else { 0 };
        Self { kind, steps: 0, m: vec![0.0; moments], v: vec![0.0; moments] }
    }

    /// One descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.steps += 1;
        let lr = cfg.learning_rate;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - cfg.beta1.powi(t);
                let c2 = 1.0 - cfg.beta2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
                    self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean WSR relative to WMMSE on the held-out split, if one was given.
    pub heldout_normalized_wsr: Option<f64>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,mean_loss,normalized_wsr\n");
    for r in rows {
        let nw = r.heldout_normalized_wsr.map(|x| x.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", r.epoch, r.mean_loss, nw));
    }
    s
}

/// Everything needed to resume training exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub params: Vec<f64>,
    pub optimizer: OptimizerState,
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    pub fn new(net: &NetConfig, train: &TrainConfig) -> Result<Self> {
        net.validate()?;
        train.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let params = NetParams::init(net, &mut rng).to_flat();
        let optimizer = OptimizerState::new(train.optimizer, params.len());
        Ok(Self { net: *net, train: *train, epoch: 0, params, optimizer, history: Vec::new() })
    }

    pub fn net_params(&self) -> Result<NetParams> {
        NetParams::from_flat(&self.net, &self.params)
    }
}

/// Sample order of one epoch, a pure function of the seed and epoch index.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Run one epoch in place. On divergence the state is left as it was at the
/// start of the epoch.
pub fn train_epoch(state: &mut TrainState, train: &[Sample], heldout: &[Sample], refs: &[f64]) -> Result<HistoryRow> {
    if train.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let epoch = state.epoch + 1;
    let diverged = |reason: String| Error::Diverged { epoch, reason };
    let mut params = state.params.clone();
    let mut opt = state.optimizer.clone();
    let order = epoch_order(state.train.seed, state.epoch, train.len());
    let mut loss_sum = 0.0;
    for chunk in order.chunks(state.train.batch_size) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
        let p = NetParams::from_flat(&state.net, &params)?;
        let (l, g) = match batch_loss_and_grad(&batch, &p, &state.net) {
            Ok(x) => x,
            Err(Error::NonFinite(msg)) => return Err(diverged(msg)),
            Err(e) => return Err(e),
        };
        if !l.is_finite() || !g.iter().all(|x| x.is_finite()) {
            return Err(diverged("non-finite loss or gradient".into()));
        }
        loss_sum += l * batch.len() as f64;
        opt.step(&mut params, &g, &state.train);
        if !params.iter().all(|x| x.is_finite()) {
            return Err(diverged("non-finite parameters after update".into()));
        }
    }
    let heldout_normalized_wsr = if heldout.is_empty() {
        None
    } else {
        let p = NetParams::from_flat(&state.net, &params)?;
        Some(normalized_wsr(&Policy::Network { params: &p, cfg: &state.net }, heldout, refs)?)
    };
    let row = HistoryRow { epoch, mean_loss: loss_sum / train.len() as f64, heldout_normalized_wsr };
    state.params = params;
    state.optimizer = opt;
    state.epoch = epoch;
    state.history.push(row.clone());
    Ok(row)
}

/// Train until `state.train.epochs` epochs are complete.
pub fn train(state: &mut TrainState, train: &[Sample], heldout: &[Sample], refs: &[f64]) -> Result<()> {
    while state.epoch < state.train.epochs {
        let row = train_epoch(state, train, heldout, refs)?;
        log::info!("epoch {} loss {:.5} heldout {:?}", row.epoch, row.mean_loss, row.heldout_normalized_wsr);
    }
    Ok(())
}

/// Retrain from scratch on prefixes of `pool` and score each on `heldout`.
pub fn train_size_sweep(
    pool: &[Sample],
    sizes: &[usize],
    heldout: &[Sample],
    refs: &[f64],
    net: &NetConfig,
    cfg: &TrainConfig,
) -> Result<SweepResult> {
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 || size > pool.len() {
            return Err(Error::Domain(format!("training size {size} outside 1..={}", pool.len())));
        }
        let mut state = TrainState::new(net, cfg)?;
        train(&mut state, &pool[..size], &[], &[])?;
        let p = state.net_params()?;
        let vals = crate::pf::normalized_wsr_values(&Policy::Network { params: &p, cfg: net }, heldout, refs)?;
        let mrt = crate::pf::normalized_wsr_values(&Policy::Mrt, heldout, refs)?;
        let (mean, ci) = crate::pf::mean_ci(&vals);
        points.push(SweepPoint {
            value: size as f64,
            normalized_wsr_mean: mean,
            normalized_wsr_ci: ci,
            mrt_mean: crate::pf::mean_ci(&mrt).0,
            zf_mean: None,
            note: None,
        });
    }
    Ok(SweepResult { axis: SweepAxis::TrainSamples, points })
}
