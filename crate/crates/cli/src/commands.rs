//! Subcommand implementations. Each command writes its outputs, the resolved
//! config and a run stamp into a subdirectory of `output_dir`.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use wsrm_core::channel::{evolve_episode, sample_channel, EpisodeChannels};
use wsrm_core::checkpoint::Checkpoint;
use wsrm_core::dataset::{generate, Dataset, DatasetSpec, Sample};
use wsrm_core::net::{NetConfig, NetParams};
use wsrm_core::oracle::{solve_commutant, StructureRow};
use wsrm_core::pf::{
    generalization_sweep, mean_ci, normalized_wsr_values, rate_cdf, run_pf_episode, CdfTable, EpisodeTrace, PfOptions,
    Policy, SweepAxis, SweepConfig, SweepResult,
};
use wsrm_core::train::{gradient_check, history_csv, train_epoch, train_size_sweep, GradReport, TrainState, WeightLaw};
use wsrm_core::wmmse::WmmseOptions;

use crate::config::ExperimentConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStamp {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
}

fn seeds(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    m.insert("data".into(), cfg.data.seed);
    m.insert("train".into(), cfg.train.seed);
    m.insert("pf".into(), cfg.pf.seed);
    m.insert("oracle".into(), cfg.oracle.seed);
    for s in &cfg.sweeps {
        m.insert(format!("sweep_{}", axis_name(s.axis)), s.seed);
    }
    m
}

pub fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::NumUes => "num_ues",
        SweepAxis::NumAntennas => "num_antennas",
        SweepAxis::Snr => "snr",
        SweepAxis::TrainSamples => "train_samples",
    }
}

/// Write `contents` via a temporary file and rename, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

/// Create `output_dir/sub` and record the resolved config and run stamp there.
fn prepare_dir(cfg: &ExperimentConfig, sub: &str, command: &str) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(sub);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("resolved_config.toml"), cfg.to_toml()?.as_bytes())?;
    let stamp = RunStamp {
        tool: "wsrm".into(),
        version: VERSION.into(),
        command: command.into(),
        config_sha256: cfg.hash()?,
        seeds: seeds(cfg),
    };
    write_atomic(&dir.join("run.json"), serde_json::to_string_pretty(&stamp)?.as_bytes())?;
    Ok(dir)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub k: usize,
    pub snr_edge_db: f64,
    pub seed: u64,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub train_sha256: String,
    pub heldout_sha256: String,
    pub wmmse_cache: String,
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub train: Dataset,
    pub heldout: Dataset,
    pub refs: Vec<f64>,
    /// WMMSE references computed by this call (the rest came from the cache).
    pub computed_refs: usize,
}

fn dataset_spec(cfg: &ExperimentConfig) -> DatasetSpec {
    DatasetSpec {
        n: cfg.data.n,
        k: cfg.data.k,
        count: cfg.train.num_samples + cfg.data.heldout_samples,
        seed: cfg.data.seed,
        snr_edge_db: cfg.data.snr_edge_db,
        power_budget: cfg.data.power_budget,
        geometry: cfg.geometry,
        weights: cfg.train.weight_sampling,
    }
}

/// Cache file name for WMMSE references of a dataset under given options.
pub fn cache_key(dataset_sha256: &str, opts: &WmmseOptions) -> Result<String> {
    let mut h = Sha256::new();
    h.update(dataset_sha256.as_bytes());
    h.update(serde_json::to_string(opts)?.as_bytes());
    Ok(hex::encode(h.finalize())[..16].to_string())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct CacheLine {
    index: usize,
    wsr: f64,
}

const CACHE_CHUNK: usize = 64;

/// WMMSE weighted sum rates for `samples`, read from and appended to a
/// JSON-lines cache file. Interrupted runs resume from the last full chunk.
pub fn cached_wmmse_refs(path: &Path, samples: &[Sample], opts: &WmmseOptions) -> Result<(Vec<f64>, usize)> {
    let mut refs: Vec<Option<f64>> = vec![None; samples.len()];
    if path.exists() {
        let f = fs::File::open(path)?;
        for line in BufReader::new(f).lines() {
            let line = line?;
            // A torn final line from an interrupted write is ignored.
            let Ok(entry) = serde_json::from_str::<CacheLine>(&line) else { continue };
            if entry.index < refs.len() {
                refs[entry.index] = Some(entry.wsr);
            }
        }
    }
    let missing: Vec<usize> = (0..samples.len()).filter(|&i| refs[i].is_none()).collect();
    let start = Instant::now();
    if !missing.is_empty() {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        for chunk in missing.chunks(CACHE_CHUNK) {
            let vals: Vec<f64> = chunk
                .par_iter()
                .map(|&i| Policy::Wmmse(*opts).weighted_sum_rate(&samples[i]))
                .collect::<wsrm_core::Result<_>>()?;
            let mut buf = String::new();
            for (&i, &wsr) in chunk.iter().zip(&vals) {
                refs[i] = Some(wsr);
                buf.push_str(&serde_json::to_string(&CacheLine { index: i, wsr })?);
                buf.push('\n');
            }
            f.write_all(buf.as_bytes())?;
            f.flush()?;
        }
    }
    info!(
        "wmmse cache {}: {} hits, {} computed in {:.3}s",
        path.display(),
        samples.len() - missing.len(),
        missing.len(),
        start.elapsed().as_secs_f64()
    );
    Ok((refs.into_iter().map(|r| r.expect("filled above")).collect(), missing.len()))
}

/// Generate the dataset split and the cached held-out WMMSE references.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<GenOutput> {
    let dir = prepare_dir(cfg, "data", "gen")?;
    let ds = generate(&dataset_spec(cfg))?;
    let (train, heldout) = ds.split_tail(cfg.data.heldout_samples)?;
    let train_bytes = train.to_bytes();
    let heldout_bytes = heldout.to_bytes();
    write_atomic(&dir.join("train.bin"), &train_bytes)?;
    write_atomic(&dir.join("heldout.bin"), &heldout_bytes)?;
    let heldout_sha256 = sha256_hex(&heldout_bytes);
    let cache_dir = cfg.output_dir.join("cache");
    fs::create_dir_all(&cache_dir)?;
    let cache_name = format!("wmmse-{}.jsonl", cache_key(&heldout_sha256, &cfg.wmmse)?);
    let (refs, computed_refs) = cached_wmmse_refs(&cache_dir.join(&cache_name), &heldout.samples, &cfg.wmmse)?;
    let manifest = Manifest {
        n: cfg.data.n,
        k: cfg.data.k,
        snr_edge_db: cfg.data.snr_edge_db,
        seed: cfg.data.seed,
        train_samples: train.len(),
        heldout_samples: heldout.len(),
        train_sha256: sha256_hex(&train_bytes),
        heldout_sha256,
        wmmse_cache: cache_name,
    };
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    info!("dataset: {} training and {} held-out samples in {}", train.len(), heldout.len(), dir.display());
    Ok(GenOutput { dir, manifest, train, heldout, refs, computed_refs })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop after this many epochs in this invocation (state is kept for resume).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub state: TrainState,
    pub checkpoint: PathBuf,
}

fn resumable(state: &TrainState, cfg: &ExperimentConfig) -> bool {
    let mut stored = state.train;
    stored.epochs = cfg.train.epochs;
    state.net == cfg.net && stored == cfg.train && state.epoch <= cfg.train.epochs
}

/// Train (resuming from `train/state.json` when it matches the config) and
/// write the checkpoint and history.
pub fn cmd_train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainOutput> {
    let data = cmd_gen(cfg)?;
    let dir = prepare_dir(cfg, "train", "train")?;
    let state_path = dir.join("state.json");
    let mut state = match fs::read_to_string(&state_path) {
        Ok(s) => {
            let st: TrainState = serde_json::from_str(&s).context("reading training state")?;
            if resumable(&st, cfg) {
                info!("resuming from epoch {}", st.epoch);
                let mut st = st;
                st.train.epochs = cfg.train.epochs;
                st
            } else {
                info!("stored training state does not match the config; starting over");
                TrainState::new(&cfg.net, &cfg.train)?
            }
        }
        Err(_) => TrainState::new(&cfg.net, &cfg.train)?,
    };
    let mut run_epochs = 0;
    while state.epoch < state.train.epochs {
        if opts.stop_after.is_some_and(|n| run_epochs >= n) {
            break;
        }
        match train_epoch(&mut state, &data.train.samples, &data.heldout.samples, &data.refs) {
            Ok(row) => info!(
                "epoch {} loss {:.6} heldout normalized wsr {:.4}",
                row.epoch,
                row.mean_loss,
                row.heldout_normalized_wsr.unwrap_or(f64::NAN)
            ),
            Err(e) => {
                write_atomic(&state_path, serde_json::to_string(&state)?.as_bytes())?;
                write_outputs(&dir, &state)?;
                return Err(e).context("training stopped; last good state saved");
            }
        }
        run_epochs += 1;
        write_atomic(&state_path, serde_json::to_string(&state)?.as_bytes())?;
    }
    let checkpoint = write_outputs(&dir, &state)?;
    Ok(TrainOutput { dir, state, checkpoint })
}

fn write_outputs(dir: &Path, state: &TrainState) -> Result<PathBuf> {
    let path = dir.join("checkpoint.json");
    let ck = Checkpoint::new(&state.net, &state.net_params()?);
    write_atomic(&path, ck.to_json()?.as_bytes())?;
    write_atomic(&dir.join("history.csv"), history_csv(&state.history).as_bytes())?;
    Ok(path)
}

pub fn default_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("train").join("checkpoint.json")
}

fn load_checkpoint(path: &Path) -> Result<(NetConfig, NetParams)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((ck.config, ck.net_params()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyScore {
    pub mean: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub version: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub checkpoint_sha256: String,
    pub num_params: usize,
    /// Normalized WSR (ratio to WMMSE) on the held-out split.
    pub heldout: BTreeMap<String, PolicyScore>,
    pub sweeps: Vec<SweepResult>,
}

fn score(policy: &Policy<'_>, samples: &[Sample], refs: &[f64]) -> Result<PolicyScore> {
    let (mean, ci95) = mean_ci(&normalized_wsr_values(policy, samples, refs)?);
    Ok(PolicyScore { mean, ci95 })
}

fn sweep_config(cfg: &ExperimentConfig, test_samples: usize, seed: u64) -> SweepConfig {
    SweepConfig {
        n: cfg.data.n,
        k: cfg.data.k,
        snr_edge_db: cfg.data.snr_edge_db,
        power_budget: cfg.data.power_budget,
        geometry: cfg.geometry,
        test_samples,
        seed,
        wmmse: cfg.wmmse,
        weights: match cfg.train.weight_sampling {
            WeightLaw::PfReplay(_) => WeightLaw::Dirichlet,
            law => law,
        },
    }
}

/// Held-out metrics for every policy plus the configured sweeps.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Metrics> {
    let ck_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| default_checkpoint(cfg));
    let (net_cfg, params) = load_checkpoint(&ck_path)?;
    let data = cmd_gen(cfg)?;
    let dir = prepare_dir(cfg, "eval", "eval")?;
    let (samples, refs) = (&data.heldout.samples, &data.refs);

    let mut heldout = BTreeMap::new();
    heldout.insert("network".to_string(), score(&Policy::Network { params: &params, cfg: &net_cfg }, samples, refs)?);
    heldout.insert("wmmse".to_string(), score(&Policy::Wmmse(cfg.wmmse), samples, refs)?);
    heldout.insert("mrt".to_string(), score(&Policy::Mrt, samples, refs)?);
    if cfg.data.k <= cfg.data.n {
        heldout.insert("zf".to_string(), score(&Policy::Zf, samples, refs)?);
    }

    let mut sweeps = Vec::new();
    for s in &cfg.sweeps {
        let result = if s.axis == SweepAxis::TrainSamples {
            let sizes: Vec<usize> = s.values.iter().map(|&v| v as usize).collect();
            train_size_sweep(&data.train.samples, &sizes, samples, refs, &cfg.net, &cfg.train)?
        } else {
            generalization_sweep(&params, &net_cfg, s.axis, &s.values, &sweep_config(cfg, s.test_samples, s.seed))?
        };
        write_atomic(&dir.join(format!("sweep_{}.csv", axis_name(s.axis))), result.to_csv().as_bytes())?;
        sweeps.push(result);
    }

    let metrics = Metrics {
        version: VERSION.into(),
        config_sha256: cfg.hash()?,
        seeds: seeds(cfg),
        checkpoint_sha256: sha256_hex(&fs::read(&ck_path)?),
        num_params: params.num_params(),
        heldout,
        sweeps,
    };
    write_atomic(&dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    Ok(metrics)
}

/// Channels for PF episode `e`: one base draw then AR(1) evolution, from a
/// stream of its own so episodes are independent of evaluation order.
pub fn pf_episode_channels(cfg: &ExperimentConfig, e: usize) -> Result<EpisodeChannels> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pf.seed);
    rng.set_stream(e as u64);
    let d = &cfg.data;
    let base = sample_channel(&mut rng, d.n, d.k, &cfg.geometry, d.snr_edge_db, d.power_budget)?;
    Ok(evolve_episode(&mut rng, &base, cfg.pf.slots, cfg.pf.correlation, &cfg.geometry)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfPolicySummary {
    pub p5: f64,
    pub median: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfSummary {
    pub version: String,
    pub config_sha256: String,
    pub episodes: usize,
    pub slots: usize,
    /// How the CDFs are formed.
    pub pooling: String,
    pub policies: BTreeMap<String, PfPolicySummary>,
}

#[derive(Debug, Clone)]
pub struct PfOutput {
    pub summary: PfSummary,
    pub cdfs: BTreeMap<String, CdfTable>,
}

/// PF episodes for WMMSE with PF weights, WMMSE with fixed equal weights,
/// MRT and (when a checkpoint is available) the network.
pub fn cmd_pf(cfg: &ExperimentConfig, checkpoint: Option<&Path>, write_traces: bool) -> Result<PfOutput> {
    let ck_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| default_checkpoint(cfg));
    let net = if ck_path.exists() {
        Some(load_checkpoint(&ck_path)?)
    } else if checkpoint.is_some() {
        bail!("checkpoint {} not found", ck_path.display());
    } else {
        None
    };
    let dir = prepare_dir(cfg, "pf", "pf")?;
    let episodes: Vec<EpisodeChannels> =
        (0..cfg.pf.episodes).into_par_iter().map(|e| pf_episode_channels(cfg, e)).collect::<Result<_>>()?;
    let pf_opts = PfOptions { update_weights: true, weight_cap: cfg.pf.weight_cap };
    let srm_opts = PfOptions { update_weights: false, ..pf_opts };

    let mut runs: Vec<(&str, Policy<'_>, PfOptions)> = vec![
        ("wsrm_wmmse", Policy::Wmmse(cfg.wmmse), pf_opts),
        ("srm_wmmse", Policy::Wmmse(cfg.wmmse), srm_opts),
        ("mrt", Policy::Mrt, pf_opts),
    ];
    if let Some((net_cfg, params)) = &net {
        runs.push(("network", Policy::Network { params, cfg: net_cfg }, pf_opts));
    }

    let init = vec![1.0; cfg.data.k];
    let mut policies = BTreeMap::new();
    let mut cdfs = BTreeMap::new();
    for (name, policy, opts) in &runs {
        let traces: Vec<EpisodeTrace> =
            episodes.par_iter().map(|ep| run_pf_episode(ep, policy, &init, opts)).collect::<wsrm_core::Result<_>>()?;
        let cdf = rate_cdf(&traces)?;
        let mean = cdf.rates.iter().sum::<f64>() / cdf.rates.len() as f64;
        policies.insert(name.to_string(), PfPolicySummary { p5: cdf.quantile(0.05), median: cdf.quantile(0.5), mean });
        write_atomic(&dir.join(format!("cdf_{name}.csv")), cdf.to_csv().as_bytes())?;
        if write_traces {
            let mut buf = String::new();
            for t in &traces {
                buf.push_str(&serde_json::to_string(t)?);
                buf.push('\n');
            }
            write_atomic(&dir.join(format!("traces_{name}.jsonl")), buf.as_bytes())?;
        }
        cdfs.insert(name.to_string(), cdf);
    }
    let summary = PfSummary {
        version: VERSION.into(),
        config_sha256: cfg.hash()?,
        episodes: cfg.pf.episodes,
        slots: cfg.pf.slots,
        pooling: "per-UE average rates pooled across all episodes".into(),
        policies,
    };
    write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(PfOutput { summary, cdfs })
}

/// Null-space dimensions of the four constraint families.
pub fn cmd_oracle(cfg: &ExperimentConfig) -> Result<Vec<StructureRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.oracle.seed);
    let mut rows = Vec::new();
    for family in cfg.oracle.families() {
        let space = solve_commutant(&family, &mut rng)?;
        rows.push(StructureRow::from_space(&space, &mut rng));
    }
    Ok(rows)
}

pub fn oracle_table(rows: &[StructureRow]) -> String {
    let mut s = format!("{:<16} {:>3} {:>3} {:>9} {:>12} {:>14}\n", "family", "N", "K", "dimension", "residual", "out_of_sample");
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>3} {:>3} {:>9} {:>12.3e} {:>14.3e}\n",
            r.family.name(),
            r.n,
            r.k,
            r.dimension,
            r.residual,
            r.out_of_sample_residual
        ));
    }
    s
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub n: usize,
    pub k: usize,
    pub channels: usize,
    pub samples: usize,
    pub points: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { n: 4, k: 3, channels: 2, samples: 2, points: 3, step: 1e-6, seed: 0 }
    }
}

/// Finite-difference check of the training gradient at random parameter points.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, opts: &GradcheckOptions) -> Result<Vec<GradReport>> {
    let net = NetConfig { hidden_channels: opts.channels, ..cfg.net };
    let spec = DatasetSpec {
        n: opts.n,
        k: opts.k,
        count: opts.samples,
        seed: opts.seed,
        snr_edge_db: cfg.data.snr_edge_db,
        power_budget: cfg.data.power_budget,
        geometry: cfg.geometry,
        weights: WeightLaw::Dirichlet,
    };
    let samples = generate(&spec)?.samples;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.points)
        .map(|_| {
            let params = NetParams::init(&net, &mut rng);
            Ok(gradient_check(&samples, &params, &net, opts.step)?)
        })
        .collect()
}
