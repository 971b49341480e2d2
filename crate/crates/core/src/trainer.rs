//! Adam training loop for both model kinds.
//!
//! All randomness is derived from `(seed, label, epoch, ...)`, never carried
//! across epochs, and parameters plus optimizer moments are rounded to `f32`
//! after every step. A run resumed from an epoch-boundary checkpoint is
//! therefore bit-identical to an uninterrupted one.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::corpus::write_jsonl_lines;
use crate::mixer::{Mixture, PairStream, PairedDataset};
use crate::models::checkpoint::{round_to_f32, AdamState};
use crate::models::graph::Tensor;
use crate::models::{bsrnn, param_norm, sgmse, Checkpoint, ModelConfig, ModelKind, ParamStore, Stft};
use crate::seed;
use crate::{Error, Result};

pub const LOSS_FILE: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataMode {
    Fixed,
    OnTheFly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
    pub segment_seconds: f64,
    pub data_mode: DataMode,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Also checkpoint every this many epochs; `0` keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn for_model(kind: ModelKind) -> Self {
        TrainConfig {
            kind,
            epochs: 40,
            batch_size: 6,
            learning_rate: match kind {
                ModelKind::Bsrnn => 1e-3,
                ModelKind::Sgmse => 1e-4,
            },
            adam: AdamConfig::default(),
            seed: 0,
            segment_seconds: 2.0,
            data_mode: DataMode::Fixed,
            clip_norm: 5.0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.segment_seconds > 0.0) {
            return Err(Error::Config("segment length must be positive".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip norm must be >= 0".into()));
        }
        Ok(())
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_seconds * crate::SAMPLE_RATE as f64).round() as usize
    }
}

/// Training pairs, either materialized or streamed per epoch.
pub enum TrainData {
    Fixed(Vec<(Vec<f64>, Vec<f64>)>),
    /// Mixes are drawn by the stream for each epoch; when `ledger_dir` is
    /// set every epoch's MixSpecs are written there.
    OnTheFly {
        stream: PairStream,
        ledger_dir: Option<PathBuf>,
    },
}

impl TrainData {
    /// Loads `(noisy, clean)` audio of a persisted dataset.
    pub fn from_dataset(ds: &PairedDataset) -> Result<Self> {
        let pairs = ds
            .pairs
            .iter()
            .map(|p| Ok((audio::read_wav(&p.noisy_uri)?, audio::read_wav(&p.clean_uri)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainData::Fixed(pairs))
    }

    pub fn mode(&self) -> DataMode {
        match self {
            TrainData::Fixed(_) => DataMode::Fixed,
            TrainData::OnTheFly { .. } => DataMode::OnTheFly,
        }
    }

    fn len(&self) -> usize {
        match self {
            TrainData::Fixed(p) => p.len(),
            TrainData::OnTheFly { stream, .. } => stream.len(),
        }
    }
}

pub fn ledger_name(epoch: usize) -> String {
    format!("mixspecs_epoch_{epoch:03}.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRow>,
}

impl TrainOutcome {
    /// Mean loss of each epoch run by this call, in epoch order.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        epoch_means(&self.losses)
    }
}

pub fn epoch_means(rows: &[LossRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((e, s, n)) if *e == r.epoch => {
                *s += r.loss;
                *n += 1;
            }
            _ => out.push((r.epoch, r.loss, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

/// Trains from a fresh initialization drawn with `model_init_seed`.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    model_init_seed: u64,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    check_kind(model, cfg)?;
    let mut params = model.init_params(model_init_seed)?;
    round_to_f32(&mut params);
    let zeros: ParamStore = params
        .iter()
        .map(|(n, t)| (n.clone(), Tensor::zeros(t.rows, t.cols)))
        .collect();
    let ck = Checkpoint {
        config: model.clone(),
        params,
        step: 0,
        epochs_completed: 0,
        seed_lineage: vec![cfg.seed, model_init_seed],
        optimizer: Some(AdamState { step: 0, m: zeros.clone(), v: zeros }),
    };
    if out_dir.join(LOSS_FILE).exists() {
        fs::remove_file(out_dir.join(LOSS_FILE)).map_err(|e| Error::io(out_dir, e))?;
    }
    run_epochs(ck, cfg, data, out_dir)
}

/// Continues a checkpointed run up to `cfg.epochs` total epochs.
pub fn resume(checkpoint: &Checkpoint, cfg: &TrainConfig, data: &TrainData, out_dir: &Path) -> Result<TrainOutcome> {
    check_kind(&checkpoint.config, cfg)?;
    if checkpoint.optimizer.is_none() {
        return Err(Error::Checkpoint("checkpoint has no optimizer state to resume".into()));
    }
    if checkpoint.epochs_completed >= cfg.epochs {
        return Ok(TrainOutcome { checkpoint: checkpoint.clone(), losses: Vec::new() });
    }
    run_epochs(checkpoint.clone(), cfg, data, out_dir)
}

fn check_kind(model: &ModelConfig, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    model.validate()?;
    if model.kind() != cfg.kind {
        return Err(Error::Config(format!(
            "train config is for {} but the model is {}",
            cfg.kind,
            model.kind()
        )));
    }
    Ok(())
}

/// Fixed-length crop at a seeded offset, zero padded when short.
fn crop(pair: (&[f64], &[f64]), len: usize, rng: &mut seed::Rng) -> (Vec<f64>, Vec<f64>) {
    let (noisy, clean) = pair;
    if noisy.len() <= len {
        let mut n = noisy.to_vec();
        let mut c = clean.to_vec();
        n.resize(len, 0.0);
        c.resize(len, 0.0);
        return (n, c);
    }
    let off = rng.gen_range(0..=noisy.len() - len);
    (noisy[off..off + len].to_vec(), clean[off..off + len].to_vec())
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows[0].len();
    Tensor::new(rows.len(), cols, rows.concat())
}

fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState, cfg: &TrainConfig) {
    let norm = grads
        .values()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    state.step += 1;
    let a = cfg.adam;
    let bc1 = 1.0 - a.beta1.powi(state.step as i32);
    let bc2 = 1.0 - a.beta2.powi(state.step as i32);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("optimizer state matches params");
        let v = state.v.get_mut(name).expect("optimizer state matches params");
        for i in 0..p.data.len() {
            let gi = g.data[i] * clip;
            m.data[i] = (a.beta1 * m.data[i] + (1.0 - a.beta1) * gi) as f32 as f64;
            v.data[i] = (a.beta2 * v.data[i] + (1.0 - a.beta2) * gi * gi) as f32 as f64;
            let upd = cfg.learning_rate * (m.data[i] / bc1) / ((v.data[i] / bc2).sqrt() + a.eps);
            p.data[i] = (p.data[i] - upd) as f32 as f64;
        }
    }
}

fn append_losses(path: &Path, rows: &[LossRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    if fresh {
        s.push_str("epoch,step,loss\n");
    }
    for r in rows {
        s.push_str(&format!("{},{},{:e}\n", r.epoch, r.step, r.loss));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

fn run_epochs(mut ck: Checkpoint, cfg: &TrainConfig, data: &TrainData, out_dir: &Path) -> Result<TrainOutcome> {
    if data.len() == 0 {
        return Err(Error::Config("training data is empty".into()));
    }
    if data.mode() != cfg.data_mode {
        return Err(Error::Config(format!(
            "train config expects {:?} data, got {:?}",
            cfg.data_mode,
            data.mode()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let spec_cfg = match &ck.config {
        ModelConfig::Bsrnn(c) => c.spectrogram,
        ModelConfig::Sgmse(c) => c.spectrogram,
    };
    let stft = Stft::new(spec_cfg)?;
    let seg = cfg.segment_samples().max(spec_cfg.fft_size);
    let mut state = ck.optimizer.take().expect("checked by callers");
    let mut losses = Vec::new();
    for epoch in ck.epochs_completed..cfg.epochs {
        let streamed: Vec<Mixture>;
        let pairs: Vec<(&[f64], &[f64])> = match data {
            TrainData::Fixed(p) => p.iter().map(|(n, c)| (n.as_slice(), c.as_slice())).collect(),
            TrainData::OnTheFly { stream, ledger_dir } => {
                streamed = stream.with_epoch(epoch as u64).pairs()?;
                if let Some(dir) = ledger_dir {
                    let specs: Vec<_> = streamed.iter().map(|m| &m.spec).collect();
                    write_jsonl_lines(&dir.join(ledger_name(epoch)), &specs)?;
                }
                streamed.iter().map(|m| (m.noisy.as_slice(), m.clean.as_slice())).collect()
            }
        };
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, "train-order", &[epoch as u64]));
        let mut epoch_rows = Vec::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut noisy = Vec::with_capacity(chunk.len());
            let mut clean = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut rng = seed::rng(cfg.seed, "train-crop", &[epoch as u64, i as u64]);
                let (n, c) = crop(pairs[i], seg, &mut rng);
                noisy.push(n);
                clean.push(c);
            }
            let (loss, grads) = match &ck.config {
                ModelConfig::Bsrnn(c) => {
                    bsrnn::loss_and_grads(&ck.params, c, &stft, to_tensor(&noisy), to_tensor(&clean))?
                }
                ModelConfig::Sgmse(c) => {
                    let mut rng = seed::rng(cfg.seed, "train-diffusion", &[epoch as u64, bi as u64]);
                    sgmse::loss_and_grads(&ck.params, c, &stft, &noisy, &clean, &mut rng)?
                }
            };
            let gfinite = grads.values().all(|t| t.data.iter().all(|v| v.is_finite()));
            if !loss.is_finite() || !gfinite {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    param_norm: param_norm(&ck.params),
                });
            }
            adam_step(&mut ck.params, &grads, &mut state, cfg);
            ck.step += 1;
            epoch_rows.push(LossRow { epoch, step: ck.step, loss });
        }
        ck.epochs_completed = epoch + 1;
        append_losses(&out_dir.join(LOSS_FILE), &epoch_rows)?;
        losses.extend(epoch_rows);
        if cfg.checkpoint_every > 0 && ck.epochs_completed % cfg.checkpoint_every == 0 {
            let mut snap = ck.clone();
            snap.optimizer = Some(state.clone());
            snap.save(&out_dir.join(format!("epoch_{:03}.ckpt", ck.epochs_completed)))?;
        }
    }
    ck.optimizer = Some(state);
    ck.save(&out_dir.join(FINAL_CHECKPOINT))?;
    Ok(TrainOutcome { checkpoint: ck, losses })
}
