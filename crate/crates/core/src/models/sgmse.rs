//! Score-based diffusion enhancer on an Ornstein-Uhlenbeck process with an
//! exploding variance schedule.
//!
//! The forward process is `dx = γ (y - x) dt + g(t) dw` with
//! `g(t) = σ_min (σ_max / σ_min)^t sqrt(2 ln(σ_max / σ_min))`. Spectrograms
//! are magnitude compressed (`β |X|^α e^{i∠X}`) before diffusion; the score
//! network sees the current state concatenated with the noisy condition.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Tensor, Var};
use super::spectral::{specs_to_tensor, tensor_to_specs, ComplexSpec, SpectrogramConfig, Stft};
use super::{check_finite, init_weight, load_params, require, Checkpoint, ModelConfig, ParamStore};
use crate::seed;
use crate::{Error, Result};

const MIN_STD: f64 = 1e-12;
const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuveParams {
    pub gamma: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub t_eps: f64,
}

impl Default for OuveParams {
    fn default() -> Self {
        OuveParams {
            gamma: 1.5,
            sigma_min: 0.05,
            sigma_max: 0.5,
            t_eps: 0.03,
        }
    }
}

impl OuveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma {} must be positive", self.gamma)));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min ({}) < sigma_max ({})",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.t_eps > 0.0 && self.t_eps < 1.0) {
            return Err(Error::Config(format!("t_eps {} must be in (0, 1)", self.t_eps)));
        }
        Ok(())
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    /// Weight of the clean signal in the marginal mean, `exp(-γt)`.
    pub fn mean_weight(&self, t: f64) -> f64 {
        (-self.gamma * t).exp()
    }

    /// Closed-form marginal standard deviation at time `t` (from `x(0) = x0`).
    pub fn std(&self, t: f64) -> f64 {
        let l = self.log_ratio();
        let var = self.sigma_min.powi(2) * l / (self.gamma + l)
            * ((2.0 * l * t).exp() - (-2.0 * self.gamma * t).exp());
        var.sqrt()
    }

    pub fn diffusion(&self, t: f64) -> f64 {
        let l = self.log_ratio();
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t) * (2.0 * l).sqrt()
    }
}

/// Marginal mean `exp(-γt) x0 + (1 - exp(-γt)) y` and standard deviation.
pub fn ouve_marginal(x0: &[f64], y: &[f64], t: f64, params: &OuveParams) -> Result<(Vec<f64>, f64)> {
    params.validate()?;
    if !(params.t_eps..=1.0).contains(&t) {
        return Err(Error::Config(format!("t = {t} outside [{}, 1]", params.t_eps)));
    }
    if x0.len() != y.len() {
        return Err(Error::Shape(format!("x0 has {} elements, y {}", x0.len(), y.len())));
    }
    let w = params.mean_weight(t);
    let mean = x0.iter().zip(y).map(|(a, b)| a * w + b * (1.0 - w)).collect();
    Ok((mean, params.std(t)))
}

/// `mean((score(x_t, y, t) + z / std)^2)` with `x_t = mean + std z`.
pub fn score_loss(
    score_model: impl Fn(&[f64], &[f64], f64) -> Vec<f64>,
    x0: &[f64],
    y: &[f64],
    t: f64,
    z: &[f64],
    params: &OuveParams,
) -> Result<f64> {
    let (mean, std) = ouve_marginal(x0, y, t, params)?;
    if std < MIN_STD {
        return Err(Error::Config(format!("degenerate diffusion time {t}: std {std:e}")));
    }
    if z.len() != x0.len() {
        return Err(Error::Shape("noise draw does not match signal shape".into()));
    }
    let xt: Vec<f64> = mean.iter().zip(z).map(|(m, z)| m + std * z).collect();
    let s = score_model(&xt, y, t);
    if s.len() != xt.len() {
        return Err(Error::Shape("score model output does not match input shape".into()));
    }
    Ok(s.iter().zip(z).map(|(s, z)| (s + z / std).powi(2)).sum::<f64>() / s.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub corrector_steps: usize,
    /// Annealed Langevin step size relative to the marginal std.
    pub corrector_snr: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 30,
            corrector_steps: 1,
            corrector_snr: 0.5,
        }
    }
}

/// Reverse-time predictor-corrector integration from `t = 1` to `t_eps`.
///
/// `score(x, t)` returns the score at state `x`; the returned tensor is the
/// noise-free mean of the final predictor step.
pub fn reverse_sample(
    y: &Tensor,
    mut score: impl FnMut(&Tensor, f64) -> Result<Tensor>,
    ouve: &OuveParams,
    sampler: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    ouve.validate()?;
    if sampler.steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let n = sampler.steps;
    let h = (1.0 - ouve.t_eps) / n as f64;
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample(StandardNormal)).collect() };
    let std1 = ouve.std(1.0);
    let mut x = y.clone();
    for (v, z) in x.data.iter_mut().zip(draw(y.len())) {
        *v += std1 * z;
    }
    let mut x_mean = x.clone();
    for i in 0..n {
        let t = 1.0 - i as f64 * h;
        let std = ouve.std(t);
        for _ in 0..sampler.corrector_steps {
            let s = score(&x, t)?;
            let step = 2.0 * (sampler.corrector_snr * std).powi(2);
            let noise = draw(x.len());
            for ((v, s), z) in x.data.iter_mut().zip(&s.data).zip(noise) {
                *v += step * s + (2.0 * step).sqrt() * z;
            }
        }
        let s = score(&x, t)?;
        let g = ouve.diffusion(t);
        let noise = draw(x.len());
        for (j, z) in noise.into_iter().enumerate() {
            let drift = ouve.gamma * (y.data[j] - x.data[j]) - g * g * s.data[j];
            x_mean.data[j] = x.data[j] - drift * h;
            x.data[j] = x_mean.data[j] + g * h.sqrt() * z;
        }
    }
    Ok(x_mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compression {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for Compression {
    fn default() -> Self {
        Compression { alpha: 0.5, beta: 0.15 }
    }
}

impl Compression {
    pub fn forward(&self, s: &ComplexSpec) -> ComplexSpec {
        let mut out = s.clone();
        for c in out.data.iter_mut() {
            let m = c.norm();
            if m > 0.0 {
                *c *= self.beta * m.powf(self.alpha) / m;
            }
        }
        out
    }

    pub fn inverse(&self, s: &ComplexSpec) -> ComplexSpec {
        let mut out = s.clone();
        for c in out.data.iter_mut() {
            let m = c.norm();
            if m > 0.0 {
                *c *= (m / self.beta).powf(1.0 / self.alpha) / m;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgmseConfig {
    #[serde(default)]
    pub spectrogram: SpectrogramConfig,
    #[serde(default)]
    pub ouve: OuveParams,
    #[serde(default)]
    pub compression: Compression,
    pub hidden: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Per-bin variance of `x0 - y` assumed by the Gaussian prior score.
    #[serde(default = "default_prior_var")]
    pub prior_var: f64,
}

fn default_prior_var() -> f64 {
    1e-3
}

impl Default for SgmseConfig {
    fn default() -> Self {
        SgmseConfig {
            spectrogram: SpectrogramConfig::default(),
            ouve: OuveParams::default(),
            compression: Compression::default(),
            hidden: 32,
            sampler: SamplerConfig::default(),
            prior_var: default_prior_var(),
        }
    }
}

/// Per-bin input features: state, condition, condition magnitude and its
/// four time/frequency neighbours, time embedding, relative frequency.
pub const NUM_FEATURES: usize = 16;

impl SgmseConfig {
    /// `c(t)` in the prior scaled score `-c(t) (x - y)`, the posterior mean
    /// of `z` when `x0 - y` is Gaussian with variance `prior_var`.
    pub fn prior_gain(&self, t: f64) -> f64 {
        let w = self.ouve.mean_weight(t);
        let std = self.ouve.std(t);
        std / (w * w * self.prior_var + std * std)
    }

    pub fn tiny() -> Self {
        SgmseConfig {
            spectrogram: SpectrogramConfig { fft_size: 32, hop: 8, ..Default::default() },
            hidden: 5,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spectrogram.validate()?;
        self.ouve.validate()?;
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        Ok(())
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = seed::rng(seed, "sgmse-init", &[]);
        let h = self.hidden;
        let mut p = ParamStore::new();
        p.insert("score.l0.w".into(), init_weight(&mut rng, NUM_FEATURES, h, 1.0));
        p.insert("score.l0.b".into(), Tensor::zeros(1, h));
        p.insert("score.l1.w".into(), init_weight(&mut rng, h, h, 1.0));
        p.insert("score.l1.b".into(), Tensor::zeros(1, h));
        p.insert("score.out.w".into(), init_weight(&mut rng, h, 2, 0.1));
        p.insert("score.out.b".into(), Tensor::zeros(1, 2));
        Ok(p)
    }

    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let want = self.init_params(0)?;
        for (name, t) in &want {
            match params.get(name) {
                Some(p) if (p.rows, p.cols) == (t.rows, t.cols) => {}
                _ => return Err(Error::Config(format!("parameter {name} missing or misshapen"))),
            }
        }
        if want.len() != params.len() {
            return Err(Error::Config("unexpected extra parameters".into()));
        }
        check_finite(params)
    }
}

/// Builds `[rows * bins, NUM_FEATURES]` features from `[re | im]` tensors
/// with `(frame, batch)` rows; `times[b]` is the diffusion time of item `b`.
pub fn features(x: &Tensor, y: &Tensor, times: &[f64], cfg: &SgmseConfig) -> Tensor {
    let bins = x.cols / 2;
    let batch = times.len();
    let frames = x.rows / batch;
    let mag = |r: usize, k: usize| -> f64 {
        let row = y.row(r);
        row[k].hypot(row[bins + k])
    };
    let mut out = Vec::with_capacity(x.rows * bins * NUM_FEATURES);
    for r in 0..x.rows {
        let (f, b) = (r / batch, r % batch);
        let t = times[b];
        let c = cfg.prior_gain(t);
        let (xr, yr) = (x.row(r), y.row(r));
        for k in 0..bins {
            let prev_t = if f > 0 { mag(r - batch, k) } else { 0.0 };
            let next_t = if f + 1 < frames { mag(r + batch, k) } else { 0.0 };
            let prev_k = if k > 0 { mag(r, k - 1) } else { 0.0 };
            let next_k = if k + 1 < bins { mag(r, k + 1) } else { 0.0 };
            out.extend_from_slice(&[
                xr[k],
                xr[bins + k],
                yr[k],
                yr[bins + k],
                c * (xr[k] - yr[k]),
                c * (xr[bins + k] - yr[bins + k]),
                mag(r, k),
                prev_t,
                next_t,
                prev_k,
                next_k,
                t,
                (PI * t).sin(),
                (PI * t).cos(),
                (2.0 * PI * t).sin(),
                k as f64 / (bins - 1) as f64,
            ]);
        }
    }
    Tensor::new(x.rows * bins, NUM_FEATURES, out)
}

/// Scaled prior score `-c(t) (x - y)` per bin.
fn prior_term(x: &Tensor, y: &Tensor, times: &[f64], cfg: &SgmseConfig) -> Tensor {
    let bins = x.cols / 2;
    let batch = times.len();
    let mut out = Tensor::zeros(x.rows * bins, 2);
    for r in 0..x.rows {
        let c = cfg.prior_gain(times[r % batch]);
        let (xr, yr) = (x.row(r), y.row(r));
        for k in 0..bins {
            out.data[(r * bins + k) * 2] = -c * (xr[k] - yr[k]);
            out.data[(r * bins + k) * 2 + 1] = -c * (xr[bins + k] - yr[bins + k]);
        }
    }
    out
}

/// Scaled score `std * s` as `[rows * bins, 2]`. The MLP predicts a complex
/// mask `m` on the condition; with `d = (1 + m) y` the score is the
/// Gaussian posterior one around `w d + (1 - w) y`, which reduces to
/// `-c(t) (x - y) + c(t) w m y`.
pub fn scaled_score_graph(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    x: &Tensor,
    y: &Tensor,
    times: &[f64],
    cfg: &SgmseConfig,
) -> Result<Var> {
    let bins = x.cols / 2;
    let batch = times.len();
    let n = x.rows * bins;
    let (mut y1, mut y2, mut cw) = (Tensor::zeros(n, 2), Tensor::zeros(n, 2), Tensor::zeros(n, 2));
    for r in 0..x.rows {
        let t = times[r % batch];
        let k_cw = cfg.prior_gain(t) * cfg.ouve.mean_weight(t);
        let yr = y.row(r);
        for k in 0..bins {
            let i = (r * bins + k) * 2;
            let (re, im) = (yr[k], yr[bins + k]);
            y1.data[i..i + 2].copy_from_slice(&[re, im]);
            y2.data[i..i + 2].copy_from_slice(&[-im, re]);
            cw.data[i..i + 2].copy_from_slice(&[k_cw, k_cw]);
        }
    }
    let f = g.constant(features(x, y, times, cfg));
    let net = network_graph(g, vars, f)?;
    let a = g.slice_cols(net, 0, 1);
    let b = g.slice_cols(net, 1, 2);
    let a = g.concat_cols(&[a, a]);
    let b = g.concat_cols(&[b, b]);
    let (y1, y2, cw) = (g.constant(y1), g.constant(y2), g.constant(cw));
    let ma = g.mul(a, y1);
    let mb = g.mul(b, y2);
    let m = g.add(ma, mb);
    let res = g.mul(m, cw);
    let prior = g.constant(prior_term(x, y, times, cfg));
    Ok(g.add(res, prior))
}

/// MLP output `[rows * bins, 2]` on precomputed features.
pub fn network_graph(g: &mut Graph, vars: &BTreeMap<String, Var>, feats: Var) -> Result<Var> {
    let mut h = feats;
    for l in ["l0", "l1"] {
        let w = require(vars, &format!("score.{l}.w"))?;
        let b = require(vars, &format!("score.{l}.b"))?;
        let y = g.matmul(h, w);
        let y = g.add_row(y, b);
        h = g.tanh(y);
    }
    let w = require(vars, "score.out.w")?;
    let b = require(vars, "score.out.b")?;
    let y = g.matmul(h, w);
    Ok(g.add_row(y, b))
}

/// Per-bin `[N, 2]` outputs back to `[re | im]` layout with `rows` rows.
fn unflatten(out: &Tensor, rows: usize, bins: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, 2 * bins);
    for r in 0..rows {
        for k in 0..bins {
            let i = (r * bins + k) * 2;
            t.data[r * 2 * bins + k] = out.data[i];
            t.data[r * 2 * bins + bins + k] = out.data[i + 1];
        }
    }
    t
}

/// Score estimate at a single diffusion time for every batch item.
pub fn score_estimate(params: &ParamStore, cfg: &SgmseConfig, x: &Tensor, y: &Tensor, times: &[f64]) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> =
        params.iter().map(|(n, t)| (n.clone(), g.constant(t.clone()))).collect();
    let out = scaled_score_graph(&mut g, &vars, x, y, times, cfg)?;
    let mut s = unflatten(g.value(out), x.rows, x.cols / 2);
    let batch = times.len();
    for r in 0..s.rows {
        let std = cfg.ouve.std(times[r % batch]);
        let cols = s.cols;
        s.data[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v /= std);
    }
    Ok(s)
}

/// Compressed spectra of the signals after multiplying by `scale`.
pub fn prepare(stft: &Stft, comp: &Compression, waves: &[&[f64]], scale: f64) -> Result<Tensor> {
    let specs: Result<Vec<ComplexSpec>> = waves
        .iter()
        .map(|w| {
            let scaled: Vec<f64> = w.iter().map(|v| v * scale).collect();
            Ok(comp.forward(&stft.stft(&scaled)?))
        })
        .collect();
    Ok(specs_to_tensor(&specs?))
}

pub fn normalizer(noisy: &[f64]) -> f64 {
    1.0 / (noisy.iter().fold(0.0f64, |m, v| m.max(v.abs())) + NORM_EPS)
}

/// Weighted denoising score matching on one batch: with `score = net / std`
/// the objective `mean((net + z)^2)` equals `std^2 * ‖score + z / std‖^2`.
pub fn loss_and_grads(
    params: &ParamStore,
    cfg: &SgmseConfig,
    stft: &Stft,
    noisy: &[Vec<f64>],
    clean: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<(f64, ParamStore)> {
    let batch = noisy.len();
    let mut xs = Vec::with_capacity(batch);
    let mut ys = Vec::with_capacity(batch);
    for (n, c) in noisy.iter().zip(clean) {
        let s = normalizer(n);
        xs.push(prepare(stft, &cfg.compression, &[c], s)?);
        ys.push(prepare(stft, &cfg.compression, &[n], s)?);
    }
    let times: Vec<f64> = (0..batch).map(|_| rng.gen_range(cfg.ouve.t_eps..=1.0)).collect();
    let x0 = interleave(&xs);
    let y = interleave(&ys);
    let mut z = Tensor::zeros(x0.rows, x0.cols);
    z.data.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    let mut xt = x0.clone();
    for r in 0..xt.rows {
        let t = times[r % batch];
        let w = cfg.ouve.mean_weight(t);
        let std = cfg.ouve.std(t);
        let cols = xt.cols;
        for c in 0..cols {
            let i = r * cols + c;
            xt.data[i] = w * x0.data[i] + (1.0 - w) * y.data[i] + std * z.data[i];
        }
    }
    let bins = xt.cols / 2;
    let mut zf = Tensor::zeros(xt.rows * bins, 2);
    for r in 0..xt.rows {
        for k in 0..bins {
            zf.data[(r * bins + k) * 2] = z.data[r * 2 * bins + k];
            zf.data[(r * bins + k) * 2 + 1] = z.data[r * 2 * bins + bins + k];
        }
    }
    let mut g = Graph::new();
    let vars = load_params(&mut g, params);
    let out = scaled_score_graph(&mut g, &vars, &xt, &y, &times, cfg)?;
    let zv = g.constant(zf);
    let d = g.add(out, zv);
    let d = g.square(d);
    let loss = g.mean(d);
    let grads = g.backward(loss);
    Ok((g.value(loss).item(), g.param_grads(&grads)))
}

/// Merges single-item `(frame, 1)` tensors into `(frame, batch)` rows.
fn interleave(items: &[Tensor]) -> Tensor {
    let batch = items.len();
    let (rows, cols) = (items[0].rows, items[0].cols);
    let mut out = Tensor::zeros(rows * batch, cols);
    for (b, t) in items.iter().enumerate() {
        for r in 0..rows {
            out.data[(r * batch + b) * cols..(r * batch + b + 1) * cols].copy_from_slice(t.row(r));
        }
    }
    out
}

pub fn enhance_with_params(
    noisy: &[f64],
    params: &ParamStore,
    cfg: &SgmseConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.check_params(params)?;
    if noisy.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("non-finite sample in model input".into()));
    }
    let stft = Stft::new(cfg.spectrogram)?;
    let scale = normalizer(noisy);
    let y = prepare(&stft, &cfg.compression, &[noisy], scale)?;
    let mut rng = seed::rng(seed, "sgmse-sample", &[]);
    let x = reverse_sample(
        &y,
        |x, t| score_estimate(params, cfg, x, &y, &[t]),
        &cfg.ouve,
        sampler,
        &mut rng,
    )?;
    let spec = cfg.compression.inverse(&tensor_to_specs(&x, 1).remove(0));
    let wave = stft.istft(&spec, noisy.len())?;
    Ok(wave.into_iter().map(|v| v / scale).collect())
}

/// Enhances with a trained checkpoint using `steps` predictor and
/// `corrector_steps` corrector steps.
pub fn sgmse_enhance(
    noisy: &[f64],
    checkpoint: &Checkpoint,
    steps: usize,
    corrector_steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let cfg = match &checkpoint.config {
        ModelConfig::Sgmse(c) => c,
        other => {
            return Err(Error::Checkpoint(format!(
                "expected an sgmse checkpoint, found {}",
                other.kind()
            )))
        }
    };
    let sampler = SamplerConfig { steps, corrector_steps, ..cfg.sampler };
    enhance_with_params(noisy, &checkpoint.params, cfg, &sampler, seed)
}
