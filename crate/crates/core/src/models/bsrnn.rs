//! Band-split recurrent mask estimator.
//!
//! The noisy spectrogram is cut into frequency bands; each band is
//! normalized and projected to `feature_dim`. A stack of dual-path blocks
//! runs a bidirectional GRU over time and then over bands, each with a
//! residual connection. Per-band decoders emit a bounded complex ratio
//! mask that is applied to the noisy band before the inverse STFT.
//!
//! Internal row layout is band-major `(k, t, b)`: band `k`, frame `t`,
//! batch item `b`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Tensor, Var};
use super::spectral::{magnitude_var, SpectrogramConfig, Stft};
use super::{check_finite, init_weight, load_params, require, ParamStore};
use crate::seed;
use crate::{Error, Result};

/// Bound on each mask component's magnitude before combination; the complex
/// mask magnitude is at most `MASK_BOUND * sqrt(2)`.
pub const MASK_BOUND: f64 = 2.0;

/// `sqrt(2) * MASK_BOUND`: largest possible complex mask magnitude.
pub const K_MASK: f64 = MASK_BOUND * std::f64::consts::SQRT_2;

const LOG_ENERGY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsrnnConfig {
    pub band_edges: Vec<usize>,
    pub feature_dim: usize,
    pub num_blocks: usize,
    #[serde(default)]
    pub spectrogram: SpectrogramConfig,
    /// Test harness: decoders emit the identity mask regardless of input.
    #[serde(default)]
    pub force_identity_mask: bool,
}

impl Default for BsrnnConfig {
    fn default() -> Self {
        BsrnnConfig {
            band_edges: vec![0, 8, 16, 24, 32, 48, 80, 144, 257],
            feature_dim: 16,
            num_blocks: 2,
            spectrogram: SpectrogramConfig::default(),
            force_identity_mask: false,
        }
    }
}

impl BsrnnConfig {
    /// Smallest sensible network, used by gradient checks and smoke tests.
    pub fn tiny() -> Self {
        BsrnnConfig {
            band_edges: vec![0, 4, 12, 33],
            feature_dim: 4,
            num_blocks: 1,
            spectrogram: SpectrogramConfig { fft_size: 64, hop: 16, ..Default::default() },
            force_identity_mask: false,
        }
    }

    pub fn num_bands(&self) -> usize {
        self.band_edges.len() - 1
    }

    fn band(&self, k: usize) -> (usize, usize) {
        (self.band_edges[k], self.band_edges[k + 1])
    }

    pub fn validate(&self) -> Result<()> {
        self.spectrogram.validate()?;
        let bins = self.spectrogram.bins();
        let e = &self.band_edges;
        if e.len() < 2 || e[0] != 0 || *e.last().unwrap() != bins {
            return Err(Error::Config(format!(
                "band edges {e:?} must start at 0 and end at {bins} bins"
            )));
        }
        if e.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("band edges {e:?} must be strictly ascending")));
        }
        if self.feature_dim == 0 || self.num_blocks == 0 {
            return Err(Error::Config("feature_dim and num_blocks must be >= 1".into()));
        }
        Ok(())
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = seed::rng(seed, "bsrnn-init", &[]);
        let d = self.feature_dim;
        let mut p = ParamStore::new();
        for k in 0..self.num_bands() {
            let (lo, hi) = self.band(k);
            let w = hi - lo;
            p.insert(format!("enc.{k}.w"), init_weight(&mut rng, 2 * w + 1, d, 1.0));
            p.insert(format!("enc.{k}.b"), Tensor::zeros(1, d));
            p.insert(format!("dec.{k}.w1"), init_weight(&mut rng, d, 4 * d, 1.0));
            p.insert(format!("dec.{k}.b1"), Tensor::zeros(1, 4 * d));
            p.insert(format!("dec.{k}.w2"), init_weight(&mut rng, 4 * d, 2 * w, 0.1));
            let mut b2 = Tensor::zeros(1, 2 * w);
            // tanh(atanh(0.5)) * 2 = 1: the initial mask is the identity
            b2.data[..w].iter_mut().for_each(|v| *v = 0.5f64.atanh());
            p.insert(format!("dec.{k}.b2"), b2);
        }
        for j in 0..self.num_blocks {
            for pass in ["time", "band"] {
                for dir in ["fw", "bw"] {
                    let pre = format!("blk{j}.{pass}.{dir}");
                    p.insert(format!("{pre}.wi"), init_weight(&mut rng, d, 3 * d, 1.0));
                    p.insert(format!("{pre}.wh"), init_weight(&mut rng, d, 3 * d, 1.0));
                    p.insert(format!("{pre}.bi"), Tensor::zeros(1, 3 * d));
                    p.insert(format!("{pre}.bh"), Tensor::zeros(1, 3 * d));
                }
                p.insert(format!("blk{j}.{pass}.proj.w"), init_weight(&mut rng, 2 * d, d, 0.5));
                p.insert(format!("blk{j}.{pass}.proj.b"), Tensor::zeros(1, d));
            }
        }
        Ok(p)
    }

    /// Rejects parameter sets whose names or shapes differ from this config.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let want = self.init_params(0)?;
        if want.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                params.len()
            )));
        }
        for (name, t) in &want {
            match params.get(name) {
                Some(p) if (p.rows, p.cols) == (t.rows, t.cols) => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "parameter {name} is {}x{}, config needs {}x{}",
                        p.rows, p.cols, t.rows, t.cols
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        check_finite(params)
    }
}

struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    fn get(vars: &BTreeMap<String, Var>, w: &str, b: &str) -> Result<Self> {
        Ok(Linear { w: require(vars, w)?, b: require(vars, b)? })
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.matmul(x, self.w);
        g.add_row(y, self.b)
    }
}

struct Gru {
    wi: Var,
    wh: Var,
    bi: Var,
    bh: Var,
    hidden: usize,
}

impl Gru {
    fn get(vars: &BTreeMap<String, Var>, pre: &str, hidden: usize) -> Result<Self> {
        Ok(Gru {
            wi: require(vars, &format!("{pre}.wi"))?,
            wh: require(vars, &format!("{pre}.wh"))?,
            bi: require(vars, &format!("{pre}.bi"))?,
            bh: require(vars, &format!("{pre}.bh"))?,
            hidden,
        })
    }

    /// Runs over `steps` contiguous row blocks of `n` sequences each;
    /// output rows align with input rows.
    fn run(&self, g: &mut Graph, x: Var, steps: usize, n: usize, reverse: bool) -> Var {
        let h_ = self.hidden;
        let gi = g.matmul(x, self.wi);
        let gi = g.add_row(gi, self.bi);
        let mut h = g.constant(Tensor::zeros(n, h_));
        let mut outs = vec![h; steps];
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let git = g.slice_rows(gi, t * n, (t + 1) * n);
            let gh = g.matmul(h, self.wh);
            let gh = g.add_row(gh, self.bh);
            let rz_i = g.slice_cols(git, 0, 2 * h_);
            let rz_h = g.slice_cols(gh, 0, 2 * h_);
            let rz = g.add(rz_i, rz_h);
            let rz = g.sigmoid(rz);
            let r = g.slice_cols(rz, 0, h_);
            let z = g.slice_cols(rz, h_, 2 * h_);
            let n_i = g.slice_cols(git, 2 * h_, 3 * h_);
            let n_h = g.slice_cols(gh, 2 * h_, 3 * h_);
            let rn = g.mul(r, n_h);
            let nn = g.add(n_i, rn);
            let nn = g.tanh(nn);
            let d = g.sub(h, nn);
            let zd = g.mul(z, d);
            h = g.add(nn, zd);
            outs[t] = h;
        }
        g.concat_rows(&outs)
    }
}

/// Row permutation from `(a, b, c)` order to `(b, a, c)` order.
fn swap_outer(a: usize, b: usize, c: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(a * b * c);
    for j in 0..b {
        for i in 0..a {
            for l in 0..c {
                idx.push((i * b + j) * c + l);
            }
        }
    }
    Arc::new(idx)
}

/// Runs the network on a spectrogram tensor (`(t, b)` rows, `[re | im]`
/// columns) and returns the masked spectrogram in the same layout.
pub fn mask_spectrogram(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    cfg: &BsrnnConfig,
    spec: Var,
    frames: usize,
    batch: usize,
) -> Result<Var> {
    let bins = cfg.spectrogram.bins();
    let kb = cfg.num_bands();
    let d = cfg.feature_dim;
    let rows = frames * batch;
    let mut bands = Vec::with_capacity(kb);
    let mut band_re = Vec::with_capacity(kb);
    let mut band_im = Vec::with_capacity(kb);
    for k in 0..kb {
        let (lo, hi) = cfg.band(k);
        let re = g.slice_cols(spec, lo, hi);
        let im = g.slice_cols(spec, bins + lo, bins + hi);
        band_re.push(re);
        band_im.push(im);
        let both = g.concat_cols(&[re, im]);
        let normed = g.layer_norm(both);
        let raw = g.value(both);
        let loge = Tensor::new(
            rows,
            1,
            (0..rows)
                .map(|r| {
                    let e = raw.row(r).iter().map(|v| v * v).sum::<f64>() / raw.cols as f64;
                    (e + LOG_ENERGY_EPS).ln()
                })
                .collect(),
        );
        let loge = g.constant(loge);
        let feat = g.concat_cols(&[normed, loge]);
        let enc = Linear::get(vars, &format!("enc.{k}.w"), &format!("enc.{k}.b"))?;
        bands.push(enc.apply(g, feat));
    }
    // (k, t, b) layout
    let mut x = g.concat_rows(&bands);
    let to_time = swap_outer(kb, frames, batch);
    let from_time = swap_outer(frames, kb, batch);
    for j in 0..cfg.num_blocks {
        // across time: sequences are (k, b), steps are t
        let y = g.layer_norm(x);
        let y = g.gather_rows(y, to_time.clone());
        let fw = Gru::get(vars, &format!("blk{j}.time.fw"), d)?.run(g, y, frames, kb * batch, false);
        let bw = Gru::get(vars, &format!("blk{j}.time.bw"), d)?.run(g, y, frames, kb * batch, true);
        let h = g.concat_cols(&[fw, bw]);
        let proj = Linear::get(vars, &format!("blk{j}.time.proj.w"), &format!("blk{j}.time.proj.b"))?;
        let h = proj.apply(g, h);
        let h = g.gather_rows(h, from_time.clone());
        x = g.add(x, h);
        // across bands: sequences are (t, b), steps are k
        let y = g.layer_norm(x);
        let fw = Gru::get(vars, &format!("blk{j}.band.fw"), d)?.run(g, y, kb, rows, false);
        let bw = Gru::get(vars, &format!("blk{j}.band.bw"), d)?.run(g, y, kb, rows, true);
        let h = g.concat_cols(&[fw, bw]);
        let proj = Linear::get(vars, &format!("blk{j}.band.proj.w"), &format!("blk{j}.band.proj.b"))?;
        let h = proj.apply(g, h);
        x = g.add(x, h);
    }
    let mut est_re = Vec::with_capacity(kb);
    let mut est_im = Vec::with_capacity(kb);
    for k in 0..kb {
        let (lo, hi) = cfg.band(k);
        let w = hi - lo;
        let (yr, yi) = (band_re[k], band_im[k]);
        if cfg.force_identity_mask {
            est_re.push(yr);
            est_im.push(yi);
            continue;
        }
        let xk = g.slice_rows(x, k * rows, (k + 1) * rows);
        let xk = g.layer_norm(xk);
        let l1 = Linear::get(vars, &format!("dec.{k}.w1"), &format!("dec.{k}.b1"))?;
        let l2 = Linear::get(vars, &format!("dec.{k}.w2"), &format!("dec.{k}.b2"))?;
        let h = l1.apply(g, xk);
        let h = g.tanh(h);
        let m = l2.apply(g, h);
        let m = g.tanh(m);
        let m = g.scale(m, MASK_BOUND);
        let mr = g.slice_cols(m, 0, w);
        let mi = g.slice_cols(m, w, 2 * w);
        let a = g.mul(mr, yr);
        let b = g.mul(mi, yi);
        let c = g.mul(mr, yi);
        let e = g.mul(mi, yr);
        est_re.push(g.sub(a, b));
        est_im.push(g.add(c, e));
    }
    let mut cols = est_re;
    cols.extend(est_im);
    Ok(g.concat_cols(&cols))
}

/// Enhances a `[batch, len]` waveform tensor inside `g`.
pub fn forward_graph(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    cfg: &BsrnnConfig,
    stft: &Stft,
    noisy: Var,
) -> Result<Var> {
    let (batch, len) = (g.value(noisy).rows, g.value(noisy).cols);
    if len < cfg.spectrogram.fft_size {
        return Err(Error::Shape(format!(
            "input of {len} samples is shorter than fft_size {}",
            cfg.spectrogram.fft_size
        )));
    }
    let spec = stft.stft_var(g, noisy);
    let est = mask_spectrogram(g, vars, cfg, spec, cfg.spectrogram.frames(len), batch)?;
    Ok(stft.istft_var(g, est, batch, len))
}

pub fn bsrnn_forward(noisy: &[f64], params: &ParamStore, cfg: &BsrnnConfig) -> Result<Vec<f64>> {
    cfg.check_params(params)?;
    if noisy.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("non-finite sample in model input".into()));
    }
    let stft = Stft::new(cfg.spectrogram)?;
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> =
        params.iter().map(|(n, t)| (n.clone(), g.constant(t.clone()))).collect();
    let x = g.constant(Tensor::new(1, noisy.len(), noisy.to_vec()));
    let y = forward_graph(&mut g, &vars, cfg, &stft, x)?;
    Ok(g.value(y).data.clone())
}

/// Waveform MAE plus magnitude-spectrogram MAE, as graph nodes.
pub fn loss_graph(g: &mut Graph, stft: &Stft, est: Var, reference: Var) -> Result<(Var, Var, Var)> {
    let (a, b) = (g.value(est), g.value(reference));
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::Shape(format!(
            "estimate {}x{} vs reference {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let d = g.sub(est, reference);
    let d = g.abs(d);
    let wave = g.mean(d);
    let se = stft.stft_var(g, est);
    let me = magnitude_var(g, se);
    let sr = stft.stft_var(g, reference);
    let mr = magnitude_var(g, sr);
    let dm = g.sub(me, mr);
    let dm = g.abs(dm);
    let mag = g.mean(dm);
    Ok((g.add(wave, mag), wave, mag))
}

/// Returns `(total, waveform term, magnitude term)`.
pub fn bsrnn_loss_terms(estimate: &[f64], reference: &[f64], cfg: &SpectrogramConfig) -> Result<(f64, f64, f64)> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    if estimate.len() < cfg.fft_size {
        return Err(Error::Shape("signals shorter than fft_size".into()));
    }
    let stft = Stft::new(*cfg)?;
    let mut g = Graph::new();
    let e = g.constant(Tensor::new(1, estimate.len(), estimate.to_vec()));
    let r = g.constant(Tensor::new(1, reference.len(), reference.to_vec()));
    let (t, w, m) = loss_graph(&mut g, &stft, e, r)?;
    Ok((g.value(t).item(), g.value(w).item(), g.value(m).item()))
}

pub fn bsrnn_loss(estimate: &[f64], reference: &[f64], cfg: &SpectrogramConfig) -> Result<f64> {
    Ok(bsrnn_loss_terms(estimate, reference, cfg)?.0)
}

/// Loss and parameter gradients for one batch of `[batch, len]` tensors.
pub fn loss_and_grads(
    params: &ParamStore,
    cfg: &BsrnnConfig,
    stft: &Stft,
    noisy: Tensor,
    clean: Tensor,
) -> Result<(f64, ParamStore)> {
    let mut g = Graph::new();
    let vars = load_params(&mut g, params);
    let x = g.constant(noisy);
    let r = g.constant(clean);
    let est = forward_graph(&mut g, &vars, cfg, stft, x)?;
    let (loss, _, _) = loss_graph(&mut g, stft, est, r)?;
    let grads = g.backward(loss);
    Ok((g.value(loss).item(), g.param_grads(&grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::spectral::stft;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn noise(len: usize, s: u64) -> Vec<f64> {
        let mut rng = seed::rng(s, "bsrnn-test", &[]);
        (0..len).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn length_preserving_and_finite() {
        let cfg = BsrnnConfig::default();
        let p = cfg.init_params(1).unwrap();
        for len in [1600, 16000, 16384] {
            let y = bsrnn_forward(&noise(len, len as u64), &p, &cfg).unwrap();
            assert_eq!(y.len(), len);
            assert!(y.iter().all(|v| v.is_finite()));
        }
        let z = bsrnn_forward(&vec![0.0; 4000], &p, &cfg).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn initial_mask_is_identity() {
        let cfg = BsrnnConfig::default();
        let p = cfg.init_params(2).unwrap();
        let x = noise(4000, 3);
        let y = bsrnn_forward(&x, &p, &cfg).unwrap();
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // the decoder output is near its bias, not exactly on it
        assert!(err < 0.2 * x.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }

    #[test]
    fn forced_identity_mask_reconstructs_input() {
        let cfg = BsrnnConfig { force_identity_mask: true, ..Default::default() };
        let p = cfg.init_params(4).unwrap();
        let x = noise(5000, 5);
        let y = bsrnn_forward(&x, &p, &cfg).unwrap();
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err / peak < 1e-6);
    }

    #[test]
    fn masked_magnitude_is_bounded() {
        let cfg = BsrnnConfig::tiny();
        let mut p = cfg.init_params(6).unwrap();
        // saturate the decoders
        for (name, t) in p.iter_mut() {
            if name.ends_with(".b2") {
                t.data.iter_mut().enumerate().for_each(|(i, v)| *v = if i % 2 == 0 { 50.0 } else { -50.0 });
            }
        }
        let x = noise(800, 7);
        let st = Stft::new(cfg.spectrogram).unwrap();
        let mut g = Graph::new();
        let vars: BTreeMap<String, Var> = p.iter().map(|(n, t)| (n.clone(), g.constant(t.clone()))).collect();
        let xv = g.constant(Tensor::new(1, x.len(), x.clone()));
        let spec = st.stft_var(&mut g, xv);
        let frames = cfg.spectrogram.frames(x.len());
        let est = mask_spectrogram(&mut g, &vars, &cfg, spec, frames, 1).unwrap();
        let y = stft(&x, &cfg.spectrogram).unwrap();
        let bins = cfg.spectrogram.bins();
        let e = g.value(est);
        for t in 0..frames {
            for k in 0..bins {
                let m = e.get(t, k).hypot(e.get(t, bins + k));
                assert!(m <= K_MASK * y.at(t, k).norm() + 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_config_and_params() {
        let mut cfg = BsrnnConfig::default();
        cfg.band_edges = vec![0, 8, 8, 257];
        assert!(cfg.validate().is_err());
        cfg.band_edges = vec![0, 100, 200];
        assert!(cfg.validate().is_err());
        let cfg = BsrnnConfig::default();
        let mut p = cfg.init_params(1).unwrap();
        p.get_mut("enc.0.b").unwrap().data[0] = f64::NAN;
        assert!(bsrnn_forward(&noise(1000, 1), &p, &cfg).is_err());
        let p = BsrnnConfig::tiny().init_params(1).unwrap();
        assert!(bsrnn_forward(&noise(1000, 1), &p, &cfg).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let cfg = SpectrogramConfig::default();
        let r = noise(2000, 8);
        assert!(bsrnn_loss(&r, &r, &cfg).unwrap().abs() < 1e-7);
        let shifted: Vec<f64> = r.iter().map(|v| v + 0.1).collect();
        let (_, wave, mag) = bsrnn_loss_terms(&shifted, &r, &cfg).unwrap();
        assert!((wave - 0.1).abs() < 1e-12);
        assert!(mag > 0.0);
        assert!(bsrnn_loss(&r, &r[..1999], &cfg).is_err());
    }

    #[test]
    fn loss_gradient_of_toy_model() {
        // five parameters: gain, second-order taps and a bias
        let cfg = SpectrogramConfig { fft_size: 32, hop: 8, ..Default::default() };
        let st = Stft::new(cfg).unwrap();
        let x = noise(100, 9);
        let r = noise(100, 10);
        let theta = [0.7, -0.2, 0.1, 0.05, 0.01];
        let eval = |th: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let p = g.variable(Tensor::new(1, 5, th.to_vec()));
            let mut data = vec![0.0; 5 * 100];
            for n in 0..100 {
                data[n] = x[n];
                data[100 + n] = if n >= 1 { x[n - 1] } else { 0.0 };
                data[200 + n] = if n >= 2 { x[n - 2] } else { 0.0 };
                data[300 + n] = x[n] * x[n];
                data[400 + n] = 1.0;
            }
            let basis = g.constant(Tensor::new(5, 100, data));
            let est = g.matmul(p, basis);
            let rv = g.constant(Tensor::new(1, 100, r.clone()));
            let (loss, _, _) = loss_graph(&mut g, &st, est, rv).unwrap();
            let grads = g.backward(loss);
            (g.value(loss).item(), grads.get(p).unwrap().data.clone())
        };
        let (_, an) = eval(&theta);
        for i in 0..5 {
            let mut tp = theta;
            let mut tm = theta;
            tp[i] += 1e-6;
            tm[i] -= 1e-6;
            let fd = (eval(&tp).0 - eval(&tm).0) / 2e-6;
            let rel = (fd - an[i]).abs() / fd.abs().max(an[i].abs());
            assert!(rel < 1e-3, "param {i}: fd {fd}, analytic {}", an[i]);
        }
    }
}
