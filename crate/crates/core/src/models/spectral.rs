//! STFT front end shared by both model families.
//!
//! Frames are centered: the signal is zero padded by `fft_size / 2` on the
//! left and enough on the right that `1 + ceil(len / hop)` frames fit. The
//! inverse divides the overlap-added frames by the accumulated squared
//! window, so reconstruction is exact wherever that envelope is positive.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::graph::{CustomOp, Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    /// Periodic Hann.
    Hann,
    SqrtHann,
    Rect,
}

impl Window {
    pub fn samples(self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let h = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
                match self {
                    Window::Hann => h,
                    Window::SqrtHann => h.sqrt(),
                    Window::Rect => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: Window,
    pub sample_rate: u32,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            fft_size: 512,
            hop: 128,
            window: Window::Hann,
            sample_rate: crate::SAMPLE_RATE,
        }
    }
}

impl SpectrogramConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        1 + len.div_ceil(self.hop)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || self.fft_size % 2 != 0 {
            return Err(Error::Config(format!("fft_size {} must be even and >= 2", self.fft_size)));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::Config(format!("hop {} must be in 1..={}", self.hop, self.fft_size)));
        }
        let w = self.window.samples(self.fft_size);
        let sums: Vec<f64> = (0..self.hop)
            .map(|n| (n..self.fft_size).step_by(self.hop).map(|i| w[i] * w[i]).sum())
            .collect();
        let lo = sums.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = sums.iter().cloned().fold(0.0, f64::max);
        if lo <= 0.0 || (hi - lo) / hi > 1e-9 {
            return Err(Error::Config(format!(
                "{:?} window with fft {} and hop {} is not constant overlap-add",
                self.window, self.fft_size, self.hop
            )));
        }
        Ok(())
    }
}

/// Frame-major complex spectrum: `data[t * bins + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpec {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl ComplexSpec {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        ComplexSpec {
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); frames * bins],
        }
    }

    pub fn at(&self, t: usize, k: usize) -> Complex64 {
        self.data[t * self.bins + k]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// A planned transform for one configuration.
#[derive(Clone)]
pub struct Stft {
    pub cfg: SpectrogramConfig,
    window: Arc<Vec<f64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: SpectrogramConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Stft {
            cfg,
            window: Arc::new(cfg.window.samples(cfg.fft_size)),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    fn pad(&self) -> usize {
        self.cfg.fft_size / 2
    }

    /// Frame `t` covers signal samples starting at `t * hop - fft/2`.
    fn frame_start(&self, t: usize) -> isize {
        (t * self.cfg.hop) as isize - self.pad() as isize
    }

    pub fn stft(&self, x: &[f64]) -> Result<ComplexSpec> {
        if x.len() < self.cfg.fft_size {
            return Err(Error::Shape(format!(
                "signal of {} samples is shorter than fft_size {}",
                x.len(),
                self.cfg.fft_size
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite sample in stft input".into()));
        }
        Ok(self.analyze(x))
    }

    fn analyze(&self, x: &[f64]) -> ComplexSpec {
        let (n, bins) = (self.cfg.fft_size, self.cfg.bins());
        let frames = self.cfg.frames(x.len());
        let mut out = ComplexSpec::zeros(frames, bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            let s = self.frame_start(t);
            for (i, b) in buf.iter_mut().enumerate() {
                let m = s + i as isize;
                let v = if m >= 0 && (m as usize) < x.len() { x[m as usize] } else { 0.0 };
                *b = Complex64::new(v * self.window[i], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            out.data[t * bins..(t + 1) * bins].copy_from_slice(&buf[..bins]);
        }
        out
    }

    /// Squared-window envelope at each output sample.
    fn envelope(&self, frames: usize, len: usize) -> Vec<f64> {
        let mut env = vec![0.0; len];
        for t in 0..frames {
            let s = self.frame_start(t);
            for (i, w) in self.window.iter().enumerate() {
                let m = s + i as isize;
                if m >= 0 && (m as usize) < len {
                    env[m as usize] += w * w;
                }
            }
        }
        env
    }

    pub fn istft(&self, spec: &ComplexSpec, len: usize) -> Result<Vec<f64>> {
        if spec.bins != self.cfg.bins() || spec.frames != self.cfg.frames(len) {
            return Err(Error::Shape(format!(
                "spectrogram {}x{} does not match config for length {len} ({}x{})",
                spec.frames,
                spec.bins,
                self.cfg.frames(len),
                self.cfg.bins()
            )));
        }
        Ok(self.synthesize(spec, len))
    }

    fn synthesize(&self, spec: &ComplexSpec, len: usize) -> Vec<f64> {
        let (n, bins) = (self.cfg.fft_size, spec.bins);
        let env = self.envelope(spec.frames, len);
        let mut out = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        for t in 0..spec.frames {
            let row = &spec.data[t * bins..(t + 1) * bins];
            hermitian_fill(&mut buf, row);
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let s = self.frame_start(t);
            for (i, b) in buf.iter().enumerate() {
                let m = s + i as isize;
                if m >= 0 && (m as usize) < len {
                    out[m as usize] += self.window[i] * b.re / n as f64;
                }
            }
        }
        for (o, e) in out.iter_mut().zip(&env) {
            *o /= e;
        }
        out
    }
}

/// Full-length spectrum of a real signal from its non-negative bins
/// (imaginary parts of DC and Nyquist are discarded, as an inverse real FFT does).
fn hermitian_fill(buf: &mut [Complex64], row: &[Complex64]) {
    let n = buf.len();
    let half = n / 2;
    buf[0] = Complex64::new(row[0].re, 0.0);
    buf[half] = Complex64::new(row[half].re, 0.0);
    for k in 1..half {
        buf[k] = row[k];
        buf[n - k] = row[k].conj();
    }
}

pub fn stft(x: &[f64], cfg: &SpectrogramConfig) -> Result<ComplexSpec> {
    Stft::new(*cfg)?.stft(x)
}

pub fn istft(spec: &ComplexSpec, cfg: &SpectrogramConfig, len: usize) -> Result<Vec<f64>> {
    Stft::new(*cfg)?.istft(spec, len)
}

/// Batched spectra as a tensor: row `t * batch + b`, columns `[re(0..F) | im(0..F)]`.
pub fn specs_to_tensor(specs: &[ComplexSpec]) -> Tensor {
    let (frames, bins) = (specs[0].frames, specs[0].bins);
    let b = specs.len();
    let mut out = Tensor::zeros(frames * b, 2 * bins);
    for (bi, s) in specs.iter().enumerate() {
        assert_eq!((s.frames, s.bins), (frames, bins), "batched spectra differ in shape");
        for t in 0..frames {
            let r = (t * b + bi) * 2 * bins;
            for k in 0..bins {
                let c = s.at(t, k);
                out.data[r + k] = c.re;
                out.data[r + bins + k] = c.im;
            }
        }
    }
    out
}

pub fn tensor_to_specs(t: &Tensor, batch: usize) -> Vec<ComplexSpec> {
    let bins = t.cols / 2;
    let frames = t.rows / batch;
    (0..batch)
        .map(|bi| {
            let mut s = ComplexSpec::zeros(frames, bins);
            for f in 0..frames {
                let row = t.row(f * batch + bi);
                for k in 0..bins {
                    s.data[f * bins + k] = Complex64::new(row[k], row[bins + k]);
                }
            }
            s
        })
        .collect()
}

struct StftOp {
    stft: Stft,
    batch: usize,
    len: usize,
}

impl CustomOp for StftOp {
    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        // X[k] = sum_n w[n] x[s+n] e^{-i 2pi k n / N}, so
        // dL/dx[s+n] = w[n] Re(sum_{k<=N/2} (gr + i gi) e^{i 2pi k n / N}).
        let st = &self.stft;
        let n = st.cfg.fft_size;
        let bins = st.cfg.bins();
        let frames = st.cfg.frames(self.len);
        let mut gx = Tensor::zeros(self.batch, self.len);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); st.inverse.get_inplace_scratch_len()];
        for t in 0..frames {
            let s = st.frame_start(t);
            for b in 0..self.batch {
                let row = grad.row(t * self.batch + b);
                buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
                for k in 0..bins {
                    buf[k] = Complex64::new(row[k], row[bins + k]);
                }
                st.inverse.process_with_scratch(&mut buf, &mut scratch);
                let out = &mut gx.data[b * self.len..(b + 1) * self.len];
                for (i, c) in buf.iter().enumerate() {
                    let m = s + i as isize;
                    if m >= 0 && (m as usize) < self.len {
                        out[m as usize] += st.window[i] * c.re;
                    }
                }
            }
        }
        vec![gx]
    }
}

struct IstftOp {
    stft: Stft,
    batch: usize,
    len: usize,
    env: Vec<f64>,
}

impl CustomOp for IstftOp {
    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        // frame[n] = (1/N) sum_k c_k Re(S_k e^{i 2pi k n / N}) with c_k = 2 off
        // DC/Nyquist; the adjoint is (c_k / N) * FFT(w * g / env)[k].
        let st = &self.stft;
        let n = st.cfg.fft_size;
        let bins = st.cfg.bins();
        let frames = st.cfg.frames(self.len);
        let mut gs = Tensor::zeros(frames * self.batch, 2 * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); st.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            let s = st.frame_start(t);
            for b in 0..self.batch {
                let g = grad.row(b);
                for (i, c) in buf.iter_mut().enumerate() {
                    let m = s + i as isize;
                    let v = if m >= 0 && (m as usize) < self.len {
                        st.window[i] * g[m as usize] / self.env[m as usize]
                    } else {
                        0.0
                    };
                    *c = Complex64::new(v, 0.0);
                }
                st.forward.process_with_scratch(&mut buf, &mut scratch);
                let r = (t * self.batch + b) * 2 * bins;
                for k in 0..bins {
                    let ck = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
                    gs.data[r + k] = ck * buf[k].re / n as f64;
                    gs.data[r + bins + k] = if k == 0 || k == bins - 1 {
                        0.0
                    } else {
                        ck * buf[k].im / n as f64
                    };
                }
            }
        }
        vec![gs]
    }
}

impl Stft {
    /// Differentiable STFT of a `[batch, len]` waveform tensor.
    pub fn stft_var(&self, g: &mut Graph, wave: Var) -> Var {
        let w = g.value(wave);
        let (batch, len) = (w.rows, w.cols);
        let specs: Vec<ComplexSpec> = (0..batch).map(|b| self.analyze(w.row(b))).collect();
        let out = specs_to_tensor(&specs);
        g.custom(&[wave], out, Box::new(StftOp { stft: self.clone(), batch, len }))
    }

    /// Differentiable inverse of [`Stft::stft_var`].
    pub fn istft_var(&self, g: &mut Graph, spec: Var, batch: usize, len: usize) -> Var {
        let specs = tensor_to_specs(g.value(spec), batch);
        let mut data = Vec::with_capacity(batch * len);
        for s in &specs {
            data.extend(self.synthesize(s, len));
        }
        let env = self.envelope(self.cfg.frames(len), len);
        g.custom(
            &[spec],
            Tensor::new(batch, len, data),
            Box::new(IstftOp { stft: self.clone(), batch, len, env }),
        )
    }
}

pub const MAG_EPS: f64 = 1e-8;

struct MagnitudeOp;

impl CustomOp for MagnitudeOp {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let bins = x.cols / 2;
        let mut gx = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let (xr, gr, mr) = (x.row(r), grad.row(r), output.row(r));
            for k in 0..bins {
                let o = r * x.cols;
                gx.data[o + k] = gr[k] * xr[k] / mr[k];
                gx.data[o + bins + k] = gr[k] * xr[bins + k] / mr[k];
            }
        }
        vec![gx]
    }
}

/// `sqrt(re^2 + im^2 + eps)` of a `[re | im]` tensor.
pub fn magnitude_var(g: &mut Graph, spec: Var) -> Var {
    let x = g.value(spec);
    let bins = x.cols / 2;
    let mut out = Tensor::zeros(x.rows, bins);
    for r in 0..x.rows {
        let row = x.row(r);
        for k in 0..bins {
            out.data[r * bins + k] = (row[k] * row[k] + row[bins + k] * row[bins + k] + MAG_EPS).sqrt();
        }
    }
    g.custom(&[spec], out, Box::new(MagnitudeOp))
}
