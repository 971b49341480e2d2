//! Objective enhancement metrics and reports.
//!
//! SDR, SI-SDR and STOI are native; any other metric name is resolved
//! through registered external plugins speaking a line-oriented JSON
//! protocol. Metrics without a plugin are reported as unavailable.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::mixer::PairedDataset;
use crate::{Error, Result};

pub const DB_CAP: f64 = 100.0;
const SILENT_ENERGY: f64 = 1e-20;

fn check_pair(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Metric(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    let e: f64 = reference.iter().map(|v| v * v).sum();
    if e <= SILENT_ENERGY {
        return Err(Error::Metric("reference is silent".into()));
    }
    Ok(e)
}

fn capped_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return DB_CAP;
    }
    if num <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

/// `10 log10(Σ ref² / Σ (ref - est)²)`, capped to ±100 dB.
pub fn sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    let e = check_pair(reference, estimate)?;
    let r: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(capped_db(e, r))
}

/// SDR of the estimate against its projection onto the reference.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    let e = check_pair(reference, estimate)?;
    let alpha = reference.iter().zip(estimate).map(|(a, b)| a * b).sum::<f64>() / e;
    let (mut t, mut n) = (0.0, 0.0);
    for (r, s) in reference.iter().zip(estimate) {
        let target = alpha * r;
        t += target * target;
        n += (s - target) * (s - target);
    }
    Ok(capped_db(t, n))
}

const STOI_FS: u32 = 10_000;
const STOI_FRAME: usize = 256;
const STOI_NFFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_MIN_FREQ: f64 = 150.0;
const STOI_SEGMENT: usize = 30;
const STOI_BETA: f64 = -15.0;
const STOI_DYN_RANGE: f64 = 40.0;
const STOI_EPS: f64 = f64::EPSILON;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..500 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kaiser-windowed sinc antialiasing filter matching Octave's `resample`.
fn resample_filter(p: usize, q: usize) -> Vec<f64> {
    let rejection_db = 60.0;
    let stop = 1.0 / (2 * p.max(q)) as f64;
    let roll_off = stop / 10.0;
    let l = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as isize;
    let beta = 0.1102 * (rejection_db - 8.7);
    let m = (2 * l + 1) as f64;
    let h: Vec<f64> = (-l..=l)
        .enumerate()
        .map(|(n, t)| {
            let r = 2.0 * n as f64 / (m - 1.0) - 1.0;
            let kaiser = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(beta);
            kaiser * 2.0 * p as f64 * stop * sinc(2.0 * stop * t as f64)
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.into_iter().map(|v| v / s).collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Polyphase resampling by `up / down` with zero padding, aligned like
/// `scipy.signal.resample_poly`.
pub fn resample(x: &[f64], to: u32, from: u32) -> Vec<f64> {
    let g = gcd(to as usize, from as usize);
    let (up, down) = (to as usize / g, from as usize / g);
    if up == down {
        return x.to_vec();
    }
    let h: Vec<f64> = resample_filter(up, down).into_iter().map(|v| v * up as f64).collect();
    let half = (h.len() - 1) / 2;
    let pre_pad = down - half % down;
    let pre_remove = (half + pre_pad) / down;
    let n_out = (x.len() * up).div_ceil(down);
    (0..n_out)
        .map(|j| {
            // output j sees x[n] through tap (j + pre_remove) * down - pre_pad - n * up
            let c = ((j + pre_remove) * down) as isize - pre_pad as isize;
            let n_hi = (c.div_euclid(up as isize)).min(x.len() as isize - 1);
            let n_lo = ((c - h.len() as isize + 1) as f64 / up as f64).ceil().max(0.0) as isize;
            let mut acc = 0.0;
            let mut n = n_lo;
            while n <= n_hi {
                acc += x[n as usize] * h[(c - n * up as isize) as usize];
                n += 1;
            }
            acc
        })
        .collect()
}

/// Symmetric Hann without its zero end points (`hanning(n + 2)[1:-1]`).
fn stoi_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * (i + 1) as f64 / (n + 1) as f64).cos())
        .collect()
}

fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (len, hop) = (STOI_FRAME, STOI_FRAME / 2);
    let w = stoi_window(len);
    let starts: Vec<usize> = if x.len() > len { (0..x.len() - len).step_by(hop).collect() } else { vec![] };
    let energy = |s: usize| -> f64 {
        let n: f64 = (0..len).map(|i| (w[i] * x[s + i]).powi(2)).sum::<f64>().sqrt();
        20.0 * (n + STOI_EPS).log10()
    };
    let energies: Vec<f64> = starts.iter().map(|&s| energy(s)).collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| max - STOI_DYN_RANGE - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    if kept.is_empty() {
        return (vec![], vec![]);
    }
    let out_len = (kept.len() - 1) * hop + len;
    let mut xo = vec![0.0; out_len];
    let mut yo = vec![0.0; out_len];
    for (f, &s) in kept.iter().enumerate() {
        for i in 0..len {
            xo[f * hop + i] += w[i] * x[s + i];
            yo[f * hop + i] += w[i] * y[s + i];
        }
    }
    (xo, yo)
}

/// Magnitudes `[frame][bin]` of the STOI short-time spectrum.
fn stoi_spectrum(x: &[f64]) -> Vec<Vec<f64>> {
    let hop = STOI_FRAME / 2;
    let w = stoi_window(STOI_FRAME);
    let fft = FftPlanner::new().plan_fft_forward(STOI_NFFT);
    let starts: Vec<usize> = if x.len() > STOI_FRAME { (0..x.len() - STOI_FRAME).step_by(hop).collect() } else { vec![] };
    starts
        .into_iter()
        .map(|s| {
            let mut buf = vec![Complex64::new(0.0, 0.0); STOI_NFFT];
            for i in 0..STOI_FRAME {
                buf[i] = Complex64::new(w[i] * x[s + i], 0.0);
            }
            fft.process(&mut buf);
            buf[..STOI_NFFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// One-third octave band bin ranges `[lo, hi)`.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let bins = STOI_NFFT / 2 + 1;
    let f: Vec<f64> = (0..bins).map(|i| i as f64 * STOI_FS as f64 / STOI_NFFT as f64).collect();
    let nearest = |target: f64| -> usize {
        let mut best = 0;
        for i in 1..bins {
            if (f[i] - target).powi(2) < (f[best] - target).powi(2) {
                best = i;
            }
        }
        best
    };
    (0..STOI_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = STOI_MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = STOI_MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

fn band_envelopes(power: &[Vec<f64>], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    bands
        .iter()
        .map(|&(lo, hi)| power.iter().map(|fr| fr[lo..hi].iter().sum::<f64>().sqrt()).collect())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Short-time objective intelligibility of `estimate` against `reference`.
pub fn stoi(reference: &[f64], estimate: &[f64], sample_rate: u32) -> Result<f64> {
    check_pair(reference, estimate)?;
    let (x, y) = if sample_rate != STOI_FS {
        (resample(reference, STOI_FS, sample_rate), resample(estimate, STOI_FS, sample_rate))
    } else {
        (reference.to_vec(), estimate.to_vec())
    };
    let (x, y) = remove_silent_frames(&x, &y);
    let xs = stoi_spectrum(&x);
    let ys = stoi_spectrum(&y);
    if xs.len() < STOI_SEGMENT {
        return Err(Error::Metric(format!(
            "only {} speech-active frames after silence removal, need {STOI_SEGMENT}",
            xs.len()
        )));
    }
    let bands = third_octave_bands();
    let xb = band_envelopes(&xs, &bands);
    let yb = band_envelopes(&ys, &bands);
    let clip = 1.0 + 10f64.powf(-STOI_BETA / 20.0);
    let frames = xs.len();
    let segments = frames - STOI_SEGMENT + 1;
    let mut total = 0.0;
    for m in STOI_SEGMENT..=frames {
        for (xr, yr) in xb.iter().zip(&yb) {
            let xseg = &xr[m - STOI_SEGMENT..m];
            let yseg = &yr[m - STOI_SEGMENT..m];
            let alpha = norm(xseg) / (norm(yseg) + STOI_EPS);
            let yp: Vec<f64> = yseg.iter().zip(xseg).map(|(y, x)| (y * alpha).min(x * clip)).collect();
            let ym = yp.iter().sum::<f64>() / STOI_SEGMENT as f64;
            let xm = xseg.iter().sum::<f64>() / STOI_SEGMENT as f64;
            let yc: Vec<f64> = yp.iter().map(|v| v - ym).collect();
            let xc: Vec<f64> = xseg.iter().map(|v| v - xm).collect();
            let (ny, nx) = (norm(&yc) + STOI_EPS, norm(&xc) + STOI_EPS);
            total += yc.iter().zip(&xc).map(|(a, b)| (a / ny) * (b / nx)).sum::<f64>();
        }
    }
    Ok(total / (segments * STOI_BANDS) as f64)
}

pub const NATIVE_METRICS: [&str; 3] = ["sdr", "si_sdr", "stoi"];

fn native_metric(name: &str, reference: &[f64], estimate: &[f64]) -> Option<Result<f64>> {
    match name {
        "sdr" => Some(sdr(reference, estimate)),
        "si_sdr" => Some(si_sdr(reference, estimate)),
        "stoi" => Some(stoi(reference, estimate, crate::SAMPLE_RATE)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginSpec {
    /// Program and arguments.
    pub command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub name: String,
    pub version: String,
    #[serde(default)]
    pub concurrent: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PluginRequest {
    pub utterance_id: String,
    pub ref_wav_path: PathBuf,
    pub est_wav_path: PathBuf,
}

#[derive(Deserialize)]
struct PluginResponse {
    utterance_id: String,
    value: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PluginResult {
    pub handshake: Handshake,
    /// Per request, in request order.
    pub values: Vec<std::result::Result<f64, String>>,
}

struct Registered {
    spec: PluginSpec,
    lock: Mutex<()>,
}

/// Named external metric programs.
#[derive(Default)]
pub struct PluginRegistry {
    plugins: BTreeMap<String, Registered>,
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_plugin(&mut self, name: &str, spec: PluginSpec) -> Result<()> {
        if spec.command.is_empty() {
            return Err(Error::Plugin { name: name.into(), message: "empty command".into() });
        }
        self.plugins.insert(name.to_string(), Registered { spec, lock: Mutex::new(()) });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.plugins.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.plugins.keys().cloned().collect()
    }

    /// Scores `requests` with plugin `name`; `Ok(None)` when not registered.
    pub fn run_plugin_metric(&self, name: &str, requests: &[PluginRequest]) -> Result<Option<PluginResult>> {
        let Some(reg) = self.plugins.get(name) else { return Ok(None) };
        let (hs, values) = {
            let _guard = reg.lock.lock().unwrap_or_else(|e| e.into_inner());
            invoke_plugin(name, &reg.spec, requests)?
        };
        Ok(Some(PluginResult { handshake: hs, values }))
    }
}

fn plugin_err(name: &str, message: impl Into<String>) -> Error {
    Error::Plugin { name: name.into(), message: message.into() }
}

type PluginValues = Vec<std::result::Result<f64, String>>;

fn invoke_plugin(name: &str, spec: &PluginSpec, requests: &[PluginRequest]) -> Result<(Handshake, PluginValues)> {
    let mut child = Command::new(&spec.command[0])
        .args(&spec.command[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| plugin_err(name, format!("cannot start: {e}")))?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
    let hs: Result<Handshake> = (|| {
        stdin
            .write_all(b"HELLO\n")
            .and_then(|_| stdin.flush())
            .map_err(|e| plugin_err(name, format!("handshake write failed: {e}")))?;
        let mut line = String::new();
        stdout
            .read_line(&mut line)
            .map_err(|e| plugin_err(name, format!("handshake read failed: {e}")))?;
        let hs: Handshake = serde_json::from_str(line.trim())
            .map_err(|e| plugin_err(name, format!("bad handshake {:?}: {e}", line.trim())))?;
        if hs.name.is_empty() || hs.version.is_empty() {
            return Err(plugin_err(name, "handshake lacks name or version"));
        }
        Ok(hs)
    })();
    let hs = match hs {
        Ok(h) => h,
        Err(e) => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(e);
        }
    };
    let mut body = String::new();
    for r in requests {
        body.push_str(&serde_json::to_string(r)?);
        body.push('\n');
    }
    // a writer thread keeps large batches from deadlocking on full pipes
    let writer = std::thread::spawn(move || {
        let _ = stdin.write_all(body.as_bytes());
    });
    let mut lines = Vec::new();
    for line in stdout.lines() {
        match line {
            Ok(l) if l.trim().is_empty() => continue,
            Ok(l) => lines.push(l),
            Err(_) => break,
        }
    }
    let _ = writer.join();
    let _ = child.wait();
    let index: BTreeMap<&str, usize> =
        requests.iter().enumerate().map(|(i, r)| (r.utterance_id.as_str(), i)).collect();
    let mut values: PluginValues = vec![Err("no response from plugin".into()); requests.len()];
    for (pos, l) in lines.iter().enumerate() {
        match serde_json::from_str::<PluginResponse>(l) {
            Ok(resp) => {
                let Some(&i) = index.get(resp.utterance_id.as_str()) else { continue };
                values[i] = match (resp.value, resp.error) {
                    (Some(v), None) if v.is_finite() => Ok(v),
                    (_, Some(e)) => Err(e),
                    _ => Err("malformed plugin output".into()),
                };
            }
            Err(_) if pos < requests.len() => values[pos] = Err("malformed plugin output".into()),
            Err(_) => {}
        }
    }
    Ok((hs, values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub utterance_id: String,
    pub metric: String,
    pub value: Option<f64>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMeta {
    /// `native`, `plugin` or `unavailable`.
    pub source: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset_id: String,
    pub enhancer_id: String,
    pub rows: Vec<MetricRow>,
    pub aggregates: BTreeMap<String, f64>,
    pub metadata: BTreeMap<String, MetricMeta>,
}

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

#[derive(Serialize, Deserialize)]
struct ReportHeader {
    dataset_id: String,
    enhancer_id: String,
    aggregates: BTreeMap<String, f64>,
    metadata: BTreeMap<String, MetricMeta>,
}

impl MetricReport {
    /// Means over rows with status ok, per metric.
    pub fn compute_aggregates(rows: &[MetricRow]) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in rows {
            if let (Status::Ok, Some(v)) = (&r.status, r.value) {
                let e = acc.entry(r.metric.clone()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    pub fn value(&self, utterance_id: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.utterance_id == utterance_id && r.metric == metric)
            .and_then(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("utterance_id,metric,value,status\n");
        for r in &self.rows {
            let v = r.value.map(|v| format!("{v:?}")).unwrap_or_default();
            let status = match r.status {
                Status::Ok => "ok".to_string(),
                Status::Error => format!("error: {}", r.message.clone().unwrap_or_default().replace([',', '\n'], ";")),
                Status::Unavailable => "unavailable".to_string(),
            };
            s.push_str(&format!("{},{},{},{}\n", r.utterance_id, r.metric, v, status));
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        audio::write_atomic(&dir.join(REPORT_CSV), self.to_csv().as_bytes())?;
        let header = ReportHeader {
            dataset_id: self.dataset_id.clone(),
            enhancer_id: self.enhancer_id.clone(),
            aggregates: self.aggregates.clone(),
            metadata: self.metadata.clone(),
        };
        audio::write_atomic(&dir.join(REPORT_JSON), serde_json::to_string_pretty(&header)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let jp = dir.join(REPORT_JSON);
        let header: ReportHeader =
            serde_json::from_str(&fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?)?;
        let cp = dir.join(REPORT_CSV);
        let csv = fs::read_to_string(&cp).map_err(|e| Error::io(&cp, e))?;
        let mut rows = Vec::new();
        for line in csv.lines().skip(1) {
            let parts: Vec<&str> = line.splitn(4, ',').collect();
            if parts.len() != 4 {
                return Err(Error::Metric(format!("bad report row {line:?}")));
            }
            let value = if parts[2].is_empty() {
                None
            } else {
                Some(parts[2].parse::<f64>().map_err(|e| Error::Metric(format!("bad value {:?}: {e}", parts[2])))?)
            };
            let (status, message) = match parts[3] {
                "ok" => (Status::Ok, None),
                "unavailable" => (Status::Unavailable, None),
                s => (Status::Error, Some(s.trim_start_matches("error: ").to_string())),
            };
            rows.push(MetricRow {
                utterance_id: parts[0].to_string(),
                metric: parts[1].to_string(),
                value,
                status,
                message,
            });
        }
        Ok(MetricReport {
            dataset_id: header.dataset_id,
            enhancer_id: header.enhancer_id,
            rows,
            aggregates: header.aggregates,
            metadata: header.metadata,
        })
    }
}

/// One evaluation utterance.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub noisy: Vec<f64>,
    pub clean: Vec<f64>,
}

pub fn load_pairs(ds: &PairedDataset) -> Result<Vec<EvalPair>> {
    ds.pairs
        .par_iter()
        .map(|p| {
            let id = p
                .noisy_uri
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.spec.speech_id.clone());
            Ok(EvalPair {
                id,
                noisy: audio::read_wav(&p.noisy_uri)?,
                clean: audio::read_wav(&p.clean_uri)?,
            })
        })
        .collect()
}

pub type Enhancer<'a> = dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync + 'a;

pub struct EvalOptions<'a> {
    pub dataset_id: String,
    pub enhancer_id: String,
    pub metrics: Vec<String>,
    pub plugins: Option<&'a PluginRegistry>,
    /// Where enhanced audio is written for plugins; required only when a
    /// requested metric is served by a plugin.
    pub work_dir: Option<PathBuf>,
}

/// Enhances every pair and scores the requested metrics.
pub fn evaluate(pairs: &[EvalPair], enhancer: &Enhancer, opts: &EvalOptions) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Metric("evaluation set is empty".into()));
    }
    let estimates: Vec<std::result::Result<Vec<f64>, String>> = pairs
        .par_iter()
        .map(|p| match enhancer(&p.noisy) {
            Ok(e) if e.len() == p.clean.len() => Ok(e),
            Ok(e) => Err(format!("enhancer returned {} samples for {}", e.len(), p.clean.len())),
            Err(e) => Err(e.to_string()),
        })
        .collect();
    let mut rows = Vec::new();
    let mut metadata = BTreeMap::new();
    for metric in &opts.metrics {
        if NATIVE_METRICS.contains(&metric.as_str()) {
            metadata.insert(
                metric.clone(),
                MetricMeta { source: "native".into(), version: env!("CARGO_PKG_VERSION").into() },
            );
            let scored: Vec<MetricRow> = pairs
                .par_iter()
                .zip(&estimates)
                .map(|(p, est)| {
                    let r = match est {
                        Ok(e) => native_metric(metric, &p.clean, e).expect("native").map_err(|e| e.to_string()),
                        Err(e) => Err(e.clone()),
                    };
                    row(&p.id, metric, r)
                })
                .collect();
            rows.extend(scored);
            continue;
        }
        match opts.plugins.filter(|r| r.contains(metric)) {
            None => {
                metadata.insert(metric.clone(), MetricMeta { source: "unavailable".into(), version: String::new() });
                rows.extend(pairs.iter().map(|p| MetricRow {
                    utterance_id: p.id.clone(),
                    metric: metric.clone(),
                    value: None,
                    status: Status::Unavailable,
                    message: None,
                }));
            }
            Some(reg) => {
                let dir = opts
                    .work_dir
                    .clone()
                    .ok_or_else(|| Error::Metric(format!("plugin metric {metric} needs a work directory")))?;
                let mut requests = Vec::new();
                let mut slots = Vec::new();
                for (i, (p, est)) in pairs.iter().zip(&estimates).enumerate() {
                    if let Ok(e) = est {
                        let rp = dir.join("ref").join(format!("{}.wav", p.id));
                        let ep = dir.join("est").join(format!("{}.wav", p.id));
                        audio::write_wav(&rp, &p.clean)?;
                        audio::write_wav(&ep, e)?;
                        requests.push(PluginRequest { utterance_id: p.id.clone(), ref_wav_path: rp, est_wav_path: ep });
                        slots.push(i);
                    }
                }
                let result = reg.run_plugin_metric(metric, &requests);
                let mut per: Vec<std::result::Result<f64, String>> =
                    estimates.iter().map(|e| Err(e.clone().err().unwrap_or_default())).collect();
                match result {
                    Ok(Some(res)) => {
                        metadata.insert(
                            metric.clone(),
                            MetricMeta { source: "plugin".into(), version: format!("{} {}", res.handshake.name, res.handshake.version) },
                        );
                        for (slot, v) in slots.iter().zip(res.values) {
                            per[*slot] = v;
                        }
                    }
                    Ok(None) => unreachable!("registry checked above"),
                    Err(e) => {
                        metadata.insert(metric.clone(), MetricMeta { source: "plugin".into(), version: String::new() });
                        for slot in &slots {
                            per[*slot] = Err(e.to_string());
                        }
                    }
                }
                rows.extend(pairs.iter().zip(per).map(|(p, r)| row(&p.id, metric, r)));
            }
        }
    }
    let aggregates = MetricReport::compute_aggregates(&rows);
    Ok(MetricReport {
        dataset_id: opts.dataset_id.clone(),
        enhancer_id: opts.enhancer_id.clone(),
        rows,
        aggregates,
        metadata,
    })
}

fn row(id: &str, metric: &str, r: std::result::Result<f64, String>) -> MetricRow {
    match r {
        Ok(v) => MetricRow { utterance_id: id.into(), metric: metric.into(), value: Some(v), status: Status::Ok, message: None },
        Err(e) => MetricRow { utterance_id: id.into(), metric: metric.into(), value: None, status: Status::Error, message: Some(e) },
    }
}
