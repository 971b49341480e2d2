//! Zero-shot TTS execution: the synthesizer interface, the deterministic
//! mock voice and an adapter for external models.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{count_words, Manifest, Provenance, UtteranceRecord};
use crate::sampler::{GenerationPlan, SynthesisRequest, LANGUAGE_POOL};
use crate::{audio, seed, Error, Result, SAMPLE_RATE};

/// Environment variable naming the external synthesizer endpoint.
pub const TTS_ENDPOINT_ENV: &str = "ATTRIB_SE_TTS_ENDPOINT";

/// Prompts quieter than this RMS are rejected.
pub const SILENT_PROMPT_RMS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub languages: BTreeSet<String>,
    pub max_text_chars: usize,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisResult {
    pub index: usize,
    pub waveform: Vec<f64>,
    pub realized_duration: f64,
    pub synthesizer_id: String,
}

/// Speaker prompt handed to a synthesizer.
#[derive(Debug, Clone)]
pub struct PromptAudio {
    pub path: PathBuf,
    pub samples: Vec<f64>,
}

pub trait Synthesizer: Sync {
    fn id(&self) -> String;
    fn capabilities(&self) -> &Capabilities;
    /// Produces raw audio; contract checks live in [`synthesize`].
    fn generate(&self, request: &SynthesisRequest, prompt: &PromptAudio) -> Result<Vec<f64>>;
}

/// Runs one request, enforcing the interface contract on both sides.
pub fn synthesize(
    synth: &dyn Synthesizer,
    request: &SynthesisRequest,
    prompt: &PromptAudio,
) -> Result<SynthesisResult> {
    let caps = synth.capabilities();
    if !caps.languages.contains(&request.language) {
        return Err(Error::Synthesis(format!("unsupported language {}", request.language)));
    }
    if count_words(&request.text) == 0 {
        return Err(Error::Synthesis("empty text".into()));
    }
    if request.text.chars().count() > caps.max_text_chars {
        return Err(Error::Synthesis(format!(
            "text of {} chars exceeds limit {}",
            request.text.chars().count(),
            caps.max_text_chars
        )));
    }
    if audio::rms(&prompt.samples) <= SILENT_PROMPT_RMS {
        return Err(Error::Synthesis(format!("silent prompt {}", prompt.path.display())));
    }
    let waveform = synth.generate(request, prompt)?;
    if waveform.is_empty() {
        return Err(Error::Synthesis("synthesizer returned no audio".into()));
    }
    if waveform.iter().any(|v| !v.is_finite()) {
        return Err(Error::Synthesis("synthesizer returned non-finite samples".into()));
    }
    if audio::peak(&waveform) > 1.0 {
        return Err(Error::Synthesis("synthesizer output exceeds unit peak".into()));
    }
    Ok(SynthesisResult {
        index: request.index,
        realized_duration: waveform.len() as f64 / SAMPLE_RATE as f64,
        waveform,
        synthesizer_id: synth.id(),
    })
}

/// Burst length per word: 0.30 s plus 0.02 s per character.
const WORD_BASE_S: f64 = 0.30;
const PER_CHAR_S: f64 = 0.02;
const GAP_S: f64 = 0.05;
const HARMONICS: usize = 4;
const MOCK_PEAK: f64 = 0.5;

/// Timbre knobs layered on top of the reference mock voice. The default is
/// the plain voice; other settings give a second, distinguishable "voice
/// family" for real-versus-synthetic comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockVoice {
    /// Added to the language's spectral tilt exponent.
    pub tilt_offset: f64,
    /// Relative depth of a 5 Hz vibrato.
    pub vibrato_depth: f64,
}

impl Default for MockVoice {
    fn default() -> Self {
        MockVoice {
            tilt_offset: 0.0,
            vibrato_depth: 0.0,
        }
    }
}

/// Fundamental frequency in Hz for a speaker id: 80 + (hash mod 160).
pub fn mock_f0(speaker_id: &str) -> f64 {
    80.0 + (seed::stable_hash(speaker_id) % 160) as f64
}

/// Spectral tilt exponent for one of the ten template languages.
pub fn language_tilt(language: &str) -> Option<f64> {
    LANGUAGE_POOL
        .iter()
        .position(|l| *l == language)
        .map(|i| 0.6 + 0.15 * i as f64)
}

fn word_chars(word: &str) -> usize {
    word.chars().filter(|c| c.is_alphanumeric()).count()
}

/// The mock voice: one harmonic burst per word.
///
/// The seed is accepted for interface symmetry and ignored; output depends
/// only on text, speaker and language.
pub fn mock_synthesize(text: &str, speaker_id: &str, language: &str, seed: u64) -> Result<Vec<f64>> {
    mock_synthesize_with(&MockVoice::default(), text, speaker_id, language, seed)
}

pub fn mock_synthesize_with(
    voice: &MockVoice,
    text: &str,
    speaker_id: &str,
    language: &str,
    _seed: u64,
) -> Result<Vec<f64>> {
    let words: Vec<&str> = text
        .split_whitespace()
        .filter(|w| w.chars().any(|c| c.is_alphanumeric()))
        .collect();
    if words.is_empty() {
        return Err(Error::Synthesis("empty text".into()));
    }
    let tilt = language_tilt(language)
        .ok_or_else(|| Error::Synthesis(format!("unsupported language {language}")))?
        + voice.tilt_offset;
    let fs = SAMPLE_RATE as f64;
    let f0 = mock_f0(speaker_id);
    let weights: Vec<f64> = (1..=HARMONICS).map(|h| (h as f64).powf(-tilt)).collect();
    let gap = (GAP_S * fs).round() as usize;

    let mut out = Vec::new();
    for (wi, w) in words.iter().enumerate() {
        if wi > 0 {
            out.extend(std::iter::repeat(0.0).take(gap));
        }
        let len = ((WORD_BASE_S + PER_CHAR_S * word_chars(w) as f64) * fs).round() as usize;
        let mut phase = 0.0;
        for n in 0..len {
            let t = n as f64 / fs;
            let f = f0 * (1.0 + voice.vibrato_depth * (2.0 * PI * 5.0 * t).sin());
            phase += 2.0 * PI * f / fs;
            let env = 0.5 * (1.0 - (2.0 * PI * n as f64 / (len - 1) as f64).cos());
            let s: f64 = weights
                .iter()
                .enumerate()
                .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
                .sum();
            out.push(env * s);
        }
    }
    let pk = audio::peak(&out);
    if pk > 0.0 {
        for v in &mut out {
            *v *= MOCK_PEAK / pk;
        }
    }
    Ok(out)
}

/// Desk-scale stand-in for a zero-shot TTS model. Ignores prompt content
/// and keys the voice on the request's target speaker id.
#[derive(Debug, Clone)]
pub struct MockSynthesizer {
    pub voice: MockVoice,
    caps: Capabilities,
}

impl MockSynthesizer {
    pub fn new(voice: MockVoice) -> Self {
        MockSynthesizer {
            voice,
            caps: Capabilities {
                languages: LANGUAGE_POOL.iter().map(|s| s.to_string()).collect(),
                max_text_chars: 2000,
                sample_rate: SAMPLE_RATE,
            },
        }
    }
}

impl Default for MockSynthesizer {
    fn default() -> Self {
        Self::new(MockVoice::default())
    }
}

impl Synthesizer for MockSynthesizer {
    fn id(&self) -> String {
        if self.voice == MockVoice::default() {
            "mock".into()
        } else {
            format!("mock(tilt{:+},vib{})", self.voice.tilt_offset, self.voice.vibrato_depth)
        }
    }

    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn generate(&self, request: &SynthesisRequest, _prompt: &PromptAudio) -> Result<Vec<f64>> {
        mock_synthesize_with(
            &self.voice,
            &request.text,
            &request.target_speaker_id,
            &request.language,
            0,
        )
    }
}

/// Wire request for external synthesizers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdapterRequest {
    pub text: String,
    pub language: String,
    pub prompt_wav_path: PathBuf,
    pub out_wav_path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdapterResponse {
    pub status: String,
    #[serde(default)]
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    Http(String),
    /// Program plus arguments, spawned once per request.
    Command(Vec<String>),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(Endpoint::Http(s.to_string()));
        }
        let parts: Vec<String> = s.split_whitespace().map(str::to_string).collect();
        if parts.is_empty() {
            return Err(Error::Config(format!("{TTS_ENDPOINT_ENV} is empty")));
        }
        Ok(Endpoint::Command(parts))
    }
}

/// External zero-shot TTS reached over a one-request-per-exchange JSON
/// protocol. The adapter must deliver 16 kHz mono WAV at `out_wav_path`.
pub struct ExternalSynthesizer {
    pub endpoint: Endpoint,
    pub work_dir: PathBuf,
    caps: Capabilities,
}

/// Languages XTTS-class models commonly support.
pub const EXTERNAL_LANGUAGES: [&str; 16] = [
    "en", "es", "fr", "de", "it", "pt", "pl", "tr", "ru", "nl", "cs", "ar", "zh", "ja", "hu", "ko",
];

impl ExternalSynthesizer {
    pub fn new(endpoint: Endpoint, work_dir: PathBuf, languages: BTreeSet<String>) -> Self {
        ExternalSynthesizer {
            endpoint,
            work_dir,
            caps: Capabilities {
                languages,
                max_text_chars: 400,
                sample_rate: SAMPLE_RATE,
            },
        }
    }

    pub fn from_env(work_dir: PathBuf) -> Result<Self> {
        let ep = std::env::var(TTS_ENDPOINT_ENV)
            .map_err(|_| Error::Config(format!("{TTS_ENDPOINT_ENV} is not set")))?;
        Ok(Self::new(
            Endpoint::parse(&ep)?,
            work_dir,
            EXTERNAL_LANGUAGES.iter().map(|s| s.to_string()).collect(),
        ))
    }

    fn exchange(&self, req: &AdapterRequest) -> Result<AdapterResponse> {
        let body = serde_json::to_string(req)?;
        let raw = match &self.endpoint {
            Endpoint::Http(url) => ureq::post(url)
                .set("Content-Type", "application/json")
                .send_string(&body)
                .map_err(|e| Error::Synthesis(format!("adapter HTTP error: {e}")))?
                .into_string()
                .map_err(|e| Error::Synthesis(format!("adapter HTTP body: {e}")))?,
            Endpoint::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::null())
                    .spawn()
                    .map_err(|e| Error::Synthesis(format!("cannot spawn {}: {e}", argv[0])))?;
                {
                    let mut stdin = child.stdin.take().expect("piped stdin");
                    stdin
                        .write_all(body.as_bytes())
                        .and_then(|_| stdin.write_all(b"\n"))
                        .map_err(|e| Error::Synthesis(format!("adapter stdin: {e}")))?;
                }
                let mut out = String::new();
                child
                    .stdout
                    .take()
                    .expect("piped stdout")
                    .read_to_string(&mut out)
                    .map_err(|e| Error::Synthesis(format!("adapter stdout: {e}")))?;
                let status = child
                    .wait()
                    .map_err(|e| Error::Synthesis(format!("adapter wait: {e}")))?;
                if !status.success() {
                    return Err(Error::Synthesis(format!("adapter exited with {status}")));
                }
                out
            }
        };
        let line = raw.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        serde_json::from_str(line)
            .map_err(|e| Error::Synthesis(format!("malformed adapter response {line:?}: {e}")))
    }
}

impl Synthesizer for ExternalSynthesizer {
    fn id(&self) -> String {
        match &self.endpoint {
            Endpoint::Http(u) => format!("external:{u}"),
            Endpoint::Command(a) => format!("external:{}", a.join(" ")),
        }
    }

    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn generate(&self, request: &SynthesisRequest, prompt: &PromptAudio) -> Result<Vec<f64>> {
        std::fs::create_dir_all(&self.work_dir).map_err(|e| Error::io(&self.work_dir, e))?;
        let out = self.work_dir.join(format!("req{:06}.wav", request.index));
        let req = AdapterRequest {
            text: request.text.clone(),
            language: request.language.clone(),
            prompt_wav_path: prompt.path.clone(),
            out_wav_path: out.clone(),
        };
        let resp = self.exchange(&req)?;
        if resp.status != "ok" {
            return Err(Error::Synthesis(format!("adapter status {:?}", resp.status)));
        }
        // read_wav rejects anything but 16 kHz mono
        let wave = audio::read_wav(&out)?;
        let _ = std::fs::remove_file(&out);
        Ok(wave)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExecuteOptions {
    /// Keep going past failed requests and report them.
    pub skip_failures: bool,
    /// Upper bound on concurrent synthesize calls.
    pub concurrency: usize,
}

impl Default for ExecuteOptions {
    fn default() -> Self {
        ExecuteOptions {
            skip_failures: false,
            concurrency: 4,
        }
    }
}

#[derive(Debug)]
pub struct Execution {
    pub manifest: Manifest,
    pub failures: Vec<(usize, String)>,
}

/// Synthesized record id for request `index`.
pub fn synthetic_id(index: usize) -> String {
    format!("syn{index:06}")
}

/// Runs a plan, writing `<store>/<id>.wav` for each request.
pub fn execute_plan(
    plan: &GenerationPlan,
    source: &Manifest,
    synth: &dyn Synthesizer,
    store: &Path,
    opts: ExecuteOptions,
) -> Result<Execution> {
    let mut prompts: BTreeMap<&str, PromptAudio> = BTreeMap::new();
    for r in &plan.requests {
        if prompts.contains_key(r.prompt_utterance_id.as_str()) {
            continue;
        }
        let rec = source.get(&r.prompt_utterance_id).ok_or_else(|| {
            Error::Synthesis(format!("prompt {} not in source manifest", r.prompt_utterance_id))
        })?;
        prompts.insert(
            &r.prompt_utterance_id,
            PromptAudio {
                path: rec.audio_uri.clone(),
                samples: audio::read_wav(&rec.audio_uri)?,
            },
        );
    }
    std::fs::create_dir_all(store).map_err(|e| Error::io(store, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.concurrency.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outcomes: Vec<Result<UtteranceRecord>> = pool.install(|| {
        plan.requests
            .par_iter()
            .map(|req| {
                let res = synthesize(synth, req, &prompts[req.prompt_utterance_id.as_str()])?;
                let id = synthetic_id(req.index);
                let path = store.join(format!("{id}.wav"));
                audio::write_wav(&path, &res.waveform)?;
                Ok(UtteranceRecord {
                    id,
                    speaker_id: req.target_speaker_id.clone(),
                    language: req.language.clone(),
                    word_count: count_words(&req.text),
                    text: req.text.clone(),
                    audio_uri: path,
                    sample_rate: SAMPLE_RATE,
                    duration: res.realized_duration,
                    provenance: Provenance::Synthetic {
                        prompt_utterance_id: req.prompt_utterance_id.clone(),
                    },
                })
            })
            .collect()
    });
    let mut records = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => records.push(r),
            Err(e) if opts.skip_failures => failures.push((i, e.to_string())),
            Err(e) => {
                return Err(Error::PlanAborted {
                    index: i,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(Execution {
        manifest: Manifest::new(records, plan.attribute_tag.clone())?,
        failures,
    })
}
