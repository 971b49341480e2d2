//! Deterministic desk-scale corpora.
//!
//! [`generate`] writes a speech corpus (speakers x texts, rendered with a
//! mock voice other than the synthesizer's default so "real" and
//! "synthetic" audio differ), a held-out test speech set, a typed noise
//! tree and foreign-language text banks for the language axis.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::corpus::{ingest_noise_corpus, ingest_speech_corpus, top_level_label, write_noise_jsonl, TsvTranscripts};
use crate::sampler::LANGUAGE_POOL;
use crate::seed;
use crate::synth::{mock_synthesize_with, MockVoice};
use crate::{Error, Result, SAMPLE_RATE};

const VOCABULARY: [&str; 64] = [
    "amber", "bright", "castle", "dawn", "ember", "forest", "garden", "harbor", "island", "jolly",
    "kettle", "lantern", "meadow", "narrow", "orchard", "pebble", "quiet", "river", "silver", "timber",
    "umbrella", "valley", "willow", "yellow", "zephyr", "anchor", "basket", "candle", "desert", "engine",
    "feather", "glacier", "hollow", "ivory", "jungle", "kingdom", "ladder", "marble", "needle", "ocean",
    "paper", "quarry", "ribbon", "saddle", "tunnel", "useful", "velvet", "window", "almond", "bridge",
    "copper", "dragon", "eagle", "finger", "golden", "hammer", "into", "over", "under", "near",
    "the", "a", "with", "from",
];

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ne", "pu", "ra", "si", "to", "ve", "zu", "ba", "do", "fe", "gi", "ho", "ju",
    "ly", "mo", "ny", "pe", "qu", "ri", "sa", "te",
];

pub const NOISE_TYPES: [&str; 4] = ["white", "babble", "pink", "hum"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub speakers: usize,
    pub texts_per_speaker: usize,
    pub test_speakers: usize,
    pub test_texts_per_speaker: usize,
    pub clips_per_noise_type: usize,
    pub noise_clip_seconds: f64,
    /// Voice of the "real" corpora; the synthesizer default must differ.
    pub real_voice: MockVoice,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            speakers: 10,
            texts_per_speaker: 10,
            test_speakers: 4,
            test_texts_per_speaker: 5,
            clips_per_noise_type: 3,
            noise_clip_seconds: 4.0,
            real_voice: MockVoice { tilt_offset: 0.3, vibrato_depth: 0.02 },
            seed: 7,
        }
    }
}

/// Paths written by [`generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureLayout {
    pub root: PathBuf,
    pub speech_dir: PathBuf,
    pub transcripts: PathBuf,
    pub test_speech_dir: PathBuf,
    pub test_transcripts: PathBuf,
    pub noise_dir: PathBuf,
    pub foreign_texts: PathBuf,
    pub speech_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub noise_manifest: PathBuf,
}

impl FixtureLayout {
    pub fn under(root: &Path) -> Self {
        FixtureLayout {
            root: root.to_path_buf(),
            speech_dir: root.join("speech"),
            transcripts: root.join("speech").join("transcripts.tsv"),
            test_speech_dir: root.join("test_speech"),
            test_transcripts: root.join("test_speech").join("transcripts.tsv"),
            noise_dir: root.join("noise"),
            foreign_texts: root.join("foreign_texts.json"),
            speech_manifest: root.join("speech.jsonl"),
            test_manifest: root.join("test_speech.jsonl"),
            noise_manifest: root.join("noise.jsonl"),
        }
    }
}

/// `count` distinct texts with word counts cycling through 4..=8.
pub fn make_texts(count: usize, rng: &mut seed::Rng, avoid: &BTreeSet<String>) -> Vec<String> {
    let mut seen = avoid.clone();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let words = 4 + out.len() % 5;
        let t: Vec<&str> = (0..words).map(|_| *VOCABULARY.choose(rng).expect("vocabulary")).collect();
        let t = t.join(" ");
        if seen.insert(t.clone()) {
            out.push(t);
        }
    }
    out
}

/// Pseudo-word texts for every pool language except English.
pub fn make_foreign_texts(per_language: usize, seed: u64) -> BTreeMap<String, Vec<String>> {
    LANGUAGE_POOL[1..]
        .iter()
        .map(|lang| {
            let mut rng = seed::rng(seed, "foreign-texts", &[seed::stable_hash(lang)]);
            let mut seen = BTreeSet::new();
            let mut texts = Vec::with_capacity(per_language);
            while texts.len() < per_language {
                let words = rng.gen_range(3..=9);
                let t: Vec<String> = (0..words)
                    .map(|_| {
                        let n = rng.gen_range(1..=3);
                        (0..n).map(|_| *SYLLABLES.choose(&mut rng).expect("syllables")).collect()
                    })
                    .collect();
                let t = t.join(" ");
                if seen.insert(t.clone()) {
                    texts.push(t);
                }
            }
            (lang.to_string(), texts)
        })
        .collect()
}

fn write_speech_set(
    dir: &Path,
    tsv: &Path,
    speakers: &[String],
    texts: &[String],
    per_speaker: usize,
    voice: &MockVoice,
) -> Result<()> {
    let mut rows = Vec::new();
    for (si, spk) in speakers.iter().enumerate() {
        for j in 0..per_speaker {
            let text = &texts[si * per_speaker + j];
            let id = format!("{spk}-{j:03}");
            let wave = mock_synthesize_with(voice, text, spk, "en", 0)?;
            audio::write_wav(&dir.join(spk).join(format!("{id}.wav")), &wave)?;
            rows.push((id, spk.clone(), "en".to_string(), text.clone()));
        }
    }
    TsvTranscripts::write(tsv, &rows)
}

fn normalize_rms(mut x: Vec<f64>, target: f64) -> Vec<f64> {
    let r = audio::rms(&x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / r);
    }
    x
}

fn white(len: usize, rng: &mut seed::Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// White noise shaped to a 1/f power spectrum.
fn pink(len: usize, rng: &mut seed::Rng) -> Vec<f64> {
    let mut buf: Vec<Complex64> = white(len, rng).into_iter().map(|v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(len - k).max(1) as f64;
        *c /= f.sqrt();
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    buf.into_iter().map(|c| c.re / len as f64).collect()
}

fn hum(len: usize, rng: &mut seed::Rng) -> Vec<f64> {
    let base = if rng.gen_bool(0.5) { 50.0 } else { 60.0 };
    let phases: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let floor = white(len, rng);
    (0..len)
        .map(|n| {
            let t = n as f64 / SAMPLE_RATE as f64;
            let s: f64 = (1..=6)
                .map(|h| (2.0 * PI * base * h as f64 * t + phases[h - 1]).sin() / h as f64)
                .sum();
            s + 0.02 * floor[n]
        })
        .collect()
}

/// Overlapped mock voices of unrelated speakers and texts.
fn babble(len: usize, rng: &mut seed::Rng, clip: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; len];
    let none = BTreeSet::new();
    for v in 0..5 {
        let spk = format!("babbler{clip}-{v}");
        let mut pos = rng.gen_range(0..SAMPLE_RATE as usize / 2);
        while pos < len {
            let text = make_texts(1, rng, &none).remove(0);
            let w = mock_synthesize_with(&MockVoice::default(), &text, &spk, "en", 0)?;
            for (i, s) in w.iter().enumerate() {
                if pos + i < len {
                    out[pos + i] += s;
                }
            }
            pos += w.len() + rng.gen_range(0..SAMPLE_RATE as usize / 4);
        }
    }
    Ok(out)
}

pub fn noise_clip(kind: &str, clip: usize, seconds: f64, seed: u64) -> Result<Vec<f64>> {
    let len = (seconds * SAMPLE_RATE as f64).round() as usize;
    let mut rng = seed::rng(seed, "fixture-noise", &[seed::stable_hash(kind), clip as u64]);
    let raw = match kind {
        "white" => white(len, &mut rng),
        "pink" => pink(len, &mut rng),
        "hum" => hum(len, &mut rng),
        "babble" => babble(len, &mut rng, clip)?,
        other => return Err(Error::Config(format!("unknown fixture noise type {other}"))),
    };
    Ok(normalize_rms(raw, 0.1))
}

/// Writes the full fixture tree under `root`, replacing earlier content.
pub fn generate(root: &Path, cfg: &FixtureConfig) -> Result<FixtureLayout> {
    let layout = FixtureLayout::under(root);
    for d in [&layout.speech_dir, &layout.test_speech_dir, &layout.noise_dir] {
        if d.exists() {
            fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
    }
    let mut rng = seed::rng(cfg.seed, "fixture-texts", &[]);
    let train_n = cfg.speakers * cfg.texts_per_speaker;
    let texts = make_texts(train_n, &mut rng, &BTreeSet::new());
    let mut shuffled = texts.clone();
    shuffled.shuffle(&mut rng);
    let speakers: Vec<String> = (0..cfg.speakers).map(|i| format!("spk{i:02}")).collect();
    write_speech_set(
        &layout.speech_dir,
        &layout.transcripts,
        &speakers,
        &shuffled,
        cfg.texts_per_speaker,
        &cfg.real_voice,
    )?;
    let avoid: BTreeSet<String> = texts.into_iter().collect();
    let test_texts = make_texts(cfg.test_speakers * cfg.test_texts_per_speaker, &mut rng, &avoid);
    let test_speakers: Vec<String> = (0..cfg.test_speakers).map(|i| format!("tst{i:02}")).collect();
    write_speech_set(
        &layout.test_speech_dir,
        &layout.test_transcripts,
        &test_speakers,
        &test_texts,
        cfg.test_texts_per_speaker,
        &cfg.real_voice,
    )?;
    for kind in NOISE_TYPES {
        for c in 0..cfg.clips_per_noise_type {
            let clip = noise_clip(kind, c, cfg.noise_clip_seconds, cfg.seed)?;
            audio::write_wav(&layout.noise_dir.join(kind).join(format!("{kind}-{c:02}.wav")), &clip)?;
        }
    }
    let foreign = make_foreign_texts(train_n, cfg.seed);
    audio::write_atomic(&layout.foreign_texts, serde_json::to_string_pretty(&foreign)?.as_bytes())?;
    for (dir, tsv, out) in [
        (&layout.speech_dir, &layout.transcripts, &layout.speech_manifest),
        (&layout.test_speech_dir, &layout.test_transcripts, &layout.test_manifest),
    ] {
        ingest_speech_corpus(dir, &TsvTranscripts::load(tsv)?)?.write_jsonl(out)?;
    }
    let noise = ingest_noise_corpus(&layout.noise_dir, &top_level_label)?;
    write_noise_jsonl(&layout.noise_manifest, &noise)?;
    Ok(layout)
}

pub fn read_foreign_texts(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// Ten `(name, reference, estimate)` pairs used to pin STOI to a reference
/// implementation: mock speech against noisy, filtered and unrelated
/// estimates.
pub fn stoi_reference_pairs() -> Result<Vec<(String, Vec<f64>, Vec<f64>)>> {
    let voice = FixtureConfig::default().real_voice;
    let speech = |text: &str, spk: &str| mock_synthesize_with(&voice, text, spk, "en", 0);
    let mut out = Vec::new();
    let texts = [
        "the silver river runs under a narrow bridge",
        "golden lantern near the quiet harbor",
        "a dragon with amber feather over the valley",
        "copper kettle from the desert castle",
        "willow ribbon into the velvet ocean",
    ];
    for (i, snr) in [-5.0, 0.0, 5.0, 10.0].iter().enumerate() {
        let x = speech(texts[i], &format!("ref{i}"))?;
        let kind = if i % 2 == 0 { "white" } else { "babble" };
        let n = noise_clip(kind, 9, 6.0, 99)?;
        let m = crate::mixer::mix_pair(&x, &n, *snr, i as u64)?;
        out.push((format!("{kind}_{snr}dB"), m.clean, m.noisy));
    }
    let x = speech(texts[4], "ref4")?;
    let scaled: Vec<f64> = x.iter().map(|v| 0.3 * v).collect();
    out.push(("scaled".into(), x.clone(), scaled));
    // three-tap moving average: mild low-pass
    let smooth: Vec<f64> = (0..x.len())
        .map(|n| (x[n] + x[n.saturating_sub(1)] + x[n.saturating_sub(2)]) / 3.0)
        .collect();
    out.push(("lowpass".into(), x.clone(), smooth));
    let delayed: Vec<f64> = (0..x.len()).map(|n| if n >= 400 { x[n - 400] } else { 0.0 }).collect();
    out.push(("delayed".into(), x.clone(), delayed));
    let mut rng = seed::rng(5, "stoi-pairs", &[]);
    let w = normalize_rms(white(x.len(), &mut rng), audio::rms(&x));
    out.push(("white_only".into(), x.clone(), w));
    let y = speech(texts[0], "ref4")?;
    let mut other = y.clone();
    other.resize(x.len(), 0.0);
    out.push(("other_text".into(), x.clone(), other));
    let hum_n = noise_clip("hum", 9, 6.0, 99)?;
    let m = crate::mixer::mix_pair(&x, &hum_n, 0.0, 11)?;
    out.push(("hum_0dB".into(), m.clean, m.noisy));
    Ok(out)
}
