//! Noisy/clean pair simulation at controlled power SNR.
//!
//! Two modes share one mixing core: [`simulate_dataset`] materializes pairs
//! once (speech-attribute experiments) and [`PairStream`] redraws noise and
//! SNR every epoch (noise-attribute experiments).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl_lines, write_jsonl_lines, Manifest, NoiseRecord};
use crate::sampler::{manifest_id, NoiseSubset};
use crate::{audio, seed, Error, Result};

/// Signals at or below this RMS have no defined SNR.
pub const SILENCE_RMS: f64 = 1e-8;
/// Peak the mixture is rescaled to when it would clip.
pub const RESCALE_PEAK: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub speech_id: String,
    pub noise_id: String,
    pub snr_db: f64,
    pub noise_offset: usize,
    pub noise_gain: f64,
    pub seed: u64,
    /// Common factor applied to clean and noisy when the mixture clipped.
    pub rescale: f64,
}

/// `sqrt(P_speech / (P_noise * 10^(snr/10)))` with powers over equal-length signals.
pub fn snr_gain(speech: &[f64], noise: &[f64], snr_db: f64) -> Result<f64> {
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("snr_db {snr_db} is not finite")));
    }
    if audio::rms(speech) <= SILENCE_RMS {
        return Err(Error::Silent("speech"));
    }
    if audio::rms(noise) <= SILENCE_RMS {
        return Err(Error::Silent("noise"));
    }
    let n = speech.len().min(noise.len());
    let ps = audio::power(&speech[..n]);
    let pn = audio::power(&noise[..n]);
    Ok((ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Power SNR of `noisy` against its clean reference, in dB.
pub fn measure_snr(clean: &[f64], noisy: &[f64]) -> f64 {
    let residual: Vec<f64> = noisy.iter().zip(clean).map(|(y, x)| y - x).collect();
    10.0 * (audio::power(clean) / audio::power(&residual)).log10()
}

/// Largest legal offset for fitting `noise_len` samples to `len`.
pub fn offset_range(noise_len: usize, len: usize) -> usize {
    if noise_len >= len {
        noise_len - len + 1
    } else {
        noise_len
    }
}

/// Longer noise: contiguous crop at `offset`. Shorter: circular tiling
/// starting at `offset`.
pub fn prepare_noise(noise: &[f64], len: usize, offset: usize) -> Vec<f64> {
    if noise.len() >= len {
        noise[offset..offset + len].to_vec()
    } else {
        (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub noisy: Vec<f64>,
    pub clean: Vec<f64>,
    pub spec: MixSpec,
}

/// Mixing core with an explicit offset; [`mix_pair`] and [`remix`] call it.
pub fn mix_at_offset(
    speech: &[f64],
    noise: &[f64],
    snr_db: f64,
    offset: usize,
    seed: u64,
) -> Result<Mixture> {
    if noise.is_empty() {
        return Err(Error::Silent("noise"));
    }
    if offset >= offset_range(noise.len(), speech.len()) {
        return Err(Error::Config(format!("noise offset {offset} out of range")));
    }
    let prepared = prepare_noise(noise, speech.len(), offset);
    let g = snr_gain(speech, &prepared, snr_db)?;
    let mut noisy: Vec<f64> = speech.iter().zip(&prepared).map(|(s, n)| s + g * n).collect();
    let mut clean = speech.to_vec();
    let pk = audio::peak(&noisy);
    let mut rescale = 1.0;
    if pk > 1.0 {
        rescale = RESCALE_PEAK / pk;
        noisy.iter_mut().for_each(|v| *v *= rescale);
        clean.iter_mut().for_each(|v| *v *= rescale);
    }
    Ok(Mixture {
        noisy,
        clean,
        spec: MixSpec {
            speech_id: String::new(),
            noise_id: String::new(),
            snr_db,
            noise_offset: offset,
            noise_gain: g,
            seed,
            rescale,
        },
    })
}

/// Mixes with a seed-chosen noise offset. Ids in the returned spec are empty.
pub fn mix_pair(speech: &[f64], noise: &[f64], snr_db: f64, seed: u64) -> Result<Mixture> {
    if noise.is_empty() {
        return Err(Error::Silent("noise"));
    }
    let range = offset_range(noise.len(), speech.len());
    let offset = seed::rng(seed, "mix-offset", &[]).gen_range(0..range);
    mix_at_offset(speech, noise, snr_db, offset, seed)
}

/// Rebuilds a mixture from its spec and sources.
pub fn remix(spec: &MixSpec, speech: &[f64], noise: &[f64]) -> Result<Mixture> {
    let mut m = mix_at_offset(speech, noise, spec.snr_db, spec.noise_offset, spec.seed)?;
    m.spec.speech_id = spec.speech_id.clone();
    m.spec.noise_id = spec.noise_id.clone();
    Ok(m)
}

/// Decoded speech and noise audio, keyed by id.
#[derive(Debug, Default, Clone)]
pub struct AudioBank {
    pub speech: BTreeMap<String, Arc<Vec<f64>>>,
    pub noise: BTreeMap<String, Arc<Vec<f64>>>,
}

impl AudioBank {
    pub fn load(speech: &Manifest, noise: &[&NoiseRecord]) -> Result<Self> {
        let s: Vec<(String, Arc<Vec<f64>>)> = speech
            .records()
            .par_iter()
            .map(|r| Ok((r.id.clone(), Arc::new(audio::read_wav(&r.audio_uri)?))))
            .collect::<Result<_>>()?;
        let n: Vec<(String, Arc<Vec<f64>>)> = noise
            .par_iter()
            .map(|r| Ok((r.id.clone(), Arc::new(audio::read_wav(&r.audio_uri)?))))
            .collect::<Result<_>>()?;
        Ok(AudioBank {
            speech: s.into_iter().collect(),
            noise: n.into_iter().collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrRange {
    pub lo: f64,
    pub hi: f64,
}

impl SnrRange {
    pub const TRAIN_DEFAULT: SnrRange = SnrRange { lo: -5.0, hi: 10.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::Config(format!("invalid SNR range [{lo}, {hi}]")));
        }
        Ok(SnrRange { lo, hi })
    }

    fn draw(&self, rng: &mut seed::Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

/// Draws a noise clip, SNR and mix seed for speech record `index`.
fn draw_assignment(
    noise_ids: &[String],
    snr: SnrRange,
    seed: u64,
    label: &str,
    parts: &[u64],
) -> (String, f64, u64) {
    let mut rng = seed::rng(seed, label, parts);
    let noise = noise_ids[rng.gen_range(0..noise_ids.len())].clone();
    let snr_db = snr.draw(&mut rng);
    (noise, snr_db, rng.gen())
}

fn mix_record(
    bank: &AudioBank,
    speech_id: &str,
    noise_id: &str,
    snr_db: f64,
    mix_seed: u64,
) -> Result<Mixture> {
    let speech = bank
        .speech
        .get(speech_id)
        .ok_or_else(|| Error::Manifest(format!("no audio for speech {speech_id}")))?;
    let noise = bank
        .noise
        .get(noise_id)
        .ok_or_else(|| Error::Manifest(format!("no audio for noise {noise_id}")))?;
    let mut m = mix_pair(speech, noise, snr_db, mix_seed)?;
    m.spec.speech_id = speech_id.to_string();
    m.spec.noise_id = noise_id.to_string();
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub noisy_uri: PathBuf,
    pub clean_uri: PathBuf,
    pub spec: MixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDataset {
    pub pairs: Vec<Pair>,
    pub speech_manifest_id: String,
    pub noise_record_ids: Vec<String>,
    pub snr_range: SnrRange,
    pub seed: u64,
}

pub const DATASET_FILE: &str = "dataset.json";
pub const MIXSPEC_LEDGER: &str = "mixspecs.jsonl";

impl PairedDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(DATASET_FILE);
        let s = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn read_ledger(dir: &Path) -> Result<Vec<MixSpec>> {
        read_jsonl_lines(&dir.join(MIXSPEC_LEDGER))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Materializes one pair per speech record under `out_dir` as
/// `noisy/<id>.wav`, `clean/<id>.wav` and `mixspecs.jsonl`.
///
/// Output is staged in a sibling directory and published by rename; on
/// error the staging directory is removed.
pub fn simulate_dataset(
    speech: &Manifest,
    noise_records: &[NoiseRecord],
    subset: &NoiseSubset,
    snr_range: SnrRange,
    seed: u64,
    out_dir: &Path,
) -> Result<PairedDataset> {
    let members = subset.members(noise_records)?;
    if members.is_empty() {
        return Err(Error::InsufficientNoise("empty noise subset".into()));
    }
    let bank = AudioBank::load(speech, &members)?;
    let staging = audio::tmp_path(out_dir);
    let _ = fs::remove_dir_all(&staging);
    let result = (|| -> Result<PairedDataset> {
        let noise_ids: Vec<String> = members.iter().map(|r| r.id.clone()).collect();
        let pairs: Vec<Pair> = speech
            .records()
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let (nid, snr_db, mseed) =
                    draw_assignment(&noise_ids, snr_range, seed, "simulate", &[i as u64]);
                let m = mix_record(&bank, &r.id, &nid, snr_db, mseed)?;
                let noisy_rel = PathBuf::from("noisy").join(format!("{}.wav", r.id));
                let clean_rel = PathBuf::from("clean").join(format!("{}.wav", r.id));
                audio::write_wav(&staging.join(&noisy_rel), &m.noisy)?;
                audio::write_wav(&staging.join(&clean_rel), &m.clean)?;
                Ok(Pair {
                    noisy_uri: out_dir.join(noisy_rel),
                    clean_uri: out_dir.join(clean_rel),
                    spec: m.spec,
                })
            })
            .collect::<Result<_>>()?;
        let specs: Vec<&MixSpec> = pairs.iter().map(|p| &p.spec).collect();
        write_jsonl_lines(&staging.join(MIXSPEC_LEDGER), &specs)?;
        let ds = PairedDataset {
            pairs,
            speech_manifest_id: manifest_id(speech),
            noise_record_ids: noise_ids,
            snr_range,
            seed,
        };
        audio::write_atomic(
            &staging.join(DATASET_FILE),
            serde_json::to_string_pretty(&ds)?.as_bytes(),
        )?;
        Ok(ds)
    })();
    match result {
        Ok(ds) => {
            if out_dir.exists() {
                fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
            }
            if let Some(parent) = out_dir.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::rename(&staging, out_dir).map_err(|e| Error::io(out_dir, e))?;
            Ok(ds)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

/// One epoch of on-the-fly pairs: every speech record once, in manifest
/// order, with noise and SNR drawn from `(seed, epoch, index)`.
#[derive(Debug, Clone)]
pub struct PairStream {
    speech_ids: Vec<String>,
    noise_ids: Vec<String>,
    bank: Arc<AudioBank>,
    snr_range: SnrRange,
    seed: u64,
    epoch: u64,
}

impl PairStream {
    pub fn new(
        speech: &Manifest,
        noise_ids: Vec<String>,
        bank: Arc<AudioBank>,
        snr_range: SnrRange,
        seed: u64,
        epoch: u64,
    ) -> Result<Self> {
        if noise_ids.is_empty() {
            return Err(Error::InsufficientNoise("empty noise subset".into()));
        }
        Ok(PairStream {
            speech_ids: speech.records().iter().map(|r| r.id.clone()).collect(),
            noise_ids,
            bank,
            snr_range,
            seed,
            epoch,
        })
    }

    pub fn with_epoch(&self, epoch: u64) -> Self {
        PairStream {
            epoch,
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.speech_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speech_ids.is_empty()
    }

    fn assignment(&self, i: usize) -> (String, f64, u64) {
        draw_assignment(&self.noise_ids, self.snr_range, self.seed, "stream", &[self.epoch, i as u64])
    }

    pub fn get(&self, i: usize) -> Result<Mixture> {
        let (nid, snr_db, mseed) = self.assignment(i);
        mix_record(&self.bank, &self.speech_ids[i], &nid, snr_db, mseed)
    }

    /// MixSpecs of the whole epoch, in stream order.
    pub fn specs(&self) -> Result<Vec<MixSpec>> {
        (0..self.len()).into_par_iter().map(|i| self.get(i).map(|m| m.spec)).collect()
    }

    pub fn pairs(&self) -> Result<Vec<Mixture>> {
        (0..self.len()).into_par_iter().map(|i| self.get(i)).collect()
    }
}

/// Builds the epoch-`epoch` stream for a speech manifest and noise subset.
pub fn pair_stream(
    speech: &Manifest,
    noise_records: &[NoiseRecord],
    subset: &NoiseSubset,
    snr_range: SnrRange,
    seed: u64,
    epoch: u64,
) -> Result<PairStream> {
    let members = subset.members(noise_records)?;
    let bank = Arc::new(AudioBank::load(speech, &members)?);
    PairStream::new(
        speech,
        members.iter().map(|r| r.id.clone()).collect(),
        bank,
        snr_range,
        seed,
        epoch,
    )
}
