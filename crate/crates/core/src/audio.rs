//! WAV I/O for the audio store: PCM16, mono, 16 kHz.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result, SAMPLE_RATE};

/// Header fields needed by ingestion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WavInfo {
    pub sample_rate: u32,
    pub channels: u16,
    pub num_samples: u32,
}

impl WavInfo {
    pub fn duration(&self) -> f64 {
        self.num_samples as f64 / self.sample_rate as f64
    }
}

fn audio_err(path: &Path, message: impl ToString) -> Error {
    Error::Audio {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

pub fn read_info(path: &Path) -> Result<WavInfo> {
    let reader = hound::WavReader::open(path).map_err(|e| audio_err(path, e))?;
    let spec = reader.spec();
    Ok(WavInfo {
        sample_rate: spec.sample_rate,
        channels: spec.channels,
        num_samples: reader.duration(),
    })
}

/// Reads a mono 16 kHz WAV as samples in [-1, 1). Other layouts are rejected.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path).map_err(|e| audio_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(audio_err(path, format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(audio_err(
            path,
            format!("expected {SAMPLE_RATE} Hz, found {} Hz", spec.sample_rate),
        ));
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0).map_err(|e| audio_err(path, e)))
            .collect(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64).map_err(|e| audio_err(path, e)))
            .collect(),
        (fmt, bits) => Err(audio_err(path, format!("unsupported sample format {fmt:?}/{bits}"))),
    }
}

/// Quantizes exactly as [`write_wav`] does.
pub fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes PCM16 mono at 16 kHz, via a temp file renamed into place.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let tmp = tmp_path(path);
    {
        let mut writer = hound::WavWriter::create(&tmp, spec).map_err(|e| audio_err(path, e))?;
        for &s in samples {
            writer
                .write_sample(quantize(s))
                .map_err(|e| audio_err(path, e))?;
        }
        writer.finalize().map_err(|e| audio_err(path, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn tmp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Atomic write of arbitrary bytes (write temp, then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = tmp_path(path);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

pub fn peak(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_round_trip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x: Vec<f64> = (0..1600).map(|i| (i as f64 * 0.01).sin() * 0.5).collect();
        write_wav(&p, &x).unwrap();
        let y = read_wav(&p).unwrap();
        assert_eq!(y.len(), x.len());
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
        // re-writing a decoded file reproduces it bit for bit
        let q = dir.path().join("b.wav");
        write_wav(&q, &y).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
        let info = read_info(&p).unwrap();
        assert_eq!(info.duration(), 0.1);
    }

    #[test]
    fn rejects_other_rates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p), Err(Error::Audio { .. })));
    }
}
