//! Attribute sweeps: generation, simulation, training and evaluation glued
//! together over a content-addressed cache.
//!
//! Every stage output lives under `<cache>/<stage>/<key>/` where `key`
//! hashes the stage inputs and [`CODE_VERSION`]. Speech-attribute axes are
//! trained on materialized [`PairedDataset`]s; noise-attribute axes on
//! per-epoch [`PairStream`](crate::mixer::PairStream)s whose MixSpecs are
//! ledgered next to the checkpoint.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::write_atomic;
use crate::corpus::{read_noise_jsonl, Manifest, NoiseRecord};
use crate::evalsuite::{evaluate, load_pairs, EvalOptions, MetricReport, PluginRegistry};
use crate::fixtures::read_foreign_texts;
use crate::mixer::{pair_stream, simulate_dataset, PairedDataset, SnrRange};
use crate::models::sgmse::enhance_with_params;
use crate::models::{bsrnn_forward, Checkpoint, ModelConfig, ModelKind};
use crate::sampler::{
    build_full_synthetic_plan, build_language_variant, build_speaker_variant, build_text_variant,
    manifest_id, sample_noise_duration, sample_noise_typed, GenerationPlan, NoiseSubset, PromptMode,
    LANGUAGE_POOL,
};
use crate::synth::{execute_plan, ExecuteOptions, ExternalSynthesizer, MockSynthesizer, MockVoice, Synthesizer};
use crate::trainer::{self, TrainConfig, TrainData, FINAL_CHECKPOINT};
use crate::{seed, Error, Result};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const PROVENANCE: &str = "provenance.json";
pub const SYNTH_MANIFEST: &str = "manifest.jsonl";
pub const LEDGER_DIR: &str = "ledgers";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Text,
    Language,
    Speaker,
    PromptMode,
    NoiseDuration,
    NoiseType,
    FullVsReal,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Text => "text",
            Axis::Language => "language",
            Axis::Speaker => "speaker",
            Axis::PromptMode => "prompt-mode",
            Axis::NoiseDuration => "noise-duration",
            Axis::NoiseType => "noise-type",
            Axis::FullVsReal => "full-vs-real",
        }
    }

    /// Speech axes train on fixed pairs, noise axes on per-epoch streams.
    pub fn is_speech_axis(self) -> bool {
        !matches!(self, Axis::NoiseDuration | Axis::NoiseType)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown axis {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Label(String),
}

impl SweepValue {
    fn count(&self, axis: Axis) -> Result<usize> {
        match self {
            SweepValue::Number(v) if *v >= 1.0 && v.fract() == 0.0 => Ok(*v as usize),
            other => Err(Error::Config(format!("{axis} sweeps need positive integers, got {other}"))),
        }
    }

    fn seconds(&self) -> Result<f64> {
        match self {
            SweepValue::Number(v) if *v > 0.0 && v.is_finite() => Ok(*v),
            other => Err(Error::Config(format!("noise durations must be positive seconds, got {other}"))),
        }
    }

    fn label(&self) -> &str {
        match self {
            SweepValue::Label(s) => s,
            SweepValue::Number(_) => "",
        }
    }
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Number(v) if v.fract() == 0.0 && v.abs() < 1e15 => write!(f, "{}", *v as i64),
            SweepValue::Number(v) => write!(f, "{v}"),
            SweepValue::Label(s) => f.write_str(s),
        }
    }
}

fn parse_prompt_mode(s: &str) -> Option<PromptMode> {
    match s {
        "single" | "single-prompt" => Some(PromptMode::SinglePrompt),
        "multi" | "multi-prompt" => Some(PromptMode::MultiPrompt),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SynthesizerSpec {
    Mock {
        #[serde(default)]
        voice: MockVoice,
    },
    /// Adapter found through `ATTRIB_SE_TTS_ENDPOINT`.
    External,
}

impl Default for SynthesizerSpec {
    fn default() -> Self {
        SynthesizerSpec::Mock { voice: MockVoice::default() }
    }
}

impl SynthesizerSpec {
    pub fn build(&self, work_dir: &Path) -> Result<Box<dyn Synthesizer>> {
        Ok(match self {
            SynthesizerSpec::Mock { voice } => Box::new(MockSynthesizer::new(*voice)),
            SynthesizerSpec::External => Box::new(ExternalSynthesizer::from_env(work_dir.to_path_buf())?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorporaConfig {
    /// Real speech manifest (JSONL).
    pub speech: PathBuf,
    /// Noise manifest (JSONL).
    pub noise: PathBuf,
    #[serde(default)]
    pub foreign_texts: Option<PathBuf>,
    #[serde(default)]
    pub synthesizer: SynthesizerSpec,
}

fn default_prompt_mode() -> PromptMode {
    PromptMode::SinglePrompt
}

fn default_snr() -> SnrRange {
    SnrRange::TRAIN_DEFAULT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub values: Vec<SweepValue>,
    /// Prompt mode of speaker-axis plans.
    #[serde(default = "default_prompt_mode")]
    pub prompt_mode: PromptMode,
    /// Speaker count of prompt-mode plans; all speakers when absent.
    #[serde(default)]
    pub speakers: Option<usize>,
    /// Total noise budget of noise-type subsets; defaults to the smallest
    /// per-type total so every `k` is feasible.
    #[serde(default)]
    pub noise_seconds: Option<f64>,
    /// Restricts training noise to these types.
    #[serde(default)]
    pub train_noise_types: Option<Vec<String>>,
    #[serde(default = "default_snr")]
    pub snr: SnrRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub name: String,
    /// Speech manifest (JSONL).
    pub speech: PathBuf,
    /// Noise manifest; the training noise corpus when absent.
    #[serde(default)]
    pub noise: Option<PathBuf>,
    #[serde(default)]
    pub noise_types: Option<Vec<String>>,
    #[serde(default = "default_snr")]
    pub snr: SnrRange,
    #[serde(default = "default_true")]
    pub in_domain: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpora: CorporaConfig,
    pub axis: Axis,
    pub sweep: SweepSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: Vec<EvalSpec>,
    pub metrics: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn setup(&self) -> ModelSetup {
        ModelSetup { model: self.model.clone(), train: self.train.clone() }
    }

    pub fn hash(&self) -> String {
        content_key(&("experiment", self))
    }

    /// Checks sweep values against the corpora they index.
    pub fn validate(&self, speech: &Manifest, noise: &[NoiseRecord]) -> Result<()> {
        if self.sweep.values.is_empty() {
            return Err(Error::Config("sweep has no values".into()));
        }
        if self.eval.is_empty() {
            return Err(Error::Config("no evaluation sets declared".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::Config("no metrics requested".into()));
        }
        let names: BTreeSet<&str> = self.eval.iter().map(|e| e.name.as_str()).collect();
        if names.len() != self.eval.len() {
            return Err(Error::Config("evaluation set names must be unique".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        let stats = speech.stats();
        let types: BTreeSet<&str> = noise.iter().map(|r| r.type_label.as_str()).collect();
        let total: f64 = noise.iter().map(|r| r.duration).sum();
        let out_of = |what: &str, v: &SweepValue, hi: usize| {
            Error::Config(format!("{} value {v} outside [1, {hi}] ({what})", self.axis))
        };
        for v in &self.sweep.values {
            match self.axis {
                Axis::Text => {
                    let n = v.count(self.axis)?;
                    if n > stats.unique_texts {
                        return Err(out_of("texts", v, stats.unique_texts));
                    }
                }
                Axis::Language => {
                    let p = v.count(self.axis)?;
                    if p > LANGUAGE_POOL.len() {
                        return Err(out_of("languages", v, LANGUAGE_POOL.len()));
                    }
                }
                Axis::Speaker => {
                    let s = v.count(self.axis)?;
                    if s > stats.unique_speakers {
                        return Err(out_of("speakers", v, stats.unique_speakers));
                    }
                }
                Axis::PromptMode => {
                    if parse_prompt_mode(v.label()).is_none() {
                        return Err(Error::Config(format!("prompt-mode values are single|multi, got {v}")));
                    }
                }
                Axis::FullVsReal => {
                    if !matches!(v.label(), "real" | "synthetic") {
                        return Err(Error::Config(format!("full-vs-real values are real|synthetic, got {v}")));
                    }
                }
                Axis::NoiseDuration => {
                    let t = v.seconds()?;
                    if t > total * (1.0 + 1e-9) {
                        return Err(Error::Config(format!("noise duration {t} exceeds corpus total {total:.3}")));
                    }
                }
                Axis::NoiseType => {
                    let k = v.count(self.axis)?;
                    if k > types.len() {
                        return Err(out_of("noise types", v, types.len()));
                    }
                }
            }
        }
        if let Some(s) = self.sweep.speakers {
            if s == 0 || s > stats.unique_speakers {
                return Err(Error::Config(format!("speaker count {s} outside [1, {}]", stats.unique_speakers)));
            }
        }
        Ok(())
    }
}

/// Hex SHA-256 (first 16 bytes) of `parts` serialized with the code version.
pub fn content_key<T: Serialize + ?Sized>(parts: &T) -> String {
    let mut h = Sha256::new();
    h.update(CODE_VERSION.as_bytes());
    h.update(b"\0");
    h.update(serde_json::to_vec(parts).expect("cache key serializes"));
    hex::encode(&h.finalize()[..16])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingArtifact {
    FixedPairs,
    EpochLedgers,
}

/// One trained model evaluated on every evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub value: SweepValue,
    pub model: ModelKind,
    pub status: CellStatus,
    #[serde(default)]
    pub error: Option<String>,
    /// eval set -> metric -> aggregate.
    pub aggregates: BTreeMap<String, BTreeMap<String, f64>>,
    /// Cache-relative paths.
    #[serde(default)]
    pub data_id: Option<String>,
    #[serde(default)]
    pub data_artifact: Option<TrainingArtifact>,
    #[serde(default)]
    pub checkpoint_id: Option<String>,
    #[serde(default)]
    pub report_ids: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub axis: Axis,
    pub config_hash: String,
    pub code_version: String,
    pub metrics: Vec<String>,
    pub eval_sets: Vec<String>,
    pub rows: Vec<ResultRow>,
    /// Identity-enhancer aggregates per eval set.
    pub baselines: BTreeMap<String, BTreeMap<String, f64>>,
    pub baseline_reports: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl ResultsTable {
    pub fn get(&self, value: &SweepValue, model: ModelKind, eval_set: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| &r.value == value && r.model == model)
            .and_then(|r| r.aggregates.get(eval_set))
            .and_then(|m| m.get(metric))
            .copied()
    }

    pub fn failures(&self) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| r.status == CellStatus::Failed).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Stage executions that missed the cache.
#[derive(Debug, Default)]
pub struct WorkLog {
    pub synthesized: AtomicUsize,
    pub simulated: AtomicUsize,
    pub trained: AtomicUsize,
    pub evaluated: AtomicUsize,
}

impl WorkLog {
    pub fn total(&self) -> usize {
        [&self.synthesized, &self.simulated, &self.trained, &self.evaluated]
            .iter()
            .map(|c| c.load(Ordering::SeqCst))
            .sum()
    }
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub table: ResultsTable,
    pub work: WorkLog,
}

pub struct RunOptions<'a> {
    pub cache_dir: PathBuf,
    /// Cells run concurrently.
    pub workers: usize,
    pub plugins: Option<&'a PluginRegistry>,
}

impl<'a> RunOptions<'a> {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        RunOptions { cache_dir: cache_dir.into(), workers: 1, plugins: None }
    }
}

static STAGING: AtomicUsize = AtomicUsize::new(0);

fn staging_dir(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".stage{}-{}", std::process::id(), STAGING.fetch_add(1, Ordering::SeqCst)));
    dir.with_file_name(name)
}

/// Moves a finished staging directory into place; a concurrent writer that
/// got there first wins.
fn publish(staging: &Path, dir: &Path) -> Result<()> {
    if let Some(parent) = dir.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    if dir.exists() {
        let _ = fs::remove_dir_all(staging);
        return Ok(());
    }
    fs::rename(staging, dir).map_err(|e| Error::io(dir, e))
}

struct Cache<'a> {
    root: PathBuf,
    work: WorkLog,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    plugins: Option<&'a PluginRegistry>,
}

impl<'a> Cache<'a> {
    fn dir(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(stage).join(key)
    }

    fn id(stage: &str, key: &str) -> String {
        format!("{stage}/{key}")
    }

    fn lock(&self, key: &str) -> Arc<Mutex<()>> {
        self.locks.lock().expect("lock table").entry(key.to_string()).or_default().clone()
    }

    fn provenance(dir: &Path, value: &serde_json::Value) -> Result<()> {
        write_atomic(&dir.join(PROVENANCE), serde_json::to_string_pretty(value)?.as_bytes())
    }

    fn synthesize(
        &self,
        plan: &GenerationPlan,
        source: &Manifest,
        synth: &dyn Synthesizer,
    ) -> Result<(String, Manifest)> {
        let key = content_key(&("synth", plan, synth.id()));
        let dir = self.dir("synth", &key);
        let manifest_path = dir.join(SYNTH_MANIFEST);
        let lock = self.lock(&key);
        let _g = lock.lock().expect("stage lock");
        if !manifest_path.exists() {
            let exec = execute_plan(plan, source, synth, &dir, ExecuteOptions { skip_failures: false, concurrency: 1 })?;
            plan.write_jsonl(&dir.join("plan.jsonl"))?;
            Self::provenance(
                &dir,
                &serde_json::json!({
                    "stage": "synth",
                    "source_manifest": manifest_id(source),
                    "synthesizer": synth.id(),
                    "plan": "plan.jsonl",
                }),
            )?;
            exec.manifest.write_jsonl(&manifest_path)?;
            self.work.synthesized.fetch_add(1, Ordering::SeqCst);
        }
        Ok((Self::id("synth", &key), Manifest::read_jsonl(&manifest_path)?))
    }

    fn simulate(
        &self,
        speech: &Manifest,
        noise: &[NoiseRecord],
        subset: &NoiseSubset,
        snr: SnrRange,
        mix_seed: u64,
    ) -> Result<(String, PairedDataset)> {
        let key = content_key(&("data", manifest_id(speech), subset, snr, mix_seed));
        let dir = self.dir("data", &key);
        let lock = self.lock(&key);
        let _g = lock.lock().expect("stage lock");
        let ds = if dir.join(crate::mixer::DATASET_FILE).exists() {
            PairedDataset::load(&dir)?
        } else {
            let ds = simulate_dataset(speech, noise, subset, snr, mix_seed, &dir)?;
            self.work.simulated.fetch_add(1, Ordering::SeqCst);
            ds
        };
        Ok((Self::id("data", &key), ds))
    }

    fn train(
        &self,
        data_id: &str,
        data: TrainData,
        setup: &ModelSetup,
        init_seed: u64,
    ) -> Result<(String, Checkpoint)> {
        let key = content_key(&("train", data_id, &setup.model, &setup.train, init_seed));
        let dir = self.dir("train", &key);
        let lock = self.lock(&key);
        let _g = lock.lock().expect("stage lock");
        if !dir.join(FINAL_CHECKPOINT).exists() {
            let staging = staging_dir(&dir);
            let _ = fs::remove_dir_all(&staging);
            let data = match data {
                TrainData::OnTheFly { stream, .. } => {
                    TrainData::OnTheFly { stream, ledger_dir: Some(staging.join(LEDGER_DIR)) }
                }
                fixed => fixed,
            };
            let run = (|| {
                trainer::train(&setup.model, &setup.train, &data, init_seed, &staging)?;
                Self::provenance(
                    &staging,
                    &serde_json::json!({
                        "stage": "train",
                        "data": data_id,
                        "data_mode": data.mode(),
                        "model": &setup.model,
                        "train": &setup.train,
                        "init_seed": init_seed,
                    }),
                )
            })();
            if let Err(e) = run {
                let _ = fs::remove_dir_all(&staging);
                return Err(e);
            }
            publish(&staging, &dir)?;
            self.work.trained.fetch_add(1, Ordering::SeqCst);
        }
        Ok((Self::id("train", &key), Checkpoint::load(&dir.join(FINAL_CHECKPOINT))?))
    }

    fn evaluate(
        &self,
        enhancer_id: &str,
        checkpoint: Option<&Checkpoint>,
        data_id: &str,
        ds: &PairedDataset,
        metrics: &[String],
    ) -> Result<(String, MetricReport)> {
        let plugin_names = self.plugins.map(|p| p.names()).unwrap_or_default();
        let key = content_key(&("eval", enhancer_id, data_id, metrics, plugin_names));
        let dir = self.dir("eval", &key);
        let lock = self.lock(&key);
        let _g = lock.lock().expect("stage lock");
        if !dir.join(crate::evalsuite::REPORT_JSON).exists() {
            let pairs = load_pairs(ds)?;
            let staging = staging_dir(&dir);
            let _ = fs::remove_dir_all(&staging);
            let opts = EvalOptions {
                dataset_id: data_id.to_string(),
                enhancer_id: enhancer_id.to_string(),
                metrics: metrics.to_vec(),
                plugins: self.plugins,
                work_dir: Some(staging.join("audio")),
            };
            let run = (|| {
                let report = match checkpoint {
                    None => evaluate(&pairs, &|x: &[f64]| Ok(x.to_vec()), &opts)?,
                    Some(ck) => evaluate(&pairs, &|x: &[f64]| enhance(ck, x), &opts)?,
                };
                let _ = fs::remove_dir_all(staging.join("audio"));
                report.save(&staging)?;
                Self::provenance(
                    &staging,
                    &serde_json::json!({"stage": "eval", "enhancer": enhancer_id, "data": data_id}),
                )
            })();
            if let Err(e) = run {
                let _ = fs::remove_dir_all(&staging);
                return Err(e);
            }
            publish(&staging, &dir)?;
            self.work.evaluated.fetch_add(1, Ordering::SeqCst);
        }
        Ok((Self::id("eval", &key), MetricReport::load(&dir)?))
    }
}

/// Runs a checkpoint on one utterance.
pub fn enhance(checkpoint: &Checkpoint, noisy: &[f64]) -> Result<Vec<f64>> {
    match &checkpoint.config {
        ModelConfig::Bsrnn(cfg) => bsrnn_forward(noisy, &checkpoint.params, cfg),
        ModelConfig::Sgmse(cfg) => enhance_with_params(noisy, &checkpoint.params, cfg, &cfg.sampler, 0),
    }
}

struct Corpora {
    speech: Manifest,
    noise: Vec<NoiseRecord>,
    foreign: BTreeMap<String, Vec<String>>,
}

impl Corpora {
    fn load(cfg: &CorporaConfig) -> Result<Self> {
        Ok(Corpora {
            speech: Manifest::read_jsonl(&cfg.speech)?,
            noise: read_noise_jsonl(&cfg.noise)?,
            foreign: match &cfg.foreign_texts {
                Some(p) => read_foreign_texts(p)?,
                None => BTreeMap::new(),
            },
        })
    }
}

fn filter_types(noise: &[NoiseRecord], types: Option<&Vec<String>>) -> Result<Vec<NoiseRecord>> {
    let out: Vec<NoiseRecord> = match types {
        None => noise.to_vec(),
        Some(t) => noise.iter().filter(|r| t.contains(&r.type_label)).cloned().collect(),
    };
    if out.is_empty() {
        return Err(Error::InsufficientNoise(format!("no noise clips of types {types:?}")));
    }
    Ok(out)
}

struct Context<'c, 'a> {
    cfg: &'c ExperimentConfig,
    corpora: &'c Corpora,
    train_noise: Vec<NoiseRecord>,
    synth: Box<dyn Synthesizer>,
    cache: &'c Cache<'a>,
    evals: Vec<(String, String, PairedDataset)>,
}

impl Context<'_, '_> {
    fn plan(&self, value: &SweepValue) -> Result<Option<GenerationPlan>> {
        let cfg = self.cfg;
        let src = &self.corpora.speech;
        let s = seed::derive(cfg.seed, "plan", &[]);
        Ok(Some(match cfg.axis {
            Axis::Text => build_text_variant(src, value.count(cfg.axis)?, s)?,
            Axis::Language => {
                build_language_variant(src, value.count(cfg.axis)?, &LANGUAGE_POOL, &self.corpora.foreign, s)?
            }
            Axis::Speaker => build_speaker_variant(src, value.count(cfg.axis)?, cfg.sweep.prompt_mode, s)?,
            Axis::PromptMode => {
                let mode = parse_prompt_mode(value.label())
                    .ok_or_else(|| Error::Config(format!("bad prompt mode {value}")))?;
                let spk = cfg.sweep.speakers.unwrap_or(src.stats().unique_speakers);
                build_speaker_variant(src, spk, mode, s)?
            }
            Axis::FullVsReal => match value.label() {
                "real" => return Ok(None),
                _ => build_full_synthetic_plan(src, s)?,
            },
            Axis::NoiseDuration | Axis::NoiseType => return Ok(None),
        }))
    }

    fn noise_subset(&self, value: &SweepValue) -> Result<NoiseSubset> {
        let cfg = self.cfg;
        let noise = &self.train_noise;
        let s = seed::derive(cfg.seed, "noise-subset", &[]);
        match cfg.axis {
            Axis::NoiseDuration => sample_noise_duration(noise, value.seconds()?, s),
            Axis::NoiseType => {
                let t = match cfg.sweep.noise_seconds {
                    Some(t) => t,
                    None => {
                        let mut per: BTreeMap<&str, f64> = BTreeMap::new();
                        for r in noise {
                            *per.entry(&r.type_label).or_default() += r.duration;
                        }
                        per.values().cloned().fold(f64::INFINITY, f64::min)
                    }
                };
                sample_noise_typed(noise, t, value.count(cfg.axis)?, s)
            }
            _ => Ok(NoiseSubset::all(noise)),
        }
    }

    fn cell(&self, value: &SweepValue, setup: &ModelSetup) -> ResultRow {
        let mut row = ResultRow {
            value: value.clone(),
            model: setup.model.kind(),
            status: CellStatus::Ok,
            error: None,
            aggregates: BTreeMap::new(),
            data_id: None,
            data_artifact: None,
            checkpoint_id: None,
            report_ids: BTreeMap::new(),
        };
        if let Err(e) = self.fill(&mut row, setup) {
            row.status = CellStatus::Failed;
            row.error = Some(e.to_string());
        }
        row
    }

    fn fill(&self, row: &mut ResultRow, setup: &ModelSetup) -> Result<()> {
        let cfg = self.cfg;
        let mix_seed = seed::derive(cfg.seed, "mix", &[]);
        let subset = self.noise_subset(&row.value)?;
        let (data_id, data) = if cfg.axis.is_speech_axis() {
            let speech = match self.plan(&row.value)? {
                Some(plan) => self.cache.synthesize(&plan, &self.corpora.speech, self.synth.as_ref())?.1,
                None => self.corpora.speech.clone(),
            };
            let (id, ds) = self.cache.simulate(&speech, &self.train_noise, &subset, cfg.sweep.snr, mix_seed)?;
            row.data_artifact = Some(TrainingArtifact::FixedPairs);
            (id, TrainData::from_dataset(&ds)?)
        } else {
            let stream = pair_stream(&self.corpora.speech, &self.train_noise, &subset, cfg.sweep.snr, mix_seed, 0)?;
            let key = content_key(&("stream", manifest_id(&self.corpora.speech), &subset, cfg.sweep.snr, mix_seed));
            row.data_artifact = Some(TrainingArtifact::EpochLedgers);
            (Cache::id("stream", &key), TrainData::OnTheFly { stream, ledger_dir: None })
        };
        row.data_id = Some(data_id.clone());
        let init_seed = seed::derive(cfg.seed, "model-init", &[]);
        let setup = ModelSetup {
            model: setup.model.clone(),
            train: TrainConfig { data_mode: data.mode(), ..setup.train.clone() },
        };
        let (ck_id, ck) = self.cache.train(&data_id, data, &setup, init_seed)?;
        row.checkpoint_id = Some(ck_id.clone());
        for (name, eid, ds) in &self.evals {
            let (rid, report) = self.cache.evaluate(&ck_id, Some(&ck), eid, ds, &cfg.metrics)?;
            row.aggregates.insert(name.clone(), report.aggregates.clone());
            row.report_ids.insert(name.clone(), rid);
        }
        Ok(())
    }
}

fn run_cells(cfg: &ExperimentConfig, setups: &[ModelSetup], opts: &RunOptions) -> Result<SweepOutcome> {
    let corpora = Corpora::load(&cfg.corpora)?;
    cfg.validate(&corpora.speech, &corpora.noise)?;
    for s in setups {
        s.model.validate()?;
        s.train.validate()?;
    }
    let cache = Cache {
        root: opts.cache_dir.clone(),
        work: WorkLog::default(),
        locks: Mutex::new(HashMap::new()),
        plugins: opts.plugins,
    };
    let mut evals = Vec::new();
    let mut baselines = BTreeMap::new();
    let mut baseline_reports = BTreeMap::new();
    for e in &cfg.eval {
        let speech = Manifest::read_jsonl(&e.speech)?;
        let noise = match &e.noise {
            Some(p) => read_noise_jsonl(p)?,
            None => corpora.noise.clone(),
        };
        let noise = filter_types(&noise, e.noise_types.as_ref())?;
        let (id, ds) = cache.simulate(&speech, &noise, &NoiseSubset::all(&noise), e.snr, e.seed)?;
        let (rid, report) = cache.evaluate("identity", None, &id, &ds, &cfg.metrics)?;
        baselines.insert(e.name.clone(), report.aggregates.clone());
        baseline_reports.insert(e.name.clone(), rid);
        evals.push((e.name.clone(), id, ds));
    }
    let ctx = Context {
        cfg,
        corpora: &corpora,
        train_noise: filter_types(&corpora.noise, cfg.sweep.train_noise_types.as_ref())?,
        synth: cfg.corpora.synthesizer.build(&opts.cache_dir.join("external"))?,
        cache: &cache,
        evals,
    };
    let jobs: Vec<(&SweepValue, &ModelSetup)> =
        cfg.sweep.values.iter().flat_map(|v| setups.iter().map(move |s| (v, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let rows: Vec<ResultRow> = pool.install(|| jobs.par_iter().map(|(v, s)| ctx.cell(v, s)).collect());
    let mut notes = Vec::new();
    if cfg.axis == Axis::Language && matches!(cfg.corpora.synthesizer, SynthesizerSpec::Mock { .. }) {
        notes.push("mock-synthesizer languages are spectral templates; language effects are structural only".into());
    }
    let table = ResultsTable {
        axis: cfg.axis,
        config_hash: content_key(&("experiment", cfg, setups)),
        code_version: CODE_VERSION.to_string(),
        metrics: cfg.metrics.clone(),
        eval_sets: cfg.eval.iter().map(|e| e.name.clone()).collect(),
        rows,
        baselines,
        baseline_reports,
        notes,
    };
    Ok(SweepOutcome { table, work: cache.work })
}

/// One trained model per sweep value, evaluated on every eval set.
/// Failed cells are recorded in the table and do not stop the sweep.
pub fn run_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<SweepOutcome> {
    run_cells(cfg, &[cfg.setup()], opts)
}

/// Trains every setup on the real corpus and on its full-synthetic
/// counterpart; rows are `{real, synthetic}` x setups.
pub fn compare_real_vs_synthetic(
    cfg: &ExperimentConfig,
    setups: &[ModelSetup],
    opts: &RunOptions,
) -> Result<SweepOutcome> {
    if setups.is_empty() {
        return Err(Error::Config("no model setups to compare".into()));
    }
    let mut cfg = cfg.clone();
    cfg.axis = Axis::FullVsReal;
    cfg.sweep.values = vec![SweepValue::Label("real".into()), SweepValue::Label("synthetic".into())];
    run_cells(&cfg, setups, opts)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn fmt_value(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub y: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub metric: String,
    pub axis: Axis,
    pub x: Vec<String>,
    pub series: Vec<PlotSeries>,
    #[serde(default)]
    pub notes: Vec<String>,
}

pub fn plot_file_name(metric: &str) -> String {
    format!("plot_{metric}.json")
}

/// Writes `results.csv`, `results.json` and one `plot_<metric>.json` per
/// metric; returns the written paths.
pub fn report(table: &ResultsTable, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(Error::Config("results table is empty".into()));
    }
    let mut csv = String::from("series,axis,axis_value,model,eval_set,metric,aggregate\n");
    for r in &table.rows {
        for e in &table.eval_sets {
            for m in &table.metrics {
                let v = r.aggregates.get(e).and_then(|a| a.get(m)).copied();
                csv.push_str(&format!(
                    "model,{},{},{},{},{},{}\n",
                    table.axis,
                    csv_field(&r.value.to_string()),
                    r.model,
                    csv_field(e),
                    csv_field(m),
                    fmt_value(v)
                ));
            }
        }
    }
    for e in &table.eval_sets {
        for m in &table.metrics {
            let v = table.baselines.get(e).and_then(|a| a.get(m)).copied();
            csv.push_str(&format!(
                "unprocessed,{},,,{},{},{}\n",
                table.axis,
                csv_field(e),
                csv_field(m),
                fmt_value(v)
            ));
        }
    }
    let mut written = Vec::new();
    let p = out_dir.join(RESULTS_CSV);
    write_atomic(&p, csv.as_bytes())?;
    written.push(p);
    let p = out_dir.join(RESULTS_JSON);
    write_atomic(&p, table.to_json()?.as_bytes())?;
    written.push(p);
    let mut x: Vec<String> = Vec::new();
    for r in &table.rows {
        let s = r.value.to_string();
        if !x.contains(&s) {
            x.push(s);
        }
    }
    let models: Vec<ModelKind> = table.rows.iter().map(|r| r.model).collect::<BTreeSet<_>>().into_iter().collect();
    for m in &table.metrics {
        let mut series = Vec::new();
        for e in &table.eval_sets {
            for k in &models {
                let y = x
                    .iter()
                    .map(|xv| {
                        table
                            .rows
                            .iter()
                            .find(|r| &r.value.to_string() == xv && r.model == *k)
                            .and_then(|r| r.aggregates.get(e))
                            .and_then(|a| a.get(m))
                            .copied()
                    })
                    .collect();
                series.push(PlotSeries { name: format!("{k} / {e}"), y });
            }
            let b = table.baselines.get(e).and_then(|a| a.get(m)).copied();
            series.push(PlotSeries { name: format!("unprocessed / {e}"), y: vec![b; x.len()] });
        }
        let plot = PlotData { metric: m.clone(), axis: table.axis, x: x.clone(), series, notes: table.notes.clone() };
        let p = out_dir.join(plot_file_name(m));
        write_atomic(&p, serde_json::to_string_pretty(&plot)?.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ResultsTable {
        let agg = |v: f64| {
            BTreeMap::from([(
                "in".to_string(),
                BTreeMap::from([("si_sdr".to_string(), v), ("stoi".to_string(), 0.1 + v / 3.0)]),
            )])
        };
        ResultsTable {
            axis: Axis::Speaker,
            config_hash: "abc".into(),
            code_version: CODE_VERSION.into(),
            metrics: vec!["si_sdr".into(), "stoi".into()],
            eval_sets: vec!["in".into()],
            rows: vec![
                ResultRow {
                    value: SweepValue::Number(1.0),
                    model: ModelKind::Bsrnn,
                    status: CellStatus::Ok,
                    error: None,
                    aggregates: agg(0.1 + 0.2),
                    data_id: Some("data/x".into()),
                    data_artifact: Some(TrainingArtifact::FixedPairs),
                    checkpoint_id: Some("train/y".into()),
                    report_ids: BTreeMap::from([("in".into(), "eval/z".into())]),
                },
                ResultRow {
                    value: SweepValue::Number(2.0),
                    model: ModelKind::Bsrnn,
                    status: CellStatus::Failed,
                    error: Some("boom".into()),
                    aggregates: BTreeMap::new(),
                    data_id: None,
                    data_artifact: None,
                    checkpoint_id: None,
                    report_ids: BTreeMap::new(),
                },
            ],
            baselines: agg(-1.0 / 3.0),
            baseline_reports: BTreeMap::from([("in".into(), "eval/b".into())]),
            notes: vec![],
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let t = table();
        assert_eq!(ResultsTable::from_json(&t.to_json().unwrap()).unwrap(), t);
    }

    #[test]
    fn report_files_and_row_counts() {
        let dir = tempfile::tempdir().unwrap();
        let t = table();
        let files = report(&t, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let csv = fs::read_to_string(dir.path().join(RESULTS_CSV)).unwrap();
        // 2 values x 2 metrics x 1 eval set + 2 baseline rows
        assert_eq!(csv.lines().count() - 1, 2 * 2 + 2);
        for m in &t.metrics {
            let p: PlotData =
                serde_json::from_str(&fs::read_to_string(dir.path().join(plot_file_name(m))).unwrap()).unwrap();
            let base = p.series.iter().find(|s| s.name.starts_with("unprocessed")).unwrap();
            assert_eq!(base.y.len(), 2);
            assert!(base.y.iter().all(|v| v == &base.y[0] && v.is_some()));
        }
        assert!(report(&ResultsTable { rows: vec![], ..t }, dir.path()).is_err());
    }

    #[test]
    fn sweep_value_labels() {
        assert_eq!(SweepValue::Number(4.0).to_string(), "4");
        assert_eq!(SweepValue::Number(2.5).to_string(), "2.5");
        let v: Vec<SweepValue> = serde_json::from_str(r#"[1, "multi"]"#).unwrap();
        assert_eq!(v[1], SweepValue::Label("multi".into()));
        assert!(SweepValue::Number(0.0).count(Axis::Text).is_err());
        assert!(SweepValue::Number(1.5).count(Axis::Text).is_err());
        assert_eq!("noise-type".parse::<Axis>().unwrap(), Axis::NoiseType);
        assert!(!Axis::NoiseDuration.is_speech_axis());
        assert!(Axis::PromptMode.is_speech_axis());
    }

    #[test]
    fn content_keys_depend_on_inputs() {
        assert_eq!(content_key(&("a", 1)), content_key(&("a", 1)));
        assert_ne!(content_key(&("a", 1)), content_key(&("a", 2)));
    }
}
