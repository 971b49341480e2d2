use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use attrib_se::corpus::{
    ingest_noise_corpus, ingest_speech_corpus, read_noise_jsonl, top_level_label, write_noise_jsonl, Manifest,
    TsvTranscripts,
};
use attrib_se::evalsuite::{evaluate, load_pairs, EvalOptions, PluginRegistry, PluginSpec};
use attrib_se::fixtures::{self, read_foreign_texts, FixtureConfig};
use attrib_se::mixer::{simulate_dataset, PairedDataset, SnrRange};
use attrib_se::models::{BsrnnConfig, Checkpoint, ModelConfig, ModelKind, SgmseConfig};
use attrib_se::runner::{self, ExperimentConfig, ModelSetup, ResultsTable, RunOptions};
use attrib_se::sampler::{self, GenerationPlan, NoiseSubset, PromptMode};
use attrib_se::synth::{execute_plan, ExecuteOptions, ExternalSynthesizer, MockSynthesizer, Synthesizer};
use attrib_se::trainer::{self, TrainConfig, TrainData};

#[derive(Parser)]
#[command(name = "attrib-se", version, about = "Controlled-attribute speech enhancement experiments")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[arg(long, global = true, default_value = "cache")]
    cache_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the deterministic fixture corpora.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
    },
    /// Ingest a speech or noise tree into a JSONL manifest.
    Ingest(IngestArgs),
    /// Build a generation plan for one attribute value.
    Plan(PlanArgs),
    /// Execute a generation plan.
    Synth(SynthArgs),
    /// Simulate fixed noisy/clean pairs.
    Mix(MixArgs),
    /// Train a model on a simulated dataset.
    Train(TrainArgs),
    /// Score a checkpoint (or the unprocessed input) on a dataset.
    Eval(EvalArgs),
    /// Run the sweep described by --config.
    Sweep {
        #[arg(long)]
        out: PathBuf,
    },
    /// Real versus full-synthetic training for both model kinds.
    Compare {
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-emit result files from a results.json.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKind {
    Speech,
    Noise,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long, value_enum)]
    kind: CorpusKind,
    #[arg(long)]
    root: PathBuf,
    /// TSV with id, speaker, language, text (speech only).
    #[arg(long)]
    transcripts: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Text,
    Language,
    Speaker,
    Full,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long, value_enum)]
    variant: Variant,
    /// n, p or s; unused for `full`.
    #[arg(long, default_value_t = 1)]
    value: usize,
    #[arg(long, default_value = "single-prompt")]
    prompt_mode: String,
    #[arg(long)]
    foreign_texts: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    store: PathBuf,
    /// Use the adapter named by ATTRIB_SE_TTS_ENDPOINT.
    #[arg(long)]
    external: bool,
    #[arg(long)]
    skip_failures: bool,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    speech: PathBuf,
    #[arg(long)]
    noise: PathBuf,
    /// Comma-separated noise types to keep.
    #[arg(long, value_delimiter = ',')]
    types: Vec<String>,
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    snr_lo: f64,
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    snr_hi: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "bsrnn")]
    model: ModelKind,
    /// Model config JSON; defaults for the kind otherwise.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Train config JSON; model defaults otherwise.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Omit to score the unprocessed input.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "sdr,si_sdr,stoi")]
    metrics: Vec<String>,
    /// `name=command args...` for an external metric.
    #[arg(long)]
    plugin: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().context("--config is required")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_prompt_mode(s: &str) -> Result<PromptMode> {
    match s {
        "single" | "single-prompt" => Ok(PromptMode::SinglePrompt),
        "multi" | "multi-prompt" => Ok(PromptMode::MultiPrompt),
        other => bail!("unknown prompt mode {other:?}"),
    }
}

fn print_table(table: &ResultsTable) {
    for r in &table.rows {
        let cells: Vec<String> = r
            .aggregates
            .iter()
            .flat_map(|(e, m)| m.iter().map(move |(k, v)| format!("{e}/{k}={v:.3}")))
            .collect();
        println!("{}={} {} {:?} {}", table.axis, r.value, r.model, r.status, cells.join(" "));
    }
    for f in table.failures() {
        eprintln!("failed: {}={} {}: {}", table.axis, f.value, f.model, f.error.as_deref().unwrap_or(""));
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let seed = cli.seed.unwrap_or(0);
    match &cli.cmd {
        Cmd::Fixtures { out } => {
            let cfg = FixtureConfig { seed: cli.seed.unwrap_or(FixtureConfig::default().seed), ..Default::default() };
            let layout = fixtures::generate(out, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&layout)?);
        }
        Cmd::Ingest(a) => match a.kind {
            CorpusKind::Speech => {
                let tsv = a.transcripts.as_ref().context("--transcripts is required for speech")?;
                let m = ingest_speech_corpus(&a.root, &TsvTranscripts::load(tsv)?)?;
                m.write_jsonl(&a.out)?;
                println!("{} utterances, {} words", m.m(), m.stats().total_words);
            }
            CorpusKind::Noise => {
                let recs = ingest_noise_corpus(&a.root, &top_level_label)?;
                write_noise_jsonl(&a.out, &recs)?;
                println!("{} noise clips", recs.len());
            }
        },
        Cmd::Plan(a) => {
            let src = Manifest::read_jsonl(&a.source)?;
            let plan = match a.variant {
                Variant::Text => sampler::build_text_variant(&src, a.value, seed)?,
                Variant::Language => {
                    let banks = match &a.foreign_texts {
                        Some(p) => read_foreign_texts(p)?,
                        None => Default::default(),
                    };
                    sampler::build_language_variant(&src, a.value, &sampler::LANGUAGE_POOL, &banks, seed)?
                }
                Variant::Speaker => {
                    sampler::build_speaker_variant(&src, a.value, parse_prompt_mode(&a.prompt_mode)?, seed)?
                }
                Variant::Full => sampler::build_full_synthetic_plan(&src, seed)?,
            };
            plan.write_jsonl(&a.out)?;
            println!("{} requests, word delta {}", plan.requests.len(), plan.achieved_delta);
        }
        Cmd::Synth(a) => {
            let plan = GenerationPlan::read_jsonl(&a.plan)?;
            let src = Manifest::read_jsonl(&a.source)?;
            let synth: Box<dyn Synthesizer> = if a.external {
                Box::new(ExternalSynthesizer::from_env(a.store.join("adapter"))?)
            } else {
                Box::new(MockSynthesizer::default())
            };
            let opts = ExecuteOptions { skip_failures: a.skip_failures, concurrency: cli.workers.max(1) };
            let exec = execute_plan(&plan, &src, synth.as_ref(), &a.store, opts)?;
            exec.manifest.write_jsonl(&a.store.join(runner::SYNTH_MANIFEST))?;
            for (i, msg) in &exec.failures {
                eprintln!("request {i} failed: {msg}");
            }
            println!("{} utterances synthesized", exec.manifest.m());
        }
        Cmd::Mix(a) => {
            let speech = Manifest::read_jsonl(&a.speech)?;
            let mut noise = read_noise_jsonl(&a.noise)?;
            if !a.types.is_empty() {
                noise.retain(|r| a.types.contains(&r.type_label));
            }
            let subset = NoiseSubset::all(&noise);
            let ds = simulate_dataset(&speech, &noise, &subset, SnrRange::new(a.snr_lo, a.snr_hi)?, seed, &a.out)?;
            println!("{} pairs", ds.len());
        }
        Cmd::Train(a) => {
            let ds = PairedDataset::load(&a.dataset)?;
            let model: ModelConfig = match &a.model_config {
                Some(p) => read_json(p)?,
                None => match a.model {
                    ModelKind::Bsrnn => ModelConfig::Bsrnn(BsrnnConfig::default()),
                    ModelKind::Sgmse => ModelConfig::Sgmse(SgmseConfig::default()),
                },
            };
            let mut tc: TrainConfig = match &a.train_config {
                Some(p) => read_json(p)?,
                None => TrainConfig { seed, ..TrainConfig::for_model(model.kind()) },
            };
            if let Some(e) = a.epochs {
                tc.epochs = e;
            }
            let data = TrainData::from_dataset(&ds)?;
            let outcome = match &a.resume {
                Some(p) => trainer::resume(&Checkpoint::load(p)?, &tc, &data, &a.out)?,
                None => trainer::train(&model, &tc, &data, seed, &a.out)?,
            };
            for (e, l) in outcome.epoch_means() {
                println!("epoch {e}: loss {l:.5}");
            }
        }
        Cmd::Eval(a) => {
            let ds = PairedDataset::load(&a.dataset)?;
            let pairs = load_pairs(&ds)?;
            let mut registry = PluginRegistry::new();
            for p in &a.plugin {
                let (name, cmd) = p.split_once('=').context("--plugin expects name=command")?;
                let command: Vec<String> = cmd.split_whitespace().map(String::from).collect();
                registry.register_plugin(name, PluginSpec { command })?;
            }
            let ck = a.checkpoint.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
            let opts = EvalOptions {
                dataset_id: a.dataset.display().to_string(),
                enhancer_id: a.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or("identity".into()),
                metrics: a.metrics.clone(),
                plugins: Some(&registry),
                work_dir: Some(a.out.join("audio")),
            };
            let report = match &ck {
                Some(ck) => evaluate(&pairs, &|x: &[f64]| runner::enhance(ck, x), &opts)?,
                None => evaluate(&pairs, &|x: &[f64]| Ok(x.to_vec()), &opts)?,
            };
            report.save(&a.out)?;
            for (m, v) in &report.aggregates {
                println!("{m}: {v:.4}");
            }
        }
        Cmd::Sweep { out } => {
            let cfg = experiment(&cli)?;
            let opts = RunOptions { cache_dir: cli.cache_dir.clone(), workers: cli.workers, plugins: None };
            let outcome = runner::run_sweep(&cfg, &opts)?;
            runner::report(&outcome.table, out)?;
            print_table(&outcome.table);
        }
        Cmd::Compare { out } => {
            let cfg = experiment(&cli)?;
            let mut setups = vec![cfg.setup()];
            let other = match cfg.model.kind() {
                ModelKind::Bsrnn => ModelConfig::Sgmse(SgmseConfig::default()),
                ModelKind::Sgmse => ModelConfig::Bsrnn(BsrnnConfig::default()),
            };
            let train = TrainConfig { seed: cfg.train.seed, ..TrainConfig::for_model(other.kind()) };
            setups.push(ModelSetup { model: other, train });
            setups.sort_by_key(|s| s.model.kind());
            let opts = RunOptions { cache_dir: cli.cache_dir.clone(), workers: cli.workers, plugins: None };
            let outcome = runner::compare_real_vs_synthetic(&cfg, &setups, &opts)?;
            runner::report(&outcome.table, out)?;
            print_table(&outcome.table);
        }
        Cmd::Report { results, out } => {
            let table = ResultsTable::load(results)?;
            for p in runner::report(&table, out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
