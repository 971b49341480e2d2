//! External interfaces: metric plugins, the TTS adapter and the CLI.

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::Command;

use attrib_se::corpus::Manifest;
use attrib_se::evalsuite::{evaluate, EvalOptions, EvalPair, PluginRegistry, PluginSpec, Status};
use attrib_se::sampler::build_text_variant;
use attrib_se::synth::{execute_plan, Endpoint, ExecuteOptions, ExternalSynthesizer};

mod common;
use common::{fixture_layout, scratch_dir};

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let p = dir.join(name);
    fs::write(&p, format!("#!/bin/sh\n{body}")).unwrap();
    fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
    p
}

const ECHO_PLUGIN: &str = r#"read hello
echo '{"name":"echo","version":"1.2"}'
while read line; do
  id=$(echo "$line" | sed 's/.*"utterance_id":"\([^"]*\)".*/\1/')
  echo "{\"utterance_id\":\"$id\",\"value\":3.0}"
done
"#;

const MALFORMED_PLUGIN: &str = r#"read hello
echo '{"name":"flaky","version":"0.1"}'
n=0
while read line; do
  n=$((n+1))
  id=$(echo "$line" | sed 's/.*"utterance_id":"\([^"]*\)".*/\1/')
  if [ "$n" -eq 2 ]; then echo "not json"; else echo "{\"utterance_id\":\"$id\",\"value\":0.5}"; fi
done
"#;

fn pairs() -> Vec<EvalPair> {
    (0..4)
        .map(|i| {
            let clean: Vec<f64> = (0..4000).map(|n| ((n * (i + 3)) as f64 * 0.01).sin() * 0.3).collect();
            let noisy = clean.iter().enumerate().map(|(n, v)| v + 0.01 * ((n * 7919) % 13) as f64 / 13.0).collect();
            EvalPair { id: format!("u{i}"), noisy, clean }
        })
        .collect()
}

fn registry(dir: &Path) -> PluginRegistry {
    let mut reg = PluginRegistry::new();
    let echo = script(dir, "echo.sh", ECHO_PLUGIN);
    let flaky = script(dir, "flaky.sh", MALFORMED_PLUGIN);
    reg.register_plugin("echo", PluginSpec { command: vec![echo.display().to_string()] }).unwrap();
    reg.register_plugin("flaky", PluginSpec { command: vec![flaky.display().to_string()] }).unwrap();
    reg
}

#[test]
fn plugin_metrics_join_native_ones() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry(dir.path());
    let opts = EvalOptions {
        dataset_id: "d".into(),
        enhancer_id: "identity".into(),
        metrics: vec!["si_sdr".into(), "echo".into(), "flaky".into(), "pesq".into()],
        plugins: Some(&reg),
        work_dir: Some(dir.path().join("work")),
    };
    let report = evaluate(&pairs(), &|x: &[f64]| Ok(x.to_vec()), &opts).unwrap();
    let rows = |m: &str| report.rows.iter().filter(|r| r.metric == m).collect::<Vec<_>>();
    assert!(rows("echo").iter().all(|r| r.status == Status::Ok && r.value == Some(3.0)));
    assert_eq!(report.aggregates["echo"], 3.0);
    assert_eq!(report.metadata["echo"].version, "echo 1.2");
    let flaky = rows("flaky");
    assert_eq!(flaky.iter().filter(|r| r.status == Status::Error).count(), 1);
    assert_eq!(flaky[1].status, Status::Error);
    assert!(flaky.iter().enumerate().all(|(i, r)| i == 1 || r.value == Some(0.5)));
    assert!(rows("pesq").iter().all(|r| r.status == Status::Unavailable && r.value.is_none()));
    assert!(!report.aggregates.contains_key("pesq"));
    assert!(rows("si_sdr").iter().all(|r| r.status == Status::Ok));
}

#[test]
fn plugin_that_cannot_start_is_an_error() {
    let mut reg = PluginRegistry::new();
    reg.register_plugin("gone", PluginSpec { command: vec!["/nonexistent/plugin".into()] }).unwrap();
    assert!(reg.run_plugin_metric("gone", &[]).is_err());
    assert!(reg.run_plugin_metric("other", &[]).unwrap().is_none());
}

const COPY_ADAPTER: &str = r#"read req
prompt=$(echo "$req" | sed 's/.*"prompt_wav_path":"\([^"]*\)".*/\1/')
out=$(echo "$req" | sed 's/.*"out_wav_path":"\([^"]*\)".*/\1/')
cp "$prompt" "$out"
echo '{"status":"ok"}'
"#;

const FAILING_ADAPTER: &str = r#"read req
echo '{"status":"error"}'
"#;

fn small_plan() -> (Manifest, attrib_se::sampler::GenerationPlan) {
    let src = Manifest::read_jsonl(&fixture_layout().speech_manifest).unwrap();
    let mut plan = build_text_variant(&src, 5, 3).unwrap();
    plan.requests.truncate(6);
    (src, plan)
}

#[test]
fn command_adapter_round_trip() {
    let dir = scratch_dir("adapter-ok");
    let adapter = script(&dir, "adapter.sh", COPY_ADAPTER);
    let synth = ExternalSynthesizer::new(
        Endpoint::Command(vec![adapter.display().to_string()]),
        dir.join("work"),
        ["en".to_string()].into_iter().collect(),
    );
    let (src, plan) = small_plan();
    let exec = execute_plan(&plan, &src, &synth, &dir.join("store"), ExecuteOptions::default()).unwrap();
    assert!(exec.failures.is_empty());
    assert_eq!(exec.manifest.m(), 6);
    for (rec, req) in exec.manifest.records().iter().zip(&plan.requests) {
        let prompt = src.get(&req.prompt_utterance_id).unwrap();
        assert_eq!(fs::read(&rec.audio_uri).unwrap(), fs::read(&prompt.audio_uri).unwrap());
        assert_eq!(rec.text, req.text);
    }
}

#[test]
fn command_adapter_failures_are_reported() {
    let dir = scratch_dir("adapter-fail");
    let adapter = script(&dir, "adapter.sh", FAILING_ADAPTER);
    let synth = ExternalSynthesizer::new(
        Endpoint::Command(vec![adapter.display().to_string()]),
        dir.join("work"),
        ["en".to_string()].into_iter().collect(),
    );
    let (src, plan) = small_plan();
    assert!(execute_plan(&plan, &src, &synth, &dir.join("a"), ExecuteOptions::default()).is_err());
    let opts = ExecuteOptions { skip_failures: true, concurrency: 2 };
    let err = execute_plan(&plan, &src, &synth, &dir.join("b"), opts).unwrap_err();
    assert!(err.to_string().contains("no records"));
}

fn cli(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_attrib-se")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn cli_pipeline_stages() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).display().to_string();
    let l = fixture_layout();
    let speech = l.speech_manifest.display().to_string();
    let out = cli(&["ingest", "--kind", "noise", "--root", &l.noise_dir.display().to_string(), "--out", &d("noise.jsonl")]);
    assert!(out.contains("12 noise clips"));
    let out = cli(&["plan", "--source", &speech, "--variant", "text", "--value", "5", "--out", &d("plan.jsonl")]);
    assert!(out.starts_with("100 requests"));
    let test = l.test_manifest.display().to_string();
    cli(&["--seed", "4", "mix", "--speech", &test, "--noise", &d("noise.jsonl"), "--types", "white", "--out", &d("mix")]);
    let out = cli(&["eval", "--dataset", &d("mix"), "--metrics", "si_sdr", "--out", &d("eval")]);
    assert!(out.starts_with("si_sdr: "));
    assert!(dir.path().join("eval").join("report.csv").exists());
}
