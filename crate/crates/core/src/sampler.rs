//! Attribute-controlled generation plans and noise subsets.
//!
//! Every builder returns exactly `m` requests for an `m`-record source and is
//! a pure function of `(source, parameters, seed)`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{count_words, Manifest, NoiseRecord};
use crate::{audio, seed, Error, Result};

/// Language pool in fixed order; the first `p` entries realize `p` languages.
pub const LANGUAGE_POOL: [&str; 10] = ["en", "zh", "cs", "de", "es", "fr", "it", "pl", "ru", "ja"];

/// Default relative word-budget tolerance for text variants.
pub const WORD_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisRequest {
    pub index: usize,
    pub text: String,
    pub language: String,
    pub prompt_utterance_id: String,
    pub target_speaker_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub requests: Vec<SynthesisRequest>,
    pub source_manifest_id: String,
    pub attribute_tag: String,
    pub word_budget: i64,
    pub achieved_delta: i64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct PlanHeader {
    attribute_tag: String,
    source_manifest_id: String,
    word_budget: i64,
    achieved_delta: i64,
    seed: u64,
}

impl GenerationPlan {
    fn finish(
        source: &Manifest,
        requests: Vec<SynthesisRequest>,
        attribute_tag: String,
        seed: u64,
    ) -> Self {
        let word_budget = source.stats().total_words as i64;
        let words: i64 = requests.iter().map(|r| count_words(&r.text) as i64).sum();
        GenerationPlan {
            requests,
            source_manifest_id: manifest_id(source),
            attribute_tag,
            word_budget,
            achieved_delta: words - word_budget,
            seed,
        }
    }

    pub fn total_words(&self) -> i64 {
        self.requests.iter().map(|r| count_words(&r.text) as i64).sum()
    }

    pub fn distinct_texts(&self) -> usize {
        self.requests.iter().map(|r| r.text.as_str()).collect::<HashSet<_>>().len()
    }

    pub fn distinct_speakers(&self) -> usize {
        self.requests
            .iter()
            .map(|r| r.target_speaker_id.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn distinct_prompts(&self) -> usize {
        self.requests
            .iter()
            .map(|r| r.prompt_utterance_id.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn language_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for r in &self.requests {
            *out.entry(r.language.clone()).or_insert(0) += 1;
        }
        out
    }

    /// Checks the plan against the manifest it was built from.
    pub fn validate(&self, source: &Manifest) -> Result<()> {
        if self.requests.len() != source.m() {
            return Err(Error::Plan(format!(
                "plan has {} requests, source has {}",
                self.requests.len(),
                source.m()
            )));
        }
        for (i, r) in self.requests.iter().enumerate() {
            if r.index != i {
                return Err(Error::Plan(format!("request {i} carries index {}", r.index)));
            }
            if count_words(&r.text) == 0 {
                return Err(Error::Plan(format!("request {i} has empty text")));
            }
            match source.get(&r.prompt_utterance_id) {
                Some(p) if p.speaker_id == r.target_speaker_id => {}
                Some(_) => {
                    return Err(Error::Plan(format!(
                        "request {i}: prompt {} is not from speaker {}",
                        r.prompt_utterance_id, r.target_speaker_id
                    )))
                }
                None => {
                    return Err(Error::Plan(format!(
                        "request {i}: unknown prompt {}",
                        r.prompt_utterance_id
                    )))
                }
            }
        }
        if self.total_words() - self.word_budget != self.achieved_delta {
            return Err(Error::Plan("recorded word delta does not match requests".into()));
        }
        Ok(())
    }

    /// JSON header line followed by one request per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        let header = PlanHeader {
            attribute_tag: self.attribute_tag.clone(),
            source_manifest_id: self.source_manifest_id.clone(),
            word_budget: self.word_budget,
            achieved_delta: self.achieved_delta,
            seed: self.seed,
        };
        serde_json::to_writer(&mut buf, &header)?;
        buf.push(b'\n');
        for r in &self.requests {
            serde_json::to_writer(&mut buf, r)?;
            buf.write_all(b"\n").expect("in-memory write");
        }
        audio::write_atomic(path, &buf)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        let header: PlanHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Plan(format!("{} is empty", path.display())))?,
        )?;
        let requests = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<SynthesisRequest>, _>>()?;
        Ok(GenerationPlan {
            requests,
            source_manifest_id: header.source_manifest_id,
            attribute_tag: header.attribute_tag,
            word_budget: header.word_budget,
            achieved_delta: header.achieved_delta,
            seed: header.seed,
        })
    }
}

/// Content id of a manifest: hash of its canonical JSON Lines form.
pub fn manifest_id(manifest: &Manifest) -> String {
    let mut h = Sha256::new();
    for r in manifest.records() {
        h.update(serde_json::to_vec(r).expect("record serializes"));
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..12])
}

pub fn build_full_synthetic_plan(source: &Manifest, seed: u64) -> Result<GenerationPlan> {
    let requests = source
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| SynthesisRequest {
            index: i,
            text: r.text.clone(),
            language: r.language.clone(),
            prompt_utterance_id: r.id.clone(),
            target_speaker_id: r.speaker_id.clone(),
        })
        .collect();
    Ok(GenerationPlan::finish(source, requests, "full-synthetic".into(), seed))
}

/// Moves single repetitions between texts while that strictly shrinks
/// `|sum(counts * words) - target|`. Every count stays at least 1. When no
/// single move improves, pairs of moves are tried before giving up.
///
/// Texts are grouped by word count, so a pass costs `O(D^2)` (single
/// moves) or `O(D^4)` (pairs) for `D` distinct word counts.
pub fn swap_search(words: &[usize], counts: &mut [usize], target: i64) -> i64 {
    let mut delta: i64 = words.iter().zip(counts.iter()).map(|(&w, &c)| (w * c) as i64).sum::<i64>() - target;
    loop {
        // representative text per word count: donors need count >= 2
        let mut donor: BTreeMap<usize, usize> = BTreeMap::new();
        let mut receiver: BTreeMap<usize, usize> = BTreeMap::new();
        for (j, (&w, &c)) in words.iter().zip(counts.iter()).enumerate() {
            receiver.entry(w).or_insert(j);
            if c >= 2 {
                donor.entry(w).or_insert(j);
            }
        }
        let mut best: Option<(i64, usize, usize)> = None;
        for (&wa, &a) in &donor {
            for (&wb, &b) in &receiver {
                if wa == wb {
                    continue;
                }
                let nd = delta - wa as i64 + wb as i64;
                if nd.abs() < delta.abs() && best.map_or(true, |(bd, _, _)| nd.abs() < bd.abs()) {
                    best = Some((nd, a, b));
                }
            }
        }
        if let Some((nd, a, b)) = best {
            counts[a] -= 1;
            counts[b] += 1;
            delta = nd;
            continue;
        }
        // no single move helps: try two moves at once
        let mut best2: Option<(i64, [usize; 4])> = None;
        for (&wa, &a) in &donor {
            for (&wc, &c) in &donor {
                if c < a || (c == a && counts[a] < 3) {
                    continue;
                }
                for (&wb, &b) in &receiver {
                    for (&wd, &d) in &receiver {
                        let nd = delta - wa as i64 + wb as i64 - wc as i64 + wd as i64;
                        if nd.abs() < delta.abs()
                            && best2.map_or(true, |(bd, _)| nd.abs() < bd.abs())
                        {
                            best2 = Some((nd, [a, b, c, d]));
                        }
                    }
                }
            }
        }
        match best2 {
            Some((nd, [a, b, c, d])) => {
                counts[a] -= 1;
                counts[b] += 1;
                counts[c] -= 1;
                counts[d] += 1;
                delta = nd;
            }
            None => return delta,
        }
    }
}

/// Uniform base counts `m / n` with the remainder dealt round-robin.
pub fn uniform_counts(m: usize, n: usize) -> Vec<usize> {
    (0..n).map(|j| m / n + usize::from(j < m % n)).collect()
}

/// Distinct texts of a manifest in id order, each with its first record id.
fn unique_texts(source: &Manifest) -> Vec<(&str, &str)> {
    let mut seen = HashSet::new();
    source
        .records()
        .iter()
        .filter(|r| seen.insert(r.text.as_str()))
        .map(|r| (r.text.as_str(), r.id.as_str()))
        .collect()
}

pub fn build_text_variant(source: &Manifest, n: usize, seed: u64) -> Result<GenerationPlan> {
    build_text_variant_with_tolerance(source, n, seed, WORD_TOLERANCE)
}

pub fn build_text_variant_with_tolerance(
    source: &Manifest,
    n: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GenerationPlan> {
    let m = source.m();
    let uniq = unique_texts(source);
    if n == 0 || n > uniq.len() {
        return Err(Error::Plan(format!(
            "n = {n} must lie in [1, {}] (unique texts in source)",
            uniq.len()
        )));
    }
    let tag = format!("text:n={n}");
    let w_target = source.stats().total_words as i64;

    let texts: Vec<String> = if n == uniq.len() {
        source.records().iter().map(|r| r.text.clone()).collect()
    } else if n == 1 {
        let mean = w_target as f64 / m as f64;
        let (text, _) = uniq
            .iter()
            .min_by(|a, b| {
                let da = (count_words(a.0) as f64 - mean).abs();
                let db = (count_words(b.0) as f64 - mean).abs();
                da.total_cmp(&db).then_with(|| a.1.cmp(b.1))
            })
            .expect("non-empty");
        vec![text.to_string(); m]
    } else {
        let mut rng = seed::rng(seed, "text-variant", &[n as u64]);
        let mut pool: Vec<&str> = uniq.iter().map(|u| u.0).collect();
        pool.shuffle(&mut rng);
        let chosen = &pool[..n];
        let words: Vec<usize> = chosen.iter().map(|t| count_words(t)).collect();
        let mut counts = uniform_counts(m, n);
        swap_search(&words, &mut counts, w_target);
        let mut expanded: Vec<String> = chosen
            .iter()
            .zip(&counts)
            .flat_map(|(t, &c)| std::iter::repeat(t.to_string()).take(c))
            .collect();
        expanded.shuffle(&mut rng);
        expanded
    };

    let requests = source
        .records()
        .iter()
        .zip(texts)
        .enumerate()
        .map(|(i, (r, text))| SynthesisRequest {
            index: i,
            text,
            language: r.language.clone(),
            prompt_utterance_id: r.id.clone(),
            target_speaker_id: r.speaker_id.clone(),
        })
        .collect();
    let plan = GenerationPlan::finish(source, requests, tag, seed);
    let relative = plan.achieved_delta.unsigned_abs() as f64 / w_target.max(1) as f64;
    if relative > tolerance {
        return Err(Error::WordBudget {
            relative,
            tolerance,
        });
    }
    Ok(plan)
}

/// Picks `count` items from a bank so their word total approaches `target`.
///
/// Starts from a seeded shuffle (cycled when the bank is smaller than
/// `count`) and then repeatedly applies the single replacement that most
/// reduces the budget miss. Items may repeat only if the bank is too small.
fn select_to_budget(
    bank_words: &[usize],
    count: usize,
    target: i64,
    rng: &mut seed::Rng,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..bank_words.len()).collect();
    order.shuffle(rng);
    let allow_reuse = count > bank_words.len();
    let mut picked: Vec<usize> = (0..count).map(|i| order[i % order.len()]).collect();
    let mut uses = vec![0usize; bank_words.len()];
    for &p in &picked {
        uses[p] += 1;
    }
    let mut delta: i64 = picked.iter().map(|&p| bank_words[p] as i64).sum::<i64>() - target;
    loop {
        // one candidate replacement per distinct word count
        let mut avail: BTreeMap<usize, usize> = BTreeMap::new();
        for &j in &order {
            if allow_reuse || uses[j] == 0 {
                avail.entry(bank_words[j]).or_insert(j);
            }
        }
        let mut slot_by_words: BTreeMap<usize, usize> = BTreeMap::new();
        for (s, &p) in picked.iter().enumerate() {
            slot_by_words.entry(bank_words[p]).or_insert(s);
        }
        let mut best: Option<(i64, usize, usize)> = None;
        for (&wo, &slot) in &slot_by_words {
            for (&wn, &j) in &avail {
                if wn == wo {
                    continue;
                }
                let nd = delta - wo as i64 + wn as i64;
                if nd.abs() < delta.abs() && best.map_or(true, |(bd, _, _)| nd.abs() < bd.abs()) {
                    best = Some((nd, slot, j));
                }
            }
        }
        match best {
            Some((nd, slot, j)) => {
                uses[picked[slot]] -= 1;
                uses[j] += 1;
                picked[slot] = j;
                delta = nd;
            }
            None => return picked,
        }
    }
}

pub fn build_language_variant(
    source: &Manifest,
    p: usize,
    pool: &[&str],
    foreign_texts: &BTreeMap<String, Vec<String>>,
    seed: u64,
) -> Result<GenerationPlan> {
    let m = source.m();
    if !(1..=10).contains(&p) {
        return Err(Error::Plan(format!("p = {p} outside [1, 10]")));
    }
    if m % 10 != 0 {
        return Err(Error::Plan(format!("m = {m} is not divisible by 10")));
    }
    if pool.len() < p || pool.first() != Some(&"en") {
        return Err(Error::Plan("language pool must start with en and hold p entries".into()));
    }
    let w_target = source.stats().total_words as i64;
    let mut groups: Vec<(String, usize, Vec<String>)> = Vec::with_capacity(p);
    groups.push((
        "en".into(),
        m * (11 - p) / 10,
        source.records().iter().map(|r| r.text.clone()).collect(),
    ));
    for lang in &pool[1..p] {
        let bank: Vec<String> = foreign_texts
            .get(*lang)
            .map(|b| b.iter().filter(|t| count_words(t) > 0).cloned().collect())
            .unwrap_or_default();
        if bank.is_empty() {
            return Err(Error::Plan(format!("empty text bank for language {lang}")));
        }
        groups.push((lang.to_string(), m / 10, bank));
    }

    let mut rng = seed::rng(seed, "language-variant", &[p as u64]);
    let mut assigned: Vec<(String, String)> = Vec::with_capacity(m);
    let mut planned_words: i64 = 0;
    for (gi, (lang, count, bank)) in groups.iter().enumerate() {
        // the last group absorbs rounding of the per-group shares
        let share = if gi + 1 == groups.len() {
            w_target - planned_words
        } else {
            (w_target as f64 * *count as f64 / m as f64).round() as i64
        };
        let words: Vec<usize> = bank.iter().map(|t| count_words(t)).collect();
        let picked = select_to_budget(&words, *count, share, &mut rng);
        planned_words += picked.iter().map(|&j| words[j] as i64).sum::<i64>();
        assigned.extend(picked.into_iter().map(|j| (lang.clone(), bank[j].clone())));
    }

    let by_spk = source.by_speaker();
    let mut speakers: Vec<&str> = by_spk.keys().copied().collect();
    speakers.shuffle(&mut rng);
    let requests = assigned
        .into_iter()
        .enumerate()
        .map(|(i, (language, text))| {
            let spk = speakers[i % speakers.len()];
            let utts = &by_spk[spk];
            SynthesisRequest {
                index: i,
                text,
                language,
                prompt_utterance_id: utts[(i / speakers.len()) % utts.len()].id.clone(),
                target_speaker_id: spk.to_string(),
            }
        })
        .collect();
    Ok(GenerationPlan::finish(source, requests, format!("language:p={p}"), seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    SinglePrompt,
    MultiPrompt,
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::SinglePrompt => "single",
            PromptMode::MultiPrompt => "multi",
        })
    }
}

pub fn build_speaker_variant(
    source: &Manifest,
    s: usize,
    mode: PromptMode,
    seed: u64,
) -> Result<GenerationPlan> {
    let m = source.m();
    let by_spk = source.by_speaker();
    if s == 0 || s > by_spk.len() {
        return Err(Error::Plan(format!(
            "s = {s} must lie in [1, {}] (speakers in source)",
            by_spk.len()
        )));
    }
    let mut rng = seed::rng(seed, "speaker-variant", &[s as u64]);
    let mut speakers: Vec<&str> = by_spk.keys().copied().collect();
    speakers.shuffle(&mut rng);
    speakers.truncate(s);
    let quotas = uniform_counts(m, s);

    if mode == PromptMode::MultiPrompt {
        let deficient: Vec<String> = speakers
            .iter()
            .zip(&quotas)
            .filter(|(spk, &q)| by_spk[**spk].len() < q)
            .map(|(spk, q)| format!("{spk} (has {}, needs {q})", by_spk[*spk].len()))
            .collect();
        if !deficient.is_empty() {
            return Err(Error::PromptDeficit(deficient));
        }
    }

    // per speaker, the ordered prompt ids its requests will use
    let mut prompts: Vec<Vec<String>> = Vec::with_capacity(s);
    for (spk, &q) in speakers.iter().zip(&quotas) {
        let mut utts: Vec<&str> = by_spk[*spk].iter().map(|r| r.id.as_str()).collect();
        utts.shuffle(&mut rng);
        prompts.push(match mode {
            PromptMode::SinglePrompt => vec![utts[0].to_string(); q],
            PromptMode::MultiPrompt => utts[..q].iter().map(|u| u.to_string()).collect(),
        });
    }
    let mut requests = Vec::with_capacity(m);
    let mut records = source.records().iter();
    for (k, spk) in speakers.iter().enumerate() {
        for prompt in &prompts[k] {
            let r = records.next().expect("quotas sum to m");
            requests.push(SynthesisRequest {
                index: requests.len(),
                text: r.text.clone(),
                language: r.language.clone(),
                prompt_utterance_id: prompt.clone(),
                target_speaker_id: spk.to_string(),
            });
        }
    }
    Ok(GenerationPlan::finish(source, requests, format!("speaker:s={s}:{mode}"), seed))
}

/// Number of noise types a subset targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetK {
    All,
    Count(usize),
}

impl Serialize for TargetK {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TargetK::All => s.serialize_str("all"),
            TargetK::Count(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for TargetK {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) if s == "all" => Ok(TargetK::All),
            serde_json::Value::Number(n) if n.is_u64() => Ok(TargetK::Count(n.as_u64().unwrap() as usize)),
            other => Err(serde::de::Error::custom(format!("invalid target_k {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSubset {
    pub record_ids: Vec<String>,
    pub total_duration: f64,
    pub type_labels: BTreeSet<String>,
    pub target_t: f64,
    pub target_k: TargetK,
    pub seed: u64,
}

impl NoiseSubset {
    /// Whole-corpus subset.
    pub fn all(records: &[NoiseRecord]) -> Self {
        NoiseSubset {
            record_ids: records.iter().map(|r| r.id.clone()).collect(),
            total_duration: records.iter().map(|r| r.duration).sum(),
            type_labels: records.iter().map(|r| r.type_label.clone()).collect(),
            target_t: records.iter().map(|r| r.duration).sum(),
            target_k: TargetK::All,
            seed: 0,
        }
    }

    /// Resolves member ids against a noise corpus, in subset order.
    pub fn members<'a>(&self, records: &'a [NoiseRecord]) -> Result<Vec<&'a NoiseRecord>> {
        let index: BTreeMap<&str, &NoiseRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        self.record_ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Manifest(format!("noise subset references unknown id {id}")))
            })
            .collect()
    }
}

/// Relative slack for comparing accumulated durations.
const DURATION_EPS: f64 = 1e-9;

fn greedy_fill<'a>(
    mut pool: Vec<&'a NoiseRecord>,
    budget: f64,
    rng: &mut seed::Rng,
) -> Vec<&'a NoiseRecord> {
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    pool.shuffle(rng);
    let mut acc = 0.0;
    let mut out = Vec::new();
    for r in pool {
        if acc >= budget - DURATION_EPS * budget.max(1.0) {
            break;
        }
        acc += r.duration;
        out.push(r);
    }
    out
}

fn subset_from(members: &[&NoiseRecord], t: f64, k: TargetK, seed: u64) -> NoiseSubset {
    NoiseSubset {
        record_ids: members.iter().map(|r| r.id.clone()).collect(),
        total_duration: members.iter().map(|r| r.duration).sum(),
        type_labels: members.iter().map(|r| r.type_label.clone()).collect(),
        target_t: t,
        target_k: k,
        seed,
    }
}

/// J_t: shuffled clips accumulated until the duration reaches `t`.
pub fn sample_noise_duration(records: &[NoiseRecord], t: f64, seed: u64) -> Result<NoiseSubset> {
    let total: f64 = records.iter().map(|r| r.duration).sum();
    if !(t > 0.0) {
        return Err(Error::InsufficientNoise(format!("requested duration {t} must be positive")));
    }
    if t > total + DURATION_EPS * total.max(1.0) {
        return Err(Error::InsufficientNoise(format!(
            "requested {t:.3} s but corpus holds {total:.3} s"
        )));
    }
    let mut rng = seed::rng(seed, "noise-duration", &[t.to_bits()]);
    let members = greedy_fill(records.iter().collect(), t, &mut rng);
    Ok(subset_from(&members, t, TargetK::All, seed))
}

/// K_{t,k}: `k` random types, each filled to `t / k` seconds.
pub fn sample_noise_typed(
    records: &[NoiseRecord],
    t: f64,
    k: usize,
    seed: u64,
) -> Result<NoiseSubset> {
    let mut by_type: BTreeMap<&str, Vec<&NoiseRecord>> = BTreeMap::new();
    for r in records {
        by_type.entry(r.type_label.as_str()).or_default().push(r);
    }
    if k == 0 || k > by_type.len() {
        return Err(Error::InsufficientNoise(format!(
            "k = {k} must lie in [1, {}] (noise types)",
            by_type.len()
        )));
    }
    if !(t > 0.0) {
        return Err(Error::InsufficientNoise(format!("requested duration {t} must be positive")));
    }
    let mut rng = seed::rng(seed, "noise-typed", &[t.to_bits(), k as u64]);
    let mut types: Vec<&str> = by_type.keys().copied().collect();
    types.shuffle(&mut rng);
    types.truncate(k);
    let per_type = t / k as f64;
    let mut members = Vec::new();
    for ty in &types {
        let pool = &by_type[ty];
        let avail: f64 = pool.iter().map(|r| r.duration).sum();
        if avail < per_type - DURATION_EPS * per_type.max(1.0) {
            return Err(Error::InsufficientNoise(format!(
                "type {ty} holds {avail:.3} s, needs {per_type:.3} s"
            )));
        }
        members.extend(greedy_fill(pool.clone(), per_type, &mut rng));
    }
    Ok(subset_from(&members, t, TargetK::Count(k), seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Provenance, UtteranceRecord};
    use std::path::PathBuf;

    fn words(n: usize, tag: usize) -> String {
        (0..n).map(|i| format!("w{tag}x{i}")).collect::<Vec<_>>().join(" ")
    }

    fn manifest(spec: &[(&str, usize)]) -> Manifest {
        let recs = spec
            .iter()
            .enumerate()
            .map(|(i, (spk, nw))| UtteranceRecord {
                id: format!("u{i:03}"),
                speaker_id: spk.to_string(),
                language: "en".into(),
                text: words(*nw, i),
                word_count: *nw,
                audio_uri: PathBuf::from("x.wav"),
                sample_rate: 16000,
                duration: 1.0,
                provenance: Provenance::Real,
            })
            .collect();
        Manifest::new(recs, "real").unwrap()
    }

    fn ten_by_ten() -> Manifest {
        let spk: Vec<String> = (0..10).map(|s| format!("spk{s}")).collect();
        let spec: Vec<(&str, usize)> = (0..100).map(|i| (spk[i / 10].as_str(), 4 + i % 5)).collect();
        manifest(&spec)
    }

    #[test]
    fn full_synthetic_mirrors_source() {
        let src = manifest(&[("a", 3); 10]);
        let plan = build_full_synthetic_plan(&src, 1).unwrap();
        assert_eq!(plan.requests.len(), 10);
        assert_eq!(plan.achieved_delta, 0);
        assert_eq!(plan.attribute_tag, "full-synthetic");
        for (q, r) in plan.requests.iter().zip(src.records()) {
            assert_eq!(q.text, r.text);
            assert_eq!(q.prompt_utterance_id, r.id);
        }
        plan.validate(&src).unwrap();
    }

    #[test]
    fn text_variant_degenerate_and_single() {
        let src = ten_by_ten();
        let full = build_text_variant(&src, 100, 3).unwrap();
        assert_eq!(full.achieved_delta, 0);
        assert_eq!(full.distinct_texts(), 100);
        let one = build_text_variant(&src, 1, 3).unwrap();
        assert_eq!(one.distinct_texts(), 1);
        // mean word count is 6, and the first 6-word text is u002
        assert_eq!(one.requests[0].text, src.records()[2].text);
        assert_eq!(one.achieved_delta, 0);
        assert!(build_text_variant(&src, 101, 3).is_err());
        assert!(build_text_variant(&src, 0, 3).is_err());
    }

    #[test]
    fn text_variant_word_budget_error() {
        // one long text among short ones: n = 1 forces a large miss
        let src = manifest(&[("a", 1), ("a", 1), ("a", 50)]);
        assert!(matches!(build_text_variant(&src, 1, 0), Err(Error::WordBudget { .. })));
    }

    /// Exhaustive minimum of |sum(c * w) - target| over compositions c >= 1.
    fn brute_force_best(words: &[usize], m: usize, target: i64) -> i64 {
        fn rec(words: &[usize], left: usize, acc: i64, target: i64, best: &mut i64) {
            if words.len() == 1 {
                let d = acc + (words[0] * left) as i64 - target;
                *best = (*best).min(d.abs());
                return;
            }
            for c in 1..=left - (words.len() - 1) {
                rec(&words[1..], left - c, acc + (words[0] * c) as i64, target, best);
            }
        }
        let mut best = i64::MAX;
        rec(words, m, 0, target, &mut best);
        best
    }

    #[test]
    fn swap_search_beats_uniform_on_small_instance() {
        // m = 20, word counts 3, 5, 7, ..., 41 (W = 440)
        let spec: Vec<(&str, usize)> = (0..20).map(|i| ("a", 3 + 2 * i)).collect();
        let src = manifest(&spec);
        let w = src.stats().total_words as i64;
        assert_eq!(w, 440);
        for n in 2..=5 {
            for seed in 0..5 {
                let mut rng = seed::rng(seed, "text-variant", &[n as u64]);
                let mut pool: Vec<usize> = spec.iter().map(|s| s.1).collect();
                pool.shuffle(&mut rng);
                let chosen = &pool[..n];
                let uniform = uniform_counts(20, n);
                let d_uniform: i64 =
                    chosen.iter().zip(&uniform).map(|(&a, &c)| (a * c) as i64).sum::<i64>() - w;
                let mut counts = uniform.clone();
                let d = swap_search(chosen, &mut counts, w);
                assert!(d.abs() <= d_uniform.abs());
                assert_eq!(counts.iter().sum::<usize>(), 20);
                assert!(counts.iter().all(|&c| c >= 1));
                let best = brute_force_best(chosen, 20, w);
                assert!(d.abs() >= best);
                // local optimum stays within one word-count parity step of
                // the exhaustive optimum on this instance
                assert!(d.abs() <= best + 2, "n={n} seed={seed} chosen={chosen:?}");
            }
        }
    }

    #[test]
    fn language_counts_follow_formula() {
        let src = ten_by_ten();
        let mut banks = BTreeMap::new();
        for l in LANGUAGE_POOL.iter().skip(1) {
            banks.insert(l.to_string(), (0..15).map(|i| words(3 + i % 7, i)).collect());
        }
        for p in 1..=10 {
            let plan = build_language_variant(&src, p, &LANGUAGE_POOL, &banks, 9).unwrap();
            plan.validate(&src).unwrap();
            let c = plan.language_counts();
            assert_eq!(c.len(), p);
            assert_eq!(c["en"], 100 * (11 - p) / 10);
            for l in &LANGUAGE_POOL[1..p] {
                assert_eq!(c[*l], 10);
            }
            assert!(plan.achieved_delta.abs() <= 2, "p={p} dW={}", plan.achieved_delta);
        }
        let small = manifest(&[("a", 3); 15]);
        assert!(build_language_variant(&small, 2, &LANGUAGE_POOL, &banks, 0).is_err());
        assert!(build_language_variant(&src, 11, &LANGUAGE_POOL, &banks, 0).is_err());
        banks.insert("zh".into(), vec![]);
        assert!(build_language_variant(&src, 2, &LANGUAGE_POOL, &banks, 0).is_err());
    }

    #[test]
    fn speaker_variant_modes() {
        let src = ten_by_ten();
        let single = build_speaker_variant(&src, 10, PromptMode::SinglePrompt, 4).unwrap();
        assert_eq!(single.distinct_prompts(), 10);
        assert_eq!(single.distinct_speakers(), 10);
        let mut uses: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &single.requests {
            *uses.entry(&r.prompt_utterance_id).or_default() += 1;
        }
        assert!(uses.values().all(|&u| u == 10));
        single.validate(&src).unwrap();
        let multi = build_speaker_variant(&src, 10, PromptMode::MultiPrompt, 4).unwrap();
        assert_eq!(multi.distinct_prompts(), 100);
        multi.validate(&src).unwrap();
        assert_eq!(multi.attribute_tag, "speaker:s=10:multi");
        // texts are the source texts, unchanged
        assert_eq!(multi.achieved_delta, 0);
        match build_speaker_variant(&src, 3, PromptMode::MultiPrompt, 4) {
            Err(Error::PromptDeficit(v)) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
        assert!(build_speaker_variant(&src, 11, PromptMode::SinglePrompt, 4).is_err());
        // remainder: 100 = 34 + 33 + 33 with the first speaker taking the extra
        let three = build_speaker_variant(&src, 3, PromptMode::SinglePrompt, 4).unwrap();
        let first = &three.requests[0].target_speaker_id;
        assert_eq!(three.requests.iter().filter(|r| &r.target_speaker_id == first).count(), 34);
    }

    fn noise(spec: &[(&str, f64)]) -> Vec<NoiseRecord> {
        spec.iter()
            .enumerate()
            .map(|(i, (ty, d))| NoiseRecord {
                id: format!("n{i:02}"),
                type_label: ty.to_string(),
                duration: *d,
                audio_uri: PathBuf::from("n.wav"),
            })
            .collect()
    }

    #[test]
    fn noise_duration_sampling() {
        let recs = noise(&[("a", 3.0), ("a", 2.5), ("b", 4.0), ("b", 1.5), ("c", 5.0), ("c", 2.0)]);
        let total: f64 = recs.iter().map(|r| r.duration).sum();
        let all = sample_noise_duration(&recs, total, 1).unwrap();
        assert_eq!(all.record_ids.len(), recs.len());
        let max_clip = 5.0;
        for seed in 0..20 {
            let half = sample_noise_duration(&recs, 0.5 * total, seed).unwrap();
            assert!(half.total_duration >= 0.5 * total);
            assert!(half.total_duration - 0.5 * total < max_clip);
            let sum: f64 = half.members(&recs).unwrap().iter().map(|r| r.duration).sum();
            assert_eq!(sum, half.total_duration);
            assert_eq!(half, sample_noise_duration(&recs, 0.5 * total, seed).unwrap());
        }
        assert!(sample_noise_duration(&recs, total + 1.0, 0).is_err());
    }

    #[test]
    fn noise_typed_sampling() {
        let recs = noise(&[
            ("a", 10.0), ("a", 10.0), ("a", 12.0), ("b", 7.0), ("b", 9.0), ("b", 20.0),
        ]);
        let s = sample_noise_typed(&recs, 30.0, 1, 2).unwrap();
        assert_eq!(s.type_labels.len(), 1);
        let s = sample_noise_typed(&recs, 60.0, 2, 2).unwrap();
        assert_eq!(s.type_labels.len(), 2);
        for ty in ["a", "b"] {
            let d: f64 = s
                .members(&recs)
                .unwrap()
                .iter()
                .filter(|r| r.type_label == ty)
                .map(|r| r.duration)
                .sum();
            assert!(d >= 30.0 && d - 30.0 < 20.0, "{ty}: {d}");
        }
        let total: f64 = recs.iter().map(|r| r.duration).sum();
        // type a holds exactly 32 s
        let full = sample_noise_typed(&recs, 64.0, 2, 0).unwrap();
        assert_eq!(full.type_labels.len(), 2);
        assert!(full.total_duration <= total);
        match sample_noise_typed(&recs, 70.0, 2, 0) {
            Err(Error::InsufficientNoise(m)) => assert!(m.contains("type a")),
            other => panic!("{other:?}"),
        }
        assert!(sample_noise_typed(&recs, 10.0, 3, 0).is_err());
    }

    #[test]
    fn target_k_json() {
        assert_eq!(serde_json::to_string(&TargetK::All).unwrap(), "\"all\"");
        assert_eq!(serde_json::to_string(&TargetK::Count(3)).unwrap(), "3");
        let k: TargetK = serde_json::from_str("3").unwrap();
        assert_eq!(k, TargetK::Count(3));
    }

    #[test]
    fn plan_jsonl_round_trip() {
        let src = ten_by_ten();
        let plan = build_speaker_variant(&src, 4, PromptMode::SinglePrompt, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plan.jsonl");
        plan.write_jsonl(&p).unwrap();
        assert_eq!(GenerationPlan::read_jsonl(&p).unwrap(), plan);
        let first = std::fs::read_to_string(&p).unwrap();
        let header: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        assert_eq!(header["attribute_tag"], "speaker:s=4:single");
    }

    proptest::proptest! {
        #[test]
        fn text_variant_holds_budget(n in 1usize..=100, seed in 0u64..500) {
            let src = ten_by_ten();
            // an infeasible draw needs every text on one side of the mean, 40 texts each
            let plan = match build_text_variant(&src, n, seed) {
                Ok(p) => p,
                Err(Error::WordBudget { .. }) if n <= 40 => return Ok(()),
                Err(e) => return Err(proptest::test_runner::TestCaseError::fail(e.to_string())),
            };
            proptest::prop_assert_eq!(plan.requests.len(), src.m());
            proptest::prop_assert_eq!(plan.distinct_texts(), n);
            let words: i64 = plan.requests.iter().map(|q| count_words(&q.text) as i64).sum();
            proptest::prop_assert_eq!(words - plan.word_budget, plan.achieved_delta);
            proptest::prop_assert!(plan.achieved_delta.abs() as f64 <= WORD_TOLERANCE * plan.word_budget as f64);
            plan.validate(&src).unwrap();
        }
    }
}
