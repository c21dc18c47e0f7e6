//! Synthetic grounding datasets, the DRNF feature codec and manifests.
//!
//! A dataset directory holds `manifest.json` plus one `.drnf` feature file per
//! sample under `features/`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalSample;
use crate::heads::TemporalBox;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"DRNF";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// Temporal connectives; queries using `before` or `after` need positions.
pub const TEMPORAL_WORDS: [&str; 4] = ["before", "after", "while", "then"];
const TEMPLATE_WORDS: [&str; 6] = ["find", "the", "moment", "when", "someone", "does"];

pub fn encode_features(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() != 2 {
        return Err(Error::Invalid(format!("features must be [K, c], got {:?}", t.shape())));
    }
    let mut out = Vec::with_capacity(16 + 4 * t.numel());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape()[0] as u32).to_le_bytes());
    out.extend_from_slice(&(t.shape()[1] as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 16 {
        return Err(Error::codec(path, format!("truncated header: {} of 16 bytes", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::codec(path, "bad magic, expected DRNF"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::codec(
            path,
            format!("unsupported version {version}, expected {FEATURE_VERSION}"),
        ));
    }
    let (k, c) = (word(8) as usize, word(12) as usize);
    let expected = 16 + 4 * k * c;
    if bytes.len() != expected {
        return Err(Error::codec(
            path,
            format!("expected {expected} bytes for K={k}, c={c}, found {}", bytes.len()),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![k, c], data).map_err(|e| Error::codec(path, e.to_string()))
}

pub fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_features(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub id: String,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub feature_file: String,
    pub duration: f32,
    pub tokens: Vec<String>,
    /// Ground truth in seconds.
    pub gt: [f32; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub segments: usize,
    pub feature_dim: usize,
    pub vocabulary: Vec<String>,
    pub samples: Vec<ManifestSample>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for s in &self.samples {
            if !ids.insert(&s.id) {
                return Err(Error::Invalid(format!("duplicate sample id `{}`", s.id)));
            }
            let [a, b] = s.gt;
            if !(0.0 <= a && a < b && b <= s.duration) {
                return Err(Error::Invalid(format!(
                    "sample `{}`: gt ({a}, {b}) outside duration {}",
                    s.id, s.duration
                )));
            }
            if s.tokens.is_empty() {
                return Err(Error::Invalid(format!("sample `{}` has an empty query", s.id)));
            }
        }
        Ok(())
    }
}

/// An in-memory sample with ground truth in segment time.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub features: Tensor,
    pub tokens: Vec<u32>,
    pub gt: TemporalBox,
    pub duration: f32,
    /// Query uses "before" or "after".
    pub temporal: bool,
}

impl EvalSample for Sample {
    fn id(&self) -> &str {
        &self.id
    }
    fn features(&self) -> &Tensor {
        &self.features
    }
    fn tokens(&self) -> &[u32] {
        &self.tokens
    }
    fn gt(&self) -> TemporalBox {
        self.gt
    }
    fn duration(&self) -> f32 {
        self.duration
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub segments: usize,
    pub feature_dim: usize,
    pub vocabulary: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }
}

/// Seconds to segment time, `(sec * K) / duration`.
pub fn to_segments(seconds: f32, duration: f32, segments: usize) -> f32 {
    seconds * segments as f32 / duration
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: manifest_path.to_path_buf(),
        source: e,
    })?;
    manifest.validate()?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let vocab: std::collections::HashMap<&str, u32> = manifest
        .vocabulary
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i as u32))
        .collect();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let path = root.join(&s.feature_file);
        let features = read_features(&path)?;
        if features.shape() != [manifest.segments, manifest.feature_dim] {
            return Err(Error::codec(
                &path,
                format!(
                    "features {:?}, manifest declares [{}, {}]",
                    features.shape(),
                    manifest.segments,
                    manifest.feature_dim
                ),
            ));
        }
        let tokens = s
            .tokens
            .iter()
            .map(|w| {
                vocab.get(w.as_str()).copied().ok_or_else(|| {
                    Error::Invalid(format!("sample `{}`: unknown token `{w}`", s.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let temporal = is_temporal(&s.tokens);
        let k = manifest.segments;
        samples.push(Sample {
            id: s.id.clone(),
            split: s.split,
            features,
            tokens,
            gt: TemporalBox::new(to_segments(s.gt[0], s.duration, k), to_segments(s.gt[1], s.duration, k)),
            duration: s.duration,
            temporal,
        });
    }
    Ok(Dataset {
        segments: manifest.segments,
        feature_dim: manifest.feature_dim,
        vocabulary: manifest.vocabulary,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub segments: usize,
    pub feature_dim: usize,
    pub event_words: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub min_event_len: usize,
    pub max_event_len: usize,
    pub noise_std: f32,
    /// Share of queries of the form "A before/after B".
    pub temporal_fraction: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train: 2000,
            val: 500,
            test: 500,
            segments: 32,
            feature_dim: 64,
            event_words: 20,
            min_events: 1,
            max_events: 3,
            min_event_len: 3,
            max_event_len: 10,
            noise_std: 1.0,
            temporal_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.segments == 0 || self.feature_dim == 0 {
            return bad("segments and feature_dim must be positive".into());
        }
        if self.event_words < 2 {
            return bad("need at least 2 event words".into());
        }
        if self.min_events == 0 || self.min_events > self.max_events {
            return bad(format!("bad event count range {}..={}", self.min_events, self.max_events));
        }
        if self.min_event_len == 0 || self.min_event_len > self.max_event_len {
            return bad(format!(
                "bad event length range {}..={}",
                self.min_event_len, self.max_event_len
            ));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 || !(0.0..=1.0).contains(&self.temporal_fraction) {
            return bad("noise_std must be >= 0 and temporal_fraction in [0, 1]".into());
        }
        // Temporal queries place three events; plain ones up to max_events.
        let most = if self.temporal_fraction > 0.0 {
            self.max_events.max(3)
        } else {
            self.max_events
        };
        if most * self.min_event_len > self.segments {
            return bad(format!(
                "{most} events of length >= {} cannot fit in {} segments",
                self.min_event_len, self.segments
            ));
        }
        if self.train + self.val + self.test == 0 {
            return bad("dataset would be empty".into());
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        v.extend(TEMPORAL_WORDS.iter().map(|s| s.to_string()));
        v.extend((0..self.event_words).map(|i| format!("event{i:02}")));
        v
    }
}

/// Per-word feature directions, unit-variance entries.
pub fn signatures(cfg: &SynthConfig) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    (0..cfg.event_words)
        .map(|_| (0..cfg.feature_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// A placed event: word index and half-open segment interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub word: usize,
    pub start: usize,
    pub end: usize,
}

/// One generated video-query pair before serialization.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub events: Vec<Event>,
    pub tokens: Vec<String>,
    pub gt: (usize, usize),
    pub features: Tensor,
    pub duration: f32,
}

/// Non-overlapping intervals with the given lengths, in order, with random gaps.
fn place(rng: &mut ChaCha8Rng, lens: &[usize], k: usize) -> Vec<(usize, usize)> {
    let slack = k - lens.iter().sum::<usize>();
    // Split the slack into len+1 gaps by sorted cut points.
    let mut cuts: Vec<usize> = (0..lens.len()).map(|_| rng.gen_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(lens.len());
    let mut pos = 0;
    let mut prev = 0;
    for (&len, &cut) in lens.iter().zip(&cuts) {
        pos += cut - prev;
        prev = cut;
        out.push((pos, pos + len));
        pos += len;
    }
    out
}

pub fn synth_sample(cfg: &SynthConfig, sigs: &[Vec<f32>], rng: &mut ChaCha8Rng) -> SynthSample {
    let k = cfg.segments;
    let temporal = rng.gen::<f32>() < cfg.temporal_fraction;
    let mut words: Vec<usize> = (0..cfg.event_words).collect();
    words.shuffle(rng);
    let (events, tokens, gt_event) = if temporal {
        let (a, b) = (words[0], words[1]);
        let lens: Vec<usize> = (0..3).map(|_| rng.gen_range(cfg.min_event_len..=cfg.max_event_len)).collect();
        let lens = shrink_to_fit(lens, k, cfg.min_event_len);
        let spans = place(rng, &lens, k);
        let events: Vec<Event> = [a, b, a]
            .iter()
            .zip(&spans)
            .map(|(&word, &(start, end))| Event { word, start, end })
            .collect();
        let after = rng.gen::<bool>();
        let connective = if after { "after" } else { "before" };
        let tokens = vec![
            "find".to_string(),
            format!("event{a:02}"),
            connective.to_string(),
            format!("event{b:02}"),
        ];
        (events, tokens, if after { 2 } else { 0 })
    } else {
        let n = rng.gen_range(cfg.min_events..=cfg.max_events);
        let lens: Vec<usize> = (0..n).map(|_| rng.gen_range(cfg.min_event_len..=cfg.max_event_len)).collect();
        let lens = shrink_to_fit(lens, k, cfg.min_event_len);
        let spans = place(rng, &lens, k);
        let events: Vec<Event> = spans
            .iter()
            .zip(&words)
            .map(|(&(start, end), &word)| Event { word, start, end })
            .collect();
        let target = rng.gen_range(0..n);
        let w = format!("event{:02}", events[target].word);
        let tokens = match rng.gen_range(0..3) {
            0 => vec!["find".to_string(), "the".to_string(), w],
            1 => vec!["when".to_string(), "does".to_string(), w],
            _ => vec!["the".to_string(), "moment".to_string(), "someone".to_string(), w],
        };
        (events, tokens, target)
    };
    let c = cfg.feature_dim;
    let mut data = vec![0f32; k * c];
    if cfg.noise_std > 0.0 {
        for v in &mut data {
            let z: f32 = StandardNormal.sample(rng);
            *v = cfg.noise_std * z;
        }
    }
    for e in &events {
        for t in e.start..e.end {
            for (v, s) in data[t * c..(t + 1) * c].iter_mut().zip(&sigs[e.word]) {
                *v += s;
            }
        }
    }
    let seconds_per_segment = rng.gen_range(1..=4) as f32;
    let g = events[gt_event];
    SynthSample {
        events,
        tokens,
        gt: (g.start, g.end),
        features: Tensor::from_parts(vec![k, c], data),
        duration: seconds_per_segment * k as f32,
    }
}

/// Trims random lengths so their sum fits in `k`.
fn shrink_to_fit(mut lens: Vec<usize>, k: usize, min: usize) -> Vec<usize> {
    let mut i = 0;
    while lens.iter().sum::<usize>() > k {
        if lens[i] > min {
            lens[i] -= 1;
        }
        i = (i + 1) % lens.len();
    }
    lens
}

/// Generated samples with their split and id, in file order.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<(Split, String, SynthSample)>> {
    cfg.validate()?;
    let sigs = signatures(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let splits = [(Split::Train, cfg.train), (Split::Val, cfg.val), (Split::Test, cfg.test)];
    let mut out = Vec::with_capacity(cfg.train + cfg.val + cfg.test);
    for (split, n) in splits {
        for i in 0..n {
            let s = synth_sample(cfg, &sigs, &mut rng);
            out.push((split, format!("{}-{i:05}", split_name(split)), s));
        }
    }
    Ok(out)
}

fn manifest_entry(split: Split, id: &str, s: &SynthSample, segments: usize) -> ManifestSample {
    let sps = s.duration / segments as f32;
    ManifestSample {
        id: id.to_string(),
        split,
        feature_file: format!("features/{id}.drnf"),
        duration: s.duration,
        tokens: s.tokens.clone(),
        gt: [s.gt.0 as f32 * sps, s.gt.1 as f32 * sps],
    }
}

/// Generates a dataset directory and returns its manifest.
pub fn gen_synthetic(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    let generated = synthesize(cfg)?;
    let feat_dir = out.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut samples = Vec::with_capacity(generated.len());
    for (split, id, s) in &generated {
        let entry = manifest_entry(*split, id, s, cfg.segments);
        write_features(&out.join(&entry.feature_file), &s.features)?;
        samples.push(entry);
    }
    let manifest = Manifest {
        segments: cfg.segments,
        feature_dim: cfg.feature_dim,
        vocabulary: cfg.vocabulary(),
        samples,
    };
    write_manifest(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// The dataset [`gen_synthetic`] would write, as [`load_dataset`] would read
/// it, without touching the filesystem.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let generated = synthesize(cfg)?;
    let vocabulary = cfg.vocabulary();
    let index: std::collections::HashMap<&str, u32> =
        vocabulary.iter().enumerate().map(|(i, w)| (w.as_str(), i as u32)).collect();
    let k = cfg.segments;
    let samples = generated
        .into_iter()
        .map(|(split, id, s)| {
            let e = manifest_entry(split, &id, &s, k);
            Sample {
                id,
                split,
                tokens: e.tokens.iter().map(|w| index[w.as_str()]).collect(),
                gt: TemporalBox::new(to_segments(e.gt[0], e.duration, k), to_segments(e.gt[1], e.duration, k)),
                duration: e.duration,
                temporal: is_temporal(&e.tokens),
                features: s.features,
            }
        })
        .collect();
    Ok(Dataset {
        segments: k,
        feature_dim: cfg.feature_dim,
        vocabulary,
        samples,
    })
}

fn is_temporal(tokens: &[String]) -> bool {
    tokens.iter().any(|w| w == "before" || w == "after")
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Resolves a dataset argument that may name the directory or the manifest.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST)
    } else {
        p.to_path_buf()
    }
}

/// Non-learned baseline: the contiguous run maximizing
/// `Σ (f_t · s / |s|² - 0.5)` for the queried word's signature `s`.
pub fn signature_oracle(features: &Tensor, signature: &[f32]) -> TemporalBox {
    let norm2: f64 = signature.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
    let k = features.shape()[0];
    let score: Vec<f64> = (0..k)
        .map(|t| {
            let dot: f64 = features
                .row(t)
                .iter()
                .zip(signature)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            dot / norm2 - 0.5
        })
        .collect();
    let (mut best, mut best_span) = (f64::NEG_INFINITY, (0, 1));
    let (mut run, mut start) = (0.0, 0);
    for (t, &v) in score.iter().enumerate() {
        if run <= 0.0 {
            run = 0.0;
            start = t;
        }
        run += v;
        if run > best {
            best = run;
            best_span = (start, t + 1);
        }
    }
    TemporalBox::new(best_span.0 as f32, best_span.1 as f32)
}

/// The event word a query names first.
pub fn queried_word(tokens: &[String]) -> Option<usize> {
    tokens
        .iter()
        .find_map(|w| w.strip_prefix("event").and_then(|n| n.parse().ok()))
}
