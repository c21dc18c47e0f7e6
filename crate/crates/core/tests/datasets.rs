//! Dataset generation, manifests and the feature codec on disk.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use common::tiny_synth;
use drn_core::data::{
    gen_synthetic, load_dataset, queried_word, signature_oracle, signatures, synthesize, synthesize_dataset,
    write_features, write_manifest, Manifest, ManifestSample, Split, SynthConfig, MANIFEST,
};
use drn_core::eval::recall_at;
use drn_core::heads::TemporalBox;
use drn_core::tensor::Tensor;

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn written_dataset_reads_back_identically() {
    let cfg = tiny_synth();
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_synthetic(&cfg, dir.path()).unwrap();
    assert_eq!(manifest.samples.len(), 40);
    let loaded = load_dataset(&dir.path().join(MANIFEST)).unwrap();
    let direct = synthesize_dataset(&cfg).unwrap();
    assert_eq!(loaded.vocabulary, direct.vocabulary);
    assert_eq!(loaded.samples, direct.samples);
    assert_eq!(loaded.split(Split::Val).len(), 8);
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let cfg = tiny_synth();
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_synthetic(&cfg, a.path()).unwrap();
    gen_synthetic(&cfg, b.path()).unwrap();
    gen_synthetic(&SynthConfig { seed: 4, ..cfg }, c.path()).unwrap();
    let (ta, tb, tc) = (read_tree(a.path()), read_tree(b.path()), read_tree(c.path()));
    assert_eq!(ta.len(), 41);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn generated_samples_are_well_formed() {
    let cfg = SynthConfig {
        train: 300,
        val: 0,
        test: 0,
        ..SynthConfig::default()
    };
    let mut temporal = 0;
    for (_, _, s) in synthesize(&cfg).unwrap() {
        let (a, b) = s.gt;
        assert!(a < b && b <= cfg.segments);
        let w = queried_word(&s.tokens).unwrap();
        assert!(s.tokens.contains(&format!("event{w:02}")));
        assert!(s.events.iter().any(|e| e.word == w && (e.start, e.end) == s.gt));
        let mut spans: Vec<(usize, usize)> = s.events.iter().map(|e| (e.start, e.end)).collect();
        spans.sort_unstable();
        assert!(spans.windows(2).all(|p| p[0].1 <= p[1].0), "overlapping events");
        assert!(spans.last().unwrap().1 <= cfg.segments);
        if s.tokens.iter().any(|t| t == "before" || t == "after") {
            temporal += 1;
            let occurrences: Vec<_> = s.events.iter().filter(|e| e.word == w).collect();
            assert_eq!(occurrences.len(), 2);
            let other = s.events.iter().find(|e| e.word != w).unwrap();
            let after = s.tokens.iter().any(|t| t == "after");
            let gt_start = s.gt.0;
            assert_eq!(after, gt_start > other.start);
        }
    }
    assert!((45..=105).contains(&temporal), "{temporal} temporal queries of 300");
}

#[test]
fn seconds_are_rescaled_to_segments() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("features")).unwrap();
    write_features(&dir.path().join("features/a.drnf"), &Tensor::zeros(&[32, 4])).unwrap();
    let manifest = Manifest {
        segments: 32,
        feature_dim: 4,
        vocabulary: vec!["find".into(), "event00".into()],
        samples: vec![ManifestSample {
            id: "a".into(),
            split: Split::Test,
            feature_file: "features/a.drnf".into(),
            duration: 64.0,
            tokens: vec!["find".into(), "event00".into()],
            gt: [16.0, 32.0],
        }],
    };
    let path = dir.path().join(MANIFEST);
    write_manifest(&path, &manifest).unwrap();
    let ds = load_dataset(&path).unwrap();
    assert_eq!(ds.samples[0].gt, TemporalBox::new(8.0, 16.0));
    assert_eq!(ds.samples[0].tokens, vec![0, 1]);

    let mut bad = manifest.clone();
    bad.samples[0].tokens.push("zebra".into());
    write_manifest(&path, &bad).unwrap();
    assert!(load_dataset(&path).unwrap_err().to_string().contains("unknown token `zebra`"));

    let mut bad = manifest.clone();
    bad.samples[0].gt = [16.0, 80.0];
    write_manifest(&path, &bad).unwrap();
    assert!(load_dataset(&path).is_err());

    fs::write(&path, "{\"segments\": 32, \"extra\": 1}").unwrap();
    assert!(load_dataset(&path).is_err());
}

#[test]
fn truncated_feature_file_is_named() {
    let cfg = tiny_synth();
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_synthetic(&cfg, dir.path()).unwrap();
    let victim = dir.path().join(&manifest.samples[3].feature_file);
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() - 7]).unwrap();
    let err = load_dataset(&dir.path().join(MANIFEST)).unwrap_err().to_string();
    let expected = 16 + 4 * cfg.segments * cfg.feature_dim;
    assert!(err.contains(&manifest.samples[3].feature_file), "{err}");
    assert!(err.contains(&format!("expected {expected} bytes")), "{err}");
}

/// Oracle recall at (1, 0.5) over generated samples matching `keep`.
fn oracle_recall(cfg: &SynthConfig, keep: impl Fn(bool) -> bool) -> (f64, usize) {
    let sigs = signatures(cfg);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (_, _, s) in synthesize(cfg).unwrap() {
        let temporal = s.tokens.iter().any(|t| t == "before" || t == "after");
        if !keep(temporal) {
            continue;
        }
        let w = queried_word(&s.tokens).unwrap();
        preds.push(vec![signature_oracle(&s.features, &sigs[w])]);
        gts.push(TemporalBox::new(s.gt.0 as f32, s.gt.1 as f32));
    }
    (recall_at(&preds, &gts, 1, 0.5).unwrap(), gts.len())
}

#[test]
fn signature_oracle_solves_noiseless_plain_queries() {
    let cfg = SynthConfig {
        noise_std: 0.0,
        ..SynthConfig::default()
    };
    let (r, n) = oracle_recall(&cfg, |t| !t);
    assert!(n > 2000);
    assert_eq!(r, 100.0);
}

#[test]
fn signature_oracle_is_near_chance_on_temporal_queries() {
    let cfg = SynthConfig {
        noise_std: 0.0,
        temporal_fraction: 1.0,
        train: 600,
        val: 0,
        test: 0,
        ..SynthConfig::default()
    };
    // Two occurrences of the named word; position alone picks the right one.
    let (r, n) = oracle_recall(&cfg, |t| t);
    assert_eq!(n, 600);
    assert!((40.0..=60.0).contains(&r), "oracle recall {r} on temporal queries");
}
