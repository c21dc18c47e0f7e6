//! Stage freezing, determinism, checkpoint round trips and resumption on a
//! tiny synthetic task.

mod common;

use common::{tiny, tiny_train, Tiny};
use drn_core::checkpoint;
use drn_core::heads::QualityMode;
use drn_core::model::{Model, ModelConfig};
use drn_core::params::{ParamGroup, ParamStore};
use drn_core::parallel::Parallelism;
use drn_core::train::{train_three_step, Losses, TrainConfig, TrainState, Trainer};
use drn_core::{Error, Tensor};

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Indices of entries whose values differ bitwise between two stores.
fn changed(a: &ParamStore, b: &ParamStore) -> Vec<usize> {
    (0..a.len())
        .filter(|&i| bits(a.get_by_index(i)) != bits(b.get_by_index(i)))
        .collect()
}

fn run_steps(t: &Tiny, cfg: &ModelConfig, tc: &TrainConfig, seed: u64, steps: usize) -> (Vec<Losses>, ParamStore) {
    let (model, store) = Model::new(cfg.clone(), seed).unwrap();
    let mut trainer = Trainer::new(&model, tc, &t.train, TrainState::new(store, tc, seed)).unwrap();
    let losses = (0..steps).map(|_| trainer.step().unwrap().unwrap().losses).collect();
    (losses, trainer.state.params)
}

fn loss_bits(l: &[Losses]) -> Vec<[u32; 4]> {
    l.iter()
        .map(|l| [l.loc.to_bits(), l.matching.to_bits(), l.quality.to_bits(), l.total.to_bits()])
        .collect()
}

#[test]
fn freezing_holds_at_every_step() {
    let t = tiny();
    for (quality, bn) in [(QualityMode::Iou, false), (QualityMode::Centerness, false), (QualityMode::Iou, true)] {
        let mut cfg = t.model.clone();
        cfg.quality = quality;
        cfg.interaction.batch_norm = bn;
        let tc = tiny_train();
        let (model, store) = Model::new(cfg, 1).unwrap();
        let groups: Vec<ParamGroup> = store.entries().iter().map(|e| e.group).collect();
        let mut trainer = Trainer::new(&model, &tc, &t.train, TrainState::new(store, &tc, 1)).unwrap();
        let mut steps = [0usize; 3];
        loop {
            let before = trainer.state.params.clone();
            let Some(r) = trainer.step().unwrap() else { break };
            let moved = changed(&before, &trainer.state.params);
            let frozen_moved: Vec<usize> = match r.stage {
                1 => moved.iter().copied().filter(|&i| groups[i] == ParamGroup::Quality).collect(),
                2 => moved.iter().copied().filter(|&i| groups[i] != ParamGroup::Quality).collect(),
                _ => Vec::new(),
            };
            assert!(
                frozen_moved.is_empty(),
                "{quality:?} bn={bn}: stage {} step changed frozen entries {frozen_moved:?}",
                r.stage
            );
            assert!(!moved.is_empty(), "stage {} step changed nothing", r.stage);
            steps[r.stage as usize - 1] += 1;
        }
        assert_eq!(steps, [6, 6, 6]);
    }
}

#[test]
fn ten_step_losses_are_reproducible() {
    let t = tiny();
    let tc = tiny_train();
    let (a, pa) = run_steps(&t, &t.model, &tc, 7, 10);
    let (b, pb) = run_steps(&t, &t.model, &tc, 7, 10);
    assert_eq!(loss_bits(&a), loss_bits(&b));
    assert!(changed(&pa, &pb).is_empty());
    let seq = TrainConfig {
        parallelism: Parallelism::Sequential,
        ..tc.clone()
    };
    let (c, pc) = run_steps(&t, &t.model, &seq, 7, 10);
    assert_eq!(loss_bits(&a), loss_bits(&c));
    assert!(changed(&pa, &pc).is_empty());
    let (d, _) = run_steps(&t, &t.model, &tc, 8, 10);
    assert_ne!(loss_bits(&a), loss_bits(&d));
}

#[test]
fn zero_epochs_keep_initialization() {
    let t = tiny();
    let tc = TrainConfig {
        epochs: [0, 0, 0],
        ..tiny_train()
    };
    let (model, store) = Model::new(t.model.clone(), 2).unwrap();
    let mut stages = Vec::new();
    let (state, log) = train_three_step(&model, store.clone(), &t.train, &t.val, &tc, 2, |s, _| {
        stages.push(s);
        Ok(())
    })
    .unwrap();
    assert!(changed(&store, &state.params).is_empty());
    assert!(log.is_empty());
    assert_eq!(state.global_step, 0);
}

#[test]
fn stage_two_alone_moves_only_the_quality_group() {
    let t = tiny();
    let tc = TrainConfig {
        epochs: [0, 1, 0],
        ..tiny_train()
    };
    let (model, store) = Model::new(t.model.clone(), 3).unwrap();
    let (state, log) = train_three_step(&model, store.clone(), &t.train, &t.val, &tc, 3, |_, _| Ok(())).unwrap();
    let moved = changed(&store, &state.params);
    let quality: Vec<usize> = (0..store.len())
        .filter(|&i| store.entries()[i].group == ParamGroup::Quality)
        .collect();
    assert_eq!(moved, quality);
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].stage, 2);
}

#[test]
fn every_stage_end_reports_its_state() {
    let t = tiny();
    let tc = tiny_train();
    let (model, store) = Model::new(t.model.clone(), 4).unwrap();
    let mut seen = Vec::new();
    let (state, log) = train_three_step(&model, store, &t.train, &t.val, &tc, 4, |s, st| {
        seen.push((s, st.global_step));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![(1, 6), (2, 12), (3, 18)]);
    assert_eq!(state.stage, 4);
    assert_eq!(log.len(), 6);
    // Without a quality head the second stage is skipped.
    let mut cfg = t.model.clone();
    cfg.quality = QualityMode::None;
    let (model, store) = Model::new(cfg, 4).unwrap();
    let mut seen = Vec::new();
    train_three_step(&model, store, &t.train, &t.val, &tc, 4, |s, _| {
        seen.push(s);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![1, 3]);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let t = tiny();
    let tc = tiny_train();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.drnc");
    let (model, store) = Model::new(t.model.clone(), 5).unwrap();
    let template = store.clone();

    // Runs into stage 2 so the checkpoint carries nontrivial Adam moments.
    let mut straight = Trainer::new(&model, &tc, &t.train, TrainState::new(store, &tc, 5)).unwrap();
    for _ in 0..8 {
        straight.step().unwrap();
    }
    checkpoint::save(&path, &straight.state, &model.cfg).unwrap();
    let loaded = checkpoint::load(&path, &template, &model.cfg).unwrap();
    assert!(changed(&loaded.params, &straight.state.params).is_empty());
    assert_eq!((loaded.stage, loaded.stage_step, loaded.global_step), (2, 2, 8));
    assert_eq!(checkpoint::encode(&loaded, &model.cfg), std::fs::read(&path).unwrap());

    let mut resumed = Trainer::new(&model, &tc, &t.train, loaded).unwrap();
    loop {
        let a = straight.step().unwrap();
        let b = resumed.step().unwrap();
        match (a, b) {
            (Some(a), Some(b)) => assert_eq!(loss_bits(&[a.losses]), loss_bits(&[b.losses])),
            (None, None) => break,
            _ => panic!("runs finished at different steps"),
        }
    }
    assert!(changed(&straight.state.params, &resumed.state.params).is_empty());
}

#[test]
fn checkpoint_for_another_config_names_the_tensor() {
    let t = tiny();
    let tc = tiny_train();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.drnc");
    let (model, store) = Model::new(t.model.clone(), 6).unwrap();
    checkpoint::save(&path, &TrainState::new(store, &tc, 6), &model.cfg).unwrap();

    let mut wider = t.model.clone();
    wider.interaction.channels = 12;
    let (_, other) = Model::new(wider.clone(), 6).unwrap();
    match checkpoint::load(&path, &other, &wider) {
        Err(Error::CheckpointShape { name, found, expected }) => {
            assert!(!name.is_empty());
            assert_ne!(found, expected);
        }
        other => panic!("expected a shape error, got {other:?}"),
    }

    // Same shapes, different flags: rejected by the config digest.
    let mut flagged = t.model.clone();
    flagged.interaction.fusion = drn_core::interaction::FusionMode::Same;
    let (_, same_shapes) = Model::new(flagged.clone(), 6).unwrap();
    let err = checkpoint::load(&path, &same_shapes, &flagged).unwrap_err().to_string();
    assert!(err.contains("c.drnc") && err.contains("different model config"), "{err}");
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let t = tiny();
    let tc = tiny_train();
    let (model, store) = Model::new(t.model.clone(), 9).unwrap();
    let bytes = checkpoint::encode(&TrainState::new(store.clone(), &tc, 9), &model.cfg);
    let p = std::path::Path::new("x.drnc");
    let err = |b: &[u8]| checkpoint::decode(b, p, &store, &model.cfg).unwrap_err().to_string();

    let mut bad = bytes.clone();
    bad[0] = b'Z';
    assert!(err(&bad).contains("magic"));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(err(&bad).contains("version 2"));
    assert!(err(&bytes[..bytes.len() - 5]).contains("truncated"));
    let mut long = bytes.clone();
    long.push(0);
    assert!(err(&long).contains("trailing"));
    let missing = checkpoint::load(std::path::Path::new("/nonexistent/c.drnc"), &store, &model.cfg);
    assert!(matches!(missing, Err(Error::Io { .. })));
}
