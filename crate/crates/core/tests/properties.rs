//! Randomized invariants of geometry, metrics, selection and codecs, each
//! checked against an independent recomputation.

use std::path::Path;

use drn_core::checkpoint;
use drn_core::data::{decode_features, encode_features};
use drn_core::eval::{decode_candidates, recall_at, top_n, Candidate};
use drn_core::heads::{assign_targets, decode, tiou, QualityMode, TemporalBox};
use drn_core::interaction::pyramid_geometry;
use drn_core::model::{DensePrediction, Model, ModelConfig};
use drn_core::tensor::Tensor;
use drn_core::train::{select_positives, Sampling, TrainConfig, TrainState};
use drn_core::Tape;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Overlap measured by counting cells of a uniform grid over `[0, span]`.
fn grid_tiou(a: TemporalBox, b: TemporalBox, span: f64, cells: usize) -> f64 {
    let h = span / cells as f64;
    let inside = |bx: TemporalBox, x: f64| f64::from(bx.start) <= x && x < f64::from(bx.end);
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..cells {
        let x = (i as f64 + 0.5) * h;
        let (ia, ib) = (inside(a, x), inside(b, x));
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn interval(k: f32) -> impl Strategy<Value = TemporalBox> {
    (0.0..k, 0.0..k).prop_map(|(a, b)| TemporalBox::new(a.min(b), a.max(b)))
}

fn pyramid() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=3, 1usize..=8).prop_map(|(levels, mult)| ((1 << (levels - 1)) * mult * 2, levels))
}

/// Hits counted directly from the definition, one sample at a time.
fn brute_recall(preds: &[Vec<TemporalBox>], gts: &[TemporalBox], n: usize, m: f32) -> f64 {
    let mut hits = 0;
    for i in 0..gts.len() {
        let mut hit = false;
        for (j, p) in preds[i].iter().enumerate() {
            if j < n && tiou(*p, gts[i]) > m {
                hit = true;
            }
        }
        if hit {
            hits += 1;
        }
    }
    100.0 * hits as f64 / gts.len() as f64
}

fn prediction_sets() -> impl Strategy<Value = (Vec<Vec<TemporalBox>>, Vec<TemporalBox>)> {
    (1usize..20).prop_flat_map(|samples| {
        (
            prop::collection::vec(prop::collection::vec(interval(16.0), 1..8), samples),
            prop::collection::vec(interval(16.0), samples),
        )
    })
}

fn candidates() -> impl Strategy<Value = Vec<Candidate>> {
    prop::collection::vec((interval(16.0), 0.0f32..1.0), 1..30).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(index, (bx, score))| Candidate {
                bx,
                score,
                level: 0,
                index,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn tiou_matches_grid_oracle(a in interval(32.0), b in interval(32.0)) {
        let exact = f64::from(tiou(a, b));
        let grid = grid_tiou(a, b, 32.0, 64_000);
        prop_assert!((exact - grid).abs() < 2e-3, "closed form {exact}, grid {grid}");
        prop_assert_eq!(tiou(a, b), tiou(b, a));
        prop_assert!((0.0..=1.0).contains(&exact));
    }

    #[test]
    fn decode_inverts_assignment((k, levels) in pyramid(), s in 0.0f32..1.0, e in 0.0f32..1.0) {
        let kf = k as f32;
        let (lo, hi) = (s.min(e) * kf, s.max(e) * kf);
        prop_assume!(hi - lo > 1e-3);
        let gt = TemporalBox::new(lo, hi);
        let geo = pyramid_geometry(k, levels);
        let t = assign_targets(&geo, gt).unwrap();
        prop_assert_eq!(t.len(), geo.iter().map(|g| g.len).sum::<usize>());
        for i in 0..t.len() {
            let x = t.timeline[i];
            prop_assert_eq!(t.positive[i], lo < x && x < hi);
            if t.positive[i] {
                let b = decode(x, t.dist[i][0], t.dist[i][1], kf);
                prop_assert!((b.start - gt.start).abs() <= 1e-5, "{:?} vs {:?}", b, gt);
                prop_assert!((b.end - gt.end).abs() <= 1e-5, "{:?} vs {:?}", b, gt);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn recall_matches_brute_force((preds, gts) in prediction_sets(), n in 1usize..6, m in 0.0f32..1.0) {
        prop_assert_eq!(recall_at(&preds, &gts, n, m).unwrap(), brute_recall(&preds, &gts, n, m));
    }

    #[test]
    fn recall_is_monotone((preds, gts) in prediction_sets()) {
        let ms = [0.1f32, 0.3, 0.5, 0.7, 0.9];
        for n in 1..6 {
            for (j, &m) in ms.iter().enumerate() {
                let r = recall_at(&preds, &gts, n, m).unwrap();
                prop_assert!(recall_at(&preds, &gts, n + 1, m).unwrap() >= r);
                if let Some(&m2) = ms.get(j + 1) {
                    prop_assert!(recall_at(&preds, &gts, n, m2).unwrap() <= r);
                }
            }
        }
    }

    #[test]
    fn exact_predictions_recall_everything(gts in prop::collection::vec(interval(16.0), 1..20)) {
        prop_assume!(gts.iter().all(|g| g.len() > 0.0));
        let preds: Vec<Vec<TemporalBox>> = gts.iter().map(|g| vec![*g]).collect();
        for n in [1, 5] {
            for m in [0.1, 0.5, 0.7, 0.9] {
                prop_assert_eq!(recall_at(&preds, &gts, n, m).unwrap(), 100.0);
            }
        }
    }

    #[test]
    fn nms_output_is_ranked_and_separated(c in candidates(), n in 1usize..8, thr in 0.1f32..1.0) {
        let top = top_n(&c, n, thr).unwrap();
        prop_assert_eq!(top.len(), n.min(c.len()));
        // Before padding, kept boxes are separated and in score order.
        let mut kept = 0;
        while kept < top.len() && top[..kept].iter().all(|k| tiou(k.bx, top[kept].bx) < thr) {
            kept += 1;
        }
        for w in top[..kept].windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        let best = c.iter().map(|x| x.score).fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!(top[0].score, best);
    }

    #[test]
    fn candidate_count_and_argmax_invariance(
        (k, levels) in pyramid(),
        seed in 0u64..1000,
        scale in 0.01f32..10.0,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geo = pyramid_geometry(k, levels);
        let n: usize = geo.iter().map(|g| g.len).sum();
        let pred = DensePrediction {
            dist: (0..n).map(|_| [rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0)]).collect(),
            matching: (0..n).map(|_| rng.gen_range(0.01..1.0)).collect(),
            quality: Some((0..n).map(|_| rng.gen_range(0.01..1.0)).collect()),
        };
        let c = decode_candidates(&pred, &geo, k, QualityMode::Iou);
        prop_assert_eq!(c.len(), n);
        prop_assert!(c.iter().all(|x| x.bx.start >= 0.0 && x.bx.end <= k as f32));
        let argmax = |c: &[Candidate]| {
            let t = top_n(c, 1, 0.5).unwrap()[0];
            (t.level, t.index)
        };
        let mut scaled = pred.clone();
        for q in scaled.quality.as_mut().unwrap() {
            *q *= scale;
        }
        let c2 = decode_candidates(&scaled, &geo, k, QualityMode::Iou);
        prop_assert_eq!(argmax(&c), argmax(&c2));
        let mono: Vec<Candidate> = c.iter().map(|x| Candidate { score: x.score.powi(3) + 2.0, ..*x }).collect();
        prop_assert_eq!(argmax(&c), argmax(&mono));
    }

    #[test]
    fn selection_cardinalities((k, levels) in pyramid(), s in 0.0f32..1.0, e in 0.0f32..1.0, seed in 0u64..1000) {
        let kf = k as f32;
        let gt = TemporalBox::new(s.min(e) * kf, s.max(e) * kf);
        prop_assume!(gt.len() > 1.0);
        let t = assign_targets(&pyramid_geometry(k, levels), gt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = |st, rng: &mut ChaCha8Rng| select_positives(st, &t, gt, rng).len();
        let all = count(Sampling::All, &mut rng);
        let half = count(Sampling::Half, &mut rng);
        let random = count(Sampling::Random, &mut rng);
        prop_assert_eq!(all, t.num_positive());
        prop_assert!(all >= half && half >= random);
        prop_assert_eq!(half, all.div_ceil(2));
        if all > 0 {
            prop_assert_eq!(random, 1);
            prop_assert_eq!(count(Sampling::Center, &mut rng), 1);
        }
        let kept = select_positives(Sampling::Half, &t, gt, &mut rng);
        prop_assert!(kept.iter().all(|&i| t.positive[i]));
    }

    #[test]
    fn feature_codec_round_trip(k in 8usize..=128, c in 4usize..=64, seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..k * c).map(|_| f32::from_bits(rng.gen::<u32>() & 0xbfff_ffff)).collect();
        let t = Tensor::new(vec![k, c], data).unwrap();
        let bytes = encode_features(&t).unwrap();
        prop_assert_eq!(bytes.len(), 16 + 4 * k * c);
        let back = decode_features(&bytes, Path::new("f.drnf")).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
        let cut = rng.gen_range(0..bytes.len());
        prop_assert!(decode_features(&bytes[..cut], Path::new("f.drnf")).is_err());
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data.clone()).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for r in 0..rows {
            let row = v.row(r);
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            let src = &data[r * cols..(r + 1) * cols];
            let am = |xs: &[f32]| (0..xs.len()).max_by(|&a, &b| xs[a].total_cmp(&xs[b])).unwrap();
            prop_assert_eq!(row[am(src)], row.iter().copied().fold(0.0, f32::max));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn checkpoint_codec_round_trip(seed in 0u64..1000, stage in 1u32..=3, step in 0u64..100_000) {
        let mut cfg = ModelConfig::default();
        cfg.interaction.channels = 8;
        cfg.interaction.hidden = 4;
        cfg.interaction.word_dim = 4;
        cfg.interaction.location_dim = 6;
        let (_, store) = Model::new(cfg.clone(), seed).unwrap();
        let mut state = TrainState::new(store.clone(), &TrainConfig::default(), seed);
        state.stage = stage;
        state.stage_step = step;
        state.global_step = step * 3;
        use rand::RngCore;
        for _ in 0..(seed % 17) {
            state.rng.next_u32();
        }
        let bytes = checkpoint::encode(&state, &cfg);
        let back = checkpoint::decode(&bytes, Path::new("c.drnc"), &store, &cfg).unwrap();
        prop_assert_eq!(checkpoint::encode(&back, &cfg), bytes.clone());
        prop_assert_eq!(back.params.values(), state.params.values());
        prop_assert_eq!(back.rng, state.rng);
        prop_assert_eq!((back.stage, back.stage_step, back.global_step), (stage, step, step * 3));
        for cut in [0, 3, 40, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(checkpoint::decode(&bytes[..cut], Path::new("c.drnc"), &store, &cfg).is_err());
        }
    }
}
