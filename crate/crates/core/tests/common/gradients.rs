//! Finite-difference checks of layers, heads and complete losses over
//! randomized small shapes, 100 trials per family.
//!
//! Every trainable parameter and the layer input (stored as a parameter) is
//! probed. A scalar is formed from layer outputs with random weights.
//!
//! Coordinates whose probe interval crosses a breakpoint of relu, abs,
//! clamp or min/max are skipped by the checker; their share is bounded.
//! Errors are relative to `max(|numeric|, FLOOR)`: in 32-bit arithmetic the
//! central difference carries an absolute noise of a few 1e-5, which would
//! otherwise dominate coordinates whose gradient is nearly zero.

use drn_core::gradcheck::{check_params, FdReport};
use drn_core::heads::{
    assign_targets, loss_centerness, loss_iou, loss_loc, loss_match, Focal, Heads, QualityMode, TemporalBox,
};
use drn_core::interaction::{FusionMode, Interaction, InteractionConfig};
use drn_core::model::{Model, ModelConfig};
use drn_core::layers::{BiLstm, Builder, Conv1dBlock, Conv1dBlockSpec, Linear};
use drn_core::params::{Ctx, Initializer, ParamGroup, ParamId, ParamStore};
use drn_core::{Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f32 = 3e-2;
pub const FLOOR: f32 = 3e-2;
pub const TOL: f32 = 1e-3;
pub const TRIALS: usize = 100;
/// Share of probed coordinates allowed to sit next to a breakpoint.
pub const MAX_SKIPPED: f64 = 0.3;

/// Outcome of one family of randomized trials.
#[derive(Debug)]
pub struct Family {
    pub name: &'static str,
    pub worst: FdReport,
    pub probed: usize,
    pub skipped: usize,
}

impl Family {
    pub fn passed(&self) -> bool {
        self.worst.max_rel_error < TOL && (self.skipped as f64) <= MAX_SKIPPED * self.probed as f64
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: worst relative error {:.2e} over {TRIALS} trials, {} of {} coordinates at a breakpoint",
            self.name, self.worst.max_rel_error, self.skipped, self.probed
        )
    }

    pub fn assert_ok(&self) {
        println!("{}", self.summary());
        assert!(self.passed(), "{}: {:?}", self.summary(), self.worst);
    }
}

/// Runs `TRIALS` trials of `trial(rng, index)` and keeps the worst error.
fn family(name: &'static str, seed: u64, mut trial: impl FnMut(&mut ChaCha8Rng, usize) -> FdReport) -> Family {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reports: Vec<FdReport> = (0..TRIALS).map(|i| trial(&mut rng, i)).collect();
    let probed = reports.iter().map(|r| r.probed).sum();
    let skipped = reports.iter().map(|r| r.skipped).sum();
    let worst = reports
        .into_iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    Family {
        name,
        worst,
        probed,
        skipped,
    }
}

fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f32 = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weighted_sum(ctx: &mut Ctx<'_>, y: Var, w: &Tensor) -> Result<Var> {
    let w = ctx.tape.constant(w.clone());
    let p = ctx.tape.mul(y, w)?;
    ctx.tape.sum_all(p)
}

pub fn check(store: &ParamStore, f: impl Fn(&mut Ctx<'_>) -> Result<Var>, max_coords: Option<usize>) -> FdReport {
    check_params(store, &ParamGroup::ALL, f, EPS, FLOOR, max_coords).unwrap()
}

pub fn add_input(store: &mut ParamStore, rng: &mut ChaCha8Rng, shape: &[usize]) -> ParamId {
    store.add("input", ParamGroup::Interaction, true, signed(rng, shape, 0.2, 1.0))
}

pub fn conv_blocks() -> Family {
    family("conv1d block", 11, |rng, attempt| {
        let t = rng.gen_range(3..10);
        let cin = rng.gen_range(1..5);
        let cout = rng.gen_range(1..5);
        let kernel = [1, 2, 3, 5][rng.gen_range(0..4)];
        let stride = rng.gen_range(1..3);
        let spec = Conv1dBlockSpec::new(cin, cout, kernel, stride)
            .relu(rng.gen_bool(0.5))
            // Batch norm over a near-constant channel is ill-conditioned.
            .batch_norm(t >= 8 && cin * kernel >= 4 && rng.gen_bool(0.5));
        let mut store = ParamStore::new();
        let mut init = Initializer::new(attempt as u64);
        let conv = Conv1dBlock::new(&mut Builder::new(&mut store, &mut init, ParamGroup::Matching), "conv", spec);
        let x = add_input(&mut store, rng, &[t, cin]);
        let w = signed(rng, &[spec.out_len(t), cout], 0.5, 1.5);
        check(
            &store,
            |ctx| {
                let x = ctx.param(x);
                let y = conv.forward(ctx, x)?;
                weighted_sum(ctx, y, &w)
            },
            None,
        )
    })
}

pub fn linear() -> Family {
    family("linear", 12, |rng, attempt| {
        let n = rng.gen_range(1..5);
        let input = rng.gen_range(1..5);
        let out = rng.gen_range(1..5);
        let mut store = ParamStore::new();
        let mut init = Initializer::new(attempt as u64);
        let lin = Linear::new(&mut Builder::new(&mut store, &mut init, ParamGroup::Interaction), "proj", input, out);
        let x = add_input(&mut store, rng, &[n, input]);
        let w = signed(rng, &[n, out], 0.5, 1.5);
        check(
            &store,
            |ctx| {
                let x = ctx.param(x);
                let y = lin.forward(ctx, x)?;
                weighted_sum(ctx, y, &w)
            },
            None,
        )
    })
}

pub fn bilstm() -> Family {
    family("bilstm", 13, |rng, attempt| {
        let n = rng.gen_range(1..5);
        let input = rng.gen_range(1..5);
        let hidden = rng.gen_range(1..4);
        let mut store = ParamStore::new();
        let mut init = Initializer::new(attempt as u64);
        let rnn = BiLstm::new(&mut Builder::new(&mut store, &mut init, ParamGroup::Interaction), "rnn", input, hidden);
        let x = add_input(&mut store, rng, &[n, input]);
        let w = signed(rng, &[n, 2 * hidden], 0.5, 1.5);
        check(
            &store,
            |ctx| {
                let x = ctx.param(x);
                let y = rnn.forward(ctx, x)?;
                weighted_sum(ctx, y.hiddens, &w)
            },
            None,
        )
    })
}

fn small_interaction(rng: &mut ChaCha8Rng) -> InteractionConfig {
    let levels = rng.gen_range(1..4);
    InteractionConfig {
        vocab_size: 6,
        word_dim: rng.gen_range(2..5),
        hidden: rng.gen_range(2..4),
        feature_dim: rng.gen_range(2..5),
        channels: rng.gen_range(2..5),
        levels,
        segments: (1 << (levels - 1)) * rng.gen_range(2..4),
        kernel: 3,
        location_embedding: rng.gen_bool(0.5),
        location_dim: rng.gen_range(2..5),
        fusion: [FusionMode::MultiLevel, FusionMode::Same, FusionMode::FirstOnly][rng.gen_range(0..3)],
        batch_norm: false,
    }
}

pub fn interaction_pyramid() -> Family {
    family("interaction pyramid", 14, |rng, attempt| {
        let cfg = small_interaction(rng);
        let mut store = ParamStore::new();
        let mut init = Initializer::new(attempt as u64);
        let net = Interaction::new(&mut Builder::new(&mut store, &mut init, ParamGroup::Interaction), &cfg).unwrap();
        let x = add_input(&mut store, rng, &[cfg.segments, cfg.feature_dim]);
        let tokens: Vec<u32> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..6)).collect();
        let ws: Vec<Tensor> = cfg
            .geometry()
            .iter()
            .map(|g| signed(rng, &[g.len, cfg.channels], 0.5, 1.5))
            .collect();
        check(
            &store,
            |ctx| {
                let x = ctx.param(x);
                let p = net.forward(ctx, x, &tokens)?;
                let mut total = ctx.tape.scalar(0.0);
                for (level, w) in p.levels.iter().zip(&ws) {
                    let s = weighted_sum(ctx, *level, w)?;
                    total = ctx.tape.add(total, s)?;
                }
                Ok(total)
            },
            Some(12),
        )
    })
}

struct HeadCase {
    store: ParamStore,
    heads: Heads,
    input: ParamId,
    stride: usize,
    t: usize,
}

fn head_case(rng: &mut ChaCha8Rng, attempt: usize, quality: QualityMode) -> HeadCase {
    let t = rng.gen_range(3..9);
    let c = rng.gen_range(2..5);
    let mut store = ParamStore::new();
    let mut init = Initializer::new(attempt as u64);
    let heads = Heads::new(&mut Builder::new(&mut store, &mut init, ParamGroup::Location), c, 3, quality);
    let input = add_input(&mut store, rng, &[t, c]);
    HeadCase {
        store,
        heads,
        input,
        stride: rng.gen_range(1..3),
        t,
    }
}

pub fn heads_outputs() -> Family {
    family("heads", 15, |rng, attempt| {
        let quality = if attempt % 2 == 0 { QualityMode::Iou } else { QualityMode::Centerness };
        let case = head_case(rng, attempt, quality);
        let w_dist = signed(rng, &[case.t, 2], 0.5, 1.5);
        let w_match = signed(rng, &[case.t, 1], 0.5, 1.5);
        let w_q = signed(rng, &[case.t, 1], 0.5, 1.5);
        check(
            &case.store,
            |ctx| {
                let p = ctx.param(case.input);
                let out = case.heads.forward(ctx, p, case.stride)?;
                let a = weighted_sum(ctx, out.dist, &w_dist)?;
                let b = weighted_sum(ctx, out.matching, &w_match)?;
                let c = weighted_sum(ctx, out.quality.expect("quality head"), &w_q)?;
                let ab = ctx.tape.add(a, b)?;
                ctx.tape.add(ab, c)
            },
            None,
        )
    })
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    let i = rng.gen_range(0..n);
    m[i] = true;
    m
}

pub fn regression_loss() -> Family {
    family("regression loss", 16, |rng, attempt| {
        let case = head_case(rng, attempt, QualityMode::None);
        let target: Vec<[f32; 2]> = (0..case.t)
            .map(|_| [rng.gen_range(0.3..3.0), rng.gen_range(0.3..3.0)])
            .collect();
        let mask = random_mask(rng, case.t);
        check(
            &case.store,
            |ctx| {
                let p = ctx.param(case.input);
                let out = case.heads.forward(ctx, p, case.stride)?;
                loss_loc(ctx, out.dist, &target, &mask)
            },
            None,
        )
    })
}

pub fn matching_loss() -> Family {
    family("matching loss", 17, |rng, attempt| {
        let case = head_case(rng, attempt, QualityMode::None);
        let labels = random_mask(rng, case.t);
        check(
            &case.store,
            |ctx| {
                let p = ctx.param(case.input);
                let out = case.heads.forward(ctx, p, case.stride)?;
                loss_match(ctx, out.matching, &labels, Focal::default())
            },
            None,
        )
    })
}

pub fn iou_loss() -> Family {
    family("iou loss", 18, |rng, attempt| {
        let case = head_case(rng, attempt, QualityMode::Iou);
        let target: Vec<f32> = (0..case.t).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mask = random_mask(rng, case.t);
        let mean = attempt % 2 == 0;
        check(
            &case.store,
            |ctx| {
                let p = ctx.param(case.input);
                let out = case.heads.forward(ctx, p, case.stride)?;
                loss_iou(ctx, out.quality.expect("quality head"), &target, &mask, mean)
            },
            None,
        )
    })
}

pub fn centerness_loss() -> Family {
    family("centerness loss", 19, |rng, attempt| {
        let case = head_case(rng, attempt, QualityMode::Centerness);
        let target: Vec<f32> = (0..case.t).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mask = random_mask(rng, case.t);
        check(
            &case.store,
            |ctx| {
                let p = ctx.param(case.input);
                let out = case.heads.forward(ctx, p, case.stride)?;
                loss_centerness(ctx, out.quality.expect("quality head"), &target, &mask)
            },
            None,
        )
    })
}

/// Interaction, heads and the weighted sum of all three losses, with
/// targets assigned from a random ground truth.
pub fn whole_model_objective() -> Family {
    family("whole model objective", 21, |rng, attempt| {
        let interaction = small_interaction(rng);
        let cfg = ModelConfig {
            interaction,
            quality: QualityMode::Iou,
        };
        let (model, store) = Model::new(cfg.clone(), attempt as u64).unwrap();
        let k = cfg.interaction.segments as f32;
        let s = rng.gen_range(0.0..k - 1.5);
        let gt = TemporalBox::new(s, rng.gen_range(s + 1.5..=k));
        let targets = assign_targets(&model.geometry(), gt).unwrap();
        let features = signed(rng, &[cfg.interaction.segments, cfg.interaction.feature_dim], 0.2, 1.0);
        let tokens: Vec<u32> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..6)).collect();
        let iou_target: Vec<f32> = (0..targets.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        check(
            &store,
            |ctx| {
                let out = model.forward(ctx, &features, &tokens)?;
                let l_loc = loss_loc(ctx, out.dist, &targets.dist, &targets.positive)?;
                let l_match = loss_match(ctx, out.matching, &targets.positive, Focal::default())?;
                let all = vec![true; targets.len()];
                let l_iou = loss_iou(ctx, out.quality.expect("quality head"), &iou_target, &all, false)?;
                let a = ctx.tape.add(l_loc, l_match)?;
                ctx.tape.add(a, l_iou)
            },
            Some(6),
        )
    })
}


/// Every family, in a fixed order.
pub fn all() -> Vec<fn() -> Family> {
    vec![conv_blocks, linear, bilstm, interaction_pyramid, heads_outputs, regression_loss, matching_loss, iou_loss, centerness_loss, whole_model_objective]
}
