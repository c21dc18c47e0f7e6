//! Three-stage training: regression and matching first, then the quality
//! head alone, then everything jointly.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::heads::{
    assign_targets, centerness, loss_centerness, loss_iou, loss_loc, loss_match, tiou, Focal,
    LocationTargets, QualityMode, TemporalBox,
};
use crate::layers::apply_bn_updates;
use crate::model::{detach, Model};
use crate::optim::{adam_step, clip_global_norm, AdamState};
use crate::parallel::Parallelism;
use crate::params::{BnUpdate, Ctx, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Which positive locations enter the regression loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    All,
    Half,
    Random,
    Center,
}

/// Flat location indices kept as positives.
pub fn select_positives(
    strategy: Sampling,
    targets: &LocationTargets,
    gt: TemporalBox,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let pos = targets.positives();
    if pos.is_empty() {
        log::warn!("select_positives: sample has no positive location");
        return pos;
    }
    match strategy {
        Sampling::All => pos,
        Sampling::Half => {
            let keep = pos.len().div_ceil(2);
            let mut picked = rand::seq::index::sample(rng, pos.len(), keep).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| pos[i]).collect()
        }
        Sampling::Random => vec![pos[rng.gen_range(0..pos.len())]],
        Sampling::Center => {
            let mid = gt.mid();
            let mut best = pos[0];
            for &i in &pos[1..] {
                if (targets.timeline[i] - mid).abs() < (targets.timeline[best] - mid).abs() {
                    best = i;
                }
            }
            vec![best]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Learning rate per stage.
    pub lr: [f32; 3],
    pub epochs: [usize; 3],
    pub batch_size: usize,
    pub sampling: Sampling,
    pub focal: Focal,
    /// Weights of the regression, matching and quality losses in stage 3.
    pub loss_weights: [f32; 3],
    /// Train the IoU head on positives only instead of every location.
    pub iou_positives_only: bool,
    /// Average the IoU loss instead of summing it.
    pub iou_mean: bool,
    /// Global gradient-norm clip; zero disables it.
    pub clip_norm: f32,
    /// Evaluate R@1, IoU=0.5 on the validation split after every epoch.
    pub validate: bool,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: [1e-3, 1e-5, 1e-6],
            epochs: [20, 10, 5],
            batch_size: 32,
            sampling: Sampling::All,
            focal: Focal::default(),
            loss_weights: [1.0, 1.0, 1.0],
            iou_positives_only: false,
            iou_mean: false,
            clip_norm: 10.0,
            validate: true,
            parallelism: Parallelism::Rayon,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.iter().any(|&lr| lr.is_nan() || lr <= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    /// 1, 2 or 3; 4 once training has finished.
    pub stage: u32,
    pub stage_step: u64,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ParamStore, cfg: &TrainConfig, seed: u64) -> Self {
        let adam = fresh_adam(&params, cfg.lr[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        TrainState {
            params,
            adam,
            stage: 1,
            stage_step: 0,
            global_step: 0,
            rng,
            seed,
        }
    }
}

fn fresh_adam(params: &ParamStore, lr: f32) -> AdamState {
    AdamState::new(lr, params.entries().iter().map(|e| e.value.shape()))
}

/// Groups updated in a stage.
pub fn active_groups(stage: u32) -> &'static [ParamGroup] {
    match stage {
        1 => &[ParamGroup::Interaction, ParamGroup::Matching, ParamGroup::Location],
        2 => &[ParamGroup::Quality],
        _ => &ParamGroup::ALL,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub loc: f32,
    pub matching: f32,
    pub quality: f32,
    pub total: f32,
}

impl Losses {
    fn add(&mut self, o: &Losses) {
        self.loc += o.loc;
        self.matching += o.matching;
        self.quality += o.quality;
        self.total += o.total;
    }

    fn scale(&mut self, s: f32) {
        self.loc *= s;
        self.matching *= s;
        self.quality *= s;
        self.total *= s;
    }
}

struct SampleResult {
    losses: Losses,
    grads: Vec<Option<Tensor>>,
    bn: Vec<BnUpdate>,
}

/// Forward, loss and backward for one sample.
fn sample_step(
    model: &Model,
    params: &ParamStore,
    cfg: &TrainConfig,
    stage: u32,
    sample: &Sample,
    seed: u64,
) -> Result<SampleResult> {
    let mut ctx = Ctx::new(params, active_groups(stage), true);
    let out = model.forward(&mut ctx, &sample.features, &sample.tokens)?;
    let geometry = model.geometry();
    let targets = assign_targets(&geometry, sample.gt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = select_positives(cfg.sampling, &targets, sample.gt, &mut rng);
    let n = targets.len();
    let mut mask = vec![false; n];
    for &i in &chosen {
        mask[i] = true;
    }

    let mut losses = Losses::default();
    let mut terms = Vec::new();
    let w = cfg.loss_weights;
    if stage != 2 {
        let l_loc = loss_loc(&mut ctx, out.dist, &targets.dist, &mask)?;
        let l_match = loss_match(&mut ctx, out.matching, &mask, cfg.focal)?;
        losses.loc = ctx.tape.value(l_loc).item();
        losses.matching = ctx.tape.value(l_match).item();
        let (wl, wm) = if stage == 3 { (w[0], w[1]) } else { (1.0, 1.0) };
        terms.push(ctx.tape.scale(l_loc, wl)?);
        terms.push(ctx.tape.scale(l_match, wm)?);
    }
    if stage != 1 {
        if let Some(q) = out.quality {
            let l_q = match model.cfg.quality {
                QualityMode::Iou => {
                    let pred = detach(&ctx, &out);
                    let boxes = pred.boxes(&geometry, model.cfg.interaction.segments);
                    let u: Vec<f32> = boxes.iter().map(|&b| tiou(b, sample.gt)).collect();
                    let rows: Vec<bool> = if cfg.iou_positives_only {
                        targets.positive.clone()
                    } else {
                        vec![true; n]
                    };
                    loss_iou(&mut ctx, q, &u, &rows, cfg.iou_mean)?
                }
                _ => {
                    let c: Vec<f32> = (0..n)
                        .map(|i| {
                            if mask[i] {
                                centerness(targets.dist[i][0], targets.dist[i][1])
                            } else {
                                Ok(0.0)
                            }
                        })
                        .collect::<Result<_>>()?;
                    loss_centerness(&mut ctx, q, &c, &mask)?
                }
            };
            losses.quality = ctx.tape.value(l_q).item();
            let wq = if stage == 3 { w[2] } else { 1.0 };
            terms.push(ctx.tape.scale(l_q, wq)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = ctx.tape.add(total, t)?;
    }
    losses.total = ctx.tape.value(total).item();
    let mut g = ctx.tape.backward(total)?;
    let grads = ctx.collect_grads(&mut g);
    Ok(SampleResult {
        losses,
        grads,
        bn: ctx.bn_updates().to_vec(),
    })
}

/// One optimizer step over a batch; returns the batch-mean losses.
pub fn training_step(
    model: &Model,
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &[&Sample],
) -> Result<Losses> {
    let stage = state.stage;
    if !(1..=3).contains(&stage) {
        return Err(Error::Invalid(format!("no training stage {stage}")));
    }
    let seeds: Vec<u64> = batch.iter().map(|_| state.rng.next_u64()).collect();
    let work: Vec<(&Sample, u64)> = batch.iter().copied().zip(seeds).collect();
    let params = &state.params;
    let results = cfg
        .parallelism
        .map(&work, |(s, seed)| sample_step(model, params, cfg, stage, s, *seed));

    let groups = active_groups(stage);
    let active: Vec<bool> = state
        .params
        .entries()
        .iter()
        .map(|e| e.trainable && groups.contains(&e.group))
        .collect();
    let mut sum: Vec<Option<Tensor>> = vec![None; state.params.len()];
    let mut losses = Losses::default();
    let mut bn = Vec::new();
    for r in results {
        let r = r?;
        losses.add(&r.losses);
        bn.extend(r.bn);
        for (acc, g) in sum.iter_mut().zip(r.grads) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                None => *acc = Some(g),
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    losses.scale(inv);
    if !losses.total.is_finite() {
        return Err(Error::NonFinite {
            op: "training loss",
            stats: format!("{losses:?} at step {}", state.global_step),
        });
    }
    for (i, acc) in sum.iter_mut().enumerate() {
        match acc {
            Some(a) => a.data_mut().iter_mut().for_each(|x| *x *= inv),
            // Parameters the graph never touched, e.g. unused level weights.
            None if active[i] => *acc = Some(Tensor::zeros(state.params.get_by_index(i).shape())),
            None => {}
        }
    }
    if cfg.clip_norm > 0.0 {
        clip_global_norm(&mut sum, cfg.clip_norm);
    }
    let names: Vec<String> = state.params.entries().iter().map(|e| e.name.clone()).collect();
    let mut values = state.params.values();
    adam_step(&mut values, &names, &sum, &active, &mut state.adam)?;
    state.params.set_values(values);
    apply_bn_updates(&mut state.params, &bn);
    state.stage_step += 1;
    state.global_step += 1;
    Ok(losses)
}

/// Per-epoch training log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u32,
    pub epoch: usize,
    pub losses: Losses,
    pub val_r1_05: Option<f64>,
}

/// Drives [`training_step`] through the three stages.
pub struct Trainer<'a> {
    pub model: &'a Model,
    pub cfg: &'a TrainConfig,
    pub train: &'a [Sample],
    pub state: TrainState,
}

/// Where a stage's step counter falls.
struct Position {
    epoch: usize,
    batch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, cfg: &'a TrainConfig, train: &'a [Sample], state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let mut t = Trainer {
            model,
            cfg,
            train,
            state,
        };
        t.skip_empty_stages();
        Ok(t)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    fn stage_len(&self, stage: u32) -> u64 {
        let runs = match stage {
            2 => self.model.cfg.quality != QualityMode::None,
            1 | 3 => true,
            _ => false,
        };
        if runs {
            (self.cfg.epochs[stage as usize - 1] * self.batches_per_epoch()) as u64
        } else {
            0
        }
    }

    fn skip_empty_stages(&mut self) {
        while self.state.stage <= 3 && self.state.stage_step >= self.stage_len(self.state.stage) {
            self.state.stage += 1;
            self.state.stage_step = 0;
            if self.state.stage <= 3 {
                self.state.adam = fresh_adam(&self.state.params, self.cfg.lr[self.state.stage as usize - 1]);
            }
        }
    }

    pub fn finished(&self) -> bool {
        self.state.stage > 3
    }

    fn position(&self) -> Position {
        let b = self.batches_per_epoch() as u64;
        Position {
            epoch: (self.state.stage_step / b) as usize,
            batch: (self.state.stage_step % b) as usize,
        }
    }

    /// Sample order of one epoch, a function of (seed, stage, epoch) only.
    fn order(&self, stage: u32, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed);
        rng.set_stream(1000 + u64::from(stage) * 100_000 + epoch as u64);
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Runs one step; `None` once all stages are done.
    pub fn step(&mut self) -> Result<Option<StepReport>> {
        if self.finished() {
            return Ok(None);
        }
        let stage = self.state.stage;
        let pos = self.position();
        let order = self.order(stage, pos.epoch);
        let bs = self.cfg.batch_size;
        let lo = pos.batch * bs;
        let hi = (lo + bs).min(order.len());
        let batch: Vec<&Sample> = order[lo..hi].iter().map(|&i| &self.train[i]).collect();
        let losses = training_step(self.model, &mut self.state, self.cfg, &batch)?;
        let end_of_epoch = hi == order.len();
        let before = self.state.stage;
        self.skip_empty_stages();
        Ok(Some(StepReport {
            stage,
            epoch: pos.epoch,
            losses,
            batch_len: batch.len(),
            end_of_epoch,
            end_of_stage: self.state.stage != before,
        }))
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub stage: u32,
    pub epoch: usize,
    pub losses: Losses,
    pub batch_len: usize,
    pub end_of_epoch: bool,
    pub end_of_stage: bool,
}

/// Runs all stages, calling `on_stage_end` with the state after each one.
pub fn train_three_step(
    model: &Model,
    params: ParamStore,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_stage_end: impl FnMut(u32, &TrainState) -> Result<()>,
) -> Result<(TrainState, Vec<EpochLog>)> {
    let state = TrainState::new(params, cfg, seed);
    let mut trainer = Trainer::new(model, cfg, train, state)?;
    let mut log = Vec::new();
    let mut acc = Losses::default();
    let mut seen = 0usize;
    while let Some(r) = trainer.step()? {
        let mut l = r.losses;
        l.scale(r.batch_len as f32);
        acc.add(&l);
        seen += r.batch_len;
        if r.end_of_epoch {
            acc.scale(1.0 / seen as f32);
            let val_r1_05 = if cfg.validate && !val.is_empty() {
                let report = evaluate(model, &trainer.state.params, val, &eval_r1(), cfg.parallelism)?;
                report.recall(1, 0.5)
            } else {
                None
            };
            log::info!(
                "stage {} epoch {} loc {:.4} match {:.4} quality {:.4} val R@1,0.5 {:?}",
                r.stage,
                r.epoch + 1,
                acc.loc,
                acc.matching,
                acc.quality,
                val_r1_05
            );
            log.push(EpochLog {
                stage: r.stage,
                epoch: r.epoch + 1,
                losses: acc,
                val_r1_05,
            });
            acc = Losses::default();
            seen = 0;
        }
        if r.end_of_stage {
            on_stage_end(r.stage, &trainer.state)?;
        }
    }
    Ok((trainer.state, log))
}

fn eval_r1() -> EvalConfig {
    EvalConfig {
        ns: vec![1],
        ms: vec![0.5],
        ..EvalConfig::default()
    }
}
