//! Grounding heads, dense target assignment, temporal IoU and the losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::interaction::LevelGeometry;
use crate::layers::{Builder, Conv1dBlock, Conv1dBlockSpec};
use crate::params::{Ctx, ParamGroup};
use crate::tensor::Tensor;

/// A `(start, end)` interval in segment time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalBox {
    pub start: f32,
    pub end: f32,
}

impl TemporalBox {
    pub fn new(start: f32, end: f32) -> Self {
        TemporalBox { start, end }
    }

    pub fn len(&self) -> f32 {
        self.end - self.start
    }

    pub fn mid(&self) -> f32 {
        0.5 * (self.start + self.end)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// `|a ∩ b| / |a ∪ b|`, zero when the union is empty.
pub fn tiou(a: TemporalBox, b: TemporalBox) -> f32 {
    let a = (f64::from(a.start), f64::from(a.end));
    let b = (f64::from(b.start), f64::from(b.end));
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union) as f32
    }
}

/// Box at timeline `x` with distances `(ds, de)`, clamped to `[0, k]`.
pub fn decode(x: f32, ds: f32, de: f32, k: f32) -> TemporalBox {
    TemporalBox::new((x - ds).clamp(0.0, k), (x + de).clamp(0.0, k))
}

/// `sqrt(min(ds, de) / max(ds, de))`.
pub fn centerness(ds: f32, de: f32) -> Result<f32> {
    if !(ds > 0.0 && de > 0.0) {
        return Err(Error::Invalid(format!("centerness needs positive distances, got ({ds}, {de})")));
    }
    Ok((ds.min(de) / ds.max(de)).sqrt())
}

/// Location targets flattened across levels, level 1 first.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationTargets {
    pub level: Vec<usize>,
    pub index: Vec<usize>,
    pub timeline: Vec<f32>,
    pub positive: Vec<bool>,
    /// Distances to start and end; zero at negatives.
    pub dist: Vec<[f32; 2]>,
}

impl LocationTargets {
    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.positive[i]).collect()
    }
}

/// Marks every location strictly inside `gt` as positive at every level.
pub fn assign_targets(geometry: &[LevelGeometry], gt: TemporalBox) -> Result<LocationTargets> {
    if gt.is_empty() {
        return Err(Error::Invalid(format!("degenerate ground truth ({}, {})", gt.start, gt.end)));
    }
    let total: usize = geometry.iter().map(|g| g.len).sum();
    let mut t = LocationTargets {
        level: Vec::with_capacity(total),
        index: Vec::with_capacity(total),
        timeline: Vec::with_capacity(total),
        positive: Vec::with_capacity(total),
        dist: Vec::with_capacity(total),
    };
    for (li, g) in geometry.iter().enumerate() {
        for j in 0..g.len {
            let x = g.timeline(j);
            let pos = gt.start < x && x < gt.end;
            t.level.push(li);
            t.index.push(j);
            t.timeline.push(x);
            t.positive.push(pos);
            t.dist.push(if pos { [x - gt.start, gt.end - x] } else { [0.0; 2] });
        }
    }
    Ok(t)
}

/// Which quality estimate multiplies the matching score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QualityMode {
    Iou,
    Centerness,
    None,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub loc: [Conv1dBlock; 2],
    pub matching: [Conv1dBlock; 2],
    /// Shared architecture for the IoU and the centerness head.
    pub quality: Option<[Conv1dBlock; 3]>,
}

/// Raw head outputs at one level.
pub struct LevelOutput {
    /// `[T, 2]` positive distances in segment units.
    pub dist: Var,
    /// `[T, 1]` matching probability.
    pub matching: Var,
    /// `[T, 1]` IoU or centerness estimate.
    pub quality: Option<Var>,
}

impl Heads {
    pub fn new(b: &mut Builder<'_>, channels: usize, kernel: usize, quality: QualityMode) -> Self {
        let c = channels;
        let conv = |cin, cout, relu| Conv1dBlockSpec::new(cin, cout, kernel, 1).relu(relu);
        let loc = {
            let mut b = b.scope(ParamGroup::Location, "loc");
            [
                Conv1dBlock::new(&mut b, "conv1", conv(c, c, true)),
                Conv1dBlock::new(&mut b, "conv2", conv(c, 2, false)),
            ]
        };
        let matching = {
            let mut b = b.scope(ParamGroup::Matching, "match");
            [
                Conv1dBlock::new(&mut b, "conv1", conv(c, c, true)),
                Conv1dBlock::new(&mut b, "conv2", conv(c, 1, false)),
            ]
        };
        let quality = match quality {
            QualityMode::None => None,
            _ => {
                let mut b = b.scope(ParamGroup::Quality, "quality");
                Some([
                    Conv1dBlock::new(&mut b, "conv1", conv(2 * c, c, true)),
                    Conv1dBlock::new(&mut b, "conv2", conv(c, c, true)),
                    Conv1dBlock::new(&mut b, "conv3", conv(c, 1, false)),
                ])
            }
        };
        Heads {
            loc,
            matching,
            quality,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, p: Var, stride: usize) -> Result<LevelOutput> {
        let loc_feat = self.loc[0].forward(ctx, p)?;
        let raw = self.loc[1].forward(ctx, loc_feat)?;
        let dist = ctx.tape.exp(raw)?;
        let dist = ctx.tape.scale(dist, stride as f32)?;

        let match_feat = self.matching[0].forward(ctx, p)?;
        let logit = self.matching[1].forward(ctx, match_feat)?;
        let matching = ctx.tape.sigmoid(logit)?;

        let quality = match &self.quality {
            None => None,
            Some(convs) => {
                let x = ctx.tape.concat(&[match_feat, loc_feat], 1)?;
                let x = convs[0].forward(ctx, x)?;
                let x = convs[1].forward(ctx, x)?;
                let x = convs[2].forward(ctx, x)?;
                Some(ctx.tape.sigmoid(x)?)
            }
        };
        Ok(LevelOutput {
            dist,
            matching,
            quality,
        })
    }
}

/// Focal-loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Focal {
    pub alpha: f32,
    pub gamma: f32,
}

impl Default for Focal {
    fn default() -> Self {
        Focal {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Lower clamp applied to IoUs and probabilities before a logarithm.
pub const LOG_FLOOR: f32 = 1e-6;

fn column(ctx: &mut Ctx<'_>, values: Vec<f32>) -> Var {
    let n = values.len();
    ctx.tape.constant(Tensor::from_parts(vec![n, 1], values))
}

fn normalizer(n_pos: usize, what: &str) -> f32 {
    if n_pos == 0 {
        log::warn!("{what}: sample has no positive location");
        1.0
    } else {
        n_pos as f32
    }
}

/// `(1/N_pos) Σ_pos -ln IoU(pred, target)` from `[n, 2]` distances.
///
/// `mask[i]` selects the rows that count; `target` is ignored elsewhere.
pub fn loss_loc(ctx: &mut Ctx<'_>, pred: Var, target: &[[f32; 2]], mask: &[bool]) -> Result<Var> {
    let n = target.len();
    if ctx.tape.shape(pred) != [n, 2] || mask.len() != n {
        return Err(Error::shape(
            "loss_loc",
            format!("pred {:?}, {} targets, {} mask rows", ctx.tape.shape(pred), n, mask.len()),
        ));
    }
    let n_pos = mask.iter().filter(|&&m| m).count();
    if n_pos == 0 {
        log::warn!("loss_loc: sample has no positive location");
        return Ok(ctx.tape.scalar(0.0));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let picked = gather_rows(ctx, pred, &rows)?;
    let t: Vec<f32> = rows.iter().flat_map(|&i| target[i]).collect();
    let t = ctx.tape.constant(Tensor::from_parts(vec![rows.len(), 2], t));
    let inter = ctx.tape.minimum(picked, t)?;
    let inter = ctx.tape.sum(inter, 1)?;
    let pred_len = ctx.tape.sum(picked, 1)?;
    let tgt_len = ctx.tape.sum(t, 1)?;
    let total = ctx.tape.add(pred_len, tgt_len)?;
    let union = ctx.tape.sub(total, inter)?;
    let iou = ctx.tape.div(inter, union)?;
    let iou = ctx.tape.clamp(iou, LOG_FLOOR, 1.0)?;
    let log_iou = ctx.tape.log(iou)?;
    let s = ctx.tape.sum_all(log_iou)?;
    ctx.tape.scale(s, -1.0 / n_pos as f32)
}

/// Rows of a `[n, c]` variable, in the given order.
pub fn gather_rows(ctx: &mut Ctx<'_>, x: Var, rows: &[usize]) -> Result<Var> {
    let n = ctx.tape.shape(x)[0];
    if rows.len() == n && rows.iter().enumerate().all(|(i, &r)| i == r) {
        return Ok(x);
    }
    // Contiguous runs become one slice each.
    let mut parts = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let start = rows[i];
        let mut len = 1;
        while i + len < rows.len() && rows[i + len] == start + len {
            len += 1;
        }
        parts.push(ctx.tape.slice(x, 0, start, len)?);
        i += len;
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        ctx.tape.concat(&parts, 0)
    }
}

/// `(1/N_pos) Σ_all FL(p, m)` over a `[n, 1]` probability column.
pub fn loss_match(ctx: &mut Ctx<'_>, prob: Var, labels: &[bool], focal: Focal) -> Result<Var> {
    let n = labels.len();
    if ctx.tape.shape(prob) != [n, 1] {
        return Err(Error::shape("loss_match", format!("prob {:?}, {n} labels", ctx.tape.shape(prob))));
    }
    let n_pos = labels.iter().filter(|&&m| m).count();
    let norm = normalizer(n_pos, "loss_match");
    let sign: Vec<f32> = labels.iter().map(|&m| if m { 1.0 } else { -1.0 }).collect();
    let offset: Vec<f32> = labels.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
    let weight: Vec<f32> = labels
        .iter()
        .map(|&m| if m { focal.alpha } else { 1.0 - focal.alpha })
        .collect();
    let sign = column(ctx, sign);
    let offset = column(ctx, offset);
    let weight = column(ctx, weight);
    // p_t = p for positives and 1 - p for negatives.
    let pt = ctx.tape.mul(prob, sign)?;
    let pt = ctx.tape.add(pt, offset)?;
    let pt_safe = ctx.tape.clamp(pt, LOG_FLOOR, 1.0)?;
    let nll = ctx.tape.log(pt_safe)?;
    let mut per = ctx.tape.mul(nll, weight)?;
    if focal.gamma != 0.0 {
        let miss = ctx.tape.affine(pt, -1.0, 1.0)?;
        let modulating = ctx.tape.pow(miss, focal.gamma)?;
        per = ctx.tape.mul(per, modulating)?;
    }
    let s = ctx.tape.sum_all(per)?;
    ctx.tape.scale(s, -1.0 / norm)
}

/// `Σ SmoothL1(pred - target)` with unit transition, over rows in `mask`.
pub fn loss_iou(ctx: &mut Ctx<'_>, pred: Var, target: &[f32], mask: &[bool], mean: bool) -> Result<Var> {
    let n = target.len();
    if ctx.tape.shape(pred) != [n, 1] || mask.len() != n {
        return Err(Error::shape("loss_iou", format!("pred {:?}, {n} targets", ctx.tape.shape(pred))));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Ok(ctx.tape.scalar(0.0));
    }
    let picked = gather_rows(ctx, pred, &rows)?;
    let t = column(ctx, rows.iter().map(|&i| target[i]).collect());
    let diff = ctx.tape.sub(picked, t)?;
    let abs = ctx.tape.abs(diff)?;
    // 0.5 m^2 + |d| - m with m = min(|d|, 1).
    let m = ctx.tape.clamp(abs, 0.0, 1.0)?;
    let sq = ctx.tape.mul(m, m)?;
    let sq = ctx.tape.scale(sq, 0.5)?;
    let lin = ctx.tape.sub(abs, m)?;
    let per = ctx.tape.add(sq, lin)?;
    let s = ctx.tape.sum_all(per)?;
    if mean {
        ctx.tape.scale(s, 1.0 / rows.len() as f32)
    } else {
        Ok(s)
    }
}

/// Mean binary cross-entropy over rows in `mask`.
pub fn loss_centerness(ctx: &mut Ctx<'_>, pred: Var, target: &[f32], mask: &[bool]) -> Result<Var> {
    let n = target.len();
    if ctx.tape.shape(pred) != [n, 1] || mask.len() != n {
        return Err(Error::shape("loss_centerness", format!("pred {:?}, {n} targets", ctx.tape.shape(pred))));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        log::warn!("loss_centerness: sample has no positive location");
        return Ok(ctx.tape.scalar(0.0));
    }
    let picked = gather_rows(ctx, pred, &rows)?;
    let t: Vec<f32> = rows.iter().map(|&i| target[i]).collect();
    let one_minus_t = column(ctx, t.iter().map(|v| 1.0 - v).collect());
    let t = column(ctx, t);
    let p = ctx.tape.clamp(picked, LOG_FLOOR, 1.0)?;
    let q = ctx.tape.affine(picked, -1.0, 1.0)?;
    let q = ctx.tape.clamp(q, LOG_FLOOR, 1.0)?;
    let lp = ctx.tape.log(p)?;
    let lq = ctx.tape.log(q)?;
    let a = ctx.tape.mul(t, lp)?;
    let b = ctx.tape.mul(one_minus_t, lq)?;
    let s = ctx.tape.add(a, b)?;
    let s = ctx.tape.sum_all(s)?;
    ctx.tape.scale(s, -1.0 / rows.len() as f32)
}
