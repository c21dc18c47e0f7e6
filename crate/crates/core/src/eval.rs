//! Candidate decoding, greedy temporal NMS, R@n metrics and the
//! best-location analysis.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{tiou, QualityMode, TemporalBox};
use crate::interaction::LevelGeometry;
use crate::model::{DensePrediction, Model};
use crate::params::ParamStore;
use crate::parallel::Parallelism;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub bx: TemporalBox,
    pub score: f32,
    pub level: usize,
    pub index: usize,
}

/// One candidate per location, level 1 first.
pub fn decode_candidates(
    pred: &DensePrediction,
    geometry: &[LevelGeometry],
    segments: usize,
    mode: QualityMode,
) -> Vec<Candidate> {
    let boxes = pred.boxes(geometry, segments);
    let mut out = Vec::with_capacity(boxes.len());
    let mut flat = 0;
    for (level, g) in geometry.iter().enumerate() {
        for index in 0..g.len {
            let m = pred.matching[flat];
            let score = match (mode, &pred.quality) {
                (QualityMode::None, _) | (_, None) => m,
                (_, Some(q)) => m * q[flat],
            };
            out.push(Candidate {
                bx: boxes[flat],
                score,
                level,
                index,
            });
            flat += 1;
        }
    }
    out
}

/// Greedy NMS keeping boxes whose tIoU with every kept box is below
/// `threshold`, padded by score when fewer than `n` survive.
pub fn top_n(candidates: &[Candidate], n: usize, threshold: f32) -> Result<Vec<Candidate>> {
    if candidates.is_empty() {
        return Err(Error::Invalid("top_n on an empty candidate list".into()));
    }
    if n == 0 {
        return Err(Error::Invalid("top_n needs n >= 1".into()));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score));
    let mut kept: Vec<usize> = Vec::with_capacity(n);
    for &i in &order {
        if kept.len() == n {
            break;
        }
        let c = candidates[i].bx;
        if kept.iter().all(|&k| tiou(candidates[k].bx, c) < threshold) {
            kept.push(i);
        }
    }
    if kept.len() < n {
        for &i in &order {
            if kept.len() == n {
                break;
            }
            if !kept.contains(&i) {
                kept.push(i);
            }
        }
    }
    Ok(kept.into_iter().map(|i| candidates[i]).collect())
}

/// Percentage of samples whose first `n` boxes contain one with
/// tIoU strictly above `m`.
pub fn recall_at(predictions: &[Vec<TemporalBox>], gts: &[TemporalBox], n: usize, m: f32) -> Result<f64> {
    if predictions.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "{} prediction lists for {} ground truths",
            predictions.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::Invalid("recall over zero samples".into()));
    }
    let mut hits = 0usize;
    for (i, (preds, gt)) in predictions.iter().zip(gts).enumerate() {
        if preds.is_empty() {
            return Err(Error::Invalid(format!("sample {i} has no predictions")));
        }
        if preds.iter().take(n).any(|&b| tiou(b, *gt) > m) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / gts.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallCell {
    pub n: usize,
    pub m: f32,
    pub recall: f64,
}

/// Fractions of best locations in the first, middle and last third of the
/// ground truth, plus those outside it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocationHistogram {
    pub counts: [usize; 4],
}

impl LocationHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn fractions(&self) -> [f64; 4] {
        let t = self.total().max(1) as f64;
        self.counts.map(|c| c as f64 / t)
    }

    /// Bins a timeline coordinate relative to `gt`.
    pub fn add(&mut self, x: f32, gt: TemporalBox) {
        let bin = if x <= gt.start || x >= gt.end {
            3
        } else {
            let r = f64::from(x - gt.start) / f64::from(gt.len());
            ((r * 3.0) as usize).min(2)
        };
        self.counts[bin] += 1;
    }
}

/// Bins the location whose decoded box best overlaps `gt` (first on ties).
pub fn best_location(timelines: &[f32], boxes: &[TemporalBox], gt: TemporalBox) -> usize {
    let mut best = 0;
    let mut best_iou = f32::NEG_INFINITY;
    for (i, &b) in boxes.iter().enumerate() {
        let u = tiou(b, gt);
        if u > best_iou {
            best_iou = u;
            best = i;
        }
    }
    debug_assert_eq!(timelines.len(), boxes.len());
    best
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub grid: Vec<RecallCell>,
    pub best_iou: Vec<f32>,
    pub histogram: LocationHistogram,
}

impl EvalReport {
    pub fn recall(&self, n: usize, m: f32) -> Option<f64> {
        self.grid.iter().find(|c| c.n == n && c.m == m).map(|c| c.recall)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ns: Vec<usize>,
    pub ms: Vec<f32>,
    pub nms_threshold: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ns: vec![1, 5],
            ms: vec![0.5, 0.7],
            nms_threshold: 0.5,
        }
    }
}

/// What evaluation needs from a sample.
pub trait EvalSample: Sync {
    fn id(&self) -> &str;
    fn features(&self) -> &crate::tensor::Tensor;
    fn tokens(&self) -> &[u32];
    fn gt(&self) -> TemporalBox;
    fn duration(&self) -> f32;
}

/// Ranked predictions for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    pub id: String,
    pub top: Vec<Candidate>,
    pub best_iou: f32,
    pub best_timeline: f32,
}

/// Runs the model over `samples` and ranks its candidates.
pub fn rank_all<S: EvalSample>(
    model: &Model,
    store: &ParamStore,
    samples: &[S],
    cfg: &EvalConfig,
    par: Parallelism,
) -> Result<Vec<Ranked>> {
    let n_max = cfg.ns.iter().copied().max().unwrap_or(1);
    let geometry = model.geometry();
    let k = model.cfg.interaction.segments;
    let timelines: Vec<f32> = geometry
        .iter()
        .flat_map(|g| (0..g.len).map(move |j| g.timeline(j)))
        .collect();
    par.map(samples, |s| {
        let pred = model.predict(store, s.features(), s.tokens())?;
        let cands = decode_candidates(&pred, &geometry, k, model.cfg.quality);
        let boxes: Vec<TemporalBox> = cands.iter().map(|c| c.bx).collect();
        let best = best_location(&timelines, &boxes, s.gt());
        Ok(Ranked {
            id: s.id().to_string(),
            top: top_n(&cands, n_max, cfg.nms_threshold)?,
            best_iou: tiou(boxes[best], s.gt()),
            best_timeline: timelines[best],
        })
    })
    .into_iter()
    .collect()
}

/// Recall grid, per-sample best IoU and best-location histogram.
pub fn report<S: EvalSample>(ranked: &[Ranked], samples: &[S], cfg: &EvalConfig) -> Result<EvalReport> {
    let gts: Vec<TemporalBox> = samples.iter().map(EvalSample::gt).collect();
    let boxes: Vec<Vec<TemporalBox>> = ranked.iter().map(|r| r.top.iter().map(|c| c.bx).collect()).collect();
    let mut grid = Vec::new();
    for &n in &cfg.ns {
        for &m in &cfg.ms {
            grid.push(RecallCell {
                n,
                m,
                recall: recall_at(&boxes, &gts, n, m)?,
            });
        }
    }
    let mut histogram = LocationHistogram::default();
    for (r, gt) in ranked.iter().zip(&gts) {
        histogram.add(r.best_timeline, *gt);
    }
    Ok(EvalReport {
        grid,
        best_iou: ranked.iter().map(|r| r.best_iou).collect(),
        histogram,
    })
}

pub fn evaluate<S: EvalSample>(
    model: &Model,
    store: &ParamStore,
    samples: &[S],
    cfg: &EvalConfig,
    par: Parallelism,
) -> Result<EvalReport> {
    let ranked = rank_all(model, store, samples, cfg, par)?;
    report(&ranked, samples, cfg)
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    id: &'a str,
    predictions: Vec<[f32; 3]>,
}

/// One JSON object per line: sample id and `[start, end, score]` in seconds.
pub fn write_predictions<S: EvalSample>(
    path: &Path,
    ranked: &[Ranked],
    samples: &[S],
    segments: usize,
) -> Result<()> {
    let mut out = Vec::new();
    for (r, s) in ranked.iter().zip(samples) {
        let scale = s.duration() / segments as f32;
        let rec = PredictionRecord {
            id: &r.id,
            predictions: r
                .top
                .iter()
                .map(|c| [c.bx.start * scale, c.bx.end * scale, c.score])
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
