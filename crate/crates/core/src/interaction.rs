//! Video-query interaction: query encoding, per-level attention over words,
//! temporal location embedding, fusion and the 1-D feature pyramid.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{BiLstm, Builder, Conv1dBlock, Conv1dBlockSpec, Linear};
use crate::params::{Ctx, ParamGroup, ParamId};
use crate::tensor::Tensor;

/// How attended query features reach the pyramid levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Every level fuses its own attended query feature.
    MultiLevel,
    /// Every level fuses the level-1 query feature.
    Same,
    /// Only level 1 is fused; deeper levels see plain video features.
    FirstOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InteractionConfig {
    pub vocab_size: usize,
    pub word_dim: usize,
    /// Per-direction LSTM width `H`; word states are `2H` wide.
    pub hidden: usize,
    pub feature_dim: usize,
    pub channels: usize,
    pub levels: usize,
    pub segments: usize,
    pub kernel: usize,
    pub location_embedding: bool,
    pub location_dim: usize,
    pub fusion: FusionMode,
    pub batch_norm: bool,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        InteractionConfig {
            vocab_size: 32,
            word_dim: 32,
            hidden: 64,
            feature_dim: 64,
            channels: 64,
            levels: 3,
            segments: 32,
            kernel: 3,
            location_embedding: true,
            location_dim: 256,
            fusion: FusionMode::MultiLevel,
            batch_norm: false,
        }
    }
}

impl InteractionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("word_dim", self.word_dim),
            ("hidden", self.hidden),
            ("feature_dim", self.feature_dim),
            ("channels", self.channels),
            ("levels", self.levels),
            ("segments", self.segments),
            ("kernel", self.kernel),
            ("location_dim", self.location_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        let div = 1usize << (self.levels - 1);
        if !self.segments.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "segment count {} is not divisible by 2^(levels-1) = {div}",
                self.segments
            )));
        }
        Ok(())
    }

    /// `(T_i, s_i)` for each level.
    pub fn geometry(&self) -> Vec<LevelGeometry> {
        pyramid_geometry(self.segments, self.levels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGeometry {
    pub len: usize,
    pub stride: usize,
}

impl LevelGeometry {
    /// Timeline coordinate of location `j`, in segment units.
    pub fn timeline(&self, j: usize) -> f32 {
        (j as f32 + 0.5) * self.stride as f32
    }
}

/// Level lengths `K / 2^(i-1)` and strides `2^(i-1)`.
pub fn pyramid_geometry(segments: usize, levels: usize) -> Vec<LevelGeometry> {
    (0..levels)
        .map(|i| LevelGeometry {
            len: segments >> i,
            stride: 1 << i,
        })
        .collect()
}

/// Raw location features `[(t - 0.5)/T, (t + 0.5)/T, 1/T]` for `t = 1..=T`.
pub fn raw_locations(t_len: usize) -> Result<Tensor> {
    if t_len == 0 {
        return Err(Error::Invalid("location embedding needs K >= 1".into()));
    }
    let n = t_len as f32;
    let data = (1..=t_len)
        .flat_map(|t| {
            let t = t as f32;
            [(t - 0.5) / n, (t + 0.5) / n, 1.0 / n]
        })
        .collect();
    Ok(Tensor::from_parts(vec![t_len, 3], data))
}

pub struct QueryEncoding {
    /// `[N, 2H]`.
    pub words: Var,
    /// `[1, 2H]`, the projected `[h_1; h_N]`.
    pub global: Var,
}

#[derive(Clone, Debug)]
pub struct QueryEncoder {
    pub embedding: ParamId,
    pub lstm: BiLstm,
    pub global: Linear,
    pub vocab_size: usize,
}

impl QueryEncoder {
    pub fn new(b: &mut Builder<'_>, cfg: &InteractionConfig) -> Self {
        let embedding = b.fan_in("query.embedding", &[cfg.vocab_size, cfg.word_dim], cfg.word_dim);
        let lstm = BiLstm::new(b, "query.lstm", cfg.word_dim, cfg.hidden);
        let global = Linear::new(b, "query.global", 4 * cfg.hidden, 2 * cfg.hidden);
        QueryEncoder {
            embedding,
            lstm,
            global,
            vocab_size: cfg.vocab_size,
        }
    }

    pub fn encode(&self, ctx: &mut Ctx<'_>, tokens: &[u32]) -> Result<QueryEncoding> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty query".into()));
        }
        let v = self.vocab_size;
        let mut one_hot = vec![0f32; tokens.len() * v];
        for (i, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            if tok >= v {
                return Err(Error::Invalid(format!("token id {tok} outside vocabulary of {v}")));
            }
            one_hot[i * v + tok] = 1.0;
        }
        let one_hot = ctx.tape.constant(Tensor::from_parts(vec![tokens.len(), v], one_hot));
        let table = ctx.param(self.embedding);
        let embedded = ctx.tape.matmul(one_hot, table)?;
        let out = self.lstm.forward(ctx, embedded)?;
        let n = tokens.len();
        let first = ctx.tape.slice(out.hiddens, 0, 0, 1)?;
        let last = ctx.tape.slice(out.hiddens, 0, n - 1, 1)?;
        let ends = ctx.tape.concat(&[first, last], 1)?;
        let global = self.global.forward(ctx, ends)?;
        Ok(QueryEncoding {
            words: out.hiddens,
            global,
        })
    }
}

pub struct LevelAttention {
    /// `[N, 1]`, sums to one over words.
    pub weights: Var,
    /// `[1, 2H]`.
    pub query: Var,
}

/// Word attention with `W1`, `W3` shared and `W2` per level.
#[derive(Clone, Debug)]
pub struct QueryAttention {
    pub w1: Linear,
    pub w2: Vec<Linear>,
    pub w3: Linear,
}

impl QueryAttention {
    pub fn new(b: &mut Builder<'_>, cfg: &InteractionConfig) -> Self {
        let d = 2 * cfg.hidden;
        let w3 = Linear::new(b, "attn.w3", d, d);
        let w2 = (0..cfg.levels)
            .map(|i| Linear::new(b, &format!("attn.w2.{i}"), d, d))
            .collect();
        let w1 = Linear::new(b, "attn.w1", d, 1);
        QueryAttention { w1, w2, w3 }
    }

    /// Attention at zero-based level `level`.
    pub fn attend(&self, ctx: &mut Ctx<'_>, level: usize, enc: &QueryEncoding) -> Result<LevelAttention> {
        let w2 = self.w2.get(level).ok_or_else(|| {
            Error::Invalid(format!("level {} outside 1..={}", level + 1, self.w2.len()))
        })?;
        let guide = self.w3.forward(ctx, enc.global)?;
        let guide = ctx.tape.relu(guide)?;
        let guide = w2.forward(ctx, guide)?;
        let gated = ctx.tape.mul(enc.words, guide)?;
        let logits = self.w1.forward(ctx, gated)?;
        let weights = ctx.tape.softmax(logits, 0)?;
        let weighted = ctx.tape.mul(enc.words, weights)?;
        let query = ctx.tape.sum(weighted, 0)?;
        Ok(LevelAttention { weights, query })
    }
}

/// Elementwise product of a `[T, c]` map with a `[1, c]` query feature.
pub fn fuse(ctx: &mut Ctx<'_>, map: Var, query: Var) -> Result<Var> {
    ctx.tape.mul(map, query)
}

/// Doubles the length of a `[T, c]` map by repeating every row.
pub fn upsample2(ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    let (t, c) = (shape[0], shape[1]);
    let x = ctx.tape.reshape(x, &[t, 1, c])?;
    let x = ctx.tape.broadcast(x, &[t, 2, c])?;
    ctx.tape.reshape(x, &[2 * t, c])
}

/// Per-level maps produced by [`Interaction::forward`].
pub struct Pyramid {
    /// `P_i`, each `[T_i, c]`.
    pub levels: Vec<Var>,
    /// `C_i` before the top-down pass.
    pub fused: Vec<Var>,
    pub attention: Vec<LevelAttention>,
}

#[derive(Clone, Debug)]
pub struct Interaction {
    pub cfg: InteractionConfig,
    pub encoder: QueryEncoder,
    pub attention: QueryAttention,
    /// Per-level projection of the attended query to `c`.
    pub query_proj: Vec<Linear>,
    pub location: Linear,
    pub input: Conv1dBlock,
    /// 1x1 projection producing `C_1`.
    pub merge: Conv1dBlock,
    pub down: Vec<Conv1dBlock>,
    pub lateral: Vec<Conv1dBlock>,
}

impl Interaction {
    pub fn new(b: &mut Builder<'_>, cfg: &InteractionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = b.scope(ParamGroup::Interaction, "interaction");
        let c = cfg.channels;
        let encoder = QueryEncoder::new(&mut b, cfg);
        let attention = QueryAttention::new(&mut b, cfg);
        let query_proj = (0..cfg.levels)
            .map(|i| Linear::new(&mut b, &format!("query_proj.{i}"), 2 * cfg.hidden, c))
            .collect();
        let location = Linear::new(&mut b, "location", 3, cfg.location_dim);
        let block = |cin, cout, kernel, stride| {
            Conv1dBlockSpec::new(cin, cout, kernel, stride)
                .relu(true)
                .batch_norm(cfg.batch_norm)
        };
        let input = Conv1dBlock::new(&mut b, "input", block(cfg.feature_dim, c, cfg.kernel, 1));
        let merge_in = if cfg.location_embedding {
            c + cfg.location_dim
        } else {
            c
        };
        let merge = Conv1dBlock::new(&mut b, "merge", Conv1dBlockSpec::new(merge_in, c, 1, 1));
        let down = (1..cfg.levels)
            .map(|i| Conv1dBlock::new(&mut b, &format!("down.{i}"), block(c, c, cfg.kernel, 2)))
            .collect();
        let lateral = (0..cfg.levels)
            .map(|i| Conv1dBlock::new(&mut b, &format!("lateral.{i}"), Conv1dBlockSpec::new(c, c, 1, 1)))
            .collect();
        Ok(Interaction {
            cfg: cfg.clone(),
            encoder,
            attention,
            query_proj,
            location,
            input,
            merge,
            down,
            lateral,
        })
    }

    /// Builds the pyramid from a `[K, feature_dim]` feature matrix.
    pub fn forward(&self, ctx: &mut Ctx<'_>, features: Var, tokens: &[u32]) -> Result<Pyramid> {
        let cfg = &self.cfg;
        let shape = ctx.tape.shape(features).to_vec();
        if shape != [cfg.segments, cfg.feature_dim] {
            return Err(Error::shape(
                "interaction",
                format!("features {shape:?}, model expects [{}, {}]", cfg.segments, cfg.feature_dim),
            ));
        }
        let enc = self.encoder.encode(ctx, tokens)?;
        let mut attention = Vec::with_capacity(cfg.levels);
        let mut queries = Vec::with_capacity(cfg.levels);
        for i in 0..cfg.levels {
            let source = match cfg.fusion {
                FusionMode::Same => 0,
                _ => i,
            };
            if source == i && (i == 0 || cfg.fusion == FusionMode::MultiLevel) {
                let att = self.attention.attend(ctx, i, &enc)?;
                let q = self.query_proj[i].forward(ctx, att.query)?;
                attention.push(att);
                queries.push(q);
            } else {
                queries.push(queries[0]);
            }
        }

        let m1 = self.input.forward(ctx, features)?;
        let mut c1 = fuse(ctx, m1, queries[0])?;
        if cfg.location_embedding {
            let raw = ctx.tape.constant(raw_locations(cfg.segments)?);
            let emb = self.location.forward(ctx, raw)?;
            c1 = ctx.tape.concat(&[c1, emb], 1)?;
        }
        let c1 = self.merge.forward(ctx, c1)?;
        let mut fused = vec![c1];
        for i in 1..cfg.levels {
            let m = self.down[i - 1].forward(ctx, fused[i - 1])?;
            let c = match cfg.fusion {
                FusionMode::FirstOnly => m,
                _ => fuse(ctx, m, queries[i])?,
            };
            fused.push(c);
        }
        let mut levels = vec![None; cfg.levels];
        let top = cfg.levels - 1;
        levels[top] = Some(self.lateral[top].forward(ctx, fused[top])?);
        for i in (0..top).rev() {
            let lat = self.lateral[i].forward(ctx, fused[i])?;
            let up = upsample2(ctx, levels[i + 1].expect("filled top-down"))?;
            levels[i] = Some(ctx.tape.add(lat, up)?);
        }
        Ok(Pyramid {
            levels: levels.into_iter().map(|v| v.expect("filled top-down")).collect(),
            fused,
            attention,
        })
    }
}
