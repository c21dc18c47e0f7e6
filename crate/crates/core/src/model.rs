//! The assembled network: interaction module plus heads shared across levels.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::error::Result;
use crate::heads::{decode, Heads, QualityMode, TemporalBox};
use crate::interaction::{Interaction, InteractionConfig, LevelGeometry, Pyramid};
use crate::layers::Builder;
use crate::params::{Ctx, Initializer, ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub interaction: InteractionConfig,
    pub quality: QualityMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            interaction: InteractionConfig::default(),
            quality: QualityMode::Iou,
        }
    }
}

impl ModelConfig {
    /// Word and LSTM widths as published (300-d words, 512 hidden units).
    pub fn with_paper_dims(mut self) -> Self {
        self.interaction.word_dim = 300;
        self.interaction.hidden = 512;
        self
    }

    /// SHA-256 of the canonical JSON form; checkpoints record it.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub interaction: Interaction,
    pub heads: Heads,
}

/// Head outputs concatenated over levels, level 1 first.
pub struct DenseOutput {
    /// `[n, 2]`.
    pub dist: Var,
    /// `[n, 1]`.
    pub matching: Var,
    /// `[n, 1]`.
    pub quality: Option<Var>,
    pub pyramid: Pyramid,
}

/// Detached per-location predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct DensePrediction {
    pub dist: Vec<[f32; 2]>,
    pub matching: Vec<f32>,
    pub quality: Option<Vec<f32>>,
}

impl Model {
    /// Builds the model and a freshly initialized parameter store.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let mut b = Builder::new(&mut store, &mut init, ParamGroup::Interaction);
        let interaction = Interaction::new(&mut b, &cfg.interaction)?;
        let heads = Heads::new(&mut b, cfg.interaction.channels, cfg.interaction.kernel, cfg.quality);
        Ok((
            Model {
                cfg,
                interaction,
                heads,
            },
            store,
        ))
    }

    pub fn geometry(&self) -> Vec<LevelGeometry> {
        self.cfg.interaction.geometry()
    }

    pub fn num_locations(&self) -> usize {
        self.geometry().iter().map(|g| g.len).sum()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, features: &Tensor, tokens: &[u32]) -> Result<DenseOutput> {
        let x = ctx.tape.constant(features.clone());
        let pyramid = self.interaction.forward(ctx, x, tokens)?;
        let mut dist = Vec::new();
        let mut matching = Vec::new();
        let mut quality = Vec::new();
        for (p, g) in pyramid.levels.iter().zip(self.geometry()) {
            let out = self.heads.forward(ctx, *p, g.stride)?;
            dist.push(out.dist);
            matching.push(out.matching);
            quality.extend(out.quality);
        }
        let dist = ctx.tape.concat(&dist, 0)?;
        let matching = ctx.tape.concat(&matching, 0)?;
        let quality = if quality.is_empty() {
            None
        } else {
            Some(ctx.tape.concat(&quality, 0)?)
        };
        Ok(DenseOutput {
            dist,
            matching,
            quality,
            pyramid,
        })
    }

    /// Inference with frozen parameters and running statistics.
    pub fn predict(&self, store: &ParamStore, features: &Tensor, tokens: &[u32]) -> Result<DensePrediction> {
        let mut ctx = Ctx::frozen(store);
        let out = self.forward(&mut ctx, features, tokens)?;
        Ok(detach(&ctx, &out))
    }
}

pub fn detach(ctx: &Ctx<'_>, out: &DenseOutput) -> DensePrediction {
    let dist = ctx
        .tape
        .value(out.dist)
        .data()
        .chunks(2)
        .map(|r| [r[0], r[1]])
        .collect();
    DensePrediction {
        dist,
        matching: ctx.tape.value(out.matching).data().to_vec(),
        quality: out.quality.map(|q| ctx.tape.value(q).data().to_vec()),
    }
}

impl DensePrediction {
    /// Decoded boxes for every location, level 1 first.
    pub fn boxes(&self, geometry: &[LevelGeometry], segments: usize) -> Vec<TemporalBox> {
        let k = segments as f32;
        geometry
            .iter()
            .flat_map(|g| (0..g.len).map(move |j| g.timeline(j)))
            .zip(&self.dist)
            .map(|(x, d)| decode(x, d[0], d[1], k))
            .collect()
    }
}
