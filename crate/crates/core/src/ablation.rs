//! Ablation grids: sampling strategy × quality head × architecture, over
//! shared seeds.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::Result;
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::heads::QualityMode;
use crate::interaction::FusionMode;
use crate::model::{Model, ModelConfig};
use crate::report::{RunResult, METRICS};
use crate::train::{train_three_step, Sampling, TrainConfig};

/// Pyramid fusion and location embedding switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Multi-level fusion with the location embedding.
    Full,
    /// Location embedding, query fused into level 1 only.
    NoMlf,
    /// Every level fuses the same query feature, with location embedding.
    MlfSame,
    /// Multi-level fusion without the location embedding.
    NoLocation,
    /// Neither multi-level fusion nor location embedding.
    Neither,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Full => "full",
            Architecture::NoMlf => "no-mlf",
            Architecture::MlfSame => "mlf-same",
            Architecture::NoLocation => "no-location",
            Architecture::Neither => "neither",
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        let (fusion, location) = match self {
            Architecture::Full => (FusionMode::MultiLevel, true),
            Architecture::NoMlf => (FusionMode::FirstOnly, true),
            Architecture::MlfSame => (FusionMode::Same, true),
            Architecture::NoLocation => (FusionMode::MultiLevel, false),
            Architecture::Neither => (FusionMode::FirstOnly, false),
        };
        cfg.interaction.fusion = fusion;
        cfg.interaction.location_embedding = location;
    }
}

fn sampling_name(s: Sampling) -> &'static str {
    match s {
        Sampling::All => "all",
        Sampling::Half => "half",
        Sampling::Random => "random",
        Sampling::Center => "center",
    }
}

fn quality_name(q: QualityMode) -> &'static str {
    match q {
        QualityMode::Iou => "iou",
        QualityMode::Centerness => "centerness",
        QualityMode::None => "none",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub sampling: Sampling,
    pub quality: QualityMode,
    pub architecture: Architecture,
}

impl Default for Variant {
    fn default() -> Self {
        Variant {
            sampling: Sampling::All,
            quality: QualityMode::Iou,
            architecture: Architecture::Full,
        }
    }
}

impl Variant {
    /// `sampling/quality/architecture`, e.g. `all/iou/full`.
    pub fn name(&self) -> String {
        format!(
            "{}/{}/{}",
            sampling_name(self.sampling),
            quality_name(self.quality),
            self.architecture.name()
        )
    }

    pub fn configure(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        m.quality = self.quality;
        self.architecture.apply(&mut m);
        let t = TrainConfig {
            sampling: self.sampling,
            ..train.clone()
        };
        (m, t)
    }
}

/// The declared grid; variants are the full cross product in field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub samplings: Vec<Sampling>,
    pub qualities: Vec<QualityMode>,
    pub architectures: Vec<Architecture>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            samplings: vec![Sampling::All, Sampling::Center],
            qualities: vec![QualityMode::Iou, QualityMode::None],
            architectures: vec![Architecture::Full],
            seeds: vec![0, 1, 2],
        }
    }
}

impl AblationConfig {
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for &sampling in &self.samplings {
            for &quality in &self.qualities {
                for &architecture in &self.architectures {
                    out.push(Variant {
                        sampling,
                        quality,
                        architecture,
                    });
                }
            }
        }
        out
    }
}

/// Test-split and temporal-query-subset reports of one trained variant.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub variant: Variant,
    pub seed: u64,
    pub test: EvalReport,
    pub temporal: Option<EvalReport>,
}

impl Outcome {
    pub fn result(&self) -> RunResult {
        RunResult {
            method: self.variant.name(),
            seed: self.seed,
            recalls: METRICS.map(|(n, m)| self.test.recall(n, m)),
        }
    }
}

pub struct Splits<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub test: &'a [Sample],
}

/// Trains one variant from scratch with `seed` and evaluates it.
pub fn run_variant(
    variant: Variant,
    seed: u64,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    data: &Splits<'_>,
) -> Result<Outcome> {
    let (mc, tc) = variant.configure(model_cfg, train_cfg);
    let (model, store) = Model::new(mc, seed)?;
    let (state, _) = train_three_step(&model, store, data.train, data.val, &tc, seed, |_, _| Ok(()))?;
    let test = evaluate(&model, &state.params, data.test, eval_cfg, tc.parallelism)?;
    let temporal: Vec<Sample> = data.test.iter().filter(|s| s.temporal).cloned().collect();
    let temporal = if temporal.is_empty() {
        None
    } else {
        Some(evaluate(&model, &state.params, &temporal, eval_cfg, tc.parallelism)?)
    };
    Ok(Outcome {
        variant,
        seed,
        test,
        temporal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_cardinality() {
        let cfg = AblationConfig::default();
        assert_eq!(cfg.variants().len() * cfg.seeds.len(), 12);
        let names: Vec<String> = cfg.variants().iter().map(Variant::name).collect();
        assert_eq!(names, ["all/iou/full", "all/none/full", "center/iou/full", "center/none/full"]);
    }

    #[test]
    fn architecture_switches() {
        let mut m = ModelConfig::default();
        Architecture::Neither.apply(&mut m);
        assert_eq!(m.interaction.fusion, FusionMode::FirstOnly);
        assert!(!m.interaction.location_embedding);
        Architecture::MlfSame.apply(&mut m);
        assert_eq!(m.interaction.fusion, FusionMode::Same);
        assert!(m.interaction.location_embedding);
    }
}
