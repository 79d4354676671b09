//! Task heads and task losses.

use serde::{Deserialize, Serialize};

use crate::data::Labels;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Init, Linear, Mode, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "multiclass-ce")]
    MulticlassCe,
    #[serde(rename = "per-pixel-ce")]
    PerPixelCe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Global average pool + linear.
    Classification,
    /// 1×1 conv + bilinear upsample to the input size.
    Segmentation,
}

impl LossKind {
    pub fn head_kind(self) -> HeadKind {
        match self {
            LossKind::MulticlassCe => HeadKind::Classification,
            LossKind::PerPixelCe => HeadKind::Segmentation,
        }
    }
}

/// Head layout. `input_stages` are 1-based stage indices; each listed stage
/// gets its own projection and the projections are summed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub input_stages: Vec<usize>,
}

impl HeadSpec {
    /// Classification reads stage D; segmentation reads every stage.
    pub fn default_for(kind: HeadKind, depth: usize) -> Self {
        let input_stages = match kind {
            HeadKind::Classification => vec![depth],
            HeadKind::Segmentation => (1..=depth).collect(),
        };
        Self { kind, input_stages }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Projection {
    Linear(Linear),
    Conv(Conv2d),
}

/// One instantiated head.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub spec: HeadSpec,
    pub classes: usize,
    pub output_size: [usize; 2],
    projections: Vec<(usize, Projection)>,
}

impl Head {
    pub fn build(
        spec: &HeadSpec,
        stage_channels: &[usize],
        classes: usize,
        output_size: [usize; 2],
        store: &mut ParamStore,
        prefix: &str,
        seed: u64,
    ) -> Result<Self> {
        let mut projections = Vec::new();
        for &stage in &spec.input_stages {
            let c = *stage_channels
                .get(stage.wrapping_sub(1))
                .ok_or_else(|| Error::Invalid(format!("head stage {stage} outside 1..={}", stage_channels.len())))?;
            let name = format!("{prefix}.stage{stage}");
            let proj = match spec.kind {
                HeadKind::Classification => Projection::Linear(Linear::new(store, &name, c, classes, seed)?),
                HeadKind::Segmentation => Projection::Conv(Conv2d::new(
                    store,
                    &name,
                    c,
                    classes,
                    1,
                    1,
                    true,
                    Init::Glorot { fan_in: c, fan_out: classes },
                    seed,
                )?),
            };
            projections.push((stage, proj));
        }
        Ok(Self { spec: spec.clone(), classes, output_size, projections })
    }

    /// Logits from per-stage features (index 0 = stage 1).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mode: Mode, feats: &[Var]) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.projections.len());
        for (stage, proj) in &self.projections {
            let f = feats[stage - 1];
            let y = match proj {
                Projection::Linear(l) => {
                    let pooled = g.global_avg_pool(f)?;
                    l.forward(g, store, mode, pooled)?
                }
                Projection::Conv(c) => {
                    let y = c.forward(g, store, mode, f)?;
                    g.resize_bilinear(y, self.output_size[0], self.output_size[1])?
                }
            };
            parts.push(y);
        }
        g.add_n(&parts)
    }
}

/// Mean cross-entropy of a task's predictions.
pub fn task_loss(g: &mut Graph, kind: LossKind, logits: Var, labels: &Labels) -> Result<Var> {
    match (kind, labels) {
        (LossKind::MulticlassCe, Labels::Classes(l)) | (LossKind::PerPixelCe, Labels::Masks(l)) => g.cross_entropy(logits, l),
        _ => Err(Error::Shape(format!("{kind:?} loss given mismatched labels"))),
    }
}
