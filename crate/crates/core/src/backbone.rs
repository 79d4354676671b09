//! D-stage feature extractors: a small convolutional family for training
//! runs and the ResNet-50 family for exact parameter accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvNorm, Graph, Init, Linear, Mode, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "toy-conv")]
    ToyConv,
    #[serde(rename = "resnet50")]
    Resnet50,
}

/// Canonical ResNet-50 stage output widths.
pub const RESNET50_STAGES: [usize; 4] = [256, 512, 1024, 2048];
const RESNET50_STEM: usize = 64;
const RESNET50_MIDS: [usize; 4] = [64, 128, 256, 512];
const RESNET50_BLOCKS: [usize; 4] = [3, 4, 6, 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubBackboneSpec {
    pub family: Family,
    /// Unscaled stage output widths.
    pub stage_channels: Vec<usize>,
    #[serde(default = "one")]
    pub width_scale: f64,
    #[serde(default = "four")]
    pub channel_multiple: usize,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    /// Optional linear classifier on the pooled last stage (ImageNet-style).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_classes: Option<usize>,
}

fn one() -> f64 {
    1.0
}
fn four() -> usize {
    4
}

impl SubBackboneSpec {
    pub fn toy(stage_channels: &[usize], input_shape: [usize; 3]) -> Self {
        Self {
            family: Family::ToyConv,
            stage_channels: stage_channels.to_vec(),
            width_scale: 1.0,
            channel_multiple: 4,
            input_shape,
            classifier_classes: None,
        }
    }

    pub fn resnet50(width_scale: f64) -> Self {
        Self {
            family: Family::Resnet50,
            stage_channels: RESNET50_STAGES.to_vec(),
            width_scale,
            channel_multiple: 4,
            input_shape: [3, 224, 224],
            classifier_classes: None,
        }
    }

    pub fn depth(&self) -> usize {
        self.stage_channels.len()
    }

    /// Stage output widths after width scaling.
    pub fn effective_channels(&self) -> Result<Vec<usize>> {
        scale_channels(&self.stage_channels, self.width_scale, self.channel_multiple)
    }

    /// The same spec with its width scale multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut s = self.clone();
        s.width_scale *= factor;
        s
    }

    /// (channels, height, width) of every stage output.
    pub fn stage_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let chans = self.effective_channels()?;
        let [_, h, w] = self.input_shape;
        let d = self.depth();
        let need = 1usize << (d + 1);
        if h < need || w < need || h % need != 0 || w % need != 0 {
            return Err(Error::InputTooSmall { height: h, width: w, stages: d });
        }
        Ok(chans.iter().enumerate().map(|(i, &c)| (c, h / 4 >> i, w / 4 >> i)).collect())
    }

    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.depth() < 2 {
            out.push(("stage_channels", "need at least 2 stages".to_string()));
        }
        if self.stage_channels.windows(2).any(|w| w[0] >= w[1]) || self.stage_channels.contains(&0) {
            out.push(("stage_channels", "must be positive and strictly increasing".to_string()));
        }
        if self.family == Family::Resnet50 && self.stage_channels != RESNET50_STAGES {
            out.push(("stage_channels", format!("resnet50 stages are {RESNET50_STAGES:?}")));
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            out.push(("width_scale", "must be positive".to_string()));
        } else if self.channel_multiple == 0 {
            out.push(("channel_multiple", "must be at least 1".to_string()));
        } else if let Err(e) = self.effective_channels() {
            out.push(("width_scale", e.to_string()));
        } else if let Err(e) = self.stage_shapes() {
            out.push(("input_shape", e.to_string()));
        }
        if self.input_shape[0] == 0 {
            out.push(("input_shape", "needs at least one channel".to_string()));
        }
        out
    }
}

/// Maps each width to `floor(width·factor / multiple)·multiple`.
///
/// A factor of exactly 1 leaves widths untouched.
pub fn scale_channels(widths: &[usize], factor: f64, multiple: usize) -> Result<Vec<usize>> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Invalid(format!("width factor must be positive, got {factor}")));
    }
    if multiple == 0 {
        return Err(Error::Invalid("channel multiple must be at least 1".into()));
    }
    widths
        .iter()
        .map(|&w| {
            let scaled = if factor == 1.0 {
                w
            } else {
                // 1e-9 absorbs representation error when w·factor is an exact multiple
                ((w as f64 * factor / multiple as f64) + 1e-9).floor() as usize * multiple
            };
            if scaled < multiple {
                Err(Error::TooNarrow { width: w, scaled, multiple })
            } else {
                Ok(scaled)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightInit {
    Kaiming,
    Glorot,
}

impl WeightInit {
    fn conv(self, cin: usize, cout: usize, k: usize) -> Init {
        match self {
            WeightInit::Kaiming => Init::Kaiming { fan_in: cin * k * k },
            WeightInit::Glorot => Init::Glorot { fan_in: cin * k * k, fan_out: cout * k * k },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Bottleneck {
    reduce: ConvNorm,
    spatial: ConvNorm,
    expand: ConvNorm,
    projection: Option<ConvNorm>,
}

impl Bottleneck {
    fn forward(&self, g: &mut Graph, store: &ParamStore, mode: Mode, x: Var) -> Result<Var> {
        let y = self.reduce.forward(g, store, mode, x)?;
        let y = self.spatial.forward(g, store, mode, y)?;
        let y = self.expand.forward(g, store, mode, y)?;
        let shortcut = match &self.projection {
            Some(p) => p.forward(g, store, mode, x)?,
            None => x,
        };
        let sum = g.add(y, shortcut)?;
        Ok(g.relu(sum))
    }

    fn param_count(&self) -> usize {
        self.reduce.param_count()
            + self.spatial.param_count()
            + self.expand.param_count()
            + self.projection.as_ref().map_or(0, ConvNorm::param_count)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Stage {
    Plain(Vec<ConvNorm>),
    Residual(Vec<Bottleneck>),
}

#[derive(Clone, Debug, PartialEq)]
struct Stem {
    conv: ConvNorm,
    pool_kernel: usize,
    pool_pad: usize,
}

/// A built sub-backbone. Parameters live in the [`ParamStore`] it was built
/// into, under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBackbone {
    pub spec: SubBackboneSpec,
    pub prefix: String,
    stem: Stem,
    stages: Vec<Stage>,
    classifier: Option<Linear>,
}

impl SubBackbone {
    pub fn build(spec: &SubBackboneSpec, seed: u64, store: &mut ParamStore, prefix: &str, init: WeightInit) -> Result<Self> {
        let problems = spec.problems();
        if let Some((field, msg)) = problems.into_iter().next() {
            return match spec.stage_shapes() {
                Err(e @ Error::InputTooSmall { .. }) => Err(e),
                _ => Err(Error::Invalid(format!("backbone.{field}: {msg}"))),
            };
        }
        let chans = spec.effective_channels()?;
        let cin = spec.input_shape[0];
        let p = |s: &str| format!("{prefix}.{s}");
        let (stem, stages) = match spec.family {
            Family::ToyConv => {
                let c0 = chans[0];
                let stem = Stem {
                    conv: ConvNorm::new(store, &p("stem"), cin, c0, 3, 2, true, init.conv(cin, c0, 3), seed)?,
                    pool_kernel: 2,
                    pool_pad: 0,
                };
                let mut stages = Vec::new();
                let mut prev = c0;
                for (i, &c) in chans.iter().enumerate() {
                    let stride = if i == 0 { 1 } else { 2 };
                    let a = ConvNorm::new(store, &p(&format!("stage{}.conv1", i + 1)), prev, c, 3, stride, true, init.conv(prev, c, 3), seed)?;
                    let b = ConvNorm::new(store, &p(&format!("stage{}.conv2", i + 1)), c, c, 3, 1, true, init.conv(c, c, 3), seed)?;
                    stages.push(Stage::Plain(vec![a, b]));
                    prev = c;
                }
                (stem, stages)
            }
            Family::Resnet50 => {
                let stem_c = scale_channels(&[RESNET50_STEM], spec.width_scale, spec.channel_multiple)?[0];
                let mids = scale_channels(&RESNET50_MIDS, spec.width_scale, spec.channel_multiple)?;
                let stem = Stem {
                    conv: ConvNorm::new(store, &p("stem"), cin, stem_c, 7, 2, true, init.conv(cin, stem_c, 7), seed)?,
                    pool_kernel: 3,
                    pool_pad: 1,
                };
                let mut stages = Vec::new();
                let mut prev = stem_c;
                for (i, (&out, &mid)) in chans.iter().zip(&mids).enumerate() {
                    let mut blocks = Vec::new();
                    for b in 0..RESNET50_BLOCKS[i] {
                        let stride = if b == 0 && i > 0 { 2 } else { 1 };
                        let name = |s: &str| p(&format!("stage{}.block{b}.{s}", i + 1));
                        let projection = if b == 0 {
                            Some(ConvNorm::new(store, &name("proj"), prev, out, 1, stride, false, init.conv(prev, out, 1), seed)?)
                        } else {
                            None
                        };
                        blocks.push(Bottleneck {
                            reduce: ConvNorm::new(store, &name("conv1"), prev, mid, 1, 1, true, init.conv(prev, mid, 1), seed)?,
                            spatial: ConvNorm::new(store, &name("conv2"), mid, mid, 3, stride, true, init.conv(mid, mid, 3), seed)?,
                            expand: ConvNorm::new(store, &name("conv3"), mid, out, 1, 1, false, init.conv(mid, out, 1), seed)?,
                            projection,
                        });
                        prev = out;
                    }
                    stages.push(Stage::Residual(blocks));
                }
                (stem, stages)
            }
        };
        let classifier = match spec.classifier_classes {
            Some(n) => Some(Linear::new(store, &p("fc"), *chans.last().expect("D >= 2"), n, seed)?),
            None => None,
        };
        Ok(Self { spec: spec.clone(), prefix: prefix.to_string(), stem, stages, classifier })
    }

    /// Builds into a fresh store under the prefix `backbone`.
    pub fn standalone(spec: &SubBackboneSpec, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let bb = Self::build(spec, seed, &mut store, "backbone", WeightInit::Kaiming)?;
        Ok((bb, store))
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    /// All D stage outputs, shallowest first.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mode: Mode, x: Var) -> Result<Vec<Var>> {
        let shape = g.value(x).shape().to_vec();
        let [c, h, w] = self.spec.input_shape;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::Shape(format!("backbone expects [N,{c},{h},{w}], got {shape:?}")));
        }
        let y = self.stem.conv.forward(g, store, mode, x)?;
        let mut y = g.max_pool(y, self.stem.pool_kernel, 2, self.stem.pool_pad)?;
        let mut feats = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            match stage {
                Stage::Plain(layers) => {
                    for l in layers {
                        y = l.forward(g, store, mode, y)?;
                    }
                }
                Stage::Residual(blocks) => {
                    for b in blocks {
                        y = b.forward(g, store, mode, y)?;
                    }
                }
            }
            feats.push(y);
        }
        Ok(feats)
    }

    /// Convenience: run on a tensor and return stage values.
    pub fn features(&self, store: &ParamStore, mode: Mode, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let feats = self.forward(&mut g, store, mode, xv)?;
        Ok(feats.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Exact trainable element count; running statistics excluded.
    pub fn count_parameters(&self, include_head: bool) -> usize {
        let body: usize = self.stem.conv.param_count()
            + self
                .stages
                .iter()
                .map(|s| match s {
                    Stage::Plain(l) => l.iter().map(ConvNorm::param_count).sum::<usize>(),
                    Stage::Residual(b) => b.iter().map(Bottleneck::param_count).sum(),
                })
                .sum::<usize>();
        let head = match (&self.classifier, include_head) {
            (Some(fc), true) => fc.out_features * fc.in_features + fc.out_features,
            _ => 0,
        };
        body + head
    }

    /// Every stage conv of this backbone, for inspection.
    pub fn convs(&self) -> Vec<&Conv2d> {
        let mut out = vec![&self.stem.conv.conv];
        for s in &self.stages {
            match s {
                Stage::Plain(l) => out.extend(l.iter().map(|c| &c.conv)),
                Stage::Residual(b) => {
                    for blk in b {
                        out.extend([&blk.reduce.conv, &blk.spatial.conv, &blk.expand.conv]);
                        out.extend(blk.projection.as_ref().map(|p| &p.conv));
                    }
                }
            }
        }
        out
    }
}

/// Parameter count of a spec without keeping the model around.
pub fn count_spec_parameters(spec: &SubBackboneSpec, include_head: bool) -> Result<usize> {
    let (bb, _) = SubBackbone::standalone(spec, 0)?;
    Ok(bb.count_parameters(include_head))
}
