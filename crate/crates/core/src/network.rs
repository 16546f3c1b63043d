//! Network specifications, named presets and the assembled model.

use serde::{Deserialize, Serialize};

use crate::block::{Block, BlockSpec};
use crate::cost::{self, per_element, Cost, CostReport};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm, BufferStore, Builder, Conv2d, Forward, Linear, Mode, ParamStore};
use crate::rng;
use crate::tensor::{Result, Tensor, TensorError};
use crate::vcr::{ConceptConfig, ModulationLevel, VcrSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// 3×3 stride-2 max pooling after the stem.
    pub max_pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    pub out_channels: usize,
    /// Cardinality `C`.
    pub concepts: usize,
    /// Per-concept width `p`.
    pub width: usize,
    /// Stride of the first block.
    pub stride: usize,
    /// Concept-state width for this stage, overriding the width rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_width: Option<usize>,
    /// Whether this stage's blocks carry concept modules when the network
    /// has them enabled.
    #[serde(default = "yes")]
    pub vcr: bool,
}

fn yes() -> bool {
    true
}

/// Declarative description of a whole network. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub in_channels: usize,
    /// Square input side used for cost reports.
    pub input_size: usize,
    pub classes: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    /// Concept modules in every enabled stage; absent means plain ResNeXt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vcr: Option<VcrSettings>,
}

pub const PRESETS: &[&str] = &[
    "resnext50",
    "resnext50-vcr",
    "resnext50-vcr-pixel",
    "mini",
    "mini-vcr",
    "mini-wide",
    "mini-wide-vcr",
];

fn stage(blocks: usize, out_channels: usize, concepts: usize, width: usize, stride: usize) -> StageSpec {
    StageSpec {
        blocks,
        out_channels,
        concepts,
        width,
        stride,
        state_width: None,
        vcr: true,
    }
}

impl NetworkSpec {
    /// ResNeXt-50 (32×4d) geometry.
    pub fn resnext50() -> Self {
        NetworkSpec {
            in_channels: 3,
            input_size: 224,
            classes: 1000,
            stem: StemSpec {
                channels: 64,
                kernel: 7,
                stride: 2,
                padding: 3,
                max_pool: true,
            },
            stages: vec![
                stage(3, 256, 32, 4, 1),
                stage(4, 512, 32, 8, 2),
                stage(6, 1024, 32, 16, 2),
                stage(3, 2048, 32, 32, 2),
            ],
            vcr: None,
        }
    }

    /// Two stages of one block, 4 concepts, 16×16 inputs, 3 classes.
    pub fn mini() -> Self {
        NetworkSpec {
            in_channels: 3,
            input_size: 16,
            classes: 3,
            stem: StemSpec {
                channels: 16,
                kernel: 3,
                stride: 1,
                padding: 1,
                max_pool: false,
            },
            stages: vec![stage(1, 32, 4, 2, 1), stage(1, 64, 4, 4, 2)],
            vcr: None,
        }
    }

    /// Three stages with 8 concepts.
    pub fn mini_wide() -> Self {
        NetworkSpec {
            stages: vec![stage(1, 32, 8, 2, 1), stage(1, 64, 8, 4, 2), stage(1, 128, 8, 4, 2)],
            ..NetworkSpec::mini()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let vcr = Some(VcrSettings::default());
        let pixel = Some(VcrSettings {
            level: ModulationLevel::Pixel,
            ..VcrSettings::default()
        });
        Ok(match name {
            "resnext50" => NetworkSpec::resnext50(),
            "resnext50-vcr" => NetworkSpec { vcr, ..NetworkSpec::resnext50() },
            "resnext50-vcr-pixel" => NetworkSpec { vcr: pixel, ..NetworkSpec::resnext50() },
            "mini" => NetworkSpec::mini(),
            "mini-vcr" => NetworkSpec { vcr, ..NetworkSpec::mini() },
            "mini-wide" => NetworkSpec::mini_wide(),
            "mini-wide-vcr" => NetworkSpec { vcr, ..NetworkSpec::mini_wide() },
            _ => {
                return Err(TensorError::invalid(
                    "preset",
                    format!("unknown preset {name:?}; known: {}", PRESETS.join(", ")),
                ))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(TensorError::invalid("network_spec", detail));
        if self.in_channels == 0 || self.classes == 0 || self.input_size == 0 {
            return bad("input channels, input size and classes must be positive".into());
        }
        let s = &self.stem;
        if s.channels == 0 || s.kernel == 0 || s.stride == 0 {
            return bad(format!("invalid stem {s:?}"));
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 || st.out_channels == 0 || st.concepts == 0 || st.width == 0 || st.stride == 0 {
                return bad(format!("stage {i}: all extents must be positive: {st:?}"));
            }
        }
        for b in self.block_specs()? {
            b.validate()?;
        }
        Ok(())
    }

    /// Specs for every block in forward order.
    pub fn block_specs(&self) -> Result<Vec<BlockSpec>> {
        let mut out = Vec::new();
        let mut channels = self.stem.channels;
        for st in &self.stages {
            let vcr = match (&self.vcr, st.vcr) {
                (Some(settings), true) => {
                    Some(ConceptConfig::new(st.concepts, st.width, st.state_width, settings.clone())?)
                }
                _ => None,
            };
            for j in 0..st.blocks {
                out.push(BlockSpec {
                    in_channels: channels,
                    out_channels: st.out_channels,
                    concepts: st.concepts,
                    width: st.width,
                    stride: if j == 0 { st.stride } else { 1 },
                    vcr: vcr.clone(),
                });
                channels = st.out_channels;
            }
        }
        Ok(out)
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.out_channels)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network spec serializes")
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Layers of an assembled network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub max_pool: bool,
    /// Blocks grouped by stage.
    pub stages: Vec<Vec<Block>>,
    pub head: Linear,
}

/// A network together with its parameters and buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub buffers: BufferStore,
    pub net: Network,
}

impl Model {
    /// Deterministic in `(spec, seed)`.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let (mut params, mut buffers) = (ParamStore::new(), BufferStore::new());
        let mut r = rng::seeded(seed);
        let mut b = Builder::new(&mut params, &mut buffers, &mut r);
        let s = &spec.stem;
        let stem = Conv2d::new(&mut b, "stem.conv", spec.in_channels, s.channels, s.kernel, s.stride, s.padding, 1)?;
        let stem_bn = BatchNorm::new(&mut b, "stem.bn", s.channels, 1);
        let specs = spec.block_specs()?;
        let mut stages = Vec::new();
        let mut k = 0;
        for (i, st) in spec.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for j in 0..st.blocks {
                let mut scope = b.scope(format!("stages.{i}.blocks.{j}"));
                blocks.push(Block::new(&mut scope, &specs[k])?);
                k += 1;
            }
            stages.push(blocks);
        }
        let head = Linear::new(&mut b, "head", spec.feature_channels(), spec.classes);
        Ok(Model {
            spec: spec.clone(),
            params,
            buffers,
            net: Network {
                stem,
                stem_bn,
                max_pool: s.max_pool,
                stages,
                head,
            },
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.net.stages.iter().flatten()
    }

    /// Logits `[N×classes]`. Blocks are tapped as `blocks.{k}` in forward
    /// order and the final feature map as `features`.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let s = f.graph.shape(x);
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(TensorError::invalid(
                "network",
                format!("expected [N×{}×H×W], got {s:?}", self.spec.in_channels),
            ));
        }
        let n = &self.net;
        let y = n.stem.forward(f, x)?;
        let y = n.stem_bn.forward(f, y)?;
        let mut y = f.graph.relu(y);
        if n.max_pool {
            y = f.graph.max_pool2d(y, 3, 2, 1)?;
        }
        for (k, blk) in self.blocks().enumerate() {
            y = blk.forward(f, y, Some(&format!("blocks.{k}")))?;
        }
        f.graph.tap("features", y);
        let pooled = f.graph.global_avg_pool(y)?;
        n.head.forward(f, pooled)
    }

    /// Eval-mode logits for a batch, without gradient bookkeeping.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut f = Forward::inference(&mut g, &self.params, &self.buffers);
        let out = self.forward(&mut f, xv)?;
        Ok(g.value(out).clone())
    }

    /// Run an eval-mode forward pass and hand back the graph with its taps.
    pub fn trace(&self, x: &Tensor) -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut f = Forward::new(&mut g, &self.params, &self.buffers, Mode::Eval);
        let out = self.forward(&mut f, xv)?;
        Ok((g, out))
    }

    /// Parameters and per-image compute at `input_size²`.
    pub fn cost_report(&self, name: &str) -> CostReport {
        let spec = &self.spec;
        let n = &self.net;
        let (mut h, mut w) = (spec.input_size, spec.input_size);
        let mut layers = Vec::new();
        let stem_out = n.stem.output_hw(h, w);
        let mut stem = Cost::macs(n.stem.macs(h, w))
            + Cost::elementwise(
                (spec.stem.channels * stem_out.0 * stem_out.1) as u64,
                per_element::BATCH_NORM + per_element::RELU,
            );
        (h, w) = stem_out;
        if n.max_pool {
            let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
            stem += Cost::elementwise((spec.stem.channels * oh * ow) as u64, 9);
            (h, w) = (oh, ow);
        }
        layers.push(("stem".to_string(), stem));
        for (i, blocks) in n.stages.iter().enumerate() {
            let (mut base, mut vcr) = (Cost::default(), Cost::default());
            for blk in blocks {
                let (b, v) = blk.cost(h, w);
                base += b;
                vcr += v;
                (h, w) = blk.output_hw(h, w);
            }
            layers.push((format!("stage{i}.conv"), base));
            if blocks.iter().any(|b| b.vcr.is_some()) {
                layers.push((format!("stage{i}.vcr"), vcr));
            }
        }
        let d = spec.feature_channels() as u64;
        let head = Cost::elementwise(d * (h * w) as u64, per_element::ADD)
            + Cost::macs(d * spec.classes as u64)
            + Cost::elementwise(spec.classes as u64, per_element::ADD);
        layers.push(("head".to_string(), head));
        CostReport {
            preset: name.to_string(),
            input: [spec.in_channels, spec.input_size, spec.input_size],
            parameter_count: self.params.element_count(),
            params_by_module: cost::params_by_module(&self.params),
            layers,
        }
    }
}
