//! Visual concept reasoning: concept sampler, concept reasoner and concept
//! modulator acting on per-concept feature maps.
//!
//! Feature maps are laid out `[N × C·p × H × W]`: concept `c` owns channels
//! `c·p .. (c+1)·p`. Per-concept projections are grouped 1×1 convolutions
//! with `C` groups, so concepts never mix before the reasoner. Concept
//! states are `[N × C × p̃]`.

use serde::{Deserialize, Serialize};

use crate::cost::{per_element, Cost};
use crate::graph::Var;
use crate::nn::{BatchNorm, Builder, Forward, ParamId, ParamRole};
use crate::tensor::{Real, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Pool,
    StaticAttn,
    DynamicAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonerKind {
    None,
    StaticEdge,
    DynamicEdge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    Scale,
    Shift,
    ScaleShift,
}

impl Modulation {
    pub fn has_scale(self) -> bool {
        matches!(self, Modulation::Scale | Modulation::ScaleShift)
    }

    pub fn has_shift(self) -> bool {
        matches!(self, Modulation::Shift | Modulation::ScaleShift)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationLevel {
    Channel,
    Pixel,
}

/// How a static query enters the logits: as one per-concept 1×1
/// convolution, or as a learned query dotted with projected keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticQueryForm {
    Fused,
    Unfused,
}

/// How the concept-state width follows from the concept width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateWidthRule {
    /// `min(⌊p/4⌋, 4)`, at least 1.
    Min,
    /// `max(⌊p/4⌋, 4)`, at most `p`.
    Max,
}

impl StateWidthRule {
    pub fn state_width(self, width: usize) -> usize {
        let w = match self {
            StateWidthRule::Min => (width / 4).min(4),
            StateWidthRule::Max => (width / 4).max(4),
        };
        w.clamp(1, width.max(1))
    }
}

/// Variant choices shared by every concept module of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VcrSettings {
    pub sampler: SamplerKind,
    pub reasoner: ReasonerKind,
    pub modulation: Modulation,
    pub level: ModulationLevel,
    pub bn_sampler: bool,
    pub bn_reasoner: bool,
    pub static_query: StaticQueryForm,
    pub state_width_rule: StateWidthRule,
}

impl Default for VcrSettings {
    fn default() -> Self {
        VcrSettings {
            sampler: SamplerKind::DynamicAttn,
            reasoner: ReasonerKind::DynamicEdge,
            modulation: Modulation::ScaleShift,
            level: ModulationLevel::Channel,
            bn_sampler: true,
            bn_reasoner: true,
            static_query: StaticQueryForm::Fused,
            state_width_rule: StateWidthRule::Min,
        }
    }
}

/// Full description of one concept module.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptConfig {
    /// Number of concepts `C` (the block cardinality).
    pub concepts: usize,
    /// Channels per concept `p`.
    pub width: usize,
    /// Concept-state width `p̃`.
    pub state_width: usize,
    pub settings: VcrSettings,
}

impl ConceptConfig {
    /// State width from the settings' rule unless `state_width` is given.
    pub fn new(concepts: usize, width: usize, state_width: Option<usize>, settings: VcrSettings) -> Result<Self> {
        let state_width = state_width.unwrap_or_else(|| settings.state_width_rule.state_width(width));
        let c = ConceptConfig {
            concepts,
            width,
            state_width,
            settings,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(TensorError::invalid("concept_config", detail));
        if self.concepts == 0 || self.width == 0 {
            return bad(format!("concepts={} width={} must be positive", self.concepts, self.width));
        }
        if self.state_width == 0 || self.state_width > self.width {
            return bad(format!("state width {} outside 1..={}", self.state_width, self.width));
        }
        if self.settings.level == ModulationLevel::Pixel && self.settings.sampler == SamplerKind::Pool {
            return bad("pixel-level modulation needs an attention sampler".into());
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.concepts * self.width
    }
}

/// Per-concept 1×1 projection `[C·out × in × 1 × 1]` with `C` groups.
fn grouped_projection(b: &mut Builder<'_>, name: &str, concepts: usize, inp: usize, out: usize) -> ParamId {
    b.weight(name, &[concepts * out, inp, 1, 1], inp)
}

fn conv1x1(f: &mut Forward<'_>, x: Var, w: ParamId, groups: usize) -> Result<Var> {
    let wv = f.param(w);
    f.graph.conv2d(x, wv, 1, 0, groups)
}

/// Output of a concept sampler.
#[derive(Debug, Clone, Copy)]
pub struct Sampled {
    /// `h` before normalization, `[N×C×p̃]`.
    pub raw: Var,
    /// State handed to the reasoner (normalized if enabled).
    pub state: Var,
    /// Attention `[N×C×HW]`, for attention samplers.
    pub attention: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampler {
    pub kind: SamplerKind,
    pub concepts: usize,
    pub width: usize,
    pub state_width: usize,
    /// `W^v`: `[C·p̃ × p × 1 × 1]`.
    pub value: ParamId,
    /// `W^k`: `[C·p̃ × p × 1 × 1]`, dynamic and unfused static.
    pub key: Option<ParamId>,
    /// `W^q`: `[C·p̃ × p × 1 × 1]`, dynamic.
    pub query: Option<ParamId>,
    /// Learned static query `[C·1 × p̃ × 1 × 1]`, unfused static.
    pub static_query: Option<ParamId>,
    /// Fused static logit weights `[C × p × 1 × 1]`.
    pub logit: Option<ParamId>,
    pub bn: Option<BatchNorm>,
}

impl Sampler {
    pub fn new(b: &mut Builder<'_>, cfg: &ConceptConfig) -> Sampler {
        let (c, p, pt) = (cfg.concepts, cfg.width, cfg.state_width);
        let kind = cfg.settings.sampler;
        let mut key = None;
        let mut query = None;
        let mut static_query = None;
        let mut logit = None;
        match kind {
            SamplerKind::Pool => {}
            SamplerKind::DynamicAttn => {
                query = Some(grouped_projection(b, "query", c, p, pt));
                key = Some(grouped_projection(b, "key", c, p, pt));
            }
            SamplerKind::StaticAttn => match cfg.settings.static_query {
                StaticQueryForm::Fused => logit = Some(grouped_projection(b, "logit", c, p, 1)),
                StaticQueryForm::Unfused => {
                    static_query = Some(b.weight("static_query", &[c, pt, 1, 1], pt));
                    key = Some(grouped_projection(b, "key", c, p, pt));
                }
            },
        }
        let value = grouped_projection(b, "value", c, p, pt);
        let bn = cfg.settings.bn_sampler.then(|| BatchNorm::new(b, "bn", pt, 2));
        Sampler {
            kind,
            concepts: c,
            width: p,
            state_width: pt,
            value,
            key,
            query,
            static_query,
            logit,
            bn,
        }
    }

    /// Attention logits `[N×C×HW]`, already divided by `√p̃`.
    fn logits(&self, f: &mut Forward<'_>, z: Var) -> Result<Var> {
        let shape = f.graph.shape(z).to_vec();
        let (n, hw) = (shape[0], shape[2] * shape[3]);
        let c = self.concepts;
        let raw = match (self.logit, self.static_query, self.query) {
            (Some(w), _, _) => conv1x1(f, z, w, c)?,
            (None, Some(q), _) => {
                let keys = conv1x1(f, z, self.key.expect("unfused static sampler has keys"), c)?;
                conv1x1(f, keys, q, c)?
            }
            (None, None, Some(wq)) => {
                let pooled = f.graph.global_avg_pool(z)?;
                let pooled = f.graph.reshape(pooled, &[n, c * self.width, 1, 1])?;
                let q = conv1x1(f, pooled, wq, c)?;
                let q = f.graph.reshape(q, &[n, c * self.state_width])?;
                let keys = conv1x1(f, z, self.key.expect("dynamic sampler has keys"), c)?;
                f.graph.group_dot(q, keys, c)?
            }
            _ => unreachable!("pooling sampler has no logits"),
        };
        let raw = f.graph.reshape(raw, &[n, c, hw])?;
        Ok(f.graph.scale(raw, 1.0 / (self.state_width as Real).sqrt()))
    }

    pub fn forward(&self, f: &mut Forward<'_>, z: Var) -> Result<Sampled> {
        let shape = f.graph.shape(z).to_vec();
        if shape.len() != 4 || shape[1] != self.concepts * self.width {
            return Err(TensorError::invalid(
                "concept_sampler",
                format!("expected [N×{}×H×W], got {shape:?}", self.concepts * self.width),
            ));
        }
        let n = shape[0];
        let c = self.concepts;
        let (pooled, attention) = match self.kind {
            SamplerKind::Pool => (f.graph.global_avg_pool(z)?, None),
            _ => {
                let logits = self.logits(f, z)?;
                let m = f.graph.softmax(logits)?;
                (f.graph.attend_pool(m, z, c)?, Some(m))
            }
        };
        let pooled = f.graph.reshape(pooled, &[n, c * self.width, 1, 1])?;
        let h = conv1x1(f, pooled, self.value, c)?;
        let raw = f.graph.reshape(h, &[n, c, self.state_width])?;
        let state = match &self.bn {
            Some(bn) => bn.forward(f, raw)?,
            None => raw,
        };
        Ok(Sampled { raw, state, attention })
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let hw = (h * w) as u64;
        let (c, p, pt) = (self.concepts as u64, self.width as u64, self.state_width as u64);
        let mut cost = Cost::default();
        let mut pooling = Cost::elementwise(c * p * hw, per_element::ADD);
        match self.kind {
            SamplerKind::Pool => {}
            _ => {
                if self.logit.is_some() {
                    cost += Cost::macs(c * p * hw);
                } else if self.static_query.is_some() {
                    cost += Cost::macs(c * pt * p * hw + c * pt * hw);
                } else {
                    cost += Cost::elementwise(c * p * hw, per_element::ADD);
                    cost += Cost::macs(c * pt * p + c * pt * p * hw + c * pt * hw);
                }
                cost += Cost::elementwise(c * hw, per_element::MUL + per_element::SOFTMAX);
                pooling = Cost::macs(c * p * hw);
            }
        }
        cost += pooling + Cost::macs(c * pt * p);
        if self.bn.is_some() {
            cost += Cost::elementwise(c * pt, per_element::BATCH_NORM);
        }
        cost
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reasoner {
    pub kind: ReasonerKind,
    pub concepts: usize,
    pub state_width: usize,
    /// Learned adjacency `[C×C]`, static edges.
    pub adjacency: Option<ParamId>,
    /// `W^edge`: `[p̃×C]`, dynamic edges.
    pub edge: Option<ParamId>,
    pub bn: Option<BatchNorm>,
}

/// Output of the reasoner.
#[derive(Debug, Clone, Copy)]
pub struct Reasoned {
    pub state: Var,
    /// Adjacency actually applied: `[1×C×C]` static, `[N×C×C]` dynamic.
    pub adjacency: Option<Var>,
}

impl Reasoner {
    pub fn new(b: &mut Builder<'_>, cfg: &ConceptConfig) -> Reasoner {
        let (c, pt) = (cfg.concepts, cfg.state_width);
        let kind = cfg.settings.reasoner;
        let adjacency = (kind == ReasonerKind::StaticEdge).then(|| b.weight("adjacency", &[c, c], c));
        let edge = (kind == ReasonerKind::DynamicEdge).then(|| b.weight("edge", &[pt, c], pt));
        let bn = cfg.settings.bn_reasoner.then(|| BatchNorm::new(b, "bn", pt, 2));
        Reasoner {
            kind,
            concepts: c,
            state_width: pt,
            adjacency,
            edge,
            bn,
        }
    }

    /// `ReLU(BN(H + A·H))`, or `ReLU(BN(H))` without edges.
    pub fn forward(&self, f: &mut Forward<'_>, h: Var) -> Result<Reasoned> {
        let shape = f.graph.shape(h).to_vec();
        if shape.len() != 3 || shape[1] != self.concepts || shape[2] != self.state_width {
            return Err(TensorError::invalid(
                "concept_reasoner",
                format!("expected [N×{}×{}], got {shape:?}", self.concepts, self.state_width),
            ));
        }
        let (n, c) = (shape[0], self.concepts);
        let adjacency = match self.kind {
            ReasonerKind::None => None,
            ReasonerKind::StaticEdge => {
                let a = f.param(self.adjacency.expect("static reasoner has an adjacency"));
                Some(f.graph.reshape(a, &[1, c, c])?)
            }
            ReasonerKind::DynamicEdge => {
                let w = f.param(self.edge.expect("dynamic reasoner has edge weights"));
                let rows = f.graph.reshape(h, &[n * c, self.state_width])?;
                let logits = f.graph.matmul(rows, w)?;
                let a = f.graph.tanh(logits);
                Some(f.graph.reshape(a, &[n, c, c])?)
            }
        };
        let mut x = h;
        if let Some(a) = adjacency {
            let ah = f.graph.batch_matmul(a, h)?;
            x = f.graph.add(h, ah)?;
        }
        if let Some(bn) = &self.bn {
            x = bn.forward(f, x)?;
        }
        Ok(Reasoned {
            state: f.graph.relu(x),
            adjacency,
        })
    }

    pub fn cost(&self) -> Cost {
        let (c, pt) = (self.concepts as u64, self.state_width as u64);
        let mut cost = Cost::elementwise(c * pt, per_element::RELU);
        if self.kind != ReasonerKind::None {
            cost += Cost::macs(c * c * pt) + Cost::elementwise(c * pt, per_element::ADD);
        }
        if self.kind == ReasonerKind::DynamicEdge {
            cost += Cost::macs(c * pt * c) + Cost::elementwise(c * c, per_element::TANH);
        }
        if self.bn.is_some() {
            cost += Cost::elementwise(c * pt, per_element::BATCH_NORM);
        }
        cost
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Modulator {
    pub modulation: Modulation,
    pub level: ModulationLevel,
    pub concepts: usize,
    pub width: usize,
    pub state_width: usize,
    /// `W^scale`: `[C·p × p̃ × 1 × 1]` and `b^scale`: `[C·p]`.
    pub scale: Option<(ParamId, ParamId)>,
    /// `W^shift` and `b^shift`, same shapes.
    pub shift: Option<(ParamId, ParamId)>,
}

impl Modulator {
    /// `b^scale` starts at 1 so a fresh module passes features through
    /// with unit gain.
    pub fn new(b: &mut Builder<'_>, cfg: &ConceptConfig) -> Modulator {
        let (c, p, pt) = (cfg.concepts, cfg.width, cfg.state_width);
        let m = cfg.settings.modulation;
        let scale = m.has_scale().then(|| {
            (
                grouped_projection(b, "scale.weight", c, pt, p),
                b.constant("scale.bias", Tensor::ones([c * p]), ParamRole::Bias),
            )
        });
        let shift = m.has_shift().then(|| {
            (
                grouped_projection(b, "shift.weight", c, pt, p),
                b.constant("shift.bias", Tensor::zeros([c * p]), ParamRole::Bias),
            )
        });
        Modulator {
            modulation: m,
            level: cfg.settings.level,
            concepts: c,
            width: p,
            state_width: pt,
            scale,
            shift,
        }
    }

    /// `h̃·W + b` per concept: `[N×C·p]` for channel level, `[N×C·p×H×W]`
    /// for pixel level where the state is first spread over positions.
    fn affine(&self, f: &mut Forward<'_>, source: Var, (w, b): (ParamId, ParamId), flatten: bool) -> Result<Var> {
        let n = f.graph.shape(source)[0];
        let y = conv1x1(f, source, w, self.concepts)?;
        let bias = f.param(b);
        let y = f.graph.add_bias(y, bias)?;
        if flatten {
            f.graph.reshape(y, &[n, self.concepts * self.width])
        } else {
            Ok(y)
        }
    }

    /// `ReLU(α ⊙ Z + β)`. `attention` is the renormalized map `M̃`, needed
    /// at pixel level.
    pub fn forward(&self, f: &mut Forward<'_>, z: Var, state: Var, attention: Option<Var>) -> Result<Var> {
        let zs = f.graph.shape(z).to_vec();
        let (n, c, pt) = (zs[0], self.concepts, self.state_width);
        let flat = f.graph.reshape(state, &[n, c * pt])?;
        let out = match self.level {
            ModulationLevel::Channel => {
                let source = f.graph.reshape(flat, &[n, c * pt, 1, 1])?;
                let alpha = self.scale.map(|p| self.affine(f, source, p, true)).transpose()?;
                let beta = self.shift.map(|p| self.affine(f, source, p, true)).transpose()?;
                f.graph.channel_affine(z, alpha, beta)?
            }
            ModulationLevel::Pixel => {
                let m = attention.ok_or_else(|| {
                    TensorError::invalid("concept_modulator", "pixel-level modulation needs an attention map")
                })?;
                let spread = f.graph.spread_map(m, flat, c)?;
                let source = f.graph.reshape(spread, &[n, c * pt, zs[2], zs[3]])?;
                let mut y = z;
                if let Some(p) = self.scale {
                    let alpha = self.affine(f, source, p, false)?;
                    y = f.graph.mul(alpha, y)?;
                }
                if let Some(p) = self.shift {
                    let beta = self.affine(f, source, p, false)?;
                    y = f.graph.add(y, beta)?;
                }
                y
            }
        };
        Ok(f.graph.relu(out))
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let hw = (h * w) as u64;
        let (c, p, pt) = (self.concepts as u64, self.width as u64, self.state_width as u64);
        let maps = self.scale.is_some() as u64 + self.shift.is_some() as u64;
        let mut cost = Cost::elementwise(c * p * hw, per_element::RELU);
        match self.level {
            ModulationLevel::Channel => {
                cost += Cost::macs(maps * c * p * pt) + Cost::elementwise(maps * c * p, per_element::ADD);
                cost += Cost::elementwise(c * p * hw, per_element::AFFINE);
            }
            ModulationLevel::Pixel => {
                cost += Cost::elementwise(c * hw, per_element::ROW_MAX_NORMALIZE);
                cost += Cost::elementwise(c * pt * hw, per_element::MUL);
                cost += Cost::macs(maps * c * p * pt * hw) + Cost::elementwise(maps * c * p * hw, per_element::ADD);
                cost += Cost::elementwise(maps * c * p * hw, 1);
            }
        }
        cost
    }
}

/// Sampler, reasoner and modulator applied to one concept feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct VcrModule {
    pub config: ConceptConfig,
    pub sampler: Sampler,
    pub reasoner: Reasoner,
    pub modulator: Modulator,
}

impl VcrModule {
    pub fn new(b: &mut Builder<'_>, config: &ConceptConfig) -> Result<VcrModule> {
        config.validate()?;
        let sampler = Sampler::new(&mut b.scope("sampler"), config);
        let reasoner = Reasoner::new(&mut b.scope("reasoner"), config);
        let modulator = Modulator::new(&mut b.scope("modulator"), config);
        Ok(VcrModule {
            config: config.clone(),
            sampler,
            reasoner,
            modulator,
        })
    }

    /// Modulated map, same shape as `z`. With `tap` set, intermediate values
    /// are recorded as `{tap}.input`, `{tap}.attention`, `{tap}.state`,
    /// `{tap}.reasoned` and `{tap}.adjacency`.
    pub fn forward(&self, f: &mut Forward<'_>, z: Var, tap: Option<&str>) -> Result<Var> {
        let s = self.sampler.forward(f, z)?;
        let r = self.reasoner.forward(f, s.state)?;
        let renormalized = match (self.modulator.level, s.attention) {
            (ModulationLevel::Pixel, Some(m)) => Some(f.graph.row_max_normalize(m)?),
            _ => None,
        };
        let out = self.modulator.forward(f, z, r.state, renormalized)?;
        if let Some(t) = tap {
            f.graph.tap(format!("{t}.input"), z);
            f.graph.tap(format!("{t}.state"), s.raw);
            f.graph.tap(format!("{t}.reasoned"), r.state);
            if let Some(m) = s.attention {
                f.graph.tap(format!("{t}.attention"), m);
            }
            if let Some(a) = r.adjacency {
                f.graph.tap(format!("{t}.adjacency"), a);
            }
        }
        Ok(out)
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        self.sampler.cost(h, w) + self.reasoner.cost() + self.modulator.cost(h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::nn::{BufferStore, Mode, ParamStore};
    use crate::rng;

    fn settings(sampler: SamplerKind, reasoner: ReasonerKind) -> VcrSettings {
        VcrSettings {
            sampler,
            reasoner,
            bn_sampler: false,
            bn_reasoner: false,
            ..VcrSettings::default()
        }
    }

    fn build(cfg: &ConceptConfig, seed: u64) -> (ParamStore, BufferStore, VcrModule) {
        let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
        let mut r = rng::seeded(seed);
        let m = VcrModule::new(&mut Builder::new(&mut ps, &mut bs, &mut r), cfg).unwrap();
        (ps, bs, m)
    }

    #[test]
    fn state_width_rules() {
        let min: Vec<usize> = [2, 4, 8, 16, 32, 64].iter().map(|&p| StateWidthRule::Min.state_width(p)).collect();
        assert_eq!(min, [1, 1, 2, 4, 4, 4]);
        let max: Vec<usize> = [2, 4, 8, 16, 32, 64].iter().map(|&p| StateWidthRule::Max.state_width(p)).collect();
        assert_eq!(max, [2, 4, 4, 4, 8, 16]);
    }

    #[test]
    fn pixel_with_pool_is_rejected() {
        let s = VcrSettings {
            sampler: SamplerKind::Pool,
            level: ModulationLevel::Pixel,
            ..VcrSettings::default()
        };
        assert!(ConceptConfig::new(4, 4, None, s).is_err());
        assert!(ConceptConfig::new(4, 4, Some(0), VcrSettings::default()).is_err());
        assert!(ConceptConfig::new(4, 4, Some(5), VcrSettings::default()).is_err());
    }

    #[test]
    fn variant_parameter_sets() {
        let cfg = ConceptConfig::new(2, 4, Some(2), settings(SamplerKind::Pool, ReasonerKind::None)).unwrap();
        let (ps, _, _) = build(&cfg, 0);
        let names: Vec<&str> = ps.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "sampler.value",
                "modulator.scale.weight",
                "modulator.scale.bias",
                "modulator.shift.weight",
                "modulator.shift.bias"
            ]
        );
        let shift_only = VcrSettings {
            modulation: Modulation::Shift,
            ..settings(SamplerKind::DynamicAttn, ReasonerKind::DynamicEdge)
        };
        let (ps, _, _) = build(&ConceptConfig::new(2, 4, Some(2), shift_only).unwrap(), 0);
        assert!(ps.find("modulator.scale.weight").is_none());
        assert_eq!(ps.value(ps.find("reasoner.edge").unwrap()).shape(), [2, 2]);
        assert_eq!(ps.value(ps.find("sampler.query").unwrap()).shape(), [4, 4, 1, 1]);
    }

    #[test]
    fn forward_shapes_and_taps() {
        let cfg = ConceptConfig::new(
            3,
            4,
            None,
            VcrSettings {
                level: ModulationLevel::Pixel,
                ..VcrSettings::default()
            },
        )
        .unwrap();
        let (ps, bs, m) = build(&cfg, 1);
        let mut g = Graph::new();
        let z = g.constant(Tensor::uniform([2, 12, 3, 5], -1.0, 1.0, &mut rng::seeded(2)));
        let mut f = Forward::new(&mut g, &ps, &bs, Mode::Train);
        let out = m.forward(&mut f, z, Some("b0")).unwrap();
        assert_eq!(f.updates().len(), 2);
        assert_eq!(g.shape(out), [2, 12, 3, 5]);
        assert_eq!(g.value(g.tapped("b0.attention").unwrap()).shape(), [2, 3, 15]);
        assert_eq!(g.value(g.tapped("b0.state").unwrap()).shape(), [2, 3, 1]);
        assert_eq!(g.value(g.tapped("b0.adjacency").unwrap()).shape(), [2, 3, 3]);
    }

    #[test]
    fn static_edge_single_concept_doubles() {
        let cfg = ConceptConfig::new(1, 4, Some(2), settings(SamplerKind::Pool, ReasonerKind::StaticEdge)).unwrap();
        let (mut ps, bs, m) = build(&cfg, 0);
        *ps.value_mut(m.reasoner.adjacency.unwrap()) = Tensor::ones([1, 1]);
        let mut g = Graph::new();
        let h = Tensor::new([2, 1, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let hv = g.constant(h.clone());
        let mut f = Forward::new(&mut g, &ps, &bs, Mode::Eval);
        let out = m.reasoner.forward(&mut f, hv).unwrap().state;
        assert_eq!(g.value(out).data(), h.map(|v| (2.0 * v).max(0.0)).data());
    }
}
