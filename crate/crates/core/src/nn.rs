//! Parameter storage, the forward-pass context and the basic layers
//! (convolution, batch normalization, linear).

use serde::{Deserialize, Serialize};

use crate::graph::{BatchStats, Graph, NormStats, Var};
use crate::rng::Rng;
use crate::tensor::{Real, Result, Tensor, TensorError};

/// Batch-norm epsilon.
pub const BN_EPS: Real = 1e-5;
/// Batch-norm running-statistics momentum: `running ← (1−m)·running + m·batch`.
pub const BN_MOMENTUM: Real = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// What a parameter is for. Weight decay applies to `Weight` by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
    Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
}

/// Learnable tensors of a model, in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, role: ParamRole) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            role,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> u64 {
        self.params.iter().map(|p| p.value.numel() as u64).sum()
    }
}

/// Non-learnable state (batch-norm running statistics).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BufferStore {
    buffers: Vec<(String, Tensor)>,
}

impl BufferStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push((name.into(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn get_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.buffers.iter_mut().map(|(n, t)| (n.as_str(), t))
    }
}

/// Creates named parameters under a dotted prefix.
pub struct Builder<'a> {
    params: &'a mut ParamStore,
    buffers: &'a mut BufferStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(params: &'a mut ParamStore, buffers: &'a mut BufferStore, rng: &'a mut Rng) -> Self {
        Builder {
            params,
            buffers,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: impl std::fmt::Display) -> Builder<'_> {
        let prefix = self.qualify(&name.to_string());
        Builder {
            params: self.params,
            buffers: self.buffers,
            rng: self.rng,
            prefix,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Weight drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as Real).sqrt();
        let t = Tensor::uniform(shape.to_vec(), -bound, bound, self.rng);
        self.params.add(self.qualify(name), t, ParamRole::Weight)
    }

    pub fn constant(&mut self, name: &str, value: Tensor, role: ParamRole) -> ParamId {
        self.params.add(self.qualify(name), value, role)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> BufferId {
        self.buffers.add(self.qualify(name), value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics produced by one normalization layer during a training
/// forward pass; the training loop folds them into the running buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub stats: BatchStats,
}

/// Mutable state threaded through one forward pass.
pub struct Forward<'a> {
    pub graph: &'a mut Graph,
    params: &'a ParamStore,
    buffers: &'a BufferStore,
    vars: Vec<Option<Var>>,
    mode: Mode,
    differentiable: bool,
    updates: Vec<StatUpdate>,
}

impl<'a> Forward<'a> {
    /// Parameters become differentiable leaves on first use.
    pub fn new(graph: &'a mut Graph, params: &'a ParamStore, buffers: &'a BufferStore, mode: Mode) -> Self {
        Forward {
            graph,
            params,
            buffers,
            vars: vec![None; params.len()],
            mode,
            differentiable: true,
            updates: Vec::new(),
        }
    }

    /// Inference-only pass: parameters enter as constants.
    pub fn inference(graph: &'a mut Graph, params: &'a ParamStore, buffers: &'a BufferStore) -> Self {
        let mut f = Forward::new(graph, params, buffers, Mode::Eval);
        f.differentiable = false;
        f
    }

    /// Use caller-created variables for every parameter, in store order.
    pub fn with_vars(
        graph: &'a mut Graph,
        params: &'a ParamStore,
        buffers: &'a BufferStore,
        mode: Mode,
        vars: &[Var],
    ) -> Self {
        assert_eq!(vars.len(), params.len(), "one variable per parameter");
        let mut f = Forward::new(graph, params, buffers, mode);
        f.vars = vars.iter().copied().map(Some).collect();
        f
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.params.value(id).clone();
        let v = if self.differentiable {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Variable for each parameter that was touched, in store order.
    pub fn param_vars(&self) -> &[Option<Var>] {
        &self.vars
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        self.buffers.get(id)
    }

    pub fn record(&mut self, update: StatUpdate) {
        self.updates.push(update);
    }

    pub fn updates(&self) -> &[StatUpdate] {
        &self.updates
    }

    pub fn into_updates(self) -> Vec<StatUpdate> {
        self.updates
    }
}

/// Fold batch statistics into running buffers.
pub fn apply_stat_updates(buffers: &mut BufferStore, updates: &[StatUpdate], momentum: Real) {
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.stats.mean), (u.running_var, &u.stats.var)] {
            for (r, b) in buffers.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

/// Grouped 2-D convolution without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(TensorError::invalid(
                "grouped_conv2d",
                format!("channels in={in_channels} out={out_channels} not divisible by groups={groups}"),
            ));
        }
        let per_group = in_channels / groups;
        let weight = b.weight(
            &format!("{name}.weight"),
            &[out_channels, per_group, kernel, kernel],
            per_group * kernel * kernel,
        );
        Ok(Conv2d {
            weight,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        f.graph.conv2d(x, w, self.stride, self.padding, self.groups)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Multiply-accumulates for one image at input size `h×w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_hw(h, w);
        (oh * ow * self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel) as u64
    }
}

/// Batch normalization over a chosen feature axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub features: usize,
    pub axis: usize,
}

impl BatchNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, features: usize, axis: usize) -> Self {
        let gamma = b.constant(&format!("{name}.gamma"), Tensor::ones([features]), ParamRole::Norm);
        let beta = b.constant(&format!("{name}.beta"), Tensor::zeros([features]), ParamRole::Norm);
        let running_mean = b.buffer(&format!("{name}.running_mean"), Tensor::zeros([features]));
        let running_var = b.buffer(&format!("{name}.running_var"), Tensor::ones([features]));
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            features,
            axis,
        }
    }

    /// Train mode normalizes with batch statistics and records them; eval
    /// mode uses the running buffers.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        match f.mode() {
            Mode::Train => {
                let (y, stats) = f.graph.batch_norm(x, gamma, beta, self.axis, BN_EPS, NormStats::Batch)?;
                f.record(StatUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    stats: stats.expect("batch statistics in train mode"),
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = f.buffers.get(self.running_mean).data();
                let var = f.buffers.get(self.running_var).data();
                let (y, _) = f
                    .graph
                    .batch_norm(x, gamma, beta, self.axis, BN_EPS, NormStats::Running { mean, var })?;
                Ok(y)
            }
        }
    }
}

impl BatchNorm {
    /// Normalize `x`, whose channels are `start..start+len` of this layer's
    /// features, with the matching slice of parameters and statistics.
    /// Running statistics are not updated.
    pub fn forward_slice(&self, f: &mut Forward<'_>, x: Var, start: usize, len: usize) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        let gamma = f.graph.slice(gamma, 0, start, len)?;
        let beta = f.graph.slice(beta, 0, start, len)?;
        let stats = match f.mode() {
            Mode::Train => NormStats::Batch,
            Mode::Eval => NormStats::Running {
                mean: &f.buffers.get(self.running_mean).data()[start..start + len],
                var: &f.buffers.get(self.running_var).data()[start..start + len],
            },
        };
        let (y, _) = f.graph.batch_norm(x, gamma, beta, self.axis, BN_EPS, stats)?;
        Ok(y)
    }
}

/// `y = x·W + b` with `W: [in×out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, in_features: usize, out_features: usize) -> Self {
        let weight = b.weight(&format!("{name}.weight"), &[in_features, out_features], in_features);
        let bias = b.constant(&format!("{name}.bias"), Tensor::zeros([out_features]), ParamRole::Bias);
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        let y = f.graph.matmul(x, w)?;
        f.graph.add_bias(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_ten_to_five_has_55_parameters() {
        let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
        let mut r = rng::seeded(0);
        let mut b = Builder::new(&mut ps, &mut bs, &mut r);
        Linear::new(&mut b, "fc", 10, 5);
        assert_eq!(ps.element_count(), 55);
        assert_eq!(ps.get(ParamId(0)).name, "fc.weight");
    }

    #[test]
    fn scoped_names() {
        let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
        let mut r = rng::seeded(0);
        let mut b = Builder::new(&mut ps, &mut bs, &mut r);
        let mut s = b.scope("stages.0");
        let mut t = s.scope("blocks.1");
        BatchNorm::new(&mut t, "bn1", 4, 1);
        assert!(ps.find("stages.0.blocks.1.bn1.gamma").is_some());
        assert_eq!(bs.iter().next().unwrap().0, "stages.0.blocks.1.bn1.running_mean");
    }

    #[test]
    fn running_stats_follow_momentum() {
        let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
        let mut r = rng::seeded(0);
        let bn = BatchNorm::new(&mut Builder::new(&mut ps, &mut bs, &mut r), "bn", 1, 1);
        let update = StatUpdate {
            running_mean: bn.running_mean,
            running_var: bn.running_var,
            stats: BatchStats { mean: vec![2.0], var: vec![3.0] },
        };
        apply_stat_updates(&mut bs, &[update], BN_MOMENTUM);
        assert!((bs.get(bn.running_mean).data()[0] - 0.2).abs() < 1e-15);
        assert!((bs.get(bn.running_var).data()[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn conv_rejects_indivisible_groups() {
        let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
        let mut r = rng::seeded(0);
        let mut b = Builder::new(&mut ps, &mut bs, &mut r);
        assert!(Conv2d::new(&mut b, "c", 6, 8, 3, 1, 1, 4).is_err());
    }
}
