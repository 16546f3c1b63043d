//! Residual block: split, transform, attend, interact, modulate, merge.

use crate::cost::{per_element, Cost};
use crate::graph::Var;
use crate::nn::{BatchNorm, Builder, Conv2d, Forward};
use crate::tensor::{Result, TensorError};
use crate::vcr::{ConceptConfig, VcrModule};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    /// Input channels `d`.
    pub in_channels: usize,
    pub out_channels: usize,
    /// Cardinality `C`, one concept per branch.
    pub concepts: usize,
    /// Channels per branch `p`.
    pub width: usize,
    /// Applied by the grouped 3×3 convolution and the projection skip.
    pub stride: usize,
    pub vcr: Option<ConceptConfig>,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(TensorError::invalid("block_spec", detail));
        if self.in_channels == 0 || self.out_channels == 0 || self.concepts == 0 || self.width == 0 {
            return bad(format!("all widths must be positive: {self:?}"));
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        if let Some(c) = &self.vcr {
            if c.concepts != self.concepts || c.width != self.width {
                return bad(format!(
                    "concept module is {}×{} but block branches are {}×{}",
                    c.concepts, c.width, self.concepts, self.width
                ));
            }
            c.validate()?;
        }
        Ok(())
    }

    pub fn inner_channels(&self) -> usize {
        self.concepts * self.width
    }

    pub fn has_projection(&self) -> bool {
        self.stride > 1 || self.in_channels != self.out_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub spec: BlockSpec,
    pub split: Conv2d,
    pub split_bn: BatchNorm,
    pub transform: Conv2d,
    pub transform_bn: BatchNorm,
    pub vcr: Option<VcrModule>,
    pub merge: Conv2d,
    pub merge_bn: BatchNorm,
    pub skip: Option<(Conv2d, BatchNorm)>,
}

impl Block {
    pub fn new(b: &mut Builder<'_>, spec: &BlockSpec) -> Result<Block> {
        spec.validate()?;
        let (d, inner, out) = (spec.in_channels, spec.inner_channels(), spec.out_channels);
        let split = Conv2d::new(b, "split", d, inner, 1, 1, 0, 1)?;
        let split_bn = BatchNorm::new(b, "split_bn", inner, 1);
        let transform = Conv2d::new(b, "transform", inner, inner, 3, spec.stride, 1, spec.concepts)?;
        let transform_bn = BatchNorm::new(b, "transform_bn", inner, 1);
        let vcr = spec
            .vcr
            .as_ref()
            .map(|c| VcrModule::new(&mut b.scope("vcr"), c))
            .transpose()?;
        let merge = Conv2d::new(b, "merge", inner, out, 1, 1, 0, 1)?;
        let merge_bn = BatchNorm::new(b, "merge_bn", out, 1);
        let skip = if spec.has_projection() {
            Some((
                Conv2d::new(b, "skip", d, out, 1, spec.stride, 0, 1)?,
                BatchNorm::new(b, "skip_bn", out, 1),
            ))
        } else {
            None
        };
        Ok(Block {
            spec: spec.clone(),
            split,
            split_bn,
            transform,
            transform_bn,
            vcr,
            merge,
            merge_bn,
            skip,
        })
    }

    fn shortcut(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        match &self.skip {
            Some((conv, bn)) => {
                let y = conv.forward(f, x)?;
                bn.forward(f, y)
            }
            None => Ok(x),
        }
    }

    fn check_input(&self, f: &Forward<'_>, x: Var) -> Result<()> {
        let s = f.graph.shape(x);
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(TensorError::invalid(
                "block",
                format!("expected [N×{}×H×W], got {s:?}", self.spec.in_channels),
            ));
        }
        Ok(())
    }

    /// Grouped-convolution build. The concept feature map is tapped as
    /// `{tap}.z` and the concept module under `{tap}.*`.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var, tap: Option<&str>) -> Result<Var> {
        self.check_input(f, x)?;
        let y = self.split.forward(f, x)?;
        let y = self.split_bn.forward(f, y)?;
        let y = f.graph.relu(y);
        let y = self.transform.forward(f, y)?;
        let y = self.transform_bn.forward(f, y)?;
        let mut z = f.graph.relu(y);
        if let Some(t) = tap {
            f.graph.tap(format!("{t}.z"), z);
        }
        if let Some(vcr) = &self.vcr {
            z = vcr.forward(f, z, tap)?;
        }
        let y = self.merge.forward(f, z)?;
        let y = self.merge_bn.forward(f, y)?;
        let s = self.shortcut(f, x)?;
        let y = f.graph.add(y, s)?;
        Ok(f.graph.relu(y))
    }

    /// The same block evaluated as `C` explicit branches: each branch has
    /// its own slice of the split, transform and merge weights, and the
    /// merge sums the branch projections. The concept module still sees
    /// all branches at once, as the reasoner couples them.
    pub fn forward_branched(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        self.check_input(f, x)?;
        let (c, p) = (self.spec.concepts, self.spec.width);
        let split_w = f.param(self.split.weight);
        let transform_w = f.param(self.transform.weight);
        let merge_w = f.param(self.merge.weight);
        let mut branches = Vec::with_capacity(c);
        for i in 0..c {
            let w = f.graph.slice(split_w, 0, i * p, p)?;
            let y = f.graph.conv2d(x, w, 1, 0, 1)?;
            let y = self.split_bn.forward_slice(f, y, i * p, p)?;
            let y = f.graph.relu(y);
            let w = f.graph.slice(transform_w, 0, i * p, p)?;
            let y = f.graph.conv2d(y, w, self.spec.stride, 1, 1)?;
            let y = self.transform_bn.forward_slice(f, y, i * p, p)?;
            branches.push(f.graph.relu(y));
        }
        if let Some(vcr) = &self.vcr {
            let z = f.graph.concat(&branches, 1)?;
            let z = vcr.forward(f, z, None)?;
            for (i, br) in branches.iter_mut().enumerate() {
                *br = f.graph.slice(z, 1, i * p, p)?;
            }
        }
        let mut merged = None;
        for (i, br) in branches.into_iter().enumerate() {
            let w = f.graph.slice(merge_w, 1, i * p, p)?;
            let y = f.graph.conv2d(br, w, 1, 0, 1)?;
            merged = Some(match merged {
                None => y,
                Some(acc) => f.graph.add(acc, y)?,
            });
        }
        let y = self.merge_bn.forward_slice(f, merged.expect("at least one branch"), 0, self.spec.out_channels)?;
        let s = match &self.skip {
            Some((conv, bn)) => {
                let y = conv.forward(f, x)?;
                bn.forward_slice(f, y, 0, self.spec.out_channels)?
            }
            None => x,
        };
        let y = f.graph.add(y, s)?;
        Ok(f.graph.relu(y))
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.transform.output_hw(h, w)
    }

    /// `(residual path without the concept module, concept module)` for one
    /// image of size `h×w`.
    pub fn cost(&self, h: usize, w: usize) -> (Cost, Cost) {
        let (oh, ow) = self.output_hw(h, w);
        let inner = self.spec.inner_channels() as u64;
        let out = self.spec.out_channels as u64;
        let (in_px, out_px) = ((h * w) as u64, (oh * ow) as u64);
        let bn_relu = per_element::BATCH_NORM + per_element::RELU;
        let mut base = Cost::macs(self.split.macs(h, w)) + Cost::elementwise(inner * in_px, bn_relu);
        base += Cost::macs(self.transform.macs(h, w)) + Cost::elementwise(inner * out_px, bn_relu);
        base += Cost::macs(self.merge.macs(oh, ow)) + Cost::elementwise(out * out_px, per_element::BATCH_NORM);
        if let Some((conv, _)) = &self.skip {
            base += Cost::macs(conv.macs(h, w)) + Cost::elementwise(out * out_px, per_element::BATCH_NORM);
        }
        base += Cost::elementwise(out * out_px, per_element::ADD + per_element::RELU);
        let vcr = self.vcr.as_ref().map_or(Cost::default(), |v| v.cost(oh, ow));
        (base, vcr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::nn::{BufferStore, Mode, ParamStore};
    use crate::rng;
    use crate::tensor::Tensor;
    use crate::vcr::VcrSettings;

    fn spec(vcr: bool) -> BlockSpec {
        BlockSpec {
            in_channels: 8,
            out_channels: 16,
            concepts: 4,
            width: 2,
            stride: 2,
            vcr: vcr.then(|| ConceptConfig::new(4, 2, None, VcrSettings::default()).unwrap()),
        }
    }

    #[test]
    fn rejects_mismatched_concept_module() {
        let mut s = spec(true);
        s.width = 4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn shapes_and_projection_skip() {
        let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
        let mut r = rng::seeded(0);
        let blk = Block::new(&mut Builder::new(&mut ps, &mut bs, &mut r), &spec(true)).unwrap();
        assert!(blk.skip.is_some());
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform([2, 8, 6, 6], -1.0, 1.0, &mut r));
        let mut f = Forward::new(&mut g, &ps, &bs, Mode::Train);
        let y = blk.forward(&mut f, x, Some("b")).unwrap();
        assert_eq!(g.shape(y), [2, 16, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn merge_cost_uses_output_resolution() {
        let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
        let mut r = rng::seeded(0);
        let blk = Block::new(&mut Builder::new(&mut ps, &mut bs, &mut r), &spec(false)).unwrap();
        let (base, vcr) = blk.cost(6, 6);
        assert_eq!(vcr, Cost::default());
        // split 36·8·8, transform 9·8·2·9, merge 9·8·16, skip 9·8·16
        assert_eq!(base.macs, 36 * 64 + 9 * 8 * 18 + 2 * 9 * 128);
    }
}
