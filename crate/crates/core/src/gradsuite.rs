//! The finite-difference gradient suite: every differentiable op, every
//! concept-module variant and whole residual blocks.

use std::collections::BTreeMap;

use rand::RngExt;

use crate::block::{Block, BlockSpec};
use crate::gradcheck::{check_gradients, CheckReport, DEFAULT_STEP, GRAD_TOLERANCE};
use crate::graph::{Graph, NormStats, Var};
use crate::nn::{BufferStore, Builder, Forward, Mode, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::{Real, Result, Tensor};
use crate::vcr::{
    ConceptConfig, Modulation, ModulationLevel, ReasonerKind, SamplerKind, StaticQueryForm, VcrModule, VcrSettings,
};

fn uniform(shape: &[usize], r: &mut Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, r)
}

fn positive(shape: &[usize], r: &mut Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 0.1, 1.0, r)
}

fn check<F>(name: &str, inputs: Vec<Tensor>, seed: u64, build: F) -> Result<CheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    check_gradients(name, &inputs, seed, DEFAULT_STEP, GRAD_TOLERANCE, build)
}

/// One check per tensor-engine op.
pub fn op_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let r = &mut rng::stream(seed, 1, 0);
    let mut out = Vec::new();
    out.push(check("matmul", vec![uniform(&[3, 4], r), uniform(&[4, 2], r)], seed, |g, v| g.matmul(v[0], v[1]))?);
    out.push(check(
        "batch_matmul",
        vec![uniform(&[2, 3, 4], r), uniform(&[2, 4, 2], r)],
        seed,
        |g, v| g.batch_matmul(v[0], v[1]),
    )?);
    out.push(check(
        "batch_matmul_shared",
        vec![uniform(&[1, 3, 3], r), uniform(&[2, 3, 2], r)],
        seed,
        |g, v| g.batch_matmul(v[0], v[1]),
    )?);
    out.push(check(
        "grouped_conv2d",
        vec![uniform(&[2, 8, 5, 5], r), uniform(&[8, 2, 3, 3], r)],
        seed,
        |g, v| g.conv2d(v[0], v[1], 2, 1, 4),
    )?);
    out.push(check(
        "conv2d_pointwise",
        vec![uniform(&[2, 4, 3, 3], r), uniform(&[3, 4, 1, 1], r)],
        seed,
        |g, v| g.conv2d(v[0], v[1], 1, 0, 1),
    )?);
    out.push(check("max_pool2d", vec![uniform(&[2, 2, 5, 5], r)], seed, |g, v| g.max_pool2d(v[0], 3, 2, 1))?);
    let bn_inputs = |r: &mut Rng, shape: &[usize], f: usize| vec![uniform(shape, r), positive(&[f], r), uniform(&[f], r)];
    out.push(check("batch_norm_train", bn_inputs(r, &[4, 3, 2, 2], 3), seed, |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], 1, 1e-5, NormStats::Batch)?.0)
    })?);
    out.push(check("batch_norm_features_last", bn_inputs(r, &[2, 3, 4], 4), seed, |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], 2, 1e-5, NormStats::Batch)?.0)
    })?);
    let (mean, var) = (uniform(&[3], r), positive(&[3], r));
    out.push(check("batch_norm_eval", bn_inputs(r, &[2, 3, 2, 2], 3), seed, |g, v| {
        let stats = NormStats::Running {
            mean: mean.data(),
            var: var.data(),
        };
        Ok(g.batch_norm(v[0], v[1], v[2], 1, 1e-5, stats)?.0)
    })?);
    out.push(check("softmax", vec![uniform(&[2, 5], r)], seed, |g, v| g.softmax(v[0]))?);
    out.push(check("global_avg_pool", vec![uniform(&[2, 3, 2, 3], r)], seed, |g, v| g.global_avg_pool(v[0]))?);
    out.push(check("relu", vec![uniform(&[2, 4, 3, 3], r)], seed, |g, v| Ok(g.relu(v[0])))?);
    out.push(check("tanh", vec![uniform(&[3, 4], r)], seed, |g, v| Ok(g.tanh(v[0])))?);
    out.push(check("scale", vec![uniform(&[3, 4], r)], seed, |g, v| Ok(g.scale(v[0], -1.5)))?);
    out.push(check("add", vec![uniform(&[3, 4], r), uniform(&[3, 4], r)], seed, |g, v| g.add(v[0], v[1]))?);
    out.push(check("mul", vec![uniform(&[3, 4], r), uniform(&[3, 4], r)], seed, |g, v| g.mul(v[0], v[1]))?);
    out.push(check(
        "channel_scale_shift",
        vec![uniform(&[2, 4, 3, 3], r), uniform(&[2, 4], r), uniform(&[2, 4], r)],
        seed,
        |g, v| {
            let y = g.channel_affine(v[0], Some(v[1]), Some(v[2]))?;
            Ok(g.relu(y))
        },
    )?);
    out.push(check("add_bias", vec![uniform(&[2, 3, 2, 2], r), uniform(&[3], r)], seed, |g, v| {
        g.add_bias(v[0], v[1])
    })?);
    out.push(check("sum", vec![uniform(&[3, 4], r)], seed, |g, v| Ok(g.sum(v[0])))?);
    out.push(check("mean", vec![uniform(&[3, 4], r)], seed, |g, v| Ok(g.mean(v[0])))?);
    out.push(check("reshape", vec![uniform(&[2, 6], r)], seed, |g, v| g.reshape(v[0], &[3, 4]))?);
    out.push(check("slice", vec![uniform(&[2, 5, 3], r)], seed, |g, v| g.slice(v[0], 1, 1, 3))?);
    out.push(check("concat", vec![uniform(&[2, 2, 3], r), uniform(&[2, 3, 3], r)], seed, |g, v| {
        g.concat(&[v[0], v[1]], 1)
    })?);
    out.push(check("group_dot", vec![uniform(&[2, 6], r), uniform(&[2, 6, 2, 2], r)], seed, |g, v| {
        g.group_dot(v[0], v[1], 3)
    })?);
    out.push(check("attend_pool", vec![positive(&[2, 3, 4], r), uniform(&[2, 6, 2, 2], r)], seed, |g, v| {
        g.attend_pool(v[0], v[1], 3)
    })?);
    out.push(check("spread_map", vec![positive(&[2, 3, 4], r), uniform(&[2, 6], r)], seed, |g, v| {
        g.spread_map(v[0], v[1], 3)
    })?);
    out.push(check("row_max_normalize", vec![positive(&[3, 5], r)], seed, |g, v| g.row_max_normalize(v[0]))?);
    let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..10)).collect();
    out.push(check("label_smoothed_ce", vec![uniform(&[4, 10], r)], seed, |g, v| {
        g.label_smoothed_ce(v[0], &targets, 0.1)
    })?);
    Ok(out)
}

/// Every legal concept-module variant: 3 samplers × 3 reasoners × 3
/// modulations × {channel, pixel where legal} × batch norm on/off in the
/// sampler and in the reasoner, plus the unfused static query.
pub fn vcr_variants() -> Vec<(String, VcrSettings)> {
    let mut out = Vec::new();
    let samplers = [SamplerKind::Pool, SamplerKind::StaticAttn, SamplerKind::DynamicAttn];
    let reasoners = [ReasonerKind::None, ReasonerKind::StaticEdge, ReasonerKind::DynamicEdge];
    let modulations = [Modulation::Scale, Modulation::Shift, Modulation::ScaleShift];
    for sampler in samplers {
        for reasoner in reasoners {
            for modulation in modulations {
                for level in [ModulationLevel::Channel, ModulationLevel::Pixel] {
                    if sampler == SamplerKind::Pool && level == ModulationLevel::Pixel {
                        continue;
                    }
                    for (bn_sampler, bn_reasoner) in [(false, false), (true, false), (false, true), (true, true)] {
                        let s = VcrSettings {
                            sampler,
                            reasoner,
                            modulation,
                            level,
                            bn_sampler,
                            bn_reasoner,
                            ..VcrSettings::default()
                        };
                        out.push((variant_name(&s), s));
                    }
                }
            }
        }
    }
    for level in [ModulationLevel::Channel, ModulationLevel::Pixel] {
        let s = VcrSettings {
            sampler: SamplerKind::StaticAttn,
            static_query: StaticQueryForm::Unfused,
            level,
            ..VcrSettings::default()
        };
        out.push((variant_name(&s), s));
    }
    out
}

fn snake<T: serde::Serialize>(v: &T) -> String {
    toml::Value::try_from(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn variant_name(s: &VcrSettings) -> String {
    let mut name = format!(
        "vcr/{}/{}/{}/{}",
        snake(&s.sampler),
        snake(&s.reasoner),
        snake(&s.modulation),
        snake(&s.level)
    );
    if s.sampler == SamplerKind::StaticAttn && s.static_query == StaticQueryForm::Unfused {
        name.push_str("/unfused");
    }
    name.push_str(match (s.bn_sampler, s.bn_reasoner) {
        (false, false) => "/bn-none",
        (true, false) => "/bn-sampler",
        (false, true) => "/bn-reasoner",
        (true, true) => "/bn-both",
    });
    name
}

/// Check one concept module with respect to its input map and every
/// parameter, in train mode on a batch of 2.
pub fn vcr_check(name: &str, settings: &VcrSettings, seed: u64) -> Result<CheckReport> {
    let cfg = ConceptConfig::new(2, 4, Some(2), settings.clone())?;
    let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
    let mut r = rng::stream(seed, 2, 0);
    let module = VcrModule::new(&mut Builder::new(&mut ps, &mut bs, &mut r), &cfg)?;
    let mut inputs = vec![uniform(&[2, 8, 2, 3], &mut r)];
    inputs.extend(ps.iter().map(|p| p.value.clone()));
    check(name, inputs, seed, |g, v| {
        let mut f = Forward::with_vars(g, &ps, &bs, Mode::Train, &v[1..]);
        module.forward(&mut f, v[0], None)
    })
}

/// Whole residual block with a concept module, with respect to the input
/// and every parameter. A batch of one is evaluated with running batch
/// statistics (train-mode normalization needs two samples).
pub fn block_check(name: &str, batch: usize, channels: usize, mode: Mode, seed: u64) -> Result<CheckReport> {
    let settings = VcrSettings {
        level: ModulationLevel::Pixel,
        ..VcrSettings::default()
    };
    let spec = BlockSpec {
        in_channels: channels,
        out_channels: channels,
        concepts: 4,
        width: 2,
        stride: 1,
        vcr: Some(ConceptConfig::new(4, 2, None, settings)?),
    };
    let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
    let mut r = rng::stream(seed, 3, channels as u64);
    let block = Block::new(&mut Builder::new(&mut ps, &mut bs, &mut r), &spec)?;
    for (_, t) in bs.iter_mut() {
        let fill = Tensor::uniform(t.shape().to_vec(), 0.5, 1.5, &mut r);
        if t.data().iter().all(|&v| v == 1.0) {
            *t = fill;
        } else {
            *t = fill.map(|v| v - 1.0);
        }
    }
    let mut inputs = vec![uniform(&[batch, channels, 4, 4], &mut r)];
    inputs.extend(ps.iter().map(|p| p.value.clone()));
    check(name, inputs, seed, |g, v| {
        let mut f = Forward::with_vars(g, &ps, &bs, mode, &v[1..]);
        block.forward(&mut f, v[0], None)
    })
}

/// Block checks at the sizes the suite pins down.
pub fn block_checks(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        block_check("block/1x16x4x4", 1, 16, Mode::Eval, seed)?,
        block_check("block/1x32x4x4", 1, 32, Mode::Eval, seed)?,
        block_check("block/2x16x4x4-train", 2, 16, Mode::Train, seed)?,
    ])
}

/// Run everything for each seed and keep the worst result per check name.
pub fn run(seeds: &[u64], mut progress: impl FnMut(&CheckReport)) -> Result<Vec<CheckReport>> {
    let mut worst: BTreeMap<String, CheckReport> = BTreeMap::new();
    let mut record = |rep: CheckReport| {
        progress(&rep);
        match worst.get_mut(&rep.name) {
            Some(w) => w.merge(&rep),
            None => {
                worst.insert(rep.name.clone(), rep);
            }
        }
    };
    let variants = vcr_variants();
    for &seed in seeds {
        op_checks(seed)?.into_iter().for_each(&mut record);
        for (name, s) in &variants {
            record(vcr_check(name, s, seed)?);
        }
        block_checks(seed)?.into_iter().for_each(&mut record);
    }
    Ok(worst.into_values().collect())
}

/// Largest error across a set of reports.
pub fn worst(reports: &[CheckReport]) -> Real {
    reports.iter().map(|r| r.worst).fold(0.0, Real::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_grid_size() {
        // pool: 3·3·1·4, attention: 2·3·3·2·4, plus two unfused
        assert_eq!(vcr_variants().len(), 36 + 144 + 2);
        let names: std::collections::BTreeSet<String> = vcr_variants().into_iter().map(|v| v.0).collect();
        assert_eq!(names.len(), 182);
    }

    #[test]
    fn ops_pass_for_one_seed() {
        for rep in op_checks(11).unwrap() {
            assert!(rep.passed(GRAD_TOLERANCE), "{rep:?}");
            assert!(rep.checked > 0, "{rep:?}");
        }
    }
}
