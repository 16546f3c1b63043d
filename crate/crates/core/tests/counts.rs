//! Parameter and FLOP arithmetic against hand-derived oracles and the
//! published ResNeXt-50 figures.

use vcr_core::network::{Model, NetworkSpec};
use vcr_core::nn::{BufferStore, Builder, Conv2d, Linear, ParamStore};
use vcr_core::rng;
use vcr_core::vcr::{SamplerKind, StateWidthRule, VcrSettings};

/// ResNeXt-50 32×4d parameters written out layer by layer: conv weights,
/// batch-norm gamma/beta, classifier weight and bias.
fn resnext50_oracle() -> u64 {
    let mut total = 3 * 64 * 49 + 2 * 64;
    let mut d = 64;
    for (blocks, out, width, _) in [(3, 256, 4, 1), (4, 512, 8, 2), (6, 1024, 16, 2), (3, 2048, 32, 2)] {
        let inner = 32 * width;
        for j in 0..blocks {
            total += d * inner + 2 * inner; // split + bn
            total += inner * width * 9 + 2 * inner; // grouped 3×3 + bn
            total += inner * out + 2 * out; // merge + bn
            if j == 0 {
                total += d * out + 2 * out; // projection skip + bn
            }
            d = out;
        }
    }
    (total + 2048 * 1000 + 1000) as u64
}

/// Extra parameters of one dynamic/dynamic/scale+shift concept module.
fn vcr_oracle(c: u64, p: u64, pt: u64, bn: bool) -> u64 {
    let sampler = 3 * c * p * pt; // W^q, W^k, W^v
    let reasoner = pt * c; // W^edge
    let modulator = 2 * (c * p * pt + c * p); // W^scale, b^scale, W^shift, b^shift
    let norms = if bn { 4 * pt } else { 0 };
    sampler + reasoner + modulator + norms
}

fn count(spec: &NetworkSpec) -> u64 {
    Model::new(spec, 0).unwrap().params.element_count()
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

#[test]
fn single_linear_layer() {
    let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
    let mut r = rng::seeded(0);
    Linear::new(&mut Builder::new(&mut ps, &mut bs, &mut r), "fc", 10, 5);
    assert_eq!(ps.element_count(), 55);
}

#[test]
fn pointwise_conv_flops() {
    let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
    let mut r = rng::seeded(0);
    let conv = Conv2d::new(&mut Builder::new(&mut ps, &mut bs, &mut r), "c", 2, 2, 1, 1, 0, 1).unwrap();
    assert_eq!(2 * conv.macs(2, 2), 32);
}

#[test]
fn resnext50_matches_oracle_and_table() {
    let n = count(&NetworkSpec::resnext50());
    assert_eq!(n, resnext50_oracle());
    assert_eq!(n, 25_028_904);
    assert!(within(n as f64, 25.03e6, 0.005));
}

#[test]
fn resnext50_vcr_matches_oracle_and_table() {
    let base = count(&NetworkSpec::resnext50());
    let spec = NetworkSpec::preset("resnext50-vcr").unwrap();
    let n = count(&spec);
    let mut extra = 0;
    for (blocks, p) in [(3, 4), (4, 8), (6, 16), (3, 32)] {
        extra += blocks * vcr_oracle(32, p, StateWidthRule::Min.state_width(p as usize) as u64, true);
    }
    assert_eq!(n - base, extra);
    assert!(within(n as f64, 25.26e6, 0.005), "{n}");
    assert!((n - base) as f64 / (base as f64) < 0.01);
}

#[test]
fn max_rule_without_norm_parameters_hits_published_total() {
    let mut extra = 0;
    for (blocks, p) in [(3, 4), (4, 8), (6, 16), (3, 32)] {
        extra += blocks * vcr_oracle(32, p, StateWidthRule::Max.state_width(p as usize) as u64, false);
    }
    assert_eq!(resnext50_oracle() + extra, 25_258_920);

    let mut spec = NetworkSpec::preset("resnext50-vcr").unwrap();
    spec.vcr = Some(VcrSettings {
        state_width_rule: StateWidthRule::Max,
        bn_sampler: false,
        bn_reasoner: false,
        ..VcrSettings::default()
    });
    assert_eq!(count(&spec), 25_258_920);
}

#[test]
fn sampler_parameter_ordering() {
    let counts: Vec<u64> = [SamplerKind::Pool, SamplerKind::StaticAttn, SamplerKind::DynamicAttn]
        .into_iter()
        .map(|sampler| {
            let mut spec = NetworkSpec::preset("resnext50-vcr").unwrap();
            spec.vcr = Some(VcrSettings { sampler, ..VcrSettings::default() });
            count(&spec)
        })
        .collect();
    assert!(counts[0] <= counts[1] && counts[1] < counts[2], "{counts:?}");
    for (n, target) in counts.iter().zip([25.17e6, 25.17e6, 25.26e6]) {
        assert!(within(*n as f64, target, 0.005), "{n} vs {target}");
    }
}

#[test]
fn resnext50_macs() {
    let base = Model::new(&NetworkSpec::resnext50(), 0).unwrap().cost_report("resnext50");
    let vcr = Model::new(&NetworkSpec::preset("resnext50-vcr").unwrap(), 0)
        .unwrap()
        .cost_report("resnext50-vcr");
    assert!(within(base.gmacs(), 4.24, 0.03), "{}", base.gmacs());
    assert!(within(vcr.gmacs(), 4.26, 0.03), "{}", vcr.gmacs());
    assert!(vcr.macs() > base.macs());
    assert!(base.flop_count() > 2 * base.macs());
}
