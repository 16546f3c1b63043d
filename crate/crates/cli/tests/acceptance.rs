//! Acceptance gate. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr, uncaptured, and then asserts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use vcr_core::block::{Block, BlockSpec};
use vcr_core::config::Config;
use vcr_core::data::Dataset;
use vcr_core::ema::Ema;
use vcr_core::graph::Graph;
use vcr_core::network::{Model, NetworkSpec};
use vcr_core::nn::{BufferStore, Builder, Forward, Mode, ParamRole, ParamStore};
use vcr_core::train::{evaluate, train};
use vcr_core::vcr::{ConceptConfig, Modulation, ModulationLevel, ReasonerKind, SamplerKind, VcrModule, VcrSettings};
use vcr_core::{rng, Real, Tensor};

fn report(n: usize, title: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {status}  {title}  ({detail})");
}

fn vcr(args: &[&str]) -> (bool, String, Duration) {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_vcr"))
        .args(args)
        .output()
        .expect("vcr binary runs");
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.success(), text, start.elapsed())
}

fn mini_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mini.cfg")
}

/// Number following `label` on its line.
fn field(text: &str, label: &str) -> f64 {
    let line = text
        .lines()
        .find(|l| l.starts_with(label))
        .unwrap_or_else(|| panic!("no line starting {label:?} in\n{text}"));
    line[label.len()..]
        .split_whitespace()
        .next()
        .and_then(|t| t.trim_end_matches('%').parse().ok())
        .unwrap_or_else(|| panic!("no number in {line:?}"))
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

#[test]
fn criterion_1_parameter_arithmetic() {
    let (ok_a, base, ta) = vcr(&["count", "--preset", "resnext50"]);
    let (ok_b, with, tb) = vcr(&["count", "--preset", "resnext50-vcr"]);
    let (pa, pb) = (field(&base, "params (M)"), field(&with, "params (M)"));
    let overhead = field(&with, "overhead vs plain twin");
    let elapsed = ta + tb;
    let ok = ok_a
        && ok_b
        && within(pa, 25.03, 0.005)
        && within(pb, 25.26, 0.005)
        && overhead < 1.0
        && elapsed < Duration::from_secs(10);
    report(
        1,
        "parameter arithmetic",
        ok,
        &format!("resnext50 {pa}M, resnext50-vcr {pb}M, overhead {overhead}%, {elapsed:.2?}"),
    );
    assert!(ok);
}

#[test]
fn criterion_2_flop_arithmetic() {
    let (ok_a, base, ta) = vcr(&["count", "--preset", "resnext50"]);
    let (ok_b, with, tb) = vcr(&["count", "--preset", "resnext50-vcr"]);
    let (ga, gb) = (field(&base, "GMACs (ImageNet GFLOPs)"), field(&with, "GMACs (ImageNet GFLOPs)"));
    let elapsed = ta + tb;
    let ok = ok_a && ok_b && within(ga, 4.24, 0.03) && within(gb, 4.26, 0.03) && elapsed < Duration::from_secs(30);
    report(
        2,
        "FLOP arithmetic at 224x224",
        ok,
        &format!("resnext50 {ga} GMACs, resnext50-vcr {gb} GMACs, {elapsed:.2?}"),
    );
    assert!(ok);
}

#[test]
fn criterion_3_gradient_suite() {
    let (ok, out, elapsed) = vcr(&["grad-check", "--seed", "7", "--seeds", "20"]);
    let summary = out.lines().find(|l| l.contains("checks over")).unwrap_or("").to_string();
    let checks: usize = summary.split_whitespace().next().and_then(|t| t.parse().ok()).unwrap_or(0);
    let worst: f64 = summary
        .split("worst relative error ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .and_then(|t| t.parse().ok())
        .unwrap_or(f64::INFINITY);
    let variants = vcr_core::gradsuite::vcr_variants().len();
    let ok = ok
        && std::mem::size_of::<Real>() == 8
        && out.contains("all checks passed")
        && worst <= 1e-4
        && checks > variants
        && elapsed < Duration::from_secs(300);
    report(
        3,
        "finite-difference suite, 20 seeds, 64-bit",
        ok,
        &format!("{checks} checks including {variants} concept-module variants, worst rel. err {worst}, {elapsed:.2?}"),
    );
    assert!(ok, "{out}");
}

struct Built {
    ps: ParamStore,
    bs: BufferStore,
    m: VcrModule,
}

fn build(c: usize, p: usize, pt: usize, settings: VcrSettings, seed: u64) -> Built {
    let cfg = ConceptConfig::new(c, p, Some(pt), settings).unwrap();
    let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
    let m = VcrModule::new(&mut Builder::new(&mut ps, &mut bs, &mut rng::seeded(seed)), &cfg).unwrap();
    Built { ps, bs, m }
}

fn no_bn(sampler: SamplerKind, reasoner: ReasonerKind) -> VcrSettings {
    VcrSettings {
        sampler,
        reasoner,
        bn_sampler: false,
        bn_reasoner: false,
        ..VcrSettings::default()
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng::seeded(seed))
}

fn set(ps: &mut ParamStore, name: &str, t: Tensor) {
    let id = ps.find(name).unwrap();
    *ps.value_mut(id) = t;
}

fn zeroed(ps: &mut ParamStore, name: &str) {
    let shape = ps.value(ps.find(name).unwrap()).shape().to_vec();
    set(ps, name, Tensor::zeros(shape));
}

fn module(b: &Built, z: &Tensor, mode: Mode) -> (Tensor, Graph) {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let mut f = Forward::new(&mut g, &b.ps, &b.bs, mode);
    let out = b.m.forward(&mut f, zv, Some("m")).unwrap();
    (g.value(out).clone(), g)
}

fn block(vcr: bool, seed: u64) -> (ParamStore, BufferStore, Block) {
    let spec = BlockSpec {
        in_channels: 8,
        out_channels: 16,
        concepts: 4,
        width: 4,
        stride: 2,
        vcr: vcr.then(|| ConceptConfig::new(4, 4, None, VcrSettings::default()).unwrap()),
    };
    let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
    let blk = Block::new(&mut Builder::new(&mut ps, &mut bs, &mut rng::seeded(seed)), &spec).unwrap();
    (ps, bs, blk)
}

#[test]
fn criterion_4_algebraic_equivalences() {
    let (mut pool_err, mut branch_err, mut relu_err, mut ident_err, mut pixel_err) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for seed in 0..20u64 {
        let (c, p, pt) = (1 + seed as usize % 4, 2 + seed as usize % 3, 1 + seed as usize % 2);
        let z = random(&[2, c * p, 3, 4], seed + 100);

        let mut dynamic = build(c, p, pt, no_bn(SamplerKind::DynamicAttn, ReasonerKind::None), seed);
        zeroed(&mut dynamic.ps, "sampler.query");
        let mut pool = build(c, p, pt, no_bn(SamplerKind::Pool, ReasonerKind::None), seed);
        let wv = dynamic.ps.value(dynamic.ps.find("sampler.value").unwrap()).clone();
        set(&mut pool.ps, "sampler.value", wv);
        let state = |b: &Built| {
            let (_, g) = module(b, &z, Mode::Eval);
            g.value(g.tapped("m.state").unwrap()).clone()
        };
        pool_err = Real::max(pool_err, state(&pool).max_abs_diff(&state(&dynamic)));

        for vcr in [false, true] {
            for mode in [Mode::Train, Mode::Eval] {
                let (ps, bs, blk) = block(vcr, seed);
                let x = random(&[2, 8, 6, 6], seed + 200);
                let run = |branched: bool| {
                    let mut g = Graph::new();
                    let xv = g.constant(x.clone());
                    let mut f = Forward::new(&mut g, &ps, &bs, mode);
                    let y = if branched {
                        blk.forward_branched(&mut f, xv).unwrap()
                    } else {
                        blk.forward(&mut f, xv, None).unwrap()
                    };
                    g.value(y).clone()
                };
                branch_err = Real::max(branch_err, run(false).max_abs_diff(&run(true)));
            }
        }

        let reasoner = build(c, pt, pt, no_bn(SamplerKind::Pool, ReasonerKind::None), seed);
        let h = random(&[2, c, pt], seed + 300);
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let mut f = Forward::new(&mut g, &reasoner.ps, &reasoner.bs, Mode::Train);
        let r = reasoner.m.reasoner.forward(&mut f, hv).unwrap().state;
        relu_err = Real::max(relu_err, g.value(r).max_abs_diff(&h.map(|v| v.max(0.0))));

        for level in [ModulationLevel::Channel, ModulationLevel::Pixel] {
            let modulation = [Modulation::Scale, Modulation::Shift, Modulation::ScaleShift][seed as usize % 3];
            let mut b = build(c, p, pt, VcrSettings { level, modulation, ..VcrSettings::default() }, seed);
            for name in ["modulator.scale.weight", "modulator.shift.weight", "modulator.shift.bias"] {
                if b.ps.find(name).is_some() {
                    zeroed(&mut b.ps, name);
                }
            }
            if let Some(id) = b.ps.find("modulator.scale.bias") {
                *b.ps.value_mut(id) = Tensor::ones(b.ps.value(id).shape().to_vec());
            }
            let (out, _) = module(&b, &z, Mode::Train);
            ident_err = Real::max(ident_err, out.max_abs_diff(&z.map(|v| v.max(0.0))));
        }

        let channel = VcrSettings::default();
        let pixel = VcrSettings {
            level: ModulationLevel::Pixel,
            ..VcrSettings::default()
        };
        let (mut a, mut b) = (build(c, p, pt, channel, seed), build(c, p, pt, pixel, seed));
        zeroed(&mut a.ps, "sampler.query");
        zeroed(&mut b.ps, "sampler.query");
        pixel_err = Real::max(pixel_err, module(&a, &z, Mode::Eval).0.max_abs_diff(&module(&b, &z, Mode::Eval).0));
    }
    let ok = pool_err <= 1e-12 && branch_err <= 1e-10 && relu_err == 0.0 && ident_err == 0.0 && pixel_err <= 1e-12;
    report(
        4,
        "algebraic equivalences over 20 seeds",
        ok,
        &format!(
            "pool vs zero query {pool_err:e}, grouped vs branched {branch_err:e}, reasoner none vs relu {relu_err:e}, \
             identity modulator vs relu {ident_err:e}, uniform pixel vs channel {pixel_err:e}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_5_attention_contracts() {
    let (mut sum_err, mut max_err, mut edge_min, mut edge_max) = (0.0 as Real, 0.0 as Real, Real::INFINITY, Real::NEG_INFINITY);
    let mut rows = 0;
    for seed in 0..20u64 {
        for (sampler, level) in [
            (SamplerKind::DynamicAttn, ModulationLevel::Pixel),
            (SamplerKind::StaticAttn, ModulationLevel::Pixel),
            (SamplerKind::DynamicAttn, ModulationLevel::Channel),
        ] {
            let spec = NetworkSpec {
                vcr: Some(VcrSettings {
                    sampler,
                    level,
                    ..VcrSettings::default()
                }),
                ..NetworkSpec::mini()
            };
            let model = Model::new(&spec, seed).unwrap();
            let x = random(&[2, 3, 16, 16], seed + 7).map(|v| 3.0 * v);
            let (mut g, _) = model.trace(&x).unwrap();
            for k in 0..model.blocks().count() {
                let m = g.tapped(&format!("blocks.{k}.attention")).unwrap();
                let hw = g.shape(m)[2];
                for row in g.value(m).data().chunks(hw) {
                    sum_err = sum_err.max((row.iter().sum::<Real>() - 1.0).abs());
                    rows += 1;
                }
                let r = g.row_max_normalize(m).unwrap();
                for row in g.value(r).data().chunks(hw) {
                    max_err = max_err.max((row.iter().copied().fold(Real::NEG_INFINITY, Real::max) - 1.0).abs());
                }
                let a = g.value(g.tapped(&format!("blocks.{k}.adjacency")).unwrap());
                for &v in a.data() {
                    edge_min = edge_min.min(v);
                    edge_max = edge_max.max(v);
                }
            }
        }
    }
    let ok = sum_err <= 1e-9 && max_err <= 1e-12 && edge_min > -1.0 && edge_max < 1.0;
    report(
        5,
        "attention and renormalization contracts",
        ok,
        &format!(
            "{rows} rows, worst row-sum error {sum_err:e}, worst renormalized max error {max_err:e}, edges in [{edge_min}, {edge_max}]"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_6_recipe_components() {
    let overrides: Vec<String> = ["steps=1000", "schedule.peak_lr=1.6", "schedule.final_lr=0.0001", "schedule.warmup_fraction=0.1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let cfg = Config::load(Some(&mini_cfg()), &overrides).unwrap();
    let s = cfg.schedule.schedule(cfg.steps).unwrap();
    let mid = s.warmup_steps + (s.total_steps - s.warmup_steps) / 2;
    let points = [
        s.lr_at(0).unwrap(),
        s.lr_at(s.warmup_steps).unwrap(),
        s.lr_at(mid).unwrap(),
        s.lr_at(s.total_steps).unwrap(),
    ];
    let lr_ok = points[0] == 0.0
        && points[1] == 1.6
        && (points[2] - (1.6 + 0.0001) / 2.0).abs() <= 1e-12
        && points[3] == 0.0001;

    let mut ps = ParamStore::new();
    ps.add("w", Tensor::full([4], 3.0), ParamRole::Weight);
    let bs = BufferStore::new();
    let mut ema = Ema::new(&ps, &bs, 0.9999, false);
    set(&mut ps, "w", Tensor::full([4], -1.0));
    for _ in 0..500 {
        ema.update(&ps, &bs);
    }
    let expected = -1.0 + (0.9999 as Real).powi(500) * 4.0;
    let ema_err = ema.shadow[0].data().iter().map(|v| (v - expected).abs()).fold(0.0, Real::max);

    let mut ln_k_ok = true;
    for k in [2usize, 3, 10, 1000] {
        for eps in [0.0, 0.1, 0.5, 0.9] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::full([4, k], 0.37));
            let l = g.label_smoothed_ce(x, &[0, 1, k - 1, k / 2], eps).unwrap();
            ln_k_ok &= g.value(l).item() == (k as Real).ln();
        }
    }
    let ok = lr_ok && ema_err <= 1e-10 && ln_k_ok;
    report(
        6,
        "recipe components",
        ok,
        &format!("lr at start/warmup end/midpoint/end {points:?}, EMA closed-form error {ema_err:e}, uniform-logit loss equals ln K: {ln_k_ok}"),
    );
    assert!(ok);
}

/// Softmax regression on raw pixels by full-batch gradient descent.
fn logistic_oracle(data: &Dataset) -> Real {
    let (n, d, k) = (data.len(), data.image_len(), data.classes);
    let idx: Vec<usize> = (0..n).collect();
    let (x, y) = data.batch(&idx, None).unwrap();
    let x = x.reshape([n, d]).unwrap();
    let mut w = Tensor::zeros([d, k]);
    let mut logits = Tensor::zeros([n, k]);
    for _ in 0..200 {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.param(w.clone()));
        let z = g.matmul(xv, wv).unwrap();
        let loss = g.label_smoothed_ce(z, &y, 0.0).unwrap();
        logits = g.value(z).clone();
        let grad = g.backward(loss).unwrap().wrt(wv);
        for (a, b) in w.data_mut().iter_mut().zip(grad.data()) {
            *a -= 0.5 * b;
        }
    }
    vcr_core::train::top1(&logits, &y)
}

#[test]
fn criterion_7_desk_scale_learning() {
    let start = Instant::now();
    let seed = 7;
    let run = |preset: &str, out: &Path| {
        let cfg = Config::load(Some(&mini_cfg()), &[format!("model.preset=\"{preset}\"")]).unwrap();
        let data = cfg.data.load(true).unwrap();
        let mut model = Model::new(&cfg.model.network().unwrap(), seed).unwrap();
        let r = train(&mut model, &data, &cfg.plan(seed), Some(out)).unwrap();
        let (params, buffers) = r.eval_stores(&model);
        (evaluate(&model, &params, &buffers, &data, 64).unwrap(), cfg.steps, data)
    };
    let dir = tempfile::tempdir().unwrap();
    let (with, steps, data) = run("mini-vcr", &dir.path().join("a"));
    let (again, _, _) = run("mini-vcr", &dir.path().join("b"));
    let (plain, _, _) = run("mini", &dir.path().join("plain"));
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    let reproducible = read("a/metrics.csv") == read("b/metrics.csv") && read("a/final.ckpt") == read("b/final.ckpt") && with == again;
    let oracle = logistic_oracle(&data);
    let elapsed = start.elapsed();
    let ok = steps <= 500
        && with.top1 >= 0.95
        && reproducible
        && with.loss <= 1.05 * plain.loss
        && elapsed < Duration::from_secs(600);
    report(
        7,
        "desk-scale learning on synthetic data",
        ok,
        &format!(
            "mini-vcr train top1 {} after {steps} steps, final loss {} vs plain twin {} (ratio {:.4}), byte-reproducible {reproducible}, \
             logistic-regression oracle top1 {oracle}, {elapsed:.2?}",
            with.top1,
            with.loss,
            plain.loss,
            with.loss / plain.loss
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_8_ablation_grid() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ablation.csv");
    let cfg = mini_cfg();
    let (ok_run, out, elapsed) = vcr(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "7",
        "--override",
        "steps=30",
        "--out",
        csv.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap_or_default();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let well_formed = header == vcr_core::ablation::HEADER.split(',').collect::<Vec<_>>()
        && rows.len() == 27
        && rows.iter().all(|r| r.len() == header.len())
        && rows.iter().all(|r| r[4..].iter().all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)));
    let mut combos: Vec<(String, String, String)> = rows.iter().map(|r| (r[0].clone(), r[1].clone(), r[2].clone())).collect();
    combos.sort();
    combos.dedup();
    let full = |sampler: &str| -> f64 {
        rows.iter()
            .find(|r| r[0] == sampler && r[1] == "dynamic_edge" && r[2] == "scale_shift")
            .map(|r| r[col("full_params")].parse().unwrap())
            .unwrap_or(f64::NAN)
    };
    let (pool, stat, dynamic) = (full("pool"), full("static_attn"), full("dynamic_attn"));
    let ordering = (pool / 1e4).round() == (stat / 1e4).round() && stat < dynamic;
    let published = within(pool, 25.17e6, 0.005) && within(stat, 25.17e6, 0.005) && within(dynamic, 25.26e6, 0.005);
    let ok = ok_run && well_formed && combos.len() == 27 && ordering && published;
    report(
        8,
        "ablation grid",
        ok,
        &format!(
            "{} rows, {} distinct cells, full-scale params pool {pool} static {stat} dynamic {dynamic}, {elapsed:.2?}",
            rows.len(),
            combos.len()
        ),
    );
    assert!(ok, "{out}");
}
