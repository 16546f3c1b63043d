//! The sampler × reasoner × modulator ablation grid.

use crate::config::Config;
use crate::cost::sig6;
use crate::data::Dataset;
use crate::error::Result;
use crate::network::{Model, NetworkSpec};
use crate::train::{evaluate, train};
use crate::vcr::{Modulation, ModulationLevel, ReasonerKind, SamplerKind, VcrSettings};

pub const SAMPLERS: [SamplerKind; 3] = [SamplerKind::Pool, SamplerKind::StaticAttn, SamplerKind::DynamicAttn];
pub const REASONERS: [ReasonerKind; 3] = [ReasonerKind::None, ReasonerKind::StaticEdge, ReasonerKind::DynamicEdge];
pub const MODULATIONS: [Modulation; 3] = [Modulation::Scale, Modulation::Shift, Modulation::ScaleShift];

pub const HEADER: &str =
    "sampler,reasoner,modulation,level,params,gflops,full_params,full_gflops,final_loss,train_top1,test_top1";

/// All 27 settings, sampler-major, on top of `base`. Pooling rows fall
/// back to channel-level modulation, as pixel level needs attention.
pub fn grid(base: &VcrSettings) -> Vec<VcrSettings> {
    let mut out = Vec::new();
    for sampler in SAMPLERS {
        for reasoner in REASONERS {
            for modulation in MODULATIONS {
                let level = if sampler == SamplerKind::Pool { ModulationLevel::Channel } else { base.level };
                out.push(VcrSettings {
                    sampler,
                    reasoner,
                    modulation,
                    level,
                    ..base.clone()
                });
            }
        }
    }
    out
}

fn name<T: serde::Serialize>(v: &T) -> String {
    toml::Value::try_from(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub settings: VcrSettings,
    /// Desk-scale parameters and per-image multiply-accumulates (×1e9).
    pub params: u64,
    pub gflops: f64,
    /// The same concept module in ResNeXt-50 at 224×224.
    pub full_params: u64,
    pub full_gflops: f64,
    /// Eval-mode loss and accuracy on the training split, and accuracy on
    /// the test split, all with the evaluation (EMA) weights.
    pub final_loss: f64,
    pub train_top1: f64,
    pub test_top1: f64,
}

impl AblationRow {
    pub fn to_csv(&self) -> String {
        let s = &self.settings;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            name(&s.sampler),
            name(&s.reasoner),
            name(&s.modulation),
            name(&s.level),
            self.params,
            sig6(self.gflops),
            self.full_params,
            sig6(self.full_gflops),
            sig6(self.final_loss),
            sig6(self.train_top1),
            sig6(self.test_top1)
        )
    }
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Train every grid cell from the same seed and data. The base settings
/// come from `cfg.model.vcr` (defaults when absent).
pub fn run(
    cfg: &Config,
    seed: u64,
    train_data: &Dataset,
    test_data: &Dataset,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let base = cfg.model.vcr.clone().unwrap_or_default();
    let mut rows = Vec::new();
    for settings in grid(&base) {
        let mut model_cfg = cfg.model.clone();
        model_cfg.vcr = Some(settings.clone());
        let spec = model_cfg.network()?;
        let mut model = Model::new(&spec, seed)?;
        let desk = model.cost_report("ablation");
        let full = Model::new(
            &NetworkSpec {
                vcr: Some(settings.clone()),
                ..NetworkSpec::resnext50()
            },
            seed,
        )?
        .cost_report("ablation-full");
        let run = train(&mut model, train_data, &cfg.plan(seed), None)?;
        let (params, buffers) = run.eval_stores(&model);
        let batch = cfg.train.batch_size;
        let on_train = evaluate(&model, &params, &buffers, train_data, batch)?;
        let on_test = evaluate(&model, &params, &buffers, test_data, batch)?;
        let row = AblationRow {
            settings,
            params: desk.parameter_count,
            gflops: desk.gmacs(),
            full_params: full.parameter_count,
            full_gflops: full.gmacs(),
            final_loss: on_train.loss as f64,
            train_top1: on_train.top1 as f64,
            test_top1: on_test.top1 as f64,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}
