//! SGD with momentum and coupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamRole, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub momentum: Real,
    pub weight_decay: Real,
    /// Also decay batch-norm parameters and biases.
    pub decay_norm_and_bias: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_norm_and_bias: false,
        }
    }
}

/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, config: SgdConfig) -> Self {
        let velocity = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Sgd { config, velocity }
    }

    fn decays(&self, role: ParamRole) -> bool {
        role == ParamRole::Weight || self.config.decay_norm_and_bias
    }

    /// Apply one update. Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: Real) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Numeric(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::Numeric(format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}; step aborted", p.name)));
            }
        }
        let mu = self.config.momentum;
        let decay: Vec<Real> = params
            .iter()
            .map(|p| if self.decays(p.role) { self.config.weight_decay } else { 0.0 })
            .collect();
        for (((p, g), v), wd) in params.iter_mut().zip(grads).zip(&mut self.velocity).zip(decay) {
            for ((theta, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + (gi + wd * *theta);
                *theta -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[Real], role: ParamRole) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::new([values.len()], values.to_vec()).unwrap(), role);
        ps
    }

    fn sgd(ps: &ParamStore, momentum: Real, weight_decay: Real) -> Sgd {
        Sgd::new(
            ps,
            SgdConfig {
                momentum,
                weight_decay,
                decay_norm_and_bias: false,
            },
        )
    }

    #[test]
    fn plain_gradient_step() {
        let mut ps = store(&[1.0], ParamRole::Weight);
        let mut opt = sgd(&ps, 0.0, 0.0);
        opt.step(&mut ps, &[Tensor::ones([1])], 1.0).unwrap();
        assert_eq!(ps.value(ps.ids().next().unwrap()).data(), [0.0]);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut ps = store(&[0.3, -2.0], ParamRole::Weight);
        let before = ps.clone();
        let mut opt = sgd(&ps, 0.9, 0.0);
        for _ in 0..3 {
            opt.step(&mut ps, &[Tensor::zeros([2])], 0.5).unwrap();
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn momentum_recurrence() {
        let mut ps = store(&[0.0], ParamRole::Weight);
        let mut opt = sgd(&ps, 0.9, 0.0);
        for _ in 0..2 {
            opt.step(&mut ps, &[Tensor::ones([1])], 0.1).unwrap();
        }
        let theta = ps.value(ps.ids().next().unwrap()).data()[0];
        assert!((theta - -0.29).abs() < 1e-15, "{theta}");
    }

    #[test]
    fn decay_shrinks_weights_but_not_norm_parameters() {
        let mut ps = store(&[1.0, -3.0], ParamRole::Weight);
        ps.add("gamma", Tensor::ones([2]), ParamRole::Norm);
        let mut opt = sgd(&ps, 0.9, 1e-2);
        let zeros = [Tensor::zeros([2]), Tensor::zeros([2])];
        let norm = |ps: &ParamStore| ps.iter().next().unwrap().value.data().iter().map(|v| v * v).sum::<Real>();
        let mut last = norm(&ps);
        for _ in 0..5 {
            opt.step(&mut ps, &zeros, 0.1).unwrap();
            let n = norm(&ps);
            assert!(n < last);
            last = n;
        }
        assert_eq!(ps.iter().nth(1).unwrap().value.data(), [1.0, 1.0]);
    }

    #[test]
    fn nan_gradient_aborts_without_changes() {
        let mut ps = store(&[1.0, 2.0], ParamRole::Weight);
        let before = ps.clone();
        let mut opt = sgd(&ps, 0.9, 0.0);
        let bad = Tensor::new([2], vec![0.1, Real::NAN]).unwrap();
        let err = opt.step(&mut ps, &[bad], 0.1).unwrap_err();
        assert!(err.to_string().contains("non-finite gradient for w"));
        assert_eq!(ps, before);
        assert!(opt.velocity[0].data().iter().all(|&v| v == 0.0));
    }
}
