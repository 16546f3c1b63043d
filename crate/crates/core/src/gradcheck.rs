//! Central finite differences, the independent oracle for every analytic
//! gradient in the crate.

use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::{Real, Result, Tensor};

/// Default difference step.
#[cfg(not(feature = "f32"))]
pub const DEFAULT_STEP: Real = 1e-5;
#[cfg(feature = "f32")]
pub const DEFAULT_STEP: Real = 1e-2;

/// Acceptance threshold for `|analytic − numeric| / max(1, |numeric|)`.
#[cfg(not(feature = "f32"))]
pub const GRAD_TOLERANCE: Real = 1e-4;
#[cfg(feature = "f32")]
pub const GRAD_TOLERANCE: Real = 1e-2;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i` of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> Real, x: &Tensor, h: Real) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

/// Worst `|a − n| / max(1, |n|)` over all elements.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> Real {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, Real::max)
}

/// Outcome of comparing analytic gradients with finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    /// Worst relative error over compared elements.
    pub worst: Real,
    /// Elements compared.
    pub checked: usize,
    /// Elements excluded because the function is not differentiable within
    /// one step of the evaluation point (a ReLU or max kink was crossed).
    pub skipped: usize,
}

impl CheckReport {
    pub fn passed(&self, tolerance: Real) -> bool {
        self.worst <= tolerance && self.worst.is_finite()
    }

    /// Fold another report into this one, keeping the worst error.
    pub fn merge(&mut self, other: &CheckReport) {
        self.worst = self.worst.max(other.worst);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// Compare [`Graph::backward`] with central differences for every element of
/// every input.
///
/// `build` maps leaf variables (one per input, in order) to an output of any
/// shape. The output is contracted with a fixed random tensor drawn from
/// `seed`, so the check sees a generic direction rather than a plain sum.
///
/// An element is skipped, not failed, when its central difference disagrees
/// with the analytic value *and* the two one-sided differences disagree with
/// each other by at least as much: the interval `[x−h, x+h]` then contains a
/// kink, where central differences measure nothing. Smooth points never hit
/// this rule because their one-sided differences agree to `O(h·f'')`.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor], seed: u64, h: Real, tolerance: Real, mut build: F) -> Result<CheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &leaves)?;
    let mut r = rng::seeded(seed ^ 0xa5a5_5a5a);
    let direction = Tensor::uniform(g.shape(out).to_vec(), -1.0, 1.0, &mut r);
    let dv = g.constant(direction.clone());
    let prod = g.mul(out, dv)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.wrt(v)).collect();

    let mut eval = |xs: &[Tensor]| -> Result<Real> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &leaves)?;
        Ok(g.value(out).data().iter().zip(direction.data()).map(|(a, b)| a * b).sum())
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let base = eval(&probe)?;
    let mut report = CheckReport {
        name: name.to_string(),
        worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..probe[k].numel() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;

            let central = (plus - minus) / (2.0 * h);
            let scale = central.abs().max(1.0);
            let err = (grad.data()[i] - central).abs() / scale;
            let one_sided_gap = ((plus - base) / h - (base - minus) / h).abs() / scale;
            if err > tolerance && one_sided_gap >= err {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            if !(err <= report.worst) {
                report.worst = err;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn([2, 3], |i| i as Real * 0.7 - 1.0);
        let g = finite_diff_grad(|t| t.sum(), &x, DEFAULT_STEP);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.item() * t.item(), &x, 1e-5);
        assert!((g.item() - 6.0).abs() <= 1e-8, "{}", g.item());
    }

    #[test]
    fn detects_wrong_gradient() {
        // scale() claims derivative `factor`; feed a function whose true
        // derivative differs by building different graphs for the two passes.
        let x = Tensor::from_fn([4], |i| i as Real + 0.5);
        let mut calls = 0;
        let report = check_gradients("bad", &[x], 1, 1e-5, 1e-4, |g, v| {
            calls += 1;
            Ok(if calls == 1 { g.scale(v[0], 2.0) } else { g.scale(v[0], 3.0) })
        })
        .unwrap();
        assert!(!report.passed(1e-4));
    }

    #[test]
    fn kink_is_skipped_not_failed() {
        let x = Tensor::new([2], vec![2e-6, 1.0]).unwrap();
        let report = check_gradients("relu", &[x], 3, 1e-5, 1e-4, |g, v| Ok(g.relu(v[0]))).unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 1);
        assert!(report.passed(1e-4));
    }
}
