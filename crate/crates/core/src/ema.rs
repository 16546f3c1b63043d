//! Exponential moving average of parameters.

use crate::nn::{BufferStore, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: Real,
    /// One shadow per parameter, in store order.
    pub shadow: Vec<Tensor>,
    /// Shadows of the buffers when they are averaged too.
    pub buffers: Option<Vec<Tensor>>,
}

fn blend(shadow: &mut Tensor, value: &Tensor, decay: Real) {
    for (s, &v) in shadow.data_mut().iter_mut().zip(value.data()) {
        *s = decay * *s + (1.0 - decay) * v;
    }
}

impl Ema {
    /// Shadows start at the current values.
    pub fn new(params: &ParamStore, buffers: &BufferStore, decay: Real, include_buffers: bool) -> Self {
        Ema {
            decay,
            shadow: params.iter().map(|p| p.value.clone()).collect(),
            buffers: include_buffers.then(|| buffers.iter().map(|(_, t)| t.clone()).collect()),
        }
    }

    /// `shadow ← d·shadow + (1 − d)·θ`.
    pub fn update(&mut self, params: &ParamStore, buffers: &BufferStore) {
        for (s, p) in self.shadow.iter_mut().zip(params.iter()) {
            blend(s, &p.value, self.decay);
        }
        if let Some(shadows) = &mut self.buffers {
            for (s, (_, b)) in shadows.iter_mut().zip(buffers.iter()) {
                blend(s, b, self.decay);
            }
        }
    }

    /// Copies of the stores with averaged values substituted.
    pub fn swap_in(&self, params: &ParamStore, buffers: &BufferStore) -> (ParamStore, BufferStore) {
        let mut ps = params.clone();
        for (p, s) in ps.iter_mut().zip(&self.shadow) {
            p.value = s.clone();
        }
        let mut bs = buffers.clone();
        if let Some(shadows) = &self.buffers {
            for ((_, b), s) in bs.iter_mut().zip(shadows) {
                *b = s.clone();
            }
        }
        (ps, bs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamRole;

    fn single(v: Real) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::full([3], v), ParamRole::Weight);
        ps
    }

    #[test]
    fn geometric_closed_form() {
        let bs = BufferStore::new();
        let mut ema = Ema::new(&single(5.0), &bs, 0.9, false);
        let theta = single(1.0);
        for _ in 0..20 {
            ema.update(&theta, &bs);
        }
        let expected = 1.0 + 0.9f64.powi(20) as Real * (5.0 - 1.0);
        assert!(ema.shadow[0].data().iter().all(|v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn decay_extremes() {
        let bs = BufferStore::new();
        let mut copy = Ema::new(&single(5.0), &bs, 0.0, false);
        copy.update(&single(2.0), &bs);
        assert_eq!(copy.shadow[0].data(), [2.0; 3]);
        let mut frozen = Ema::new(&single(5.0), &bs, 1.0, false);
        frozen.update(&single(2.0), &bs);
        assert_eq!(frozen.shadow[0].data(), [5.0; 3]);
    }

    #[test]
    fn buffers_follow_only_when_asked() {
        let mut bs = BufferStore::new();
        bs.add("bn.running_mean", Tensor::zeros([2]));
        let ps = single(0.0);
        let mut with = Ema::new(&ps, &bs, 0.5, true);
        let without = Ema::new(&ps, &bs, 0.5, false);
        *bs.iter_mut().next().unwrap().1 = Tensor::ones([2]);
        with.update(&ps, &bs);
        assert_eq!(with.buffers.as_ref().unwrap()[0].data(), [0.5, 0.5]);
        let (_, swapped) = without.swap_in(&ps, &bs);
        assert_eq!(swapped.iter().next().unwrap().1.data(), [1.0, 1.0]);
    }
}
