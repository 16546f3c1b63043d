//! Parameter and FLOP accounting.
//!
//! One multiply-accumulate (MAC) counts as 2 FLOPs. Elementwise work is
//! counted per output element: batch norm 2 (scale and shift), ReLU, tanh,
//! additions and multiplications 1, channel affine 2, softmax 5, row-max
//! normalization 2, max pooling one comparison per window element.
//! Published ImageNet tables conventionally quote MACs under the name
//! "FLOPs"; [`CostReport::gmacs`] gives that figure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use crate::nn::ParamStore;

/// FLOPs charged per element by elementwise operations.
pub mod per_element {
    pub const BATCH_NORM: u64 = 2;
    pub const RELU: u64 = 1;
    pub const TANH: u64 = 1;
    pub const ADD: u64 = 1;
    pub const MUL: u64 = 1;
    pub const AFFINE: u64 = 2;
    pub const SOFTMAX: u64 = 5;
    pub const ROW_MAX_NORMALIZE: u64 = 2;
}

/// Work for one image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    pub macs: u64,
    /// Total FLOPs: `2·macs` plus elementwise operations.
    pub flops: u64,
}

impl Cost {
    pub fn macs(macs: u64) -> Cost {
        Cost { macs, flops: 2 * macs }
    }

    pub fn elementwise(elements: u64, per_element: u64) -> Cost {
        Cost {
            macs: 0,
            flops: elements * per_element,
        }
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            macs: self.macs + o.macs,
            flops: self.flops + o.flops,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), Add::add)
    }
}

/// Parameters and compute of a model at a stated input size.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub preset: String,
    pub input: [usize; 3],
    pub parameter_count: u64,
    /// Parameter counts keyed by module group, e.g. `stage2.vcr`.
    pub params_by_module: BTreeMap<String, u64>,
    /// Compute per layer group, in forward order.
    pub layers: Vec<(String, Cost)>,
}

impl CostReport {
    pub fn total(&self) -> Cost {
        self.layers.iter().map(|(_, c)| *c).sum()
    }

    pub fn macs(&self) -> u64 {
        self.total().macs
    }

    pub fn flop_count(&self) -> u64 {
        self.total().flops
    }

    pub fn gflops(&self) -> f64 {
        self.flop_count() as f64 / 1e9
    }

    /// Multiply-accumulates in billions, the unit of published "GFLOPs".
    pub fn gmacs(&self) -> f64 {
        self.macs() as f64 / 1e9
    }

    /// `(self − base) / base` in parameters.
    pub fn param_overhead(&self, base: &CostReport) -> f64 {
        (self.parameter_count as f64 - base.parameter_count as f64) / base.parameter_count as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let [c, h, w] = self.input;
        let _ = writeln!(s, "model {}  input {c}x{h}x{w}", self.preset);
        let _ = writeln!(s, "FLOP convention: 1 MAC = 2 FLOPs, elementwise ops counted");
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<28} {:>14}", "module", "params");
        for (name, n) in &self.params_by_module {
            let _ = writeln!(s, "{name:<28} {n:>14}");
        }
        let _ = writeln!(s, "{:<28} {:>14}", "total", self.parameter_count);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<28} {:>16} {:>16}", "layer", "MACs", "FLOPs");
        for (name, c) in &self.layers {
            let _ = writeln!(s, "{name:<28} {:>16} {:>16}", c.macs, c.flops);
        }
        let t = self.total();
        let _ = writeln!(s, "{:<28} {:>16} {:>16}", "total", t.macs, t.flops);
        let _ = writeln!(s);
        let _ = writeln!(s, "params (M)            {}", sig6(self.parameter_count as f64 / 1e6));
        let _ = writeln!(s, "GMACs (ImageNet GFLOPs)  {}", sig6(self.gmacs()));
        let _ = writeln!(s, "GFLOPs (2 per MAC)    {}", sig6(self.gflops()));
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,name,params,macs,flops\n");
        for (name, n) in &self.params_by_module {
            let _ = writeln!(s, "params,{name},{n},,");
        }
        for (name, c) in &self.layers {
            let _ = writeln!(s, "compute,{name},,{},{}", c.macs, c.flops);
        }
        let t = self.total();
        let _ = writeln!(s, "total,{},{},{},{}", self.preset, self.parameter_count, t.macs, t.flops);
        s
    }
}

/// Group parameter counts by the first `depth` dotted components of their
/// names, with `vcr` components kept so the concept modules show separately.
pub fn params_by_module(params: &ParamStore) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for p in params.iter() {
        let parts: Vec<&str> = p.name.split('.').collect();
        let key = if parts[0] == "stages" && parts.len() > 1 {
            let kind = if parts.contains(&"vcr") { "vcr" } else { "conv" };
            format!("stage{}.{kind}", parts[1])
        } else {
            parts[0].to_string()
        };
        *out.entry(key).or_insert(0) += p.value.numel() as u64;
    }
    out
}

/// Format with six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let digits = 6 - 1 - v.abs().log10().floor() as i32;
    if (0..=17).contains(&digits) {
        format!("{v:.*}", digits as usize)
    } else {
        format!("{v:.5e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(25.028904), "25.0289");
        assert_eq!(sig6(0.000123456789), "0.000123457");
        assert_eq!(sig6(1234567.0), "1.23457e6");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn cost_adds() {
        let c = Cost::macs(16) + Cost::elementwise(8, per_element::RELU);
        assert_eq!(c, Cost { macs: 16, flops: 40 });
    }
}
