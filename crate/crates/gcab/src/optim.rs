//! Adam with per-parameter gradient gates.
//!
//! A gate is a tensor of the same shape as its parameter with entries in
//! [0,1]. The effective gradient is gate * raw gradient, applied BEFORE
//! moment accumulation, so entries with gate == 0 accumulate zero moments
//! and stay bitwise unchanged.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One gated step over every parameter present in `grads`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        gates: &BTreeMap<String, Tensor>,
        precision: Precision,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::State(format!("gradient for unknown parameter `{name}`")))?;
            if !param.same_shape(grad) {
                return Err(Error::shape("adam", format!("param/grad for `{name}`")));
            }
            let gate = gates.get(name);
            if let Some(gt) = gate {
                if !gt.same_shape(param) {
                    return Err(Error::shape("adam", format!("gate shape for `{name}`")));
                }
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(param.rows(), param.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(param.rows(), param.cols()));
            let pd = param.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gate_i = gate.map(|g| g.data()[i]).unwrap_or(1.0);
                if gate_i == 0.0 {
                    // frozen entry: no moment update, bitwise unchanged value
                    continue;
                }
                let g = grad.data()[i] * gate_i;
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            param.quantize(precision);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), t);
        m
    }

    #[test]
    fn all_ones_gate_matches_ungated() {
        let mut a = Adam::new(0.1);
        let mut b = Adam::new(0.1);
        let grad = single("w", Tensor::row(vec![1.0, -2.0]));
        let mut pa = single("w", Tensor::row(vec![0.5, 0.5]));
        let mut pb = pa.clone();
        let gates = single("w", Tensor::ones(1, 2));
        a.step(&mut pa, &grad, &gates, Precision::F64).unwrap();
        b.step(&mut pb, &grad, &BTreeMap::new(), Precision::F64).unwrap();
        assert_eq!(pa["w"], pb["w"]);
    }

    #[test]
    fn all_zeros_gate_is_bitwise_noop() {
        let mut opt = Adam::new(0.1);
        let grad = single("w", Tensor::row(vec![1.0, -2.0]));
        let mut params = single("w", Tensor::row(vec![0.25, -0.75]));
        let before = params["w"].clone();
        let gates = single("w", Tensor::zeros(1, 2));
        for _ in 0..5 {
            opt.step(&mut params, &grad, &gates, Precision::F64).unwrap();
        }
        assert_eq!(params["w"], before);
        assert_eq!(opt.m["w"], Tensor::zeros(1, 2));
        assert_eq!(opt.v["w"], Tensor::zeros(1, 2));
    }

    #[test]
    fn row_gate_freezes_row() {
        // mask [[0,0],[1,1]] on a 2x2 weight with grad all-ones:
        // row 0 unchanged, row 1 takes the standard first Adam step
        // -lr * g/(sqrt(g^2)+eps) = -lr (for g=1, t=1).
        let mut opt = Adam::new(0.01);
        let grad = single("w", Tensor::new(2, 2, vec![1.0; 4]).unwrap());
        let mut params = single("w", Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gates = single("w", Tensor::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        opt.step(&mut params, &grad, &gates, Precision::F64).unwrap();
        let w = &params["w"];
        assert_eq!(w.get(0, 0), 1.0);
        assert_eq!(w.get(0, 1), 2.0);
        let expect = 3.0 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((w.get(1, 0) - expect).abs() < 1e-15);
        assert!((w.get(1, 1) - (4.0 - 0.01 * 1.0 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn gate_shape_mismatch_is_error() {
        let mut opt = Adam::new(0.1);
        let grad = single("w", Tensor::row(vec![1.0, 1.0]));
        let mut params = single("w", Tensor::row(vec![0.0, 0.0]));
        let gates = single("w", Tensor::row(vec![1.0]));
        assert!(opt.step(&mut params, &grad, &gates, Precision::F64).is_err());
    }
}
