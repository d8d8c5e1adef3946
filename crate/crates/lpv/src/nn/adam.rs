//! Adam with bias correction.

use super::params::ParamSet;
use super::tensor::Mat;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let shapes: Vec<Mat> = params
            .iter()
            .map(|(_, m)| Mat::zeros(m.rows(), m.cols()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update; `grads` must be in `params` entry order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Mat]) {
        self.step_filtered(params, grads, |_| true);
    }

    /// Apply one update to the parameters `active` selects; the others keep
    /// both their values and their optimizer moments untouched.
    pub fn step_filtered(
        &mut self,
        params: &mut ParamSet,
        grads: &[Mat],
        active: impl Fn(&str) -> bool,
    ) {
        assert_eq!(grads.len(), self.m.len(), "grad count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names = params.names();
        for (k, name) in names.iter().enumerate() {
            if !active(name) {
                continue;
            }
            let g = &grads[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let p = params.get_mut(name);
            for i in 0..p.numel() {
                let gi = g.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x-3)^2 from x=0
        let mut ps = ParamSet::new();
        ps.insert("x", Mat::zeros(1, 1));
        let mut opt = Adam::new(0.1, &ps);
        for _ in 0..500 {
            let x = ps.get("x").get(0, 0);
            let g = Mat::from_vec(1, 1, vec![2.0 * (x - 3.0)]);
            opt.step(&mut ps, &[g]);
        }
        assert!((ps.get("x").get(0, 0) - 3.0).abs() < 1e-3);
    }
}
