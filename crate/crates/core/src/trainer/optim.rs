//! Adam with an optional switch to AMSGrad.

use ndarray::ArrayD;

use crate::scorer::Gradients;
use crate::tape::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.01,
            beta1: 0.0,
            beta2: 0.95,
            eps: 1e-12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient held a NaN or infinity; parameters and moments are
    /// untouched.
    SkippedNonFinite,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    amsgrad: bool,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    v_max: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect::<Vec<_>>();
        Adam {
            config,
            amsgrad: false,
            step: 0,
            m: zeros(),
            v: zeros(),
            v_max: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn is_amsgrad(&self) -> bool {
        self.amsgrad
    }

    /// From now on the denominator uses the running maximum of the
    /// bias-corrected second moment.
    pub fn enable_amsgrad(&mut self) {
        self.amsgrad = true;
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &Gradients) -> StepOutcome {
        assert_eq!(params.len(), grads.tensors.len(), "gradient count");
        if !grads.is_finite() {
            return StepOutcome::SkippedNonFinite;
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for (idx, (p, g)) in params.iter_mut().zip(&grads.tensors).enumerate() {
            let amsgrad = self.amsgrad;
            let m = self.m[idx].as_slice_mut().expect("contiguous moment");
            let v = self.v[idx].as_slice_mut().expect("contiguous moment");
            let v_max = self.v_max[idx].as_slice_mut().expect("contiguous moment");
            let p = p.as_slice_mut().expect("contiguous parameter");
            let g = g.as_slice().expect("contiguous gradient");
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mut v_hat = v[k] / c2;
                if amsgrad {
                    v_max[k] = v_max[k].max(v_hat);
                    v_hat = v_max[k];
                }
                p[k] -= learning_rate * (m[k] / c1) / (v_hat.sqrt() + eps);
            }
        }
        StepOutcome::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn grads(x: &[f64]) -> Gradients {
        Gradients {
            tensors: vec![arr1(x).into_dyn()],
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![arr1(&[1.0, -2.0]).into_dyn()];
        let mut opt = Adam::new(AdamConfig::default(), &params);
        opt.step(&mut params, &grads(&[1.0, 1.0]));
        let before = params.clone();
        let v_before = opt.second_moment()[0].clone();
        opt.step(&mut params, &grads(&[0.0, 0.0]));
        assert_eq!(params, before);
        assert_eq!(opt.second_moment()[0], v_before * 0.95);
    }

    #[test]
    fn first_step_magnitude() {
        let mut params = vec![arr1(&[0.0]).into_dyn()];
        let mut opt = Adam::new(AdamConfig::default(), &params);
        opt.step(&mut params, &grads(&[1.0]));
        assert!((params[0][0] + 0.01).abs() < 1e-12);
        assert_eq!(opt.first_moment()[0][0], 1.0);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut params = vec![arr1(&[0.5]).into_dyn()];
        let mut opt = Adam::new(AdamConfig::default(), &params);
        assert_eq!(opt.step(&mut params, &grads(&[f64::NAN])), StepOutcome::SkippedNonFinite);
        assert_eq!(params[0][0], 0.5);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn quadratic_bowl() {
        for amsgrad in [false, true] {
            let mut params = vec![arr1(&[3.0, -2.0, 1.5]).into_dyn()];
            let loss = |p: &Tensor| p.iter().map(|x| x * x).sum::<f64>();
            let start = loss(&params[0]);
            let mut opt = Adam::new(
                AdamConfig {
                    learning_rate: 0.2,
                    ..AdamConfig::default()
                },
                &params,
            );
            if amsgrad {
                opt.enable_amsgrad();
            }
            let mut prev = start;
            for _ in 0..50 {
                let g = grads(&params[0].iter().map(|x| 2.0 * x).collect::<Vec<_>>());
                opt.step(&mut params, &g);
                let now = loss(&params[0]);
                assert!(now < prev);
                prev = now;
            }
            assert!(prev < 1e-3 * start, "{} {}", amsgrad, prev);
        }
    }
}
