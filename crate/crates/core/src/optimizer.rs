//! Adam with bias correction and an exponentially decaying learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::NetworkParams;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    /// Fresh state with the usual defaults `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn new(n_params: usize) -> Self {
        Self::with_hyperparameters(n_params, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS).expect("valid defaults")
    }

    pub fn for_params(params: &NetworkParams) -> Self {
        Self::new(params.len())
    }

    pub fn with_hyperparameters(n_params: usize, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Adam requires 0 <= beta1, beta2 < 1 and eps > 0 (got {beta1}, {beta2}, {eps})"
            )));
        }
        Ok(Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            beta1,
            beta2,
            eps,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// In-place update on a raw parameter slice. On a non-finite gradient
    /// nothing is modified and the offending index is returned.
    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> std::result::Result<(), usize> {
        assert_eq!(params.len(), self.first_moment.len(), "parameter/moment shape mismatch");
        assert_eq!(grads.len(), params.len(), "parameter/gradient shape mismatch");
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(i);
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// In-place Adam step on a network.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams, lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::DimensionMismatch {
                context: "Adam parameter shapes".into(),
                expected: params.len(),
                got: grads.len(),
            });
        }
        self.step_slice(params.as_mut_slice(), grads.as_slice(), lr)
            .map_err(|i| Error::NonFiniteGradient {
                path: params.param_path(i),
            })
    }
}

/// Pure form of [`AdamState::step`].
pub fn adam_update(
    state: &AdamState,
    params: &NetworkParams,
    grads: &NetworkParams,
    lr: f64,
) -> Result<(AdamState, NetworkParams)> {
    let mut state = state.clone();
    let mut params = params.clone();
    state.step(&mut params, grads, lr)?;
    Ok((state, params))
}

/// SGD budget and schedule shared by all schemes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Iterations at each time step `i < N - 1` (`S_i`).
    pub iterations_per_step: usize,
    /// Iterations for the first trained step (the terminal fit for Deep
    /// Splitting, step `N - 1` otherwise).
    pub final_step_iterations: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations_per_step: 5000,
            final_step_iterations: 20000,
            batch_size: 1000,
            lr_initial: 1e-2,
            lr_final: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations_per_step == 0 || self.final_step_iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "iteration counts and batch size must be at least 1".into(),
            ));
        }
        if !(self.lr_final > 0.0 && self.lr_initial >= self.lr_final && self.lr_initial.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rates must satisfy lr_initial >= lr_final > 0 (got {} and {})",
                self.lr_initial, self.lr_final
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// `lr_initial · (lr_final / lr_initial)^(iteration / (total - 1))`.
pub fn lr_at(config: &TrainConfig, iteration: usize, total: usize) -> f64 {
    if total <= 1 {
        return config.lr_initial;
    }
    if iteration + 1 >= total {
        return config.lr_final;
    }
    let frac = iteration as f64 / (total - 1) as f64;
    config.lr_initial * (config.lr_final / config.lr_initial).powf(frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{Architecture, NetworkParams};
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let arch = Architecture::tanh(2, vec![3], 1).unwrap();
        let p = crate::neuralnet::init_params(&arch, 0).unwrap();
        let g = NetworkParams::zeros(&arch);
        let s = AdamState::for_params(&p);
        let (s2, q) = adam_update(&s, &p, &g, 0.1).unwrap();
        assert_eq!(q, p);
        assert_eq!(s2.step_count(), 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = AdamState::new(3);
        let mut theta = vec![1.0, -2.0, 0.5];
        let g = [0.3, -4.0, 1e-3];
        s.step_slice(&mut theta, &g, 0.01).unwrap();
        // m̂ = g and v̂ = g² after one step
        let expect = |t0: f64, gi: f64| t0 - 0.01 * gi / (gi.abs() + DEFAULT_EPS);
        assert!((theta[0] - expect(1.0, 0.3)).abs() < 1e-15);
        assert!((theta[1] - expect(-2.0, -4.0)).abs() < 1e-15);
        assert!((theta[2] - expect(0.5, 1e-3)).abs() < 1e-15);
        assert!((theta[1] - (-2.0 + 0.01)).abs() < 1e-9);
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut s = AdamState::new(1);
        let mut theta = [0.0];
        for _ in 0..2000 {
            let g = [2.0 * (theta[0] - 3.0)];
            s.step_slice(&mut theta, &g, 0.05).unwrap();
        }
        assert!((theta[0] - 3.0).abs() <= 1e-3, "theta = {}", theta[0]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let arch = Architecture::tanh(2, vec![3], 1).unwrap();
        let mut p = NetworkParams::zeros(&arch);
        let mut g = NetworkParams::zeros(&arch);
        g.bias_mut(1)[0] = f64::NAN;
        let mut s = AdamState::for_params(&p);
        let err = s.step(&mut p, &g, 0.1).unwrap_err();
        assert!(err.to_string().contains("layer 1 bias[0]"), "{err}");
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AdamState::with_hyperparameters(1, 1.0, 0.9, 1e-8).is_err());
        assert!(AdamState::with_hyperparameters(1, 0.9, 0.9, 0.0).is_err());
    }

    #[test]
    fn lr_endpoints_and_midpoint() {
        let cfg = TrainConfig {
            lr_initial: 1e-2,
            lr_final: 1e-4,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(&cfg, 0, 100), 1e-2);
        assert_eq!(lr_at(&cfg, 99, 100), 1e-4);
        assert!((lr_at(&cfg, 1, 3) - 1e-3).abs() < 1e-18);
        assert_eq!(lr_at(&cfg, 0, 1), 1e-2);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr_initial: 1e-4,
            lr_final: 1e-2,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn lr_is_non_increasing(a in 1e-4f64..1.0, ratio in 1e-4f64..1.0, total in 1usize..500) {
            let cfg = TrainConfig { lr_initial: a, lr_final: a * ratio, ..TrainConfig::default() };
            let mut prev = f64::INFINITY;
            for i in 0..total {
                let lr = lr_at(&cfg, i, total);
                prop_assert!(lr <= prev);
                prev = lr;
            }
        }

        #[test]
        fn adam_is_deterministic(g in proptest::collection::vec(-10.0f64..10.0, 4)) {
            let s = AdamState::new(4);
            let mut a = s.clone();
            let mut b = s;
            let mut pa = vec![0.5; 4];
            let mut pb = vec![0.5; 4];
            a.step_slice(&mut pa, &g, 0.01).unwrap();
            b.step_slice(&mut pb, &g, 0.01).unwrap();
            prop_assert_eq!(pa, pb);
            prop_assert_eq!(a, b);
        }
    }
}
