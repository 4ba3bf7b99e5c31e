use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Moment estimates for one ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        AdamState {
            config,
            v: zeros.clone(),
            m: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One bias-corrected Adam update.
    ///
    /// Gradients are validated before anything is written: a non-finite
    /// gradient leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam_step: {} params / {} grads for state of {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if !(lr > 0.0) {
            return Err(Error::Contract(format!("adam_step: learning rate {lr} must be > 0")));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("adam_step: non-finite gradient for param {i}")));
            }
        }

        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(epsilon));

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi * inv_bc1;
                let v_hat = *vi * inv_bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential learning-rate decay: `initial * factor^(t / steps)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial_rate: f64,
    pub decay_factor: f64,
    pub decay_steps: u64,
    /// Floor the exponent to whole decay periods.
    pub staircase: bool,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial_rate: 1e-3,
            decay_factor: 0.9,
            decay_steps: 1000,
            staircase: false,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_rate > 0.0) || !(self.decay_factor > 0.0) || self.decay_steps == 0 {
            return Err(Error::Config(format!(
                "learning-rate schedule needs initial_rate > 0, decay_factor > 0, decay_steps >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let mut exponent = step as f64 / self.decay_steps as f64;
        if self.staircase {
            exponent = exponent.floor();
        }
        self.initial_rate * self.decay_factor.powf(exponent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 0.001);
        assert!((s.lr_at(1000) - 0.0009).abs() < 1e-15);
        assert!((s.lr_at(500) - 0.001 * 0.9f64.sqrt()).abs() < 1e-15);
        assert!((s.lr_at(500) - 0.0009487).abs() < 1e-7);
        let stair = LrSchedule { staircase: true, ..s };
        assert_eq!(stair.lr_at(999), 0.001);
        assert!((stair.lr_at(1500) - 0.0009).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_positive_and_non_increasing() {
        for s in [LrSchedule::default(), LrSchedule { staircase: true, ..LrSchedule::default() }] {
            let mut prev = f64::INFINITY;
            for t in (0..50_000).step_by(37) {
                let lr = s.lr_at(t);
                assert!(lr > 0.0 && lr <= prev);
                prev = lr;
            }
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut w = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::<f64>::from_f64(&[3], &[0.3, -4.0, 1e-3]).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), [&w]);
        let before = w.clone();
        st.step(&mut [&mut w], std::slice::from_ref(&g), 0.01).unwrap();
        for i in 0..3 {
            let moved = before.data()[i] - w.data()[i];
            let expect = 0.01 * g.data()[i].signum();
            // |g| / (|g| + eps) deviates from 1 by at most eps/|g|
            assert!((moved - expect).abs() <= 0.01 * 1e-7 / g.data()[i].abs() + 1e-15);
        }
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        let mut w = Tensor::<f32>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), [&w]);
        st.step(&mut [&mut w], &[Tensor::zeros(&[2])], 0.1).unwrap();
        assert_eq!(w.data(), &[1.0, 2.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn nan_gradient_aborts_without_touching_state() {
        let mut w = Tensor::<f32>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), [&w]);
        let g = Tensor::from_f64(&[2], &[f64::NAN, 1.0]).unwrap();
        assert!(matches!(st.step(&mut [&mut w], &[g], 0.1), Err(Error::Numeric(_))));
        assert_eq!(w.data(), &[1.0, 2.0]);
        assert_eq!(st.step_count(), 0);
    }

    /// Independent scalar Adam, written out longhand.
    fn scalar_adam_oracle(mut w: f64, steps: usize, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-7f64);
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=steps {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn three_steps_on_parabola_match_oracle() {
        let mut w = Tensor::<f64>::scalar(1.0);
        let mut st = AdamState::new(AdamConfig::default(), [&w]);
        for _ in 0..3 {
            let g = Tensor::scalar(2.0 * w.item());
            st.step(&mut [&mut w], &[g], 0.1).unwrap();
        }
        assert!((w.item() - scalar_adam_oracle(1.0, 3, 0.1)).abs() < 1e-12);
    }
}
