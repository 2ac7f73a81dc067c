//! Adam with bias correction, plus the exponential learning-rate schedule.
//! Wavelet angles and dense weights go through the exact same update path;
//! the optimizer only sees flat parameter slices in registry order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Fresh state for parameters of the given lengths.
    pub fn new(shapes: &[usize]) -> Adam {
        Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Rebuild from checkpointed moments.
    pub fn from_state(m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: u64) -> Result<Adam> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Config("optimizer moment arrays disagree in shape".into()));
        }
        if v.iter().flatten().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(Error::Config("second moments must be finite and non-negative".into()));
        }
        Ok(Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            t,
            m,
            v,
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update: m and v track the gradient and its square, parameters move
    /// by -lr * m_hat / (sqrt(v_hat) + eps) with bias-corrected moments.
    pub fn step(&mut self, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameter groups, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Config(format!(
                    "parameter group length {} does not match optimizer state {}",
                    p.len().max(g.len()),
                    m.len()
                )));
            }
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (group, (grad, (m, v))) in params
            .iter_mut()
            .zip(grads.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())))
        {
            for i in 0..group.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                group[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Exponential decay from an initial rate; staircase drops once per epoch,
/// otherwise the exponent varies continuously with training progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_rate: f64,
    pub staircase: bool,
}

impl Default for LrSchedule {
    fn default() -> LrSchedule {
        LrSchedule {
            initial: 0.01,
            decay_rate: 0.95,
            staircase: true,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial.is_finite() && self.initial > 0.0) {
            return Err(Error::Config(format!(
                "initial learning rate must be positive, got {}",
                self.initial
            )));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!(
                "decay rate must be in (0, 1], got {}",
                self.decay_rate
            )));
        }
        Ok(())
    }

    /// Rate for a whole epoch (staircase view).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial * self.decay_rate.powi(epoch as i32)
    }

    /// Rate at fractional progress (epoch + fraction of the current epoch).
    pub fn lr_at_progress(&self, progress: f64) -> f64 {
        if self.staircase {
            self.lr_at(progress.floor() as usize)
        } else {
            self.initial * self.decay_rate.powf(progress)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn first_step_moves_by_roughly_the_learning_rate() {
        let mut adam = Adam::new(&[1]);
        let mut x = [1.0];
        {
            let mut views: Vec<&mut [f64]> = vec![&mut x];
            adam.step(0.01, &mut views, &[&[0.5]]).unwrap();
        }
        // Bias correction makes m_hat = g and sqrt(v_hat) = |g| on step one.
        let expected = 1.0 - 0.01 * 0.5 / (0.5 + ADAM_EPSILON);
        assert_abs_diff_eq!(x[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn zero_gradients_leave_parameters_untouched() {
        let mut adam = Adam::new(&[3]);
        let mut x = [1.0, -2.0, 3.0];
        let before = x;
        for _ in 0..50 {
            let mut views: Vec<&mut [f64]> = vec![&mut x];
            adam.step(0.01, &mut views, &[&[0.0, 0.0, 0.0]]).unwrap();
        }
        assert_eq!(x, before);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut adam = Adam::new(&[2, 1]);
            let mut a = [0.3, -0.7];
            let mut b = [2.0];
            for step in 0..100 {
                let g0 = [(step as f64).sin(), 0.25];
                let g1 = [-0.1 * step as f64];
                let mut views: Vec<&mut [f64]> = vec![&mut a, &mut b];
                adam.step(0.005, &mut views, &[&g0, &g1]).unwrap();
            }
            (a, b, adam)
        };
        let (a1, b1, s1) = run();
        let (a2, b2, s2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn descends_a_quadratic_from_five() {
        let mut adam = Adam::new(&[1]);
        let mut x = [5.0f64];
        let mut prev = x[0].abs();
        let mut reached = None;
        for step in 0..2000 {
            let g = [2.0 * x[0]];
            let mut views: Vec<&mut [f64]> = vec![&mut x];
            adam.step(0.01, &mut views, &[&g]).unwrap();
            let now = x[0].abs();
            if now < 0.5 {
                reached = Some(step);
                break;
            }
            if step >= 10 {
                assert!(now <= prev, "|x| rose from {prev} to {now} at step {step}");
            }
            prev = now;
        }
        assert!(reached.is_some(), "|x| never dropped below 0.5, ended at {prev}");
    }

    #[test]
    fn shape_and_rate_validation() {
        let mut adam = Adam::new(&[2]);
        let mut x = [0.0, 0.0];
        let mut views: Vec<&mut [f64]> = vec![&mut x];
        assert!(matches!(adam.step(0.0, &mut views, &[&[1.0, 1.0]]), Err(Error::Config(_))));
        let mut views: Vec<&mut [f64]> = vec![&mut x];
        assert!(matches!(adam.step(0.01, &mut views, &[&[1.0]]), Err(Error::Config(_))));
        let mut y = [0.0];
        let mut views: Vec<&mut [f64]> = vec![&mut y];
        assert!(matches!(adam.step(0.01, &mut views, &[&[1.0]]), Err(Error::Config(_))));
        assert!(Adam::from_state(vec![vec![0.0]], vec![vec![-1.0]], 3).is_err());
        assert!(Adam::from_state(vec![vec![0.0]], vec![vec![0.0, 1.0]], 3).is_err());
    }

    #[test]
    fn schedule_follows_the_decay_curve() {
        let s = LrSchedule::default();
        assert_abs_diff_eq!(s.lr_at(0), 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(s.lr_at(1), 0.0095, epsilon = 1e-15);
        let constant = LrSchedule { initial: 0.01, decay_rate: 1.0, staircase: true };
        assert_eq!(constant.lr_at(57), 0.01);

        let mut prev = f64::INFINITY;
        for epoch in 0..50 {
            let lr = s.lr_at(epoch);
            assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }

        // Staircase holds the rate inside an epoch; continuous does not.
        assert_eq!(s.lr_at_progress(2.7), s.lr_at(2));
        let smooth = LrSchedule { staircase: false, ..s };
        assert!(smooth.lr_at_progress(2.7) < smooth.lr_at_progress(2.0));

        assert!(LrSchedule { initial: 0.0, ..s }.validate().is_err());
        assert!(LrSchedule { decay_rate: 0.0, ..s }.validate().is_err());
        assert!(LrSchedule { decay_rate: 1.2, ..s }.validate().is_err());
    }
}
