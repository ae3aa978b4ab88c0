//! Stateless reference policies: uniform random configuration and Gaussian
//! Thompson sampling over the joint action set.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::env::JointAction;
use crate::error::{invalid, Result};

/// Uniform over the `increments x amplitudes` joint actions.
pub fn random_policy<R: Rng + ?Sized>(increments: usize, amplitudes: usize, rng: &mut R) -> JointAction {
    JointAction::new(rng.random_range(0..increments), rng.random_range(0..amplitudes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BanditArm {
    pub action: JointAction,
    pub posterior_mean: f64,
    pub posterior_precision: f64,
    pub pull_count: u64,
}

pub const PRIOR_MEAN: f64 = 0.0;
pub const PRIOR_PRECISION: f64 = 1e-2;

/// One arm per joint action with the default prior.
pub fn init_arms(increments: usize, amplitudes: usize) -> Vec<BanditArm> {
    (0..increments * amplitudes)
        .map(|i| BanditArm {
            action: JointAction::from_flat(i, amplitudes),
            posterior_mean: PRIOR_MEAN,
            posterior_precision: PRIOR_PRECISION,
            pull_count: 0,
        })
        .collect()
}

/// Draws one value per arm from its posterior and returns the best arm.
pub fn ts_select<R: Rng + ?Sized>(arms: &[BanditArm], rng: &mut R) -> JointAction {
    let mut best = (f64::NEG_INFINITY, arms[0].action);
    for arm in arms {
        let sd = 1.0 / arm.posterior_precision.sqrt();
        let draw = Normal::new(arm.posterior_mean, sd)
            .map(|d| d.sample(rng))
            .unwrap_or(arm.posterior_mean);
        if draw > best.0 {
            best = (draw, arm.action);
        }
    }
    best.1
}

/// Conjugate Gaussian update with known observation precision.
pub fn ts_update(arms: &mut [BanditArm], action: JointAction, reward: f64, obs_precision: f64) -> Result<()> {
    if !(obs_precision > 0.0) || !reward.is_finite() {
        return Err(invalid("observation precision must be positive and the reward finite"));
    }
    let arm = arms
        .iter_mut()
        .find(|a| a.action == action)
        .ok_or_else(|| invalid(format!("unknown arm {action:?}")))?;
    let precision = arm.posterior_precision + obs_precision;
    arm.posterior_mean = (arm.posterior_precision * arm.posterior_mean + obs_precision * reward) / precision;
    arm.posterior_precision = precision;
    arm.pull_count += 1;
    Ok(())
}

/// Thompson sampling whose observation variance is estimated from an initial
/// sweep pulling every arm once.
#[derive(Debug, Clone)]
pub struct ThompsonBandit {
    arms: Vec<BanditArm>,
    sweep: Vec<(JointAction, f64)>,
    obs_precision: Option<f64>,
}

impl ThompsonBandit {
    pub fn new(increments: usize, amplitudes: usize) -> Self {
        Self {
            arms: init_arms(increments, amplitudes),
            sweep: Vec::new(),
            obs_precision: None,
        }
    }

    pub fn arms(&self) -> &[BanditArm] {
        &self.arms
    }

    pub fn obs_precision(&self) -> Option<f64> {
        self.obs_precision
    }

    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> JointAction {
        match self.obs_precision {
            None => self.arms[self.sweep.len() % self.arms.len()].action,
            Some(_) => ts_select(&self.arms, rng),
        }
    }

    pub fn update(&mut self, action: JointAction, reward: f64) -> Result<()> {
        if let Some(p) = self.obs_precision {
            return ts_update(&mut self.arms, action, reward, p);
        }
        if !reward.is_finite() {
            return Err(invalid("non-finite reward"));
        }
        self.sweep.push((action, reward));
        if self.sweep.len() == self.arms.len() {
            let n = self.sweep.len() as f64;
            let mean = self.sweep.iter().map(|s| s.1).sum::<f64>() / n;
            let var = self.sweep.iter().map(|s| (s.1 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let precision = 1.0 / var.max(1e-6);
            self.obs_precision = Some(precision);
            for (a, r) in std::mem::take(&mut self.sweep) {
                ts_update(&mut self.arms, a, r, precision)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn update_is_conjugate() {
        let mut arms = init_arms(5, 5);
        let a = JointAction::new(2, 3);
        ts_update(&mut arms, a, 4.0, 1.0).unwrap();
        let arm = arms.iter().find(|x| x.action == a).unwrap();
        assert!((arm.posterior_precision - 1.01).abs() < 1e-15);
        assert!((arm.posterior_mean - 4.0 / 1.01).abs() < 1e-12);
        assert_eq!(arm.pull_count, 1);
        assert!(arms.iter().filter(|x| x.action != a).all(|x| x.pull_count == 0 && x.posterior_mean == 0.0));
        assert!(ts_update(&mut arms, JointAction::new(7, 0), 1.0, 1.0).is_err());
    }

    #[test]
    fn sweep_visits_every_arm_then_sets_precision() {
        let mut b = ThompsonBandit::new(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::HashSet::new();
        for i in 0..25 {
            let a = b.select(&mut rng);
            seen.insert(a);
            b.update(a, (i % 2) as f64).unwrap();
        }
        assert_eq!(seen.len(), 25);
        let p = b.obs_precision().unwrap();
        // 13 zeros sit 12/25 below the mean, 12 ones sit 13/25 above it
        let expect_var = (13.0 * (12.0f64 / 25.0).powi(2) + 12.0 * (13.0f64 / 25.0).powi(2)) / 24.0;
        assert!((p - 1.0 / expect_var).abs() < 1e-9);
        assert!(b.arms().iter().all(|a| a.pull_count == 1));
    }

    #[test]
    fn seeded_selection_repeats() {
        let arms = init_arms(5, 5);
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..50).map(|_| ts_select(&arms, &mut rng)).collect()
        };
        let b: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..50).map(|_| ts_select(&arms, &mut rng)).collect()
        };
        assert_eq!(a, b);
    }
}
