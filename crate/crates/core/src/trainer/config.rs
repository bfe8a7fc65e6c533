use crate::error::{Error, Result};

/// How the K groups are turned into a policy-gradient objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Only each group's non-dominated samples drive the actor; group `k` is
    /// rewarded with channel `k`.
    Pareto,
    /// Baseline: every sample is used and rewarded with the unweighted mean
    /// of its normalized channels.
    WeightedSum,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Pareto => "pareto",
            Mode::WeightedSum => "weighted-sum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pareto" => Some(Mode::Pareto),
            "weighted-sum" | "weighted_sum" => Some(Mode::WeightedSum),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub beta: f64,
    pub ppo_epochs: usize,
    /// Sequences per minibatch.
    pub minibatch: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    /// Number of groups, one per reward channel.
    pub groups: usize,
    pub samples_per_group: usize,
    pub iterations: usize,
    pub temperature: f64,
    pub value_coef: f64,
    /// Blend weight at the first and last iteration, interpolated linearly.
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub max_grad_norm: Option<f64>,
    pub mode: Mode,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            beta: 0.1,
            ppo_epochs: 2,
            minibatch: 32,
            lr: 5e-6,
            critic_lr: 5e-6,
            gamma: 1.0,
            groups: 3,
            samples_per_group: 8,
            iterations: 300,
            temperature: 1.5,
            value_coef: 0.5,
            alpha_start: 0.5,
            alpha_end: 0.5,
            max_grad_norm: Some(1.0),
            mode: Mode::Pareto,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(k, m));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps", "must lie in (0, 1)");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be a finite non-negative real");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]");
        }
        if self.samples_per_group < 2 {
            return bad("samples_per_group", "must be at least 2");
        }
        if self.groups < 2 {
            return bad("groups", "must be at least 2");
        }
        if self.ppo_epochs == 0 {
            return bad("ppo_epochs", "must be positive");
        }
        if self.minibatch == 0 {
            return bad("minibatch", "must be positive");
        }
        if !(self.lr > 0.0 && self.critic_lr > 0.0) {
            return bad("lr", "learning rates must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", "must be positive");
        }
        if !(self.value_coef >= 0.0) {
            return bad("value_coef", "must be non-negative");
        }
        for (k, a) in [("alpha_start", self.alpha_start), ("alpha_end", self.alpha_end)] {
            if !(0.0..=1.0).contains(&a) {
                return bad(k, "must lie in [0, 1]");
            }
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return bad("max_grad_norm", "must be positive");
            }
        }
        Ok(())
    }

    /// Blend weight used at `iteration`.
    pub fn alpha_at(&self, iteration: u64) -> f64 {
        if self.iterations <= 1 {
            return self.alpha_end;
        }
        let f = (iteration as f64 / (self.iterations - 1) as f64).min(1.0);
        self.alpha_start + (self.alpha_end - self.alpha_start) * f
    }
}
