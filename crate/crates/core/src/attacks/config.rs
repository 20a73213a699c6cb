use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which loss drives each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Mean pixel cross-entropy.
    Pgd,
    /// Correctness-weighted loss at every iteration.
    Stage1Only,
    /// KL-weighted loss at every iteration.
    Stage2Only,
    /// Correctness weighting until every pixel is fooled, then KL weighting.
    TwoStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    None,
    /// MI-FGSM accumulation of L1-normalized gradients.
    Momentum,
    /// TI-FGSM Gaussian smoothing of the gradient.
    Translation,
    /// NI-FGSM: momentum with the gradient taken at a look-ahead point.
    Nesterov,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant,
    LinearDecay,
    CosineDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Label used in reports.
    pub name: String,
    /// L-infinity radius in image units.
    pub epsilon: f32,
    pub step_size: f32,
    pub iterations: usize,
    /// Fixed stage-1 weight; `None` selects the `t / (2N)` schedule.
    pub gamma: Option<f32>,
    pub beta: f32,
    pub mode: Mode,
    pub transform: Transform,
    pub momentum_decay: f32,
    pub ti_kernel_size: usize,
    pub ti_sigma: f32,
    pub step_schedule: StepSchedule,
    /// Dispatch stage 1 while some pixel is misclassified instead of while
    /// some pixel is still correct.
    pub strict_switch_condition: bool,
    /// In two-stage mode, force stage 2 from iteration `ceil(f * N)` on.
    /// 1.0 disables the fallback.
    pub fallback_fraction: f32,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            name: "two_stage".into(),
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            iterations: 20,
            gamma: None,
            beta: 0.25,
            mode: Mode::TwoStage,
            transform: Transform::None,
            momentum_decay: 1.0,
            ti_kernel_size: 5,
            ti_sigma: 1.5,
            step_schedule: StepSchedule::Constant,
            strict_switch_condition: false,
            fallback_fraction: 0.75,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn pgd() -> Self {
        Self {
            name: "pgd".into(),
            mode: Mode::Pgd,
            ..Self::default()
        }
    }

    pub fn segpgd() -> Self {
        Self {
            name: "segpgd".into(),
            mode: Mode::Stage1Only,
            gamma: None,
            ..Self::default()
        }
    }

    pub fn two_stage() -> Self {
        Self::default()
    }

    pub fn with_mode(mut self, name: &str, mode: Mode) -> Self {
        self.name = name.into();
        self.mode = mode;
        self
    }

    pub fn with_transform(mut self, transform: Transform) -> Self {
        self.transform = transform;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("attack {}: {m}", self.name)));
        // epsilon = 0 is allowed as a no-op sanity setting
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return bad(format!("step_size must be > 0, got {}", self.step_size));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if let Some(g) = self.gamma {
            if !(0.0..=1.0).contains(&g) {
                return bad(format!("gamma must lie in [0, 1], got {g}"));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.momentum_decay >= 0.0) {
            return bad("momentum_decay must be non-negative".into());
        }
        if self.ti_kernel_size % 2 == 0 || !(self.ti_sigma > 0.0) {
            return bad("translation kernel needs an odd size and positive sigma".into());
        }
        if !(0.0..=1.0).contains(&self.fallback_fraction) {
            return bad(format!(
                "fallback_fraction must lie in [0, 1], got {}",
                self.fallback_fraction
            ));
        }
        Ok(())
    }

    /// Stage-1 weight for iteration `t` (0-based).
    pub fn gamma_at(&self, t: usize) -> f64 {
        match self.gamma {
            Some(g) => g as f64,
            None => segpgd_gamma(t, self.iterations),
        }
    }

    /// First iteration forced into stage 2; `None` when the fraction puts it
    /// at or past the last iteration.
    pub fn fallback_iteration(&self) -> Option<usize> {
        let t = (self.fallback_fraction as f64 * self.iterations as f64).ceil() as usize;
        (t < self.iterations).then_some(t)
    }

    /// Stable short hash of every field that influences the trajectory,
    /// `name` excluded.
    pub fn fingerprint(&self) -> String {
        let canonical = format!(
            "{:?}|{:?}|{}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{}|{:?}|{:?}|{}|{:?}|{}",
            self.epsilon.to_bits(),
            self.step_size.to_bits(),
            self.iterations,
            self.gamma.map(f32::to_bits),
            self.beta.to_bits(),
            self.mode,
            self.transform,
            self.momentum_decay.to_bits(),
            self.ti_sigma.to_bits(),
            self.ti_kernel_size,
            self.step_schedule,
            self.fallback_fraction.to_bits(),
            self.strict_switch_condition,
            "v1",
            self.seed,
        );
        // FNV-1a, 64-bit
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canonical.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// `t / (2N)`: zero weight on misclassified pixels at the start, rising
/// toward an even split.
pub fn segpgd_gamma(t: usize, iterations: usize) -> f64 {
    t as f64 / (2.0 * iterations as f64)
}
