use serde::{Deserialize, Serialize};

/// Geometric cooling `T_i = T0 · a^{i/n}` with `a = Tn / T0`.
///
/// Training runs `n_steps + 1` temperature stages (`i = 0..=n_steps`) so
/// the final stage sits exactly at `Tn`. Each stage gets
/// `epochs_total / (n_steps + 1)` epochs and the last one takes the
/// remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealingSchedule {
    pub t0: f64,
    pub tn: f64,
    pub n_steps: usize,
    pub epochs_total: usize,
}

impl Default for AnnealingSchedule {
    fn default() -> Self {
        Self {
            t0: 5.0,
            tn: 0.01,
            n_steps: 100,
            epochs_total: 10_000,
        }
    }
}

impl AnnealingSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tn > 0.0 && self.t0 >= self.tn && self.t0.is_finite()) {
            return Err(format!("need T0 >= Tn > 0, got T0={} Tn={}", self.t0, self.tn));
        }
        if self.n_steps == 0 && self.t0 != self.tn {
            return Err("a schedule without cooling steps needs T0 == Tn".into());
        }
        if self.epochs_total < self.n_steps + 1 {
            return Err(format!(
                "{} epochs cannot cover {} temperature stages",
                self.epochs_total,
                self.n_steps + 1
            ));
        }
        Ok(())
    }

    pub fn ratio(&self) -> f64 {
        self.tn / self.t0
    }

    pub fn temperature(&self, i: usize) -> f64 {
        assert!(i <= self.n_steps, "stage {i} beyond {}", self.n_steps);
        if self.n_steps == 0 || i == 0 {
            return self.t0;
        }
        if i == self.n_steps {
            return self.tn;
        }
        self.t0 * self.ratio().powf(i as f64 / self.n_steps as f64)
    }

    pub fn stages(&self) -> usize {
        self.n_steps + 1
    }

    pub fn epochs_per_stage(&self) -> usize {
        self.epochs_total / self.stages()
    }

    /// Stage index running at `epoch` (0-based).
    pub fn stage_of(&self, epoch: usize) -> usize {
        (epoch / self.epochs_per_stage()).min(self.n_steps)
    }

    /// Last epoch (0-based, inclusive) of stage `i`.
    pub fn stage_end(&self, i: usize) -> usize {
        if i == self.n_steps {
            self.epochs_total - 1
        } else {
            (i + 1) * self.epochs_per_stage() - 1
        }
    }

    /// First stage with `T_i ≤ 1`, if any.
    pub fn bayes_stage(&self) -> Option<usize> {
        (0..=self.n_steps).find(|&i| self.temperature(i) <= 1.0 + 1e-12)
    }
}
