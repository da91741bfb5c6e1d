//! Run configuration: horizon, prices, ensembles, control limits and
//! algorithm settings.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coordinator::Variant;
use crate::dispatch::EnsembleSite;
use crate::error::{Error, Result};
use crate::grid::GridModel;
use crate::mdp::EnsembleSpec;

/// Stream reserved for price draws.
pub const PRICE_STREAM: u64 = 0;
/// Per-state load draws for the ensemble at bus `b` use stream
/// `LOAD_STREAM_BASE + b`.
pub const LOAD_STREAM_BASE: u64 = 1 << 32;

/// Limits on the controllable injection at one bus (p.u.).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlBounds {
    /// Bus id.
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSchedule {
    Constant,
    /// `step / sqrt(k)` at iteration `k` (1-based).
    Diminishing,
    /// Per-multiplier gain that grows while the residual keeps its sign and
    /// halves when it flips.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepScaling {
    /// Divide the step by the dual function's curvature along each
    /// multiplier (see `Coordinator::initial_state`), making it
    /// dimensionless.
    Curvature,
    /// Use the step as given.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgorithmOptions {
    pub variant: Variant,
    pub step: f64,
    pub schedule: StepSchedule,
    pub scaling: StepScaling,
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iter: usize,
    /// Consecutive growing iterations tolerated before divergence is declared.
    pub divergence_window: usize,
    /// Growth over the best residual seen that counts as divergence.
    pub divergence_factor: f64,
}

impl Default for AlgorithmOptions {
    fn default() -> Self {
        AlgorithmOptions {
            variant: Variant::Std2,
            step: 0.5,
            schedule: StepSchedule::Constant,
            scaling: StepScaling::Curvature,
            tol_primal: 1e-5,
            tol_dual: 1e-5,
            max_iter: 500,
            divergence_window: 20,
            divergence_factor: 1e3,
        }
    }
}

impl AlgorithmOptions {
    /// Step multiplier at 1-based iteration `k`.
    pub fn schedule_factor(&self, k: usize) -> f64 {
        match self.schedule {
            StepSchedule::Constant => 1.0,
            StepSchedule::Diminishing => 1.0 / libm::sqrt(k.max(1) as f64),
            StepSchedule::Adaptive => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub horizon: usize,
    /// Energy price per step.
    pub prices: Vec<f64>,
    /// Weight of the network losses per step.
    pub loss_weight: Vec<f64>,
    /// Ensembles keyed by bus id, sorted by bus id.
    pub ensembles: Vec<(usize, EnsembleSpec)>,
    pub controls: Vec<ControlBounds>,
    pub algorithm: AlgorithmOptions,
    pub seed: Option<u64>,
}

impl ScenarioSpec {
    pub fn validate(&self, model: &GridModel) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Scenario("horizon must be at least one step".into()));
        }
        if self.prices.len() != self.horizon {
            return Err(Error::DimensionMismatch {
                what: "prices",
                expected: self.horizon,
                got: self.prices.len(),
            });
        }
        if self.loss_weight.len() != self.horizon {
            return Err(Error::DimensionMismatch {
                what: "loss weights",
                expected: self.horizon,
                got: self.loss_weight.len(),
            });
        }
        if let Some(w) = self.loss_weight.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Scenario(format!("loss weight {w} is not a finite non-negative number")));
        }
        for pair in self.ensembles.windows(2) {
            if pair[0].0 >= pair[1].0 {
                return Err(Error::Scenario(format!(
                    "ensembles must be sorted by distinct bus id ({} then {})",
                    pair[0].0, pair[1].0
                )));
            }
        }
        for (bus, spec) in &self.ensembles {
            if model.bus(*bus).is_none() {
                return Err(Error::Scenario(format!("ensemble at bus {bus}, which is not in the grid")));
            }
            if *bus == model.slack_bus {
                return Err(Error::Scenario(format!("ensemble at the slack bus {bus}")));
            }
            spec.validate()
                .map_err(|e| Error::Scenario(format!("ensemble at bus {bus}: {e}")))?;
            if spec.horizon() != self.horizon {
                return Err(Error::Scenario(format!(
                    "ensemble at bus {bus} has {} cost rows for a horizon of {}",
                    spec.horizon(),
                    self.horizon
                )));
            }
        }
        for c in &self.controls {
            if model.bus(c.bus).is_none() {
                return Err(Error::Scenario(format!("control bounds for unknown bus {}", c.bus)));
            }
            if !(c.p_min <= c.p_max && c.q_min <= c.q_max) {
                return Err(Error::Scenario(format!("control bounds at bus {} are inverted", c.bus)));
            }
        }
        let a = &self.algorithm;
        if !(a.step > 0.0 && a.step.is_finite()) {
            return Err(Error::Scenario(format!("step size must be positive, got {}", a.step)));
        }
        if !(a.tol_primal > 0.0 && a.tol_dual > 0.0) {
            return Err(Error::Scenario("tolerances must be positive".into()));
        }
        if a.max_iter == 0 {
            return Err(Error::Scenario("max_iter must be at least one".into()));
        }
        Ok(())
    }

    /// Injection hull of each ensemble, in ensemble order.
    pub fn sites(&self) -> Vec<EnsembleSite> {
        self.ensembles
            .iter()
            .map(|(bus, spec)| {
                let (p_min, p_max) = hull(&spec.p);
                let (q_min, q_max) = hull(&spec.q);
                EnsembleSite {
                    bus: *bus,
                    p_min,
                    p_max,
                    q_min,
                    q_max,
                }
            })
            .collect()
    }

    /// Non-controllable load per bus position. An ensemble replaces the load
    /// of the bus it sits on.
    pub fn fixed_loads(&self, model: &GridModel) -> Vec<(f64, f64)> {
        model
            .buses
            .iter()
            .map(|b| {
                if self.ensembles.iter().any(|(id, _)| *id == b.id) {
                    (0.0, 0.0)
                } else {
                    (b.p_load, b.q_load)
                }
            })
            .collect()
    }
}

fn hull(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// `1 + U[0, 1)` per step.
pub fn random_prices(seed: u64, horizon: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PRICE_STREAM);
    (0..horizon).map(|_| 1.0 + rng.random::<f64>()).collect()
}

/// Per-state loads drawn uniformly from 10%-200% of `rated`.
pub fn random_state_loads(seed: u64, bus: usize, rated: f64, n_states: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LOAD_STREAM_BASE + bus as u64);
    (0..n_states)
        .map(|_| rated * (0.1 + 1.9 * rng.random::<f64>()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prices_are_reproducible_and_in_range() {
        let a = random_prices(7, 20);
        assert_eq!(a, random_prices(7, 20));
        assert_ne!(a, random_prices(8, 20));
        assert!(a.iter().all(|&u| (1.0..2.0).contains(&u)));
    }

    #[test]
    fn state_loads_stay_in_band() {
        let p = random_state_loads(7, 17, 0.06, 8);
        assert!(p.iter().all(|&x| (0.006..=0.12).contains(&x)), "{p:?}");
        assert_ne!(p, random_state_loads(7, 20, 0.06, 8));
    }

    #[test]
    fn diminishing_schedule() {
        let mut o = AlgorithmOptions::default();
        assert_eq!(o.schedule_factor(4), 1.0);
        o.schedule = StepSchedule::Diminishing;
        assert_eq!(o.schedule_factor(4), 0.5);
    }
}
