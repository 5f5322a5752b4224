//! Stochastic gradient descent with heavy-ball momentum.

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// `v ← μ·v + g`, `θ ← θ − lr·v`.
///
/// Parameters and velocity are rounded to `f32` after every step so that the
/// full optimizer state survives a checkpoint round trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: ParamSet,
}

impl Sgd {
    pub fn new(params: &ParamSet, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn with_velocity(velocity: ParamSet, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity,
        }
    }

    pub fn velocity(&self) -> &ParamSet {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        params.check_layout(grads)?;
        params.check_layout(&self.velocity)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite {
                term: "gradient".into(),
                value: grads.values().find(|v| !v.is_finite()).unwrap_or(f64::NAN),
            });
        }
        self.velocity.scale(self.momentum);
        self.velocity.add_scaled(grads, 1.0);
        self.velocity.round_to_f32();
        params.add_scaled(&self.velocity, -self.lr);
        params.round_to_f32();
        Ok(())
    }
}
