//! Uniform dyadic time grid on `[0, T]`.

use crate::error::{Error, Result};

/// Horizon, step count, and Brownian dimension of a simulation grid.
///
/// The step count must be a power of two so that every dyadic Haar
/// breakpoint falls on a grid node; Wiener integrals of Haar functions
/// are then exact signed sums of Brownian increments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonConfig {
    pub horizon: f64,
    pub steps: usize,
    pub brownian_dim: usize,
}

impl HorizonConfig {
    pub fn new(horizon: f64, steps: usize, brownian_dim: usize) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::GridMisaligned(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if steps < 2 || !steps.is_power_of_two() {
            return Err(Error::GridMisaligned(format!(
                "steps must be a power of two >= 2, got {steps}"
            )));
        }
        if brownian_dim == 0 {
            return Err(Error::GridMisaligned(
                "brownian_dim must be at least 1".into(),
            ));
        }
        Ok(Self {
            horizon,
            steps,
            brownian_dim,
        })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Left endpoint of grid cell `m`, i.e. `t_m = m * dt`.
    pub fn node(&self, m: usize) -> f64 {
        self.horizon * m as f64 / self.steps as f64
    }

    /// log2 of the step count.
    pub fn levels(&self) -> u32 {
        self.steps.trailing_zeros()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_power_of_two() {
        assert!(HorizonConfig::new(1.0, 100, 1).is_err());
        assert!(HorizonConfig::new(1.0, 1, 1).is_err());
        assert!(HorizonConfig::new(0.0, 64, 1).is_err());
        assert!(HorizonConfig::new(1.0, 64, 0).is_err());
    }

    #[test]
    fn grid_nodes() {
        let cfg = HorizonConfig::new(2.0, 4, 1).unwrap();
        assert_eq!(cfg.dt(), 0.5);
        assert_eq!(cfg.node(0), 0.0);
        assert_eq!(cfg.node(4), 2.0);
        assert_eq!(cfg.levels(), 2);
    }
}
