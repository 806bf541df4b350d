//! Shared Brownian driving noise.
//!
//! A `BrownianEnsemble` is the single source of randomness: `P` scenarios of
//! `M x d` increments `N(0, dt)` on a uniform grid, reproducible from
//! `(seed, P, cfg)` alone. Increments are generated counter-based, so any
//! scenario can be regenerated in isolation and nothing needs to be stored.
//!
//! All processes entering one comparison must share one ensemble; the
//! `key()` of an ensemble is embedded in every process built on it and
//! cross-ensemble arithmetic is rejected.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::HorizonConfig;
use crate::rng::{splitmix64, standard_normal};

#[derive(Debug, Clone)]
enum Source {
    /// Pure counter-based stream.
    Counter,
    /// Counter stream with increments at step >= `from_step` drawn from an
    /// alternate seed. Used by the adaptedness check.
    Tampered { alt_seed: u64, from_step: usize },
    /// Explicit increment array (P x M x d, row-major). Used for grid
    /// coarsening in scheme-order studies.
    Explicit(Arc<Vec<f64>>),
}

/// Identity of an ensemble; equality means processes are comparable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EnsembleKey {
    pub seed: u64,
    pub scenarios: usize,
    pub steps: usize,
    pub brownian_dim: usize,
    horizon_bits: u64,
    source_tag: u64,
}

#[derive(Debug, Clone)]
pub struct BrownianEnsemble {
    cfg: HorizonConfig,
    scenarios: usize,
    seed: u64,
    source: Source,
}

impl BrownianEnsemble {
    pub fn new(cfg: HorizonConfig, scenarios: usize, seed: u64) -> Self {
        Self {
            cfg,
            scenarios,
            seed,
            source: Source::Counter,
        }
    }

    pub fn cfg(&self) -> &HorizonConfig {
        &self.cfg
    }

    pub fn scenarios(&self) -> usize {
        self.scenarios
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self) -> EnsembleKey {
        let source_tag = match &self.source {
            Source::Counter => 0,
            Source::Tampered { alt_seed, from_step } => {
                splitmix64(*alt_seed ^ (*from_step as u64) ^ 0xdead_beef)
            }
            Source::Explicit(data) => splitmix64(Arc::as_ptr(data) as u64 ^ 0xfeed_cafe),
        };
        EnsembleKey {
            seed: self.seed,
            scenarios: self.scenarios,
            steps: self.cfg.steps,
            brownian_dim: self.cfg.brownian_dim,
            horizon_bits: self.cfg.horizon.to_bits(),
            source_tag,
        }
    }

    /// Increment `W_{t_{m+1}} - W_{t_m}` of coordinate `dim` in scenario `p`.
    pub fn increment(&self, p: usize, m: usize, dim: usize) -> f64 {
        debug_assert!(p < self.scenarios && m < self.cfg.steps && dim < self.cfg.brownian_dim);
        let d = self.cfg.brownian_dim;
        match &self.source {
            Source::Counter => {
                let counter = ((p * self.cfg.steps + m) * d + dim) as u64;
                self.cfg.dt().sqrt() * standard_normal(self.seed, counter)
            }
            Source::Tampered { alt_seed, from_step } => {
                let counter = ((p * self.cfg.steps + m) * d + dim) as u64;
                let seed = if m >= *from_step { *alt_seed } else { self.seed };
                self.cfg.dt().sqrt() * standard_normal(seed, counter)
            }
            Source::Explicit(data) => data[(p * self.cfg.steps + m) * d + dim],
        }
    }

    /// All increments of scenario `p`, laid out `M x d` row-major.
    pub fn increments_row(&self, p: usize) -> Vec<f64> {
        let (m_steps, d) = (self.cfg.steps, self.cfg.brownian_dim);
        let mut out = Vec::with_capacity(m_steps * d);
        for m in 0..m_steps {
            for dim in 0..d {
                out.push(self.increment(p, m, dim));
            }
        }
        out
    }

    /// Path values at grid nodes, `(M+1) x d` row-major with `W_0 = 0`.
    pub fn node_path(&self, p: usize) -> Vec<f64> {
        let (m_steps, d) = (self.cfg.steps, self.cfg.brownian_dim);
        let mut out = vec![0.0; (m_steps + 1) * d];
        for m in 0..m_steps {
            for dim in 0..d {
                out[(m + 1) * d + dim] = out[m * d + dim] + self.increment(p, m, dim);
            }
        }
        out
    }

    /// Copy with increments at step >= `from_step` resampled from `alt_seed`.
    /// Shares grid and scenario count with `self`.
    pub fn resampled_from(&self, from_step: usize, alt_seed: u64) -> Self {
        Self {
            cfg: self.cfg,
            scenarios: self.scenarios,
            seed: self.seed,
            source: Source::Tampered {
                alt_seed,
                from_step,
            },
        }
    }

    /// Sum consecutive increments into a coarser grid with `steps / factor`
    /// steps. The coarse ensemble is driven by the same Brownian paths.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.cfg.steps % factor != 0 || !factor.is_power_of_two() {
            return Err(Error::GridMisaligned(format!(
                "cannot coarsen {} steps by factor {}",
                self.cfg.steps, factor
            )));
        }
        let coarse_cfg = HorizonConfig::new(
            self.cfg.horizon,
            self.cfg.steps / factor,
            self.cfg.brownian_dim,
        )?;
        let d = self.cfg.brownian_dim;
        let mut data = vec![0.0; self.scenarios * coarse_cfg.steps * d];
        for p in 0..self.scenarios {
            for m in 0..coarse_cfg.steps {
                for dim in 0..d {
                    let mut sum = 0.0;
                    for sub in 0..factor {
                        sum += self.increment(p, m * factor + sub, dim);
                    }
                    data[(p * coarse_cfg.steps + m) * d + dim] = sum;
                }
            }
        }
        Ok(Self {
            cfg: coarse_cfg,
            scenarios: self.scenarios,
            seed: self.seed,
            source: Source::Explicit(Arc::new(data)),
        })
    }
}
